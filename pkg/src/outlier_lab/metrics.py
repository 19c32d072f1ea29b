"""Quality and outlier diagnostics.

Perplexity and MLM accuracy use natural-log cross-entropy.  Outlier metrics
follow the usual convention: per (site, sample) infinity norm and Pearson
kurtosis ``m4 / m2**2`` over the flattened activation, aggregated as a global
max and an unweighted mean.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import PackedDataset, mask_batch, pack_ids
from .model import TransformerLM, capture_activations
from .quant import QuantScheme, quantize_model
from .tensor import IGNORE_INDEX

FULL_OUTLIER_SAMPLES = 1024
DEFAULT_OUTLIER_SAMPLES = 256
REPORT_VERSION = 1


class EvalError(ValueError):
    pass


def kurtosis(x, excess: bool = False) -> float:
    """Pearson kurtosis of the flattened tensor; NaN when the variance is zero."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise EvalError("kurtosis: need at least 2 values")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0 or not np.isfinite(m2) or m2 < 1e-300:
        return math.nan
    m4 = np.mean(d ** 4)
    k = float(m4 / (m2 * m2))
    return k - 3.0 if excess else k


def _eval_batches(dataset: PackedDataset, batch_size: int):
    for i in range(0, len(dataset), batch_size):
        yield dataset.sequences[i:i + batch_size]


def _mlm_eval_inputs(model: TransformerLM, ids: np.ndarray, eval_seed: int):
    # keyed by content so metrics do not depend on dataset order
    key = zlib.crc32(np.ascontiguousarray(ids, dtype="<i8").tobytes())
    rng = np.random.default_rng([int(eval_seed), 5, key])
    corrupted, labels, _ = mask_batch(ids, model.config.mlm_prob, rng, model.config.vocab_size)
    return corrupted, labels


def _token_losses(model, dataset: PackedDataset, eval_seed: int, batch_size: int, runner=None):
    """Yield (sum of token NLL, n tokens, n correct) per batch."""
    runner = runner if runner is not None else model
    cfg = model.config
    for ids in _eval_batches(dataset, batch_size):
        if cfg.objective == "mlm":
            rows = [_mlm_eval_inputs(model, ids[j:j + 1], eval_seed) for j in range(len(ids))]
            inp = np.concatenate([r[0] for r in rows])
            labels = np.concatenate([r[1] for r in rows])
            targets = labels.reshape(-1)
            if not np.any(targets != IGNORE_INDEX):
                continue
            loss, logits = runner.loss(inp, labels)
            t = targets[targets != IGNORE_INDEX]
        else:
            loss, logits = runner.loss(ids)
            t = ids[:, 1:].reshape(-1)
            logits = logits.data[:, :-1].reshape(len(t), -1)
            n = len(t)
            yield loss.item() * n, n, int(np.sum(np.argmax(logits, axis=-1) == t))
            continue
        n = len(t)
        yield loss.item() * n, n, int(np.sum(np.argmax(logits.data, axis=-1) == t))


def _aggregate(model, dataset, eval_seed, batch_size, runner=None):
    if len(dataset) == 0:
        raise EvalError("empty dataset")
    tot = n = correct = 0
    for s, k, c in _token_losses(model, dataset, eval_seed, batch_size, runner):
        tot += s
        n += k
        correct += c
    if n == 0:
        raise EvalError("no evaluated positions (zero masked tokens)")
    return tot / n, n, correct


def perplexity(model: TransformerLM, dataset: PackedDataset, eval_seed: int = 0, batch_size: int = 64,
               runner=None) -> float:
    """exp(mean token cross-entropy): masked positions for MLM, next-token positions for CLM.

    ``runner`` evaluates through another forward (e.g. a quantized model).
    """
    mean, _, _ = _aggregate(model, dataset, eval_seed, batch_size, runner)
    return math.exp(mean)


def mlm_accuracy(model: TransformerLM, dataset: PackedDataset, eval_seed: int = 0, batch_size: int = 64,
                 runner=None) -> float:
    if model.config.objective != "mlm":
        raise EvalError("mlm_accuracy: model objective is not mlm")
    _, n, correct = _aggregate(model, dataset, eval_seed, batch_size, runner)
    return correct / n


def default_outlier_sites(model: TransformerLM) -> list[str]:
    """Per-layer output hidden states (the tensors fed to the next block)."""
    cfg = model.config
    last = "ln2" if cfg.norm_placement == "post" else "resid2"
    return [f"layer{i}.{last}" for i in range(cfg.n_layers)]


@dataclass
class OutlierReport:
    max_inf_norm: float
    avg_kurtosis: float
    n_samples: int
    sites: list
    per_site: dict = field(default_factory=dict)
    n_excluded: int = 0
    kurtosis_excess: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def outlier_report(model: TransformerLM, validation: PackedDataset, n_samples: int = DEFAULT_OUTLIER_SAMPLES,
                   sites: Optional[Sequence[str]] = None, batch_size: int = 32, kurtosis_excess: bool = False,
                   dump: Optional[dict] = None) -> OutlierReport:
    """Max infinity norm and mean kurtosis over (site, sample) pairs.

    ``sites=None`` uses the per-layer outputs; pass ``"all"`` for every
    quantization site.  Zero-variance (site, sample) pairs are excluded from
    the kurtosis mean and counted in ``n_excluded``.  If ``dump`` is a dict it
    receives the raw per-site activations.
    """
    if n_samples > len(validation):
        raise EvalError(f"outlier_report: n_samples={n_samples} exceeds dataset size {len(validation)}")
    if sites is None:
        sites = default_outlier_sites(model)
    elif sites == "all":
        sites = None
    seqs = validation.sequences[:n_samples]
    inf_norms: dict[str, list] = {}
    kurts: dict[str, list] = {}
    for i in range(0, n_samples, batch_size):
        trace = capture_activations(model, seqs[i:i + batch_size])
        names = list(trace) if sites is None else list(sites)
        for name in names:
            a = trace[name]
            if dump is not None:
                dump.setdefault(name, []).append(a)
            flat = a.reshape(a.shape[0], -1)
            inf_norms.setdefault(name, []).extend(np.max(np.abs(flat), axis=1).tolist())
            kurts.setdefault(name, []).extend(kurtosis(row, kurtosis_excess) for row in flat)
    per_site = {}
    all_inf, all_k, excluded = [], [], 0
    for name in inf_norms:
        ks = np.array(kurts[name])
        good = ks[np.isfinite(ks)]
        excluded += int(np.sum(~np.isfinite(ks)))
        per_site[name] = {
            "max_inf_norm": float(np.max(inf_norms[name])),
            "avg_kurtosis": float(np.mean(good)) if good.size else math.nan,
            "n_excluded": int(np.sum(~np.isfinite(ks))),
        }
        all_inf.extend(inf_norms[name])
        all_k.extend(good.tolist())
    return OutlierReport(
        max_inf_norm=float(np.max(all_inf)) if all_inf else 0.0,
        avg_kurtosis=float(np.mean(all_k)) if all_k else math.nan,
        n_samples=n_samples,
        sites=list(inf_norms),
        per_site=per_site,
        n_excluded=excluded,
        kurtosis_excess=kurtosis_excess,
    )


def length_sweep(model: TransformerLM, lengths: Sequence[int], token_stream: np.ndarray, eval_seed: int = 0,
                 batch_size: int = 64) -> list[dict]:
    """Repack a validation token stream at each length and evaluate.

    Rows are ``{length, metric, value, n_sequences}`` sorted by length; the
    metric is MLM accuracy for encoders and perplexity for decoders.
    """
    cap = model.config.max_positions
    rows = []
    for L in sorted(lengths):
        if L > cap:
            raise EvalError(f"length_sweep: length {L} exceeds position capacity {cap}")
        ds = PackedDataset(pack_ids(token_stream, L), L)
        if model.config.objective == "mlm":
            metric, value = "mlm_accuracy", mlm_accuracy(model, ds, eval_seed, batch_size)
        else:
            metric, value = "perplexity", perplexity(model, ds, eval_seed, batch_size)
        rows.append({"length": L, "metric": metric, "value": value, "n_sequences": len(ds)})
    return rows


@dataclass
class EvalReport:
    fp_ppl: float
    quant_ppl: float
    scheme: dict
    calib_seed: int
    outliers: Optional[dict] = None
    mlm_accuracy: dict = field(default_factory=dict)
    quant_mlm_accuracy: Optional[float] = None
    quantizers: list = field(default_factory=list)
    activation_sites: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    @property
    def ppl_ratio(self) -> float:
        return self.quant_ppl / self.fp_ppl

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ppl_ratio"] = self.ppl_ratio
        return d


def calibration_batches(train: PackedDataset, scheme: QuantScheme, calib_seed: int,
                        model_config=None) -> list[np.ndarray]:
    """Random training sequences for static activation ranges.

    For MLM models the sequences are corrupted like training inputs, so the
    [MASK] embedding and the positions the head is scored on are inside the
    calibrated ranges.
    """
    rng = np.random.default_rng([int(calib_seed), 4])
    out = []
    for _ in range(scheme.calib_batches):
        idx = rng.choice(len(train), size=min(scheme.calib_batch_size, len(train)), replace=False)
        batch = train.sequences[np.sort(idx)]
        if model_config is not None and model_config.objective == "mlm":
            batch, _, _ = mask_batch(batch, model_config.mlm_prob, rng, model_config.vocab_size)
        out.append(batch)
    return out


def fp_vs_quant(model: TransformerLM, scheme: QuantScheme, validation: PackedDataset, train: PackedDataset,
                calib_seed: int = 0, eval_seed: int = 0, n_outlier_samples: Optional[int] = None,
                batch_size: int = 64, metadata: Optional[dict] = None) -> EvalReport:
    """Perplexity before and after whole-model quantization, plus outlier stats."""
    qm = quantize_model(model, calibration_batches(train, scheme, calib_seed, model.config), scheme)
    fp_mean, fp_n, fp_c = _aggregate(model, validation, eval_seed, batch_size)
    q_mean, q_n, q_c = _aggregate(model, validation, eval_seed, batch_size, runner=qm)
    n_out = min(n_outlier_samples or DEFAULT_OUTLIER_SAMPLES, len(validation))
    rep = outlier_report(model, validation, n_out)
    acc = {}
    qacc = None
    if model.config.objective == "mlm":
        acc = {str(validation.T): fp_c / fp_n}
        qacc = q_c / q_n
    return EvalReport(
        fp_ppl=math.exp(fp_mean),
        quant_ppl=math.exp(q_mean),
        scheme=scheme.to_dict(),
        calib_seed=calib_seed,
        outliers=rep.to_dict(),
        mlm_accuracy=acc,
        quant_mlm_accuracy=qacc,
        quantizers=qm.records(),
        activation_sites=sorted(qm.act_specs),
        metadata=dict(metadata or {}, eval_seed=eval_seed, n_validation=len(validation)),
    )
