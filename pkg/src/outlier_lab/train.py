"""Deterministic pretraining loop: AdamW with decoupled weight decay, global
grad-norm clipping, linear warmup then linear decay.

All randomness is drawn from named sub-streams of a single seed, keyed by the
step index, so a run resumed from a checkpoint replays the same batches and
masks as an uninterrupted one.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import PackedDataset, mask_batch
from .model import ModelConfig, TransformerLM
from .tensor import DomainError, Tape

log = logging.getLogger(__name__)

STREAMS = {"data": 1, "mask": 2, "init": 3, "calib": 4, "eval": 5, "dropout": 6}


def rng_for(seed: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[stream], *map(int, keys)])


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    # full-size runs: warmup 2K, AdamW (0.9, 0.98) encoder / (0.9, 0.95)
    # decoder, weight decay 0.01 / 0.1, max grad norm 1.0
    max_steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 32
    peak_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.max_steps:
            raise ValueError(f"train.warmup_steps: must be in [0, max_steps), got {self.warmup_steps}")
        if self.max_grad_norm <= 0:
            raise ValueError("train.max_grad_norm: must be > 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size: must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("lr_at: step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.max_steps:
        return 0.0
    return cfg.peak_lr * (cfg.max_steps - step) / (cfg.max_steps - cfg.warmup_steps)


@dataclass
class AdamW:
    """Adam moments with decoupled weight decay applied to the parameters."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, lr: float, no_decay=lambda name: False) -> None:
        self.step += 1
        t = self.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and not no_decay(name):
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        k = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * k
    return total


def grad_norm(params: dict) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))


def make_batch(dataset: PackedDataset, model_cfg: ModelConfig, cfg: TrainConfig, step: int):
    """Batch for ``step``: (ids, labels).  labels is None for the causal objective."""
    n = len(dataset)
    idx = rng_for(cfg.seed, "data", step).choice(n, size=min(cfg.batch_size, n), replace=False)
    ids = dataset.sequences[np.sort(idx)]
    if model_cfg.objective == "mlm":
        corrupted, labels, _ = mask_batch(ids, model_cfg.mlm_prob, rng_for(cfg.seed, "mask", step),
                                          model_cfg.vocab_size)
        if not np.any(labels >= 0):
            # force one masked position so the loss is defined
            labels = labels.copy()
            labels[0, 0] = ids[0, 0]
        return corrupted, labels
    return ids, None


def train_step(model: TransformerLM, batch, opt: AdamW, cfg: TrainConfig, step: int) -> tuple[float, float]:
    """One optimizer step; returns ``(loss, grad_norm_before_clipping)``."""
    ids, labels = batch
    model.zero_grad()
    drop_rng = rng_for(cfg.seed, "dropout", step) if model.config.dropout else None
    with Tape() as tape:
        try:
            loss, _ = model.loss(ids, labels, dropout_rng=drop_rng)
        except DomainError:
            # NaN/inf reached a log inside the forward pass
            raise TrainingDivergence(step, math.nan) from None
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(step, value)
        tape.backward(loss)
    norm = clip_grad_norm(model.params, cfg.max_grad_norm)
    opt.update(model.params, lr_at(step, cfg), model.no_decay)
    return value, norm


def make_optimizer(cfg: TrainConfig) -> AdamW:
    return AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def train(model: TransformerLM, dataset: PackedDataset, cfg: TrainConfig, opt: Optional[AdamW] = None,
          start_step: int = 0, stop_step: Optional[int] = None, metrics_path=None,
          log_every: int = 100) -> list[dict]:
    """Run steps ``start_step .. stop_step - 1`` (``stop_step`` defaults to max_steps).

    Returns the per-step metric rows; also streams them to ``metrics_path`` as CSV.
    """
    opt = opt if opt is not None else make_optimizer(cfg)
    stop = cfg.max_steps if stop_step is None else stop_step
    rows = []
    writer = fh = None
    if metrics_path is not None:
        append = bool(start_step) and os.path.exists(metrics_path)
        fh = open(metrics_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "grad_norm"])
        if not append:
            writer.writeheader()
    try:
        for step in range(start_step, stop):
            batch = make_batch(dataset, model.config, cfg, step)
            lr = lr_at(step, cfg)
            loss, norm = train_step(model, batch, opt, cfg, step)
            row = {"step": step, "loss": loss, "lr": lr, "grad_norm": norm}
            rows.append(row)
            if writer:
                writer.writerow(row)
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f lr %.2e gnorm %.3f", step, loss, lr, norm)
    finally:
        if fh:
            fh.close()
    return rows


# checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"OLCKPT\x00\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_save(path, model: TransformerLM, opt: Optional[AdamW] = None, step: int = 0,
                    train_cfg: Optional[TrainConfig] = None, dtype: str = "<f8", extra: Optional[dict] = None) -> None:
    """Write a checkpoint.

    Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
    then the raw arrays back to back.  The header carries the format version,
    the model config, the manifest (name, shape, dtype, offset, nbytes) and the
    optimizer step.  ``dtype="<f4"`` writes a compact float32 export; resuming
    bit-exactly needs the default ``"<f8"``.
    """
    if dtype not in ("<f4", "<f8"):
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    arrays = [("param/" + k, v.data) for k, v in model.params.items()]
    if opt is not None:
        arrays += [("adam_m/" + k, v) for k, v in opt.m.items()]
        arrays += [("adam_v/" + k, v) for k, v in opt.v.items()]
    manifest, offset, blobs = [], 0, []
    for name, arr in arrays:
        b = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(b)})
        offset += len(b)
        blobs.append(b)
    header = {
        "version": CKPT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "step": int(step),
        "optimizer": None if opt is None else {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
                                                "eps": opt.eps, "weight_decay": opt.weight_decay},
        "manifest": manifest,
        "extra": extra or {},
    }
    hb = json.dumps(header, indent=1).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise CheckpointError(f"checkpoint {where}: missing field {key!r}")
    return d[key]


def checkpoint_load(path):
    """Returns ``(model, optimizer_or_None, header)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError("checkpoint: bad magic (not a checkpoint file)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError("checkpoint: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint: corrupt header ({e})") from None
    version = _require(header, "version", "header")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint: version {version} is not supported (expected {CKPT_VERSION})")
    try:
        cfg = ModelConfig.from_dict(_require(header, "model_config", "header"))
    except (TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint model_config: {e}") from None
    manifest = _require(header, "manifest", "header")
    body = memoryview(raw)[16 + hlen:]
    arrays = {}
    for i, entry in enumerate(manifest):
        where = f"manifest[{i}]"
        name = _require(entry, "name", where)
        shape = tuple(_require(entry, "shape", where))
        dtype = _require(entry, "dtype", where)
        offset = _require(entry, "offset", where)
        nbytes = _require(entry, "nbytes", where)
        if dtype not in ("<f4", "<f8"):
            raise CheckpointError(f"checkpoint {where}: unsupported dtype {dtype!r}")
        if offset + nbytes > len(body):
            raise CheckpointError(f"checkpoint: truncated data for {name!r}")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype=dtype)
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"checkpoint {where}: shape {shape} does not match nbytes {nbytes}")
        arrays[name] = arr.reshape(shape).astype(np.float64)
    model = TransformerLM(cfg)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint: {e}") from None
    opt = None
    oh = header.get("optimizer")
    if oh is not None:
        opt = AdamW(*(_require(oh, k, "optimizer") for k in ("beta1", "beta2", "eps", "weight_decay", "step")))
        opt.m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        opt.v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return model, opt, header
