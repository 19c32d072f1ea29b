"""Tiny transformer with a pluggable attention normalizer.

Two flavours share one implementation:

* ``objective="mlm"``: bidirectional post-norm encoder with a BERT-style
  masked-LM head (dense, GELU, LayerNorm, tied decoder plus bias).
* ``objective="clm"``: causal pre-norm decoder with a final LayerNorm and a
  tied next-token head.

Every activation that feeds another layer passes through ``hook(name, x)``.
The hook may record it (activation capture, calibration) or replace it
(fake quantization).  Site names are stable strings such as
``"layer0.attn.probs"``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .softmax import SoftmaxConfig, attention_normalize, causal_mask
from .tensor import IGNORE_INDEX, Tensor

OBJECTIVES = ("mlm", "clm")
Hook = Callable[[str, Tensor], Tensor]


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    intermediate: Optional[int] = None
    vocab_size: int = 8192
    max_seq_len: int = 32
    objective: str = "mlm"
    softmax: SoftmaxConfig = field(default_factory=SoftmaxConfig)
    norm_placement: Optional[str] = None
    mlm_prob: float = 0.15
    max_positions: Optional[int] = None
    init_std: float = 0.02
    dropout: float = 0.0

    def __post_init__(self):
        if isinstance(self.softmax, dict):
            self.softmax = SoftmaxConfig.from_dict(self.softmax)
        if self.intermediate is None:
            self.intermediate = 4 * self.hidden
        if self.norm_placement is None:
            self.norm_placement = "post" if self.objective == "mlm" else "pre"
        if self.max_positions is None:
            self.max_positions = self.max_seq_len
        self.validate()

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ModelConfigError(f"model.objective: expected one of {OBJECTIVES}, got {self.objective!r}")
        if self.norm_placement not in ("pre", "post"):
            raise ModelConfigError(f"model.norm_placement: expected pre or post, got {self.norm_placement!r}")
        for name in ("n_layers", "hidden", "n_heads", "intermediate", "vocab_size"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"model.{name}: must be positive")
        if self.hidden % self.n_heads:
            raise ModelConfigError(f"model.hidden: {self.hidden} not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ModelConfigError(f"model.max_seq_len: must be >= 2, got {self.max_seq_len}")
        if self.max_positions < self.max_seq_len:
            raise ModelConfigError("model.max_positions: must be >= max_seq_len")
        if self.objective == "mlm" and not 0 < self.mlm_prob < 1:
            raise ModelConfigError(f"model.mlm_prob: must be in (0, 1), got {self.mlm_prob}")
        if (self.objective == "clm") != self.softmax.causal:
            raise ModelConfigError("softmax.direction: causal direction requires objective=clm and vice versa")
        if not 0 <= self.dropout < 1:
            raise ModelConfigError(f"model.dropout: must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["softmax"] = self.softmax.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "softmax" in d and isinstance(d["softmax"], dict):
            d["softmax"] = SoftmaxConfig.from_dict(d["softmax"])
        return cls(**d)


def param_count_formula(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    D, I, V, P = cfg.hidden, cfg.intermediate, cfg.vocab_size, cfg.max_positions
    per_layer = 4 * (D * D + D) + (D * I + I) + (I * D + D) + 2 * (2 * D)
    n = V * D + P * D + cfg.n_layers * per_layer
    if cfg.objective == "mlm":
        n += 2 * D + (D * D + D) + 2 * D + V
    else:
        n += 2 * D
    return n


def site_names(cfg: ModelConfig) -> list[str]:
    """Activation sites in forward order."""
    names = ["embed.sum"]
    if cfg.objective == "mlm":
        names.append("embed.ln")
    attn = ["attn.q", "attn.k", "attn.v", "attn.scores", "attn.probs", "attn.context", "attn.out"]
    ffn = ["ffn.hidden", "ffn.gelu", "ffn.out"]
    for i in range(cfg.n_layers):
        if cfg.norm_placement == "post":
            seq = attn + ["resid1", "ln1"] + ffn + ["resid2", "ln2"]
        else:
            seq = ["ln1"] + attn + ["resid1", "ln2"] + ffn + ["resid2"]
        names += [f"layer{i}.{s}" for s in seq]
    if cfg.objective == "mlm":
        names += ["head.dense", "head.gelu", "head.ln"]
    else:
        names.append("final_ln")
    return names


def _identity(name, x):
    return x


class TransformerLM:
    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.softmax = config.softmax.resolve(config.max_seq_len)
        self.params: dict[str, Tensor] = {}
        self._init(rng if rng is not None else np.random.default_rng(0))

    # parameters ---------------------------------------------------------
    def _init(self, rng: np.random.Generator) -> None:
        cfg = self.config
        D, I = cfg.hidden, cfg.intermediate
        std = cfg.init_std

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        p = self.params
        p["tok_emb"] = normal(cfg.vocab_size, D)
        p["pos_emb"] = normal(cfg.max_positions, D)
        if cfg.objective == "mlm":
            p["emb_ln.g"], p["emb_ln.b"] = ones(D), zeros(D)
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            for w in ("q", "k", "v", "o"):
                p[pre + f"attn.w{w}"] = normal(D, D)
                p[pre + f"attn.b{w}"] = zeros(D)
            p[pre + "ln1.g"], p[pre + "ln1.b"] = ones(D), zeros(D)
            p[pre + "ffn.w1"], p[pre + "ffn.b1"] = normal(D, I), zeros(I)
            p[pre + "ffn.w2"], p[pre + "ffn.b2"] = normal(I, D), zeros(D)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = ones(D), zeros(D)
        if cfg.objective == "mlm":
            p["head.dense.w"], p["head.dense.b"] = normal(D, D), zeros(D)
            p["head.ln.g"], p["head.ln.b"] = ones(D), zeros(D)
            p["head.out_bias"] = zeros(cfg.vocab_size)
        else:
            p["final_ln.g"], p["final_ln.b"] = ones(D), zeros(D)

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def final_layer_params(self) -> list[str]:
        """Parameters used only by the output projection (kept in float).

        The tied embedding is quantized in its input role and read in float
        for the output role, so it is not listed here.
        """
        return ["head.out_bias"] if self.config.objective == "mlm" else []

    def final_norm_params(self) -> list[str]:
        return ["head.ln.g", "head.ln.b"] if self.config.objective == "mlm" else ["final_ln.g", "final_ln.b"]

    def final_norm_sites(self) -> list[str]:
        return ["head.ln"] if self.config.objective == "mlm" else ["final_ln"]

    def no_decay(self, name: str) -> bool:
        return name.endswith((".g", ".b", ".b1", ".b2", "out_bias")) or ".attn.b" in name

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameter {sorted(missing)[0]!r}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    # forward --------------------------------------------------------------
    def _encode(self, ids, hook: Hook, weights, dropout_rng=None) -> Tensor:
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise T.ShapeError(f"model: ids must be (batch, length), got {ids.shape}")
        B, L = ids.shape
        if L > cfg.max_positions:
            raise T.ShapeError(f"model: sequence length {L} exceeds position capacity {cfg.max_positions}")

        def W(name):
            if weights is not None and name in weights:
                return Tensor(weights[name])
            return self.params[name]

        def drop(x):
            if cfg.dropout == 0 or dropout_rng is None:
                return x
            keep = dropout_rng.random(x.shape) >= cfg.dropout
            return T.mul(x, keep / (1.0 - cfg.dropout))

        mask = causal_mask(L) if self.softmax.causal else None
        x = T.add(T.embedding_lookup(W("tok_emb"), ids),
                  T.embedding_lookup(W("pos_emb"), np.arange(L)))
        x = hook("embed.sum", x)
        if cfg.objective == "mlm":
            x = hook("embed.ln", T.layer_norm(x, W("emb_ln.g"), W("emb_ln.b")))

        H, dh = cfg.n_heads, cfg.head_dim
        for i in range(cfg.n_layers):
            pre = f"layer{i}."

            def site(name, t):
                return hook(pre + name, t)

            def attention(h):
                q = site("attn.q", T.add(T.matmul(h, W(pre + "attn.wq")), W(pre + "attn.bq")))
                k = site("attn.k", T.add(T.matmul(h, W(pre + "attn.wk")), W(pre + "attn.bk")))
                v = site("attn.v", T.add(T.matmul(h, W(pre + "attn.wv")), W(pre + "attn.bv")))
                qh = T.transpose(T.reshape(q, (B, L, H, dh)), (0, 2, 1, 3))
                kt = T.transpose(T.reshape(k, (B, L, H, dh)), (0, 2, 3, 1))
                vh = T.transpose(T.reshape(v, (B, L, H, dh)), (0, 2, 1, 3))
                scores = site("attn.scores", T.scale(T.matmul(qh, kt), 1.0 / math.sqrt(dh)))
                probs = site("attn.probs", attention_normalize(scores, self.softmax, mask))
                ctx = T.reshape(T.transpose(T.matmul(probs, vh), (0, 2, 1, 3)), (B, L, cfg.hidden))
                ctx = site("attn.context", ctx)
                return site("attn.out", drop(T.add(T.matmul(ctx, W(pre + "attn.wo")), W(pre + "attn.bo"))))

            def ffn(h):
                a = site("ffn.hidden", T.add(T.matmul(h, W(pre + "ffn.w1")), W(pre + "ffn.b1")))
                a = site("ffn.gelu", T.gelu(a))
                return site("ffn.out", drop(T.add(T.matmul(a, W(pre + "ffn.w2")), W(pre + "ffn.b2"))))

            def ln(n, t):
                return site(n, T.layer_norm(t, W(pre + n + ".g"), W(pre + n + ".b")))

            if cfg.norm_placement == "post":
                x = ln("ln1", site("resid1", T.add(x, attention(x))))
                x = ln("ln2", site("resid2", T.add(x, ffn(x))))
            else:
                x = site("resid1", T.add(x, attention(ln("ln1", x))))
                x = site("resid2", T.add(x, ffn(ln("ln2", x))))

        if cfg.objective == "clm":
            x = hook("final_ln", T.layer_norm(x, W("final_ln.g"), W("final_ln.b")))
        return x

    def _mlm_head(self, x: Tensor, hook: Hook, weights) -> Tensor:
        def W(name):
            if weights is not None and name in weights:
                return Tensor(weights[name])
            return self.params[name]

        h = hook("head.dense", T.add(T.matmul(x, W("head.dense.w")), W("head.dense.b")))
        h = hook("head.gelu", T.gelu(h))
        return hook("head.ln", T.layer_norm(h, W("head.ln.g"), W("head.ln.b")))

    def logits(self, ids, hook: Optional[Hook] = None, weights=None, dropout_rng=None,
               rows: Optional[np.ndarray] = None) -> Tensor:
        """Vocabulary logits of shape (batch, length, vocab).

        With ``rows`` (flat indices into batch*length) only those positions go
        through the MLM head and the result is (len(rows), vocab).  The output
        projection always reads the float parameters.
        """
        hook = hook or _identity
        if self.config.objective == "mlm":
            x = self._encode(ids, hook, weights, dropout_rng)
            if rows is not None:
                x = T.embedding_lookup(T.reshape(x, (-1, self.config.hidden)), rows)
            h = self._mlm_head(x, hook, weights)
        else:
            h = self._encode(ids, hook, weights, dropout_rng)
        out = T.matmul(h, T.transpose(self.params["tok_emb"], (1, 0)))
        if self.config.objective == "mlm":
            out = T.add(out, self.params["head.out_bias"])
        return out

    def loss(self, ids, labels=None, hook: Optional[Hook] = None, weights=None, dropout_rng=None):
        """Objective-specific cross-entropy; returns ``(loss, logits)``.

        For MLM the logits are (n_masked, vocab) in flat position order; for
        the causal objective they are (batch, length, vocab).
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if self.config.objective == "mlm":
            if labels is None:
                raise ValueError("forward_mlm: labels are required")
            targets = np.asarray(labels).reshape(-1)
            if not np.any(targets != IGNORE_INDEX):
                raise ValueError("forward_mlm: no masked positions in the batch")
        else:
            if ids.shape[1] < 2:
                raise ValueError("forward_clm: sequences must have length >= 2")
            targets = np.concatenate([ids[:, 1:], np.full((ids.shape[0], 1), IGNORE_INDEX)], axis=1).reshape(-1)
        V = self.config.vocab_size
        if self.config.objective == "mlm":
            rows = np.flatnonzero(targets != IGNORE_INDEX)
            logits = self.logits(ids, hook, weights, dropout_rng, rows=rows)
            return T.cross_entropy(logits, targets[rows]), logits
        logits = self.logits(ids, hook, weights, dropout_rng)
        return T.cross_entropy(T.reshape(logits, (-1, V)), targets), logits

    def forward_mlm(self, ids, labels, **kw):
        if self.config.objective != "mlm":
            raise ValueError("forward_mlm: model objective is clm")
        return self.loss(ids, labels, **kw)

    def forward_clm(self, ids, **kw):
        if self.config.objective != "clm":
            raise ValueError("forward_clm: model objective is mlm")
        return self.loss(ids, None, **kw)


class _Recorder:
    def __init__(self, only=None):
        self.trace: dict[str, np.ndarray] = {}
        self.only = only

    def __call__(self, name, x):
        if self.only is None or name in self.only:
            self.trace[name] = np.array(x.data, copy=True)
        return x


def capture_activations(model: TransformerLM, ids, weights=None) -> dict[str, np.ndarray]:
    """Activation at every site for one forward pass, keyed by site name."""
    rec = _Recorder()
    model.logits(ids, hook=rec, weights=weights)
    return rec.trace


def export_attention(model: TransformerLM, ids) -> dict[int, np.ndarray]:
    """Attention probabilities per layer, each of shape (batch, heads, T, T)."""
    names = {f"layer{i}.attn.probs": i for i in range(model.config.n_layers)}
    rec = _Recorder(set(names))
    model.logits(ids, hook=rec)
    return {names[k]: v for k, v in rec.trace.items()}


def concentration(probs: np.ndarray) -> np.ndarray:
    """Max column mass divided by the number of query rows, over the last two axes.

    A value near 1 means every query puts all of its mass on one key.
    """
    probs = np.asarray(probs)
    col_mass = probs.sum(axis=-2)
    return col_mass.max(axis=-1) / probs.shape[-2]
