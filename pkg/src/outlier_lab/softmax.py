"""Attention normalizers: vanilla softmax, clipped softmax and its
length-normalized variant, in bidirectional and causal form.

Clipped softmax stretches the probabilities affinely and clamps them::

    clip((zeta - gamma) * softmax(x) + gamma, 0, 1)

With no clipping a row of length T sums to ``zeta + (T - 1) * gamma``.  The
normalized variant picks gamma per row so that this sum is a fixed ``beta``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clip,
    exp,
    log,
    masked_fill,
    mul,
    scale,
    sum_axis,
)

VARIANTS = ("vanilla", "clipped", "ncs")
DIRECTIONS = ("bidirectional", "causal")

# standard settings for full-size encoders (128 tokens) and decoders
BERT_ALPHA = 3.2
OPT_ALPHA = 12.0
CAUSAL_NCS_BETA = 0.9


class SoftmaxConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SoftmaxConfig:
    variant: str = "vanilla"
    zeta: float = 1.0
    gamma: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    direction: str = "bidirectional"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise SoftmaxConfigError(f"softmax.variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.direction not in DIRECTIONS:
            raise SoftmaxConfigError(f"softmax.direction: expected one of {DIRECTIONS}, got {self.direction!r}")
        if self.variant == "vanilla":
            for name in ("gamma", "alpha", "beta"):
                if getattr(self, name) is not None:
                    raise SoftmaxConfigError(f"softmax.{name}: not used by the vanilla variant")
            return
        if self.zeta < 1:
            raise SoftmaxConfigError(f"softmax.zeta: must be >= 1, got {self.zeta}")
        if self.alpha is not None and self.alpha < 0:
            raise SoftmaxConfigError(f"softmax.alpha: must be >= 0, got {self.alpha}")
        if self.variant == "clipped":
            if self.beta is not None:
                raise SoftmaxConfigError("softmax.beta: not used by the clipped variant")
            if (self.gamma is None) == (self.alpha is None):
                raise SoftmaxConfigError("softmax.gamma: clipped variant needs exactly one of gamma or alpha")
            if self.gamma is not None and self.gamma > 0:
                raise SoftmaxConfigError(f"softmax.gamma: must be <= 0, got {self.gamma}")
        else:
            if self.gamma is not None:
                raise SoftmaxConfigError("softmax.gamma: derived per row for the ncs variant; do not set it")
            if (self.beta is None) == (self.alpha is None):
                raise SoftmaxConfigError("softmax.beta: ncs variant needs exactly one of beta or alpha")
            if self.beta is not None and self.beta > self.zeta:
                raise SoftmaxConfigError(f"softmax.beta: must be <= zeta ({self.zeta}), got {self.beta}")

    @property
    def causal(self) -> bool:
        return self.direction == "causal"

    def resolve(self, max_seq_len: int) -> "SoftmaxConfig":
        """Turn the ``alpha`` convenience into concrete gamma (clipped) or beta (ncs)
        using the pretraining length."""
        if self.alpha is None:
            return self
        if self.variant == "clipped":
            return replace(self, gamma=gamma_from_alpha(self.alpha, max_seq_len), alpha=None)
        return replace(self, beta=ncs_beta_from_alpha(self.zeta, self.alpha, max_seq_len), alpha=None)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxConfig":
        known = {"variant", "zeta", "gamma", "alpha", "beta", "direction"}
        extra = set(d) - known
        if extra:
            raise SoftmaxConfigError(f"softmax.{sorted(extra)[0]}: unknown key")
        kw = {}
        for k, v in d.items():
            if v is None or v == "":
                continue
            kw[k] = str(v) if k in ("variant", "direction") else float(v)
        return cls(**kw)

    def label(self) -> str:
        if self.variant == "vanilla":
            return "Vanilla"
        if self.variant == "clipped":
            if self.alpha is not None:
                return f"CS (zeta={self.zeta:g}, alpha={self.alpha:g})"
            return f"CS (zeta={self.zeta:g}, gamma={self.gamma:g})"
        if self.alpha is not None:
            return f"NCS (zeta={self.zeta:g}, alpha={self.alpha:g})"
        return f"NCS (zeta={self.zeta:g}, beta={self.beta:g})"


# scalar hyperparameter arithmetic -------------------------------------------

def gamma_from_alpha(alpha: float, T: int) -> float:
    if T < 1:
        raise ValueError(f"gamma_from_alpha: T must be >= 1, got {T}")
    if alpha < 0:
        raise ValueError(f"gamma_from_alpha: alpha must be >= 0, got {alpha}")
    return -alpha / T


def cs_unclipped_sum(zeta: float, gamma: float, T: int) -> float:
    """Row sum of the stretched probabilities when nothing is clipped."""
    if T < 1:
        raise ValueError(f"cs_unclipped_sum: T must be >= 1, got {T}")
    return zeta + (T - 1) * gamma


def ncs_gamma(zeta: float, beta: float, T: int) -> float:
    """gamma solving ``zeta + (T - 1) * gamma == beta``; 0 for a single-entry row."""
    if T < 1:
        raise ValueError(f"ncs_gamma: T must be >= 1, got {T}")
    if T == 1:
        return 0.0
    return (beta - zeta) / (T - 1)


def ncs_beta_from_alpha(zeta: float, alpha: float, T_pre: int) -> float:
    return cs_unclipped_sum(zeta, gamma_from_alpha(alpha, T_pre), T_pre)


# differentiable normalizers -------------------------------------------------

def _softmax(x: Tensor, keep=None) -> Tensor:
    """Softmax over the last axis, restricted to entries where ``keep`` is True.

    Uses max subtraction then log-sum-exp, all from tape primitives.  Excluded
    entries come out as exactly 0.
    """
    if x.shape[-1] == 0:
        raise ShapeError("softmax: empty row")
    if keep is not None:
        x = masked_fill(x, ~keep, -np.inf)
    # the shift cancels analytically, so it is taken as a constant
    m = Tensor(np.max(x.data, axis=-1, keepdims=True))
    z = add(x, scale(m, -1.0))
    lse = log(sum_axis(exp(z), axis=-1, keepdims=True))
    return exp(add(z, scale(lse, -1.0)))


def vanilla_softmax(logits) -> Tensor:
    x = as_tensor(logits)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"vanilla_softmax: empty input of shape {x.shape}")
    return _softmax(x)


def stretch(probs, zeta: float, gamma) -> Tensor:
    """``(zeta - gamma) * p + gamma`` with scalar or broadcastable per-row gamma."""
    p = as_tensor(probs)
    if np.isscalar(gamma) or np.ndim(gamma) == 0:
        g = float(gamma)
        return add(scale(p, zeta - g), g)
    g = np.asarray(gamma, dtype=float)
    return add(mul(p, zeta - g), g)


def clipped_softmax(logits, zeta: float, gamma: float) -> Tensor:
    if zeta < 1 or gamma > 0:
        raise ValueError(f"clipped_softmax: need zeta >= 1 and gamma <= 0, got zeta={zeta}, gamma={gamma}")
    return clip(stretch(vanilla_softmax(logits), zeta, gamma), 0.0, 1.0)


def ncs_softmax(logits, zeta: float, beta: float, T: Optional[int] = None) -> Tensor:
    """Normalized clipped softmax over the last axis.

    ``T`` defaults to the row length.  For causal rows pass the query position
    (1-based), which equals the number of attendable entries.
    """
    x = as_tensor(logits)
    n = x.shape[-1] if x.data.ndim else 0
    if T is None:
        T = n
    if T != n:
        raise ShapeError(f"ncs_softmax: T={T} does not match row length {n}")
    return clipped_softmax(x, zeta, ncs_gamma(zeta, beta, T))


def _row_gammas(config: SoftmaxConfig, counts: np.ndarray) -> np.ndarray:
    return np.array([ncs_gamma(config.zeta, config.beta, int(c)) for c in counts.reshape(-1)]).reshape(counts.shape)


def causal_mask(T: int) -> np.ndarray:
    """Boolean (T, T) mask, True where query row may attend to key column."""
    return np.tril(np.ones((T, T), dtype=bool))


def attention_normalize(scores, config: SoftmaxConfig, mask: Optional[np.ndarray] = None,
                        return_preclip: bool = False):
    """Row-wise normalization of attention scores of shape (..., Tq, Tk).

    ``mask`` is True for attendable keys.  For the clipped variants masked keys
    are dropped from the row before normalizing; a causal row t therefore has
    length t.  ``config`` must be resolved (no alpha).
    """
    s = as_tensor(scores)
    if s.data.ndim < 2:
        raise ShapeError(f"attention_normalize: scores must be at least 2-D, got {s.shape}")
    tq, tk = s.shape[-2:]
    if config.causal and mask is None:
        raise ValueError("attention_normalize: causal config requires a mask")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (tq, tk):
            raise ShapeError(f"attention_normalize: mask {mask.shape} does not match scores {(tq, tk)}")
        if not mask.any(axis=-1).all():
            raise ValueError("attention_normalize: a query row has no attendable key")
    if config.alpha is not None:
        raise ValueError("attention_normalize: config still carries alpha; call resolve(max_seq_len) first")

    p = _softmax(s, mask)
    if config.variant == "vanilla":
        return (p, p) if return_preclip else p
    if config.variant == "clipped":
        gamma = config.gamma
    else:
        counts = mask.sum(axis=-1) if mask is not None else np.full(tq, tk)
        gamma = _row_gammas(config, counts)[:, None]
        if np.all(gamma == gamma[0, 0]):
            gamma = float(gamma[0, 0])
    pre = stretch(p, config.zeta, gamma)
    out = clip(pre, 0.0, 1.0)
    if mask is not None:
        out = masked_fill(out, ~mask, 0.0)
        pre = masked_fill(pre, ~mask, 0.0)
    return (out, pre) if return_preclip else out
