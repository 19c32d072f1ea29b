"""Simulated uniform affine quantization.

``X_q = clip(round(X / s) + z, 0, 2**b - 1)`` with per-tensor asymmetric
parameters.  Rounding is half away from zero.  Everything runs in float64;
integer kernels are simulated by quantize/dequantize (fake quantization).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

ESTIMATORS_W = ("minmax", "mse")
ESTIMATORS_A = ("running_minmax", "percentile")

# standard calibration budget: 16 batches of 8 sequences
DEFAULT_CALIB_BATCHES = 16
DEFAULT_CALIB_BATCH_SIZE = 8


class QuantError(ValueError):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QuantizerSpec:
    bits: int
    scale: float
    zero_point: int
    estimator: str = "minmax"
    target: str = "weight"
    degenerate: bool = False

    def __post_init__(self):
        if self.bits < 2:
            raise QuantError(f"bits must be >= 2, got {self.bits}")
        if not self.scale > 0:
            raise QuantError(f"scale must be > 0, got {self.scale}")

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1

    def to_record(self, site: str) -> dict:
        return {"site": site, "s": self.scale, "z": self.zero_point, "b": self.bits,
                "estimator": self.estimator, "target": self.target}


@dataclass
class QuantizedTensor:
    values: np.ndarray
    spec: QuantizerSpec

    @property
    def shape(self):
        return self.values.shape


def _finite_nonempty(X, who: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise QuantError(f"{who}: empty tensor")
    if not np.all(np.isfinite(X)):
        raise QuantError(f"{who}: non-finite values")
    return X


def params_from_range(lo: float, hi: float, bits: int, estimator: str = "minmax",
                      target: str = "weight") -> QuantizerSpec:
    qmax = 2 ** bits - 1
    if hi < lo:
        raise QuantError(f"range [{lo}, {hi}] is inverted")
    if hi == lo:
        # constant tensor: put the value exactly on the grid
        c = float(lo)
        if c == 0.0:
            s, z = 1.0, 0
        else:
            s = abs(c)
            z = 0 if c > 0 else 1
        return QuantizerSpec(bits, s, z, estimator, target, degenerate=True)
    # the grid must contain 0, otherwise the clamped z cuts off one end of the range
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    s = (hi - lo) / qmax
    z = int(np.clip(-round_half_away(lo / s), 0, qmax))
    return QuantizerSpec(bits, float(s), z, estimator, target)


def minmax_params(X, bits: int = 8, target: str = "weight") -> QuantizerSpec:
    X = _finite_nonempty(X, "minmax_params")
    return params_from_range(float(X.min()), float(X.max()), bits, "minmax", target)


def quantize(X, spec: QuantizerSpec) -> QuantizedTensor:
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise QuantError("quantize: non-finite values")
    q = np.clip(round_half_away(X / spec.scale) + spec.zero_point, 0, spec.qmax)
    return QuantizedTensor(q.astype(np.int64), spec)


def dequantize(Xq: QuantizedTensor) -> np.ndarray:
    return Xq.spec.scale * (Xq.values - Xq.spec.zero_point).astype(np.float64)


def fake_quant(X, spec: QuantizerSpec) -> np.ndarray:
    return dequantize(quantize(X, spec))


def mse_candidates(grid: int) -> np.ndarray:
    if grid < 2:
        raise QuantError(f"mse_estimator: grid must be >= 2, got {grid}")
    return np.linspace(0.3, 1.0, grid)


def mse_estimator(W, bits: int = 8, grid: int = 64, target: str = "weight") -> QuantizerSpec:
    """Grid search over shrunk ranges ``[c * min, c * max]`` minimizing the
    squared reconstruction error.  Ties go to the larger ``c``."""
    W = _finite_nonempty(W, "mse_estimator")
    lo, hi = float(W.min()), float(W.max())
    best, best_err = None, np.inf
    for c in mse_candidates(grid)[::-1]:
        spec = params_from_range(lo * c, hi * c, bits, "mse", target)
        err = float(np.sum((fake_quant(W, spec) - W) ** 2))
        if err < best_err:
            best, best_err = spec, err
    return best


@dataclass
class CalibrationState:
    running_min: float = np.inf
    running_max: float = -np.inf
    momentum: float = 0.9
    batches_seen: int = 0
    sample_buffer: Optional[list] = None

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise QuantError(f"momentum must be in (0, 1), got {self.momentum}")


def running_minmax_update(state: CalibrationState, batch) -> CalibrationState:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise QuantError("running_minmax_update: empty batch")
    bmin, bmax = float(batch.min()), float(batch.max())
    if state.batches_seen == 0:
        state.running_min, state.running_max = bmin, bmax
    else:
        # m * r + (1 - m) * b, written so a repeated batch is an exact fixed point
        k = 1 - state.momentum
        state.running_min += k * (bmin - state.running_min)
        state.running_max += k * (bmax - state.running_max)
    state.batches_seen += 1
    return state


def percentile_range(samples, p: float) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise QuantError("percentile_range: empty samples")
    if not 50 < p <= 100:
        raise QuantError(f"percentile_range: p must be in (50, 100], got {p}")
    lo, hi = np.percentile(samples, [100 - p, p])
    return float(lo), float(hi)


# whole-model quantization ---------------------------------------------------

@dataclass
class QuantScheme:
    bits: int = 8
    weight_estimator: str = "minmax"
    act_estimator: str = "running_minmax"
    calib_batches: int = DEFAULT_CALIB_BATCHES
    calib_batch_size: int = DEFAULT_CALIB_BATCH_SIZE
    momentum: float = 0.9
    percentile: float = 99.999
    mse_grid: int = 64
    quantize_final_norm: bool = True

    def __post_init__(self):
        if self.weight_estimator not in ESTIMATORS_W:
            raise QuantError(f"quant.weight_estimator: expected one of {ESTIMATORS_W}, got {self.weight_estimator!r}")
        if self.act_estimator not in ESTIMATORS_A:
            raise QuantError(f"quant.act_estimator: expected one of {ESTIMATORS_A}, got {self.act_estimator!r}")
        if self.bits < 2:
            raise QuantError(f"quant.bits: must be >= 2, got {self.bits}")
        if self.calib_batches < 1 or self.calib_batch_size < 1:
            raise QuantError("quant.calib_batches: calibration needs at least one batch of one sequence")

    def to_dict(self) -> dict:
        return asdict(self)


class _Calibrator:
    def __init__(self, scheme: QuantScheme):
        self.scheme = scheme
        self.states: dict[str, CalibrationState] = {}

    def __call__(self, name, x):
        st = self.states.get(name)
        if st is None:
            st = self.states[name] = CalibrationState(momentum=self.scheme.momentum)
            if self.scheme.act_estimator == "percentile":
                st.sample_buffer = []
        if st.sample_buffer is not None:
            st.sample_buffer.append(np.array(x.data, copy=True).reshape(-1))
            st.batches_seen += 1
        else:
            running_minmax_update(st, x.data)
        return x

    def specs(self) -> dict[str, QuantizerSpec]:
        out = {}
        for name, st in self.states.items():
            if st.sample_buffer is not None:
                lo, hi = percentile_range(np.concatenate(st.sample_buffer), self.scheme.percentile)
                est = "percentile"
            else:
                lo, hi = st.running_min, st.running_max
                est = "running_minmax"
            out[name] = params_from_range(lo, hi, self.scheme.bits, est, "activation")
        return out


class _FakeQuantHook:
    def __init__(self, specs: dict[str, QuantizerSpec]):
        self.specs = specs

    def __call__(self, name, x):
        from .tensor import Tensor

        spec = self.specs.get(name)
        if spec is None:
            return x
        return Tensor(fake_quant(x.data, spec))


@dataclass
class QuantizedModel:
    """A model with frozen fake-quantized weights and static activation ranges."""

    model: object
    scheme: QuantScheme
    weight_specs: dict = field(default_factory=dict)
    act_specs: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def logits(self, ids):
        return self.model.logits(ids, hook=_FakeQuantHook(self.act_specs), weights=self.weights)

    def loss(self, ids, labels=None):
        return self.model.loss(ids, labels, hook=_FakeQuantHook(self.act_specs), weights=self.weights)

    @property
    def config(self):
        return self.model.config

    def records(self) -> list[dict]:
        recs = [spec.to_record(name) for name, spec in self.weight_specs.items()]
        recs += [spec.to_record(name) for name, spec in self.act_specs.items()]
        return recs

    def n_specs(self) -> int:
        return len(self.weight_specs) + len(self.act_specs)


def quantize_model(model, calib_batches: Iterable[np.ndarray], scheme: QuantScheme) -> QuantizedModel:
    """Post-training W/A quantization of every weight and activation site.

    Only the output projection (the final layer) stays in float.  Weights are
    quantized first; activation ranges are then calibrated on the forward pass
    of the weight-quantized model.
    """
    excluded_w = set(model.final_layer_params())
    excluded_a = set()
    if not scheme.quantize_final_norm:
        excluded_w |= set(model.final_norm_params())
        excluded_a |= set(model.final_norm_sites())

    weight_specs, weights = {}, {}
    for name, p in model.params.items():
        if name in excluded_w:
            continue
        if scheme.weight_estimator == "mse":
            spec = mse_estimator(p.data, scheme.bits, scheme.mse_grid)
        else:
            spec = minmax_params(p.data, scheme.bits)
        weight_specs[name] = spec
        weights[name] = fake_quant(p.data, spec)

    cal = _Calibrator(scheme)
    n = 0
    T = None
    for batch in calib_batches:
        batch = np.asarray(batch)
        if batch.ndim != 2:
            raise QuantError(f"calibration batch must be (batch, length), got shape {batch.shape}")
        if T is None:
            T = batch.shape[1]
        elif batch.shape[1] != T:
            raise QuantError(f"calibration batch shape mismatch: length {batch.shape[1]} != {T}")
        if T > model.config.max_positions:
            raise QuantError(f"calibration batch length {T} exceeds position capacity {model.config.max_positions}")
        model.logits(batch, hook=cal, weights=weights)
        n += 1
    if n == 0:
        raise QuantError("quantize_model: no calibration batches")
    act_specs = {k: v for k, v in cal.specs().items() if k not in excluded_a}
    return QuantizedModel(model, scheme, weight_specs, act_specs, weights)
