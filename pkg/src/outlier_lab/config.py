"""Run configuration: an INI file with sections ``run``, ``model``, ``data``,
``softmax``, ``train``, ``quant`` and ``eval``.

Unknown keys and bad values raise :class:`ConfigError` carrying the dotted
field path (``"train.peak_lr"``).
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .model import ModelConfig
from .quant import QuantScheme
from .softmax import SoftmaxConfig
from .train import TrainConfig

PRESETS = ("toy-mlm-vanilla", "toy-mlm-ncs", "toy-clm-ncs")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DataConfig:
    corpus: str = "default"
    vocab_size: int = 8192
    seq_len: Optional[int] = None
    pack_mode: str = "concat"
    valid_fraction: float = 0.02


@dataclass
class EvalConfig:
    lengths: list = field(default_factory=list)
    n_samples: int = 256
    kurtosis_excess: bool = False
    batch_size: int = 64


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    out: str = ""
    model: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    softmax: SoftmaxConfig = field(default_factory=SoftmaxConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantScheme = field(default_factory=QuantScheme)
    eval: EvalConfig = field(default_factory=EvalConfig)
    source: str = ""

    def model_config(self, vocab_size: int) -> ModelConfig:
        """ModelConfig for the actual vocabulary size."""
        try:
            return ModelConfig(vocab_size=vocab_size, softmax=self.softmax, **self.model)
        except (TypeError, ValueError) as e:
            raise ConfigError(_path_of(e, "model"), str(e)) from None

    @property
    def max_seq_len(self) -> int:
        return int(self.model.get("max_seq_len", ModelConfig.max_seq_len))

    def validate(self) -> "RunConfig":
        T = self.max_seq_len
        if self.data.seq_len is not None and self.data.seq_len != T:
            raise ConfigError("data.seq_len", f"{self.data.seq_len} != model.max_seq_len {T}")
        self.model_config(vocab_size=max(8, self.data.vocab_size))
        cap = int(self.model.get("max_positions") or T)
        for L in self.eval.lengths:
            if L > cap:
                raise ConfigError("eval.lengths", f"length {L} exceeds position capacity {cap}")
            if L < 2:
                raise ConfigError("eval.lengths", f"length {L} must be >= 2")
        if not 0 < self.data.valid_fraction < 1:
            raise ConfigError("data.valid_fraction", "must be in (0, 1)")
        if self.data.pack_mode not in ("concat", "document"):
            raise ConfigError("data.pack_mode", f"unknown mode {self.data.pack_mode!r}")
        if self.eval.n_samples < 1:
            raise ConfigError("eval.n_samples", "must be >= 1")
        return self

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"name": self.name, "seed": str(self.seed), "out": self.out}
        cp["model"] = {k: _fmt(v) for k, v in self.model.items()}
        cp["data"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.data).items() if v is not None}
        cp["softmax"] = {k: _fmt(v) for k, v in self.softmax.to_dict().items()}
        cp["train"] = {k: _fmt(v) for k, v in self.train.to_dict().items() if k != "seed"}
        cp["quant"] = {k: _fmt(v) for k, v in self.quant.to_dict().items()}
        cp["eval"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.eval).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _path_of(exc: Exception, section: str) -> str:
    msg = str(exc)
    head = msg.split(":", 1)[0]
    if "." in head and " " not in head:
        return head
    return section


_MODEL_KEYS = {"n_layers": int, "hidden": int, "n_heads": int, "intermediate": int, "max_seq_len": int,
               "objective": str, "norm_placement": str, "mlm_prob": float, "max_positions": int,
               "init_std": float, "dropout": float}


def _convert(path: str, raw: str, typ):
    try:
        if typ is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is list:
            return [int(x) for x in raw.replace(",", " ").split()]
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _section(cp, name: str) -> dict:
    return dict(cp[name]) if cp.has_section(name) else {}


def _build(cls, section: str, raw: dict, types: dict, base=None):
    kw = {}
    for k, v in raw.items():
        if k not in types:
            raise ConfigError(f"{section}.{k}", "unknown key")
        kw[k] = _convert(f"{section}.{k}", v, types[k])
    try:
        return dataclasses.replace(base, **kw) if base is not None else cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(_path_of(e, section), str(e)) from None


def _types_of(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if not isinstance(f.type, str) else f.type
        s = str(t)
        if "bool" in s:
            out[f.name] = bool
        elif "int" in s:
            out[f.name] = int
        elif "float" in s:
            out[f.name] = float
        elif "list" in s:
            out[f.name] = list
        else:
            out[f.name] = str
    return out


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError("<file>", f"syntax error: {e}") from None
    known = {"run", "model", "data", "softmax", "train", "quant", "eval"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(s, "unknown section")

    run = _section(cp, "run")
    for k in run:
        if k not in ("name", "seed", "out"):
            raise ConfigError(f"run.{k}", "unknown key")
    cfg = RunConfig(source=source)
    cfg.name = run.get("name", os.path.splitext(os.path.basename(source))[0] or "run")
    cfg.seed = _convert("run.seed", run.get("seed", "0"), int)
    cfg.out = run.get("out", "")

    model = {}
    for k, v in _section(cp, "model").items():
        if k not in _MODEL_KEYS:
            raise ConfigError(f"model.{k}", "unknown key" if k != "vocab_size" else "set data.vocab_size instead")
        model[k] = _convert(f"model.{k}", v, _MODEL_KEYS[k])
    cfg.model = model

    sm = _section(cp, "softmax")
    try:
        cfg.softmax = SoftmaxConfig.from_dict(sm)
    except ValueError as e:
        raise ConfigError(_path_of(e, "softmax"), str(e)) from None
    except TypeError as e:
        raise ConfigError("softmax", str(e)) from None

    cfg.data = _build(DataConfig, "data", _section(cp, "data"), _types_of(DataConfig))
    cfg.train = _build(TrainConfig, "train", _section(cp, "train"), _types_of(TrainConfig))
    if "seed" in _section(cp, "train"):
        raise ConfigError("train.seed", "set run.seed instead")
    cfg.quant = _build(QuantScheme, "quant", _section(cp, "quant"), _types_of(QuantScheme))
    cfg.eval = _build(EvalConfig, "eval", _section(cp, "eval"), _types_of(EvalConfig))
    return cfg.validate()


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError("<preset>", f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("outlier_lab").joinpath(f"configs/{name}.ini").read_text()


def load_config(path_or_preset: str) -> RunConfig:
    """Load an INI file, or a bundled preset by name."""
    if not os.path.exists(path_or_preset) and path_or_preset in PRESETS:
        return parse_config(preset_text(path_or_preset), source=f"{path_or_preset}.ini")
    with open(path_or_preset, encoding="utf-8") as f:
        return parse_config(f.read(), source=path_or_preset)
