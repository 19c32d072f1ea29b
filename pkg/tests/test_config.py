import pytest

from outlier_lab.config import PRESETS, ConfigError, load_config, parse_config, preset_text

SECTIONS = {
    "run": {"name": "t", "seed": "3"},
    "model": {"objective": "mlm", "hidden": "16", "n_heads": "2", "max_seq_len": "8"},
    "train": {"max_steps": "10", "warmup_steps": "2"},
}


def ini(**overrides):
    merged = {k: dict(v) for k, v in SECTIONS.items()}
    for section, kv in overrides.items():
        merged.setdefault(section, {}).update(kv)
    return "\n".join(f"[{sec}]\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()) for sec, kv in merged.items())


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load_and_roundtrip(name):
    cfg = load_config(name)
    back = parse_config(cfg.to_ini(), source=f"{name}.ini")
    for field in ("name", "seed", "model", "data", "softmax", "train", "quant", "eval"):
        assert getattr(back, field) == getattr(cfg, field)


def test_preset_shapes():
    assert load_config("toy-mlm-vanilla").softmax.variant == "vanilla"
    ncs = load_config("toy-mlm-ncs")
    assert ncs.softmax.variant == "ncs" and ncs.model_config(300).softmax.direction == "bidirectional"
    clm = load_config("toy-clm-ncs")
    assert clm.softmax.beta == 0.9 and clm.softmax.causal
    assert (clm.train.beta2, clm.train.weight_decay) == (0.95, 0.1)
    assert (clm.quant.weight_estimator, clm.quant.act_estimator) == ("mse", "percentile")
    for name in PRESETS:
        cfg = load_config(name)
        assert cfg.model["n_layers"] == 2 and cfg.model["hidden"] == 64 and cfg.max_seq_len == 32


def test_seed_flows_into_train_config():
    cfg = parse_config(ini())
    assert cfg.train_config().seed == 3 and cfg.train.max_steps == 10


@pytest.mark.parametrize("overrides,path", [
    ({"model": {"layers": "2"}}, "model.layers"),
    ({"model": {"vocab_size": "10"}}, "model.vocab_size"),
    ({"train": {"seed": "1"}}, "train.seed"),
    ({"train": {"peak_lr": "fast"}}, "train.peak_lr"),
    ({"data": {"vocab_size": "x"}}, "data.vocab_size"),
    ({"eval": {"lengths": "8, 64"}}, "eval.lengths"),
    ({"softmax": {"variant": "ncs", "beta": "2.0"}}, "softmax.beta"),
    ({"softmax": {"variant": "ncs", "beta": "0.9", "direction": "causal"}}, "softmax.direction"),
    ({"quant": {"weight_estimator": "kmeans"}}, "quant.weight_estimator"),
    ({"plots": {"x": "1"}}, "plots"),
])
def test_errors_carry_field_path(overrides, path):
    with pytest.raises(ConfigError) as e:
        parse_config(ini(**overrides))
    assert e.value.path == path


def test_unknown_preset_and_missing_file():
    with pytest.raises(ConfigError):
        preset_text("huge")
    with pytest.raises(OSError):
        load_config("/nonexistent/run.ini")
