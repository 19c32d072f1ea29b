# %%
# Train two toy masked LMs (vanilla vs normalized clipped softmax), then
# look at activation outliers and what 8-bit quantization does to them.
#
# Runs a few hundred steps each, a couple of minutes on a laptop.  Use the
# CLI (`outlier-lab pretrain --config toy-mlm-ncs`) for full-length runs.
import dataclasses

import numpy as np

from outlier_lab.cli import prepare_data
from outlier_lab.config import load_config
from outlier_lab.metrics import fp_vs_quant
from outlier_lab.model import TransformerLM
from outlier_lab.train import rng_for, train

STEPS = 400

# %%
models = {}
for preset in ("toy-mlm-vanilla", "toy-mlm-ncs"):
    cfg = load_config(preset)
    cfg.train = dataclasses.replace(cfg.train, max_steps=STEPS)
    vocab, tr, va = prepare_data(cfg)
    model = TransformerLM(cfg.model_config(len(vocab)), rng_for(cfg.seed, "init"))
    rows = train(model, tr, cfg.train, log_every=0)
    print(f"{preset}: loss {rows[0]['loss']:.3f} -> {np.mean([r['loss'] for r in rows[-20:]]):.3f}")
    models[preset] = (cfg, model, tr, va)

# %%
# Outlier statistics and the FP / W8A8 perplexity gap.
reports = {}
for preset, (cfg, model, tr, va) in models.items():
    rep = reports[preset] = fp_vs_quant(model, cfg.quant, va, tr, calib_seed=cfg.seed, n_outlier_samples=32)
    o = rep.outliers
    print(f"{preset:16s} max|x| {o['max_inf_norm']:7.2f}  kurtosis {o['avg_kurtosis']:7.2f}  "
          f"ppl {rep.fp_ppl:7.3f} -> {rep.quant_ppl:7.3f}")

# %%
# Where does the largest activation live?
for preset, rep in reports.items():
    site, stats = max(rep.outliers["per_site"].items(), key=lambda kv: kv[1]["max_inf_norm"])
    print(f"{preset:16s} {site}: {stats['max_inf_norm']:.2f}")
