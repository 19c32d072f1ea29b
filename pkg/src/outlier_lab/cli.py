"""Command-line front end.

    outlier-lab pretrain --config toy-mlm-ncs --out runs/ncs
    outlier-lab eval --checkpoint runs/ncs/checkpoint.ckpt --config toy-mlm-ncs
    outlier-lab sweep --config toy-mlm-vanilla --variants vanilla,ncs --pretrain-lens 16,32
    outlier-lab export-attn --checkpoint runs/ncs/checkpoint.ckpt --n-seqs 2

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import DataError, PackedDataset, Vocab, build_vocab, default_corpus, pack
from .metrics import fp_vs_quant, length_sweep, outlier_report
from .model import TransformerLM, concentration, export_attention
from .softmax import SoftmaxConfig
from .train import (CheckpointError, TrainingDivergence, checkpoint_load, checkpoint_save, make_optimizer,
                    rng_for, train)

log = logging.getLogger("outlier_lab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "OUTLIER_LAB_OUT"

SWEEP_COLUMNS = ["method", "pretrain_len", "fp_ppl", "max_inf_norm", "avg_kurtosis", "quant_ppl"]
SWEEP_SCHEMA_VERSION = 1
CONCENTRATION_COLUMNS = ["layer", "head", "sample", "length", "max_col_mass", "concentration"]
DESK_ALPHA = 0.5


def resolve_out(cfg: RunConfig, flag: Optional[str]) -> str:
    if flag:
        return flag
    env = os.environ.get(OUT_ENV)
    if env:
        return os.path.join(env, cfg.name)
    return cfg.out or os.path.join("runs", cfg.name)


def read_corpus(spec: str) -> str:
    if spec == "default":
        return default_corpus()
    parts = []
    for path in [p.strip() for p in spec.split(",") if p.strip()]:
        with open(path, encoding="utf-8") as f:
            parts.append(f.read())
    return "\n\n".join(parts)


def prepare_data(cfg: RunConfig, vocab: Optional[Vocab] = None):
    """(vocab, train, validation) for the run's corpus and pretraining length."""
    text = read_corpus(cfg.data.corpus)
    if vocab is None:
        vocab = build_vocab(text, cfg.data.vocab_size)
    ds = pack(text, vocab, cfg.max_seq_len, cfg.data.pack_mode)
    tr, va = ds.split(cfg.data.valid_fraction)
    return vocab, tr, va


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# commands ---------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, out: str, resume: Optional[str] = None, stop_at: Optional[int] = None) -> str:
    """Train to ``train.max_steps`` (or ``stop_at``); returns the checkpoint path."""
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.ini"), "w") as f:
        f.write(cfg.to_ini())
    tcfg = cfg.train_config()
    if resume:
        model, opt, header = checkpoint_load(resume)
        vocab = Vocab(header["extra"]["vocab"])
        start = header["step"]
        if model.config.to_dict() != cfg.model_config(len(vocab)).to_dict():
            raise ConfigError("model", "checkpoint model config does not match the run config")
        _, tr, _ = prepare_data(cfg, vocab)
    else:
        vocab, tr, _ = prepare_data(cfg)
        model = TransformerLM(cfg.model_config(len(vocab)), rng_for(cfg.seed, "init"))
        opt, start = make_optimizer(tcfg), 0
    vocab.save(os.path.join(out, "vocab.txt"))
    stop = tcfg.max_steps if stop_at is None else min(stop_at, tcfg.max_steps)
    log.info("pretrain %s: %d params, steps %d..%d", cfg.name, model.n_params(), start, stop)
    train(model, tr, tcfg, opt, start_step=start, stop_step=stop,
          metrics_path=os.path.join(out, "metrics.csv"))
    path = os.path.join(out, "checkpoint.ckpt")
    checkpoint_save(path, model, opt, stop, tcfg,
                    extra={"vocab": vocab.itos, "corpus_hash": tr.corpus_hash, "run": cfg.name, "seed": cfg.seed})
    return path


def cmd_eval(cfg: RunConfig, checkpoint: str, out: str) -> dict:
    os.makedirs(out, exist_ok=True)
    model, _, header = checkpoint_load(checkpoint)
    vocab = Vocab(header["extra"]["vocab"])
    if model.config.to_dict() != cfg.model_config(len(vocab)).to_dict():
        raise ConfigError("model", "checkpoint model config does not match the run config")
    _, tr, va = prepare_data(cfg, vocab)
    eval_seed = int(rng_for(cfg.seed, "eval").integers(2**31))
    meta = {"run": cfg.name, "seed": cfg.seed, "corpus_hash": tr.corpus_hash, "checkpoint_step": header["step"],
            "model_config": model.config.to_dict(), "softmax": model.config.softmax.label(),
            "version": __version__}
    rep = fp_vs_quant(model, cfg.quant, va, tr, calib_seed=cfg.seed, eval_seed=eval_seed,
                      n_outlier_samples=min(cfg.eval.n_samples, len(va)), batch_size=cfg.eval.batch_size,
                      metadata=meta)
    doc = rep.to_dict()
    if cfg.eval.kurtosis_excess:
        doc["outliers"] = outlier_report(model, va, min(cfg.eval.n_samples, len(va)), kurtosis_excess=True).to_dict()
    sweep = []
    if cfg.eval.lengths:
        sweep = length_sweep(model, cfg.eval.lengths, va.sequences.reshape(-1), eval_seed, cfg.eval.batch_size)
        _write_rows(os.path.join(out, "length_sweep.csv"), ["length", "metric", "value", "n_sequences"], sweep)
        if model.config.objective == "mlm":
            doc["mlm_accuracy"].update({str(r["length"]): r["value"] for r in sweep})
    doc["length_sweep"] = sweep
    _write_json(os.path.join(out, "eval_report.json"), doc)
    _write_rows(os.path.join(out, "quantizers.csv"), ["site", "s", "z", "b", "estimator", "target"], rep.quantizers)
    return doc


def parse_variant(spec: str, direction: str) -> SoftmaxConfig:
    """``vanilla``, ``cs[:alpha=..|gamma=..]``, ``ncs[:alpha=..|beta=..]``, optional ``zeta=..``."""
    name, _, rest = spec.partition(":")
    kw = {}
    for item in filter(None, rest.split(",")):
        k, _, v = item.partition("=")
        kw[k.strip()] = float(v)
    name = name.strip().lower()
    variant = {"vanilla": "vanilla", "cs": "clipped", "clipped": "clipped", "ncs": "ncs"}.get(name)
    if variant is None:
        raise ConfigError("sweep.variants", f"unknown variant {spec!r}")
    if variant == "clipped" and "gamma" not in kw:
        kw.setdefault("alpha", DESK_ALPHA)
    if variant == "ncs" and "beta" not in kw:
        kw.setdefault("alpha", DESK_ALPHA)
    try:
        return SoftmaxConfig(variant=variant, direction=direction, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError("sweep.variants", str(e)) from None


def cmd_sweep(configs: Sequence[RunConfig], out: str, variants: Sequence[str] = (),
              pretrain_lens: Sequence[int] = ()) -> list[dict]:
    """Pretrain and evaluate every (config, length, variant) cell; one CSV row per cell."""
    cells = []
    for cfg in configs:
        direction = "causal" if cfg.model.get("objective") == "clm" else "bidirectional"
        sms = [parse_variant(v, direction) for v in variants] or [cfg.softmax]
        for L in (pretrain_lens or [cfg.max_seq_len]):
            for sm in sms:
                model = dict(cfg.model, max_seq_len=L)
                if model.get("max_positions", 0) and model["max_positions"] < L:
                    model["max_positions"] = L
                lengths = [x for x in cfg.eval.lengths if x <= max(L, model.get("max_positions") or L)]
                cell = dataclasses.replace(cfg, softmax=sm, model=model,
                                           eval=dataclasses.replace(cfg.eval, lengths=lengths),
                                           name=f"{cfg.name}-{sm.variant}-T{L}")
                cells.append(cell)
    os.makedirs(out, exist_ok=True)
    rows = []
    for cell in cells:
        cdir = os.path.join(out, cell.name)
        row = {"method": cell.softmax.label(), "pretrain_len": cell.max_seq_len}
        try:
            cell.validate()
            ckpt = cmd_pretrain(cell, cdir)
            doc = cmd_eval(cell, ckpt, cdir)
            row.update(fp_ppl=doc["fp_ppl"], max_inf_norm=doc["outliers"]["max_inf_norm"],
                       avg_kurtosis=doc["outliers"]["avg_kurtosis"], quant_ppl=doc["quant_ppl"])
        except Exception as e:  # a failed cell is recorded, the sweep goes on
            log.error("sweep cell %s failed: %s", cell.name, e)
            os.makedirs(cdir, exist_ok=True)
            with open(os.path.join(cdir, "error.txt"), "w") as f:
                f.write(f"{type(e).__name__}: {e}\n")
            row.update(fp_ppl=math.nan, max_inf_norm=math.nan, avg_kurtosis=math.nan, quant_ppl=math.nan)
        rows.append(row)
    _write_rows(os.path.join(out, "sweep.csv"), SWEEP_COLUMNS, rows)
    return rows


def cmd_export_attn(checkpoint: str, out: str, start: int = 0, n_seqs: int = 1,
                    cfg: Optional[RunConfig] = None) -> list[dict]:
    """Per layer/head/sample attention matrices as CSV plus concentration stats."""
    model, _, header = checkpoint_load(checkpoint)
    vocab = Vocab(header["extra"]["vocab"])
    T = model.config.max_seq_len
    if cfg is not None:
        _, _, va = prepare_data(cfg, vocab)
        seqs = va.sequences
    else:
        seqs = pack(default_corpus(), vocab, T).split()[1].sequences
    batch = seqs[start:start + n_seqs]
    if len(batch) == 0:
        raise DataError(f"export-attn: no sequences in range [{start}, {start + n_seqs})")
    os.makedirs(os.path.join(out, "attn"), exist_ok=True)
    stats = []
    for layer, probs in export_attention(model, batch).items():
        conc = concentration(probs)
        for s in range(probs.shape[0]):
            for h in range(probs.shape[1]):
                path = os.path.join(out, "attn", f"L{layer}_H{h}_S{start + s}.csv")
                np.savetxt(path, probs[s, h], delimiter=",", fmt="%.8g")
                stats.append({"layer": layer, "head": h, "sample": start + s, "length": probs.shape[-1],
                              "max_col_mass": float(probs[s, h].sum(axis=0).max()),
                              "concentration": float(conc[s, h])})
    _write_rows(os.path.join(out, "concentration.csv"), CONCENTRATION_COLUMNS, stats)
    return stats


# entry point --------------------------------------------------------------------

def _load(path: str, seed: Optional[int]) -> RunConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.replace(",", " ").split()] if s else []


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="outlier-lab", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="train a model and write checkpoint + metrics CSV")
    sp.add_argument("--config", required=True, help="INI file or preset name")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.add_argument("--stop-at", type=int, help="stop after this many total steps")

    se = sub.add_parser("eval", help="FP vs quantized perplexity, outliers and length sweep")
    se.add_argument("--config", required=True)
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--out")
    se.add_argument("--seed", type=int)

    ss = sub.add_parser("sweep", help="pretrain+eval over (pretrain length, softmax variant) cells")
    ss.add_argument("--config", required=True, action="append")
    ss.add_argument("--out")
    ss.add_argument("--seed", type=int)
    ss.add_argument("--variants", default="", help="comma list, e.g. vanilla,ncs:alpha=1")
    ss.add_argument("--pretrain-lens", default="", help="comma list of pretraining lengths")

    sa = sub.add_parser("export-attn", help="dump attention probabilities per layer/head")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--config")
    sa.add_argument("--out")
    sa.add_argument("--seed", type=int)
    sa.add_argument("--start", type=int, default=0)
    sa.add_argument("--n-seqs", type=int, default=1)
    return p


def _split_variants(s: str) -> list[str]:
    # commas separate variants except inside a "name:k=v,k=v" option list
    out, cur = [], ""
    for part in s.split(","):
        if "=" in part and ":" not in part and cur:
            cur += "," + part
        else:
            if cur:
                out.append(cur)
            cur = part
    if cur:
        out.append(cur)
    return [v.strip() for v in out if v.strip()]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "pretrain":
            cfg = _load(args.config, args.seed)
            cmd_pretrain(cfg, resolve_out(cfg, args.out), args.checkpoint, args.stop_at)
        elif args.command == "eval":
            cfg = _load(args.config, args.seed)
            cmd_eval(cfg, args.checkpoint, resolve_out(cfg, args.out))
        elif args.command == "sweep":
            cfgs = [_load(c, args.seed) for c in args.config]
            out = args.out or (os.path.join(os.environ[OUT_ENV], "sweep") if os.environ.get(OUT_ENV)
                               else os.path.join("runs", "sweep"))
            cmd_sweep(cfgs, out, _split_variants(args.variants), _int_list(args.pretrain_lens))
        elif args.command == "export-attn":
            cfg = _load(args.config, args.seed) if args.config else None
            out = args.out or (resolve_out(cfg, None) if cfg else os.path.dirname(args.checkpoint) or ".")
            cmd_export_attn(args.checkpoint, out, args.start, args.n_seqs, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, DataError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
