import sys

import numpy as np
import pytest

from outlier_lab.data import build_vocab, default_corpus, pack
from outlier_lab.model import ModelConfig, TransformerLM
from outlier_lab.softmax import SoftmaxConfig


def tiny_config(objective="mlm", variant="vanilla", **kw):
    direction = "causal" if objective == "clm" else "bidirectional"
    sm = {"vanilla": SoftmaxConfig(direction=direction),
          "clipped": SoftmaxConfig("clipped", gamma=-0.05, direction=direction),
          "ncs": SoftmaxConfig("ncs", beta=0.9, direction=direction)}[variant]
    base = dict(n_layers=1, hidden=16, n_heads=2, vocab_size=40, max_seq_len=8, objective=objective, softmax=sm)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(objective="mlm", variant="vanilla", seed=0, **kw):
    return TransformerLM(tiny_config(objective, variant, **kw), np.random.default_rng(seed))


@pytest.fixture(scope="session")
def corpus():
    return default_corpus()


@pytest.fixture(scope="session")
def vocab(corpus):
    return build_vocab(corpus, 8192)


@pytest.fixture(scope="session")
def packed16(corpus, vocab):
    return pack(corpus, vocab, 16)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
