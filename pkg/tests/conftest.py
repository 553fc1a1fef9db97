import itertools

import numpy as np
import pytest

from madi.model import EncoderConfig, Recognizer, SymbolTable

TINY = EncoderConfig(feat_dim=6, hidden=8, heads=2, layers=1, ffn=12, subsampling=2)


@pytest.fixture
def tiny_model():
    model = Recognizer(SymbolTable(["a", "b", " "]), TINY, seed=3)
    return model


@pytest.fixture
def tiny_feats():
    rng = np.random.default_rng(0)
    return [rng.standard_normal((n, TINY.feat_dim)) for n in (9, 6, 12)]


def brute_force_ctc(log_probs, labels):
    """-log of the summed probability of every frame path that collapses to ``labels``."""
    T, V = log_probs.shape
    blank = V - 1
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        out, prev = [], None
        for s in path:
            if s != prev and s != blank:
                out.append(s)
            prev = s
        if out == list(labels):
            total += np.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
    return -np.log(total)


def random_log_probs(rng, T, V):
    logits = rng.standard_normal((T, V)) * 1.5
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


ACCEPTANCE: dict[str, str] = {}


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"{criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE[criterion] = line
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
