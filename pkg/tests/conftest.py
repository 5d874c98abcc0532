import numpy as np
import pytest

from agreelab import numerics as nx
from agreelab.model import ModelConfig, Transformer
from agreelab.tokenizer import train_subwords


def rel_err(a, b):
    """Norm-wise relative error, robust to tiny gradients."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_op_gradient(fn, arrays, seed, eps=1e-5):
    """Largest relative error between backward and central differences for ``fn(*tensors)``.

    The scalar probed is sum(fn(...) * R) with a fixed random R, so every
    output coordinate contributes.
    """
    ts = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    R = np.random.default_rng(seed + 7919).normal(size=out.shape)
    loss = nx.tsum(out * R)
    nx.backward(loss)
    worst = 0.0
    for t in ts:
        numeric = nx.finite_diff_grad(lambda _: nx.tsum(fn(*ts) * R), t, eps)
        worst = max(worst, rel_err(t.grad, numeric))
    return worst


TOY_TEXTS = [
    "the cat sat on the mat",
    "a dog ran in the park",
    "the bird saw a red tree",
    "every child likes the quiet river",
    "this old house is near the garden",
]


@pytest.fixture(scope="session")
def small_vocab():
    return train_subwords(TOY_TEXTS * 3, 320, ("en", "xa", "xb"), seed=0)


def tiny_model(vocab_size=40, seed=0, dropout=0.0, d_model=16, heads=2, d_ff=32, layers=1):
    cfg = ModelConfig(vocab_size=vocab_size, encoder_layers=layers, decoder_layers=layers,
                      d_model=d_model, heads=heads, d_ff=d_ff, dropout=dropout, max_positions=64)
    return Transformer.create(cfg, seed)


@pytest.fixture
def tiny():
    return tiny_model()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def record_acceptance(name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
