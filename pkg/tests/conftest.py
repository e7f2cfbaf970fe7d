import numpy as np
import pytest

from advreg.models import ModelBundle, ModelDims
from advreg.objective import Batch

ACCEPTANCE_LINES: list[str] = []


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at array ``x`` (x is restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def small_dims():
    return ModelDims(vocab_size=12, num_answers=6, feature_dim=5, embed_dim=4,
                     question_dim=5, image_dim=4, fusion_hidden=7, adversary_hidden=9)  # fmt: skip


def random_batch(dims: ModelDims, m: int, seed: int, length: int = 4) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        tokens=rng.integers(dims.vocab_size, size=(m, length)),
        features=rng.uniform(-2, 2, size=(m, dims.feature_dim)),
        answers=rng.integers(dims.num_answers, size=m),
    )


def random_bundle(dims: ModelDims, seed: int) -> ModelBundle:
    """Bundle with all parameters, biases included, drawn from U[-1, 1]."""
    b = ModelBundle.init(dims, seed)
    rng = np.random.default_rng([seed, 1])
    for k in b.params:
        b.params[k] = rng.uniform(-1, 1, size=b.params[k].shape)
    return b


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
