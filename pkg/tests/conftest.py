import numpy as np
import pytest

from nask.tensor import Tape, Tensor, backward, no_tape


def central_difference(fn, x, h=1e-5):
    """Numerical gradient of the scalar function ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grad(build, arrays, wrt=0, h=1e-5):
    """Return (analytic, numeric) gradients of ``build(*tensors)`` w.r.t.
    ``arrays[wrt]``; ``build`` must return a scalar Tensor."""
    tensors = [Tensor(a, requires_grad=(i == wrt)) for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = build(*tensors)
    backward(tape, loss)
    analytic = tensors[wrt].grad

    def f(v):
        ts = [Tensor(v if i == wrt else a) for i, a in enumerate(arrays)]
        with no_tape():
            return build(*ts).item()

    numeric = central_difference(f, arrays[wrt], h)
    return analytic, numeric


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- shared toy training runs -------------------------------------------------

TOY_SEED_BASE = 1000
HELDOUT_SEED_BASE = 5000
TOY_STEPS = 500


def toy_samples(base=TOY_SEED_BASE, count=20):
    from nask.data import random_sample
    return [random_sample(base + i) for i in range(count)]


def _train_toy(**overrides):
    import time

    from nask.pipeline import PipelineConfig, prepare_example, train
    cfg = PipelineConfig.toy(**overrides)
    samples = toy_samples()
    start = time.perf_counter()
    examples = [prepare_example(s, cfg) for s in samples]
    result = train(examples, cfg, steps=TOY_STEPS)
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def toy_run():
    """(TrainResult, seconds) of the two-stage model on the 20-image toy set."""
    return _train_toy()


@pytest.fixture(scope="session")
def toy_run_without_tis():
    return _train_toy(use_tis=False)


@pytest.fixture(scope="session")
def heldout_samples():
    return toy_samples(HELDOUT_SEED_BASE)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: int(k[1:])):
        terminalreporter.write_line(results[key])
