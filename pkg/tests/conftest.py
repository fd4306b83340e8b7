import numpy as np
import pytest


def finite_difference(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f()
            a[i] = old - h
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_objects(rng, n):
    """``n`` valid 9-dim object feature rows (continuous coords plus one-hot groups)."""
    rows = np.zeros((n, 9))
    rows[:, 0:2] = rng.uniform(-1, 1, size=(n, 2))
    rows[:, 2] = rng.choice([1 / 3, 2 / 3, 1.0], size=n)
    rows[np.arange(n), 3 + rng.integers(0, 3, size=n)] = 1.0
    rows[np.arange(n), 6 + rng.integers(0, 3, size=n)] = 1.0
    return rows


def random_example(rng, vocab_size=12, max_tokens=5, max_objects=4, identifier="ex", min_objects=1):
    from nlvr_pointer.data import EncodedExample

    T = int(rng.integers(1, max_tokens + 1))
    subs = [random_objects(rng, int(rng.integers(min_objects, max_objects + 1))) for _ in range(3)]
    return EncodedExample(identifier, rng.integers(2, vocab_size, size=T), subs, int(rng.integers(0, 2)))


def tiny_config(**overrides):
    from nlvr_pointer.model import ModelConfig

    values = dict(vocab_size=12, embed_dim=4, hidden=3, object_dim=5, joint_dim=6, mlp_dim=5, dropout=0.0)
    values.update(overrides)
    return ModelConfig(**values)


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
