import numpy as np
import pytest

from promptrecon import tensor as T


def central_diff(f, x: np.ndarray, idx, h: float = 1e-6) -> float:
    """d f / d x[idx] by central differences; ``f`` maps an array to a float."""
    xp = x.copy()
    xm = x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))))


def check_grad(build, *arrays, n_checks: int = 12, seed: int = 0, tol: float = 1e-5):
    """Compare tape gradients of ``build(*tensors)`` (a scalar Tensor) with central differences."""
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    T.backward(loss, tensors)
    rng = np.random.default_rng(seed)
    for k, a in enumerate(arrays):
        flat = [np.unravel_index(i, a.shape) for i in rng.choice(a.size, size=min(n_checks, a.size), replace=False)]
        for idx in flat:

            def f(v, k=k):
                args = [T.Tensor(x) for x in arrays]
                args[k] = T.Tensor(v)
                with T.no_grad():
                    return build(*args).item()

            fd = central_diff(f, a, idx)
            an = tensors[k].grad[idx]
            assert abs(an - fd) <= tol * max(1.0, abs(fd)), (k, idx, an, fd)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
