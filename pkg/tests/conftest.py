import numpy as np
import pytest

from mcfvc import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(build, arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = T.backward(build(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(x, k=k):
            args = [T.Tensor(a) for a in arrays]
            args[k] = T.Tensor(x)
            return build(*args).item()

        num = numeric_grad(f, arrays[k].copy(), h)
        worst = max(worst, rel_err(grads.get(leaf, np.zeros_like(num)), num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides):
    """A few-second protocol: 6 classes, base 2 + two increments of 2."""
    from mcfvc.training import desk_config

    base = dict(n_classes=6, per_class=10, base_classes=2, per_increment=2, ell=8, d2=6, d3=6, hidden=12,
                d_model=12, epochs=3, beam=2, max_len=8, bs=4)
    base.update(overrides)
    return desk_config(**base)
