import numpy as np
import pytest

from rgsplat import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def f64():
    """Run a test in float64 mode (gradient checks need the headroom)."""
    with T.precision(np.float64):
        yield


def finite_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(build_loss, leaves, tol: float = 1e-6, h: float = 1e-6) -> float:
    """Compare taped gradients of build_loss(*leaves) against central differences.

    ``build_loss`` maps leaf Tensors to a scalar Tensor. Leaves must be
    float64 Tensors with requires_grad=True. Returns the worst relative
    error, using max(1, |a|, |b|) as the scale floor.
    """
    with T.Tape() as tape:
        loss = build_loss(*leaves)
    T.backward(tape, loss)
    worst = 0.0
    for li, leaf in enumerate(leaves):
        assert leaf.grad is not None, f"leaf {li} received no gradient"

        def scalar_fn(x, _li=li):
            vals = [l.values if i != _li else x for i, l in enumerate(leaves)]
            tmp = [T.Tensor(v, dtype=np.float64) for v in vals]
            return build_loss(*tmp).item()

        fd = finite_difference(scalar_fn, leaf.values.copy(), h=h)
        scale = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(leaf.grad)))
        err = float(np.max(np.abs(leaf.grad - fd) / scale))
        worst = max(worst, err)
        assert err < tol, f"leaf {li}: relative gradient error {err:.3g} >= {tol}"
    return worst
