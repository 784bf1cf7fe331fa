import numpy as np

from shape_tta.tensor import Tensor


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of the scalar function ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic, numeric):
    """max |a - n| scaled by the largest gradient magnitude (floored at 1e-8)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale


def check_grad(build, x, h=1e-5):
    """Compare autograd against finite differences for ``build(Tensor) -> scalar Tensor``."""
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    build(leaf).backward()
    numeric = numerical_grad(lambda a: float(build(Tensor(a)).data), x, h)
    return max_relative_error(leaf.grad, numeric)
