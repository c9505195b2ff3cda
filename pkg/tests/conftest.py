"""Shared test oracles: naive convolution, gradient checking, dyadic draws."""

import numpy as np
import pytest

from mtsgait.tensor import Tensor, finite_diff_grad


def dyadic(rng, shape, denom=16, span=16):
    """Random multiples of 1/denom.

    Products and the short sums in these tests stay exactly
    representable in float64, so results are identical no matter how an
    implementation orders its accumulations; bitwise comparisons between
    independent implementations become meaningful.
    """
    return rng.integers(-span, span + 1, size=shape).astype(np.float64) / denom


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Reference cross-correlation with explicit nested loops."""
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[ni, ci, oy * stride + ky,
                                           ox * stride + kx]
                                        * w[co, ci, ky, kx])
                    out[ni, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


def rel_err(a, b):
    """Max elementwise error relative to max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(f, x_data, eps=1e-5, tol=1e-4):
    """Compare backward() against central differences at x (float64)."""
    x = Tensor(np.asarray(x_data, dtype=np.float64), requires_grad=True)
    out = f(x)
    assert out.size == 1, "gradcheck needs a scalar objective"
    out.backward()
    analytic = x.grad.copy()
    numeric = finite_diff_grad(f, x, eps=eps)
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
