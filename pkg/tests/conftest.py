import numpy as np
import pytest

from medvae import ndtensor as nt


def numeric_grad(fn, arrays, idx, h=1e-5):
    """Central difference of scalar ``fn()`` w.r.t. element ``idx`` of ``arrays``."""
    arr, pos = arrays[idx[0]], idx[1]
    old = arr[pos]
    arr[pos] = old + h
    fp = fn()
    arr[pos] = old - h
    fm = fn()
    arr[pos] = old
    return (fp - fm) / (2 * h)


def gradcheck(build, shapes, probes=20, seed=0, rtol=1e-4, atol=1e-7, scale=1.0, arrays=None):
    """Compare autodiff with central differences on ``probes`` random coordinates.

    ``build(*tensors)`` returns a scalar Tensor. Relative error is measured
    against ``max(|numeric|, |analytic|)`` with a small absolute floor for
    coordinates whose true gradient is zero.
    """
    rng = np.random.default_rng(seed)
    if arrays is None:
        arrays = [rng.normal(size=s) * scale for s in shapes]
    tensors = [nt.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    grads = [t.grad for t in tensors]

    def value():
        return build(*[nt.Tensor(a) for a in arrays]).item()

    worst = 0.0
    for _ in range(probes):
        i = int(rng.integers(len(arrays)))
        pos = tuple(int(rng.integers(d)) for d in arrays[i].shape)
        num = numeric_grad(value, arrays, (i, pos))
        ana = grads[i][pos]
        err = abs(num - ana)
        if err > atol:
            worst = max(worst, err / max(abs(num), abs(ana)))
    assert worst <= rtol, f"max relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
