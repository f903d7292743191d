import numpy as np
import pytest

from domadapt import autodiff as ad


def gradcheck(f, tensors, eps=1e-5):
    """Largest relative error between backward() and central differences of f."""
    for t in tensors:
        t.zero_grad()
    ad.backward(f())
    worst = 0.0
    for t in tensors:
        fd = ad.finite_difference_gradient(lambda _: f(), t, eps)
        worst = max(worst, ad.relative_error(t.grad, fd))
    return worst


def leaf(rng, *shape, low=None, high=None):
    if low is None:
        vals = rng.normal(size=shape)
    else:
        vals = rng.uniform(low, high, size=shape)
    return ad.Tensor(vals, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
