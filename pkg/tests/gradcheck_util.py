"""Central finite-difference gradient checking shared across test modules."""

import numpy as np

from tinysense import autodiff as ad


def central_diff(fn, xs, which, h=1e-5):
    """Numeric gradient of scalar fn(list of arrays) w.r.t. xs[which]."""
    base = [x.copy() for x in xs]
    out = np.zeros_like(xs[which])
    flat = out.ravel()
    for i in range(flat.size):
        hi = [x.copy() for x in base]
        lo = [x.copy() for x in base]
        hi[which].ravel()[i] += h
        lo[which].ravel()[i] -= h
        flat[i] = (fn(hi) - fn(lo)) / (2 * h)
    return out


def check_grads(build, xs, rtol=1e-4, h=1e-5):
    """build maps a list of Tensors to a scalar Tensor; compares all grads
    against central differences at relative tolerance rtol."""
    tensors = [ad.parameter(x.copy(), name=f"p{i}") for i, x in enumerate(xs)]
    loss = build(tensors)
    ad.backward(loss)

    def as_scalar(arrays):
        return build([ad.Tensor(a) for a in arrays]).item()

    for which, t in enumerate(tensors):
        num = central_diff(as_scalar, xs, which, h=h)
        got = t.grad if t.grad is not None else np.zeros_like(num)
        denom = max(np.abs(num).max(), np.abs(got).max(), 1e-6)
        dev = np.abs(got - num).max() / denom
        assert dev <= rtol, f"input {which}: relative deviation {dev}"
