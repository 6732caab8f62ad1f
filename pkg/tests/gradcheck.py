"""Central finite-difference gradient checks shared by the test modules."""

from contextlib import contextmanager

import numpy as np

from ripcn.tensor import Tensor

STEP = 1e-5


def numeric_grad(fn, arrays, index, step=STEP):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays to a float."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    for pos in np.ndindex(target.shape):
        old = target[pos]
        target[pos] = old + step
        up = fn(base)
        target[pos] = old - step
        down = fn(base)
        target[pos] = old
        grad[pos] = (up - down) / (2 * step)
    return grad


def analytic_grads(build, arrays):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, tensors)]


def rel_error(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def check(build, arrays, step=STEP):
    """Largest relative error over all inputs between tape and finite-difference gradients."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = analytic_grads(build, arrays)

    def value(xs):
        return build(*[Tensor(x) for x in xs]).item()

    return max(rel_error(g, numeric_grad(value, arrays, i, step)) for i, g in enumerate(grads))


@contextmanager
def bound(store, names, tensors):
    """Temporarily replace named parameters in ``store`` with ``tensors``."""
    saved = {n: store[n] for n in names}
    for n, t in zip(names, tensors):
        store._params[n] = t
    try:
        yield
    finally:
        store._params.update(saved)


def check_params(store, names, forward, extra=()):
    """Gradient check of ``forward()`` (a Tensor) w.r.t. the named parameters and ``extra`` inputs.

    ``forward`` receives the extra input tensors positionally.
    """
    arrays = [store[n].data.copy() for n in names] + list(extra)

    def build(*ts):
        with bound(store, names, ts[: len(names)]):
            return forward(*ts[len(names):])

    return check(build, arrays)
