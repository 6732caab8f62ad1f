"""Dense float64 tensors with reverse-mode gradient accumulation.

Each operation records its inputs and a closure mapping the output gradient
to input gradients. ``Tensor.backward`` linearizes the recorded graph into a
tape (topological order) and replays it in reverse.
"""

import contextlib
import hashlib
import json
import struct
from collections.abc import Iterator

import numpy as np

from .errors import ContractError, DataError, DimensionError, ParameterError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference on frozen parameters)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(
            data, np.ndarray
        ) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward):
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        tape = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), back)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def back(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape),
            )

        return Tensor._make(out, (a, b), back)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise ParameterError("only scalar exponents are supported")
        a = self

        def back(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._make(a.data**exponent, (a,), back)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(a.data[index], (a,), back)

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def swapaxes(self, a1, a2):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- free functions --------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), back)


def einsum(subscripts, *operands):
    """``np.einsum`` with gradients.

    Subscripts must be explicit (``"ij,jk->ik"``), without ellipsis and without
    an index repeated inside one operand.
    """
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise DimensionError(f"einsum {subscripts!r} got {len(ops)} operands")
    try:
        out = np.einsum(subscripts, *[o.data for o in ops], optimize=True)
    except ValueError as exc:
        shapes = [o.shape for o in ops]
        raise DimensionError(f"einsum {subscripts!r} shape mismatch: {shapes}") from exc

    def back(g):
        grads = []
        for i, sub in enumerate(in_subs):
            if not ops[i].requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            expr = ",".join([out_sub] + others) + "->" + sub
            gi = np.einsum(expr, g, *[o.data for j, o in enumerate(ops) if j != i], optimize=True)
            grads.append(np.broadcast_to(gi, ops[i].shape).copy())
        return tuple(grads)

    return Tensor._make(out, ops, back)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    x = as_tensor(x)
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def softmax_rows(x, shift=0.0):
    """Softmax along the last axis, stabilised by max subtraction.

    ``shift`` is added to every logit first; the result must not depend on it.
    """
    x = as_tensor(x)
    z = x.data + shift
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def frobenius_inner(a, b, axis=None):
    """Sum of elementwise products; ``axis`` restricts the reduction."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"frobenius_inner shape mismatch: {a.shape} vs {b.shape}")
    return (a * b).sum(axis=axis)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return Tensor._make(out, ts, back)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._make(out, ts, back)


def where(mask, a, b):
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is a plain array."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def back(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        )

    return Tensor._make(out, (a, b), back)


def causal_conv1d(x, kernel, dilation=1):
    """Causal convolution along the time axis of a ``(..., T, N, F)`` tensor.

    ``kernel`` has shape ``(k, F, F_out)``; tap ``i`` reads input time
    ``t - (k - 1 - i) * dilation``. Inputs are left padded with zeros so the
    output keeps length ``T``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or kernel.shape[0] < 1:
        raise ParameterError(f"kernel must have shape (k>=1, F, F'), got {kernel.shape}")
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if x.ndim < 3 or x.shape[-1] != kernel.shape[1]:
        raise DimensionError(
            f"causal_conv1d shape mismatch: input {x.shape}, kernel {kernel.shape}"
        )
    k = kernel.shape[0]
    steps = x.shape[-3]
    pad = (k - 1) * dilation
    width = [(0, 0)] * x.ndim
    width[-3] = (pad, 0)
    xp = np.pad(x.data, width)
    out = np.zeros(x.shape[:-1] + (kernel.shape[2],))
    for i in range(k):
        start = i * dilation
        out += xp[..., start : start + steps, :, :] @ kernel.data[i]

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        g2 = g.reshape(-1, g.shape[-1])
        for i in range(k):
            start = i * dilation
            window = xp[..., start : start + steps, :, :]
            gxp[..., start : start + steps, :, :] += g @ kernel.data[i].T
            gk[i] = window.reshape(-1, window.shape[-1]).T @ g2
        gx = gxp[..., pad:, :, :] if pad else gxp
        return gx, gk

    return Tensor._make(out, (x, kernel), back)


# -- parameters --------------------------------------------------------------------

_MAGIC = b"RIPCN\x00"
_FORMAT_VERSION = 1


class ParamStore:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def include(self, other):
        """Share every tensor of ``other`` under the same name."""
        for name, t in other.items():
            if name in self._params:
                raise ParameterError(f"duplicate parameter name {name!r}")
            self._params[name] = t

    def arrays(self):
        return {n: t.data.copy() for n, t in self.items()}

    def load_arrays(self, arrays, strict=True):
        for name, t in self.items():
            if name not in arrays:
                if strict:
                    raise DataError(f"checkpoint lacks parameter {name!r}")
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint shape {value.shape}, model {t.shape}"
                )
            t.data = value.copy()

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def save(self, path, extra=None):
        write_checkpoint(path, {**self.arrays(), **(extra or {})})

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(
                {n: {"shape": list(t.shape), "data": t.data.ravel().tolist()} for n, t in self.items()},
                fh,
                indent=1,
            )


def write_checkpoint(path, arrays):
    """Write ``{name: array}`` in the flat binary checkpoint layout."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        for name in sorted(arrays):
            value = np.asarray(arrays[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            for d in value.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(np.ascontiguousarray(value).tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(_MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != _FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        value = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = value.astype(np.float64)
    return out


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
