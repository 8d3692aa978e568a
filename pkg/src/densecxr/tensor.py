"""Taped reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation appends a node to the active :class:`Tape`.
Nodes are appended in execution order, so insertion order is already a
topological order and :func:`backward` simply walks the tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    InvalidArgumentError,
    InvalidShapeError,
    NoGraphError,
    NumericInstabilityError,
)

DTYPE = np.float64

# Largest float64 strictly below 1 and smallest positive subnormal.
_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.nextafter(0.0, 1.0)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    kind: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn
    output: "Tensor | None" = None


@dataclass
class Tape:
    """Append-only record of the operations executed since the last reset."""

    nodes: list[_Node] = field(default_factory=list)
    generation: int = 0

    def record(self, kind: str, inputs: tuple["Tensor", ...], backward: BackwardFn,
               output: "Tensor") -> int:
        node = _Node(kind, inputs, backward, output)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = [Tape()]
        self.grad_enabled = True


_state = _ThreadState()


def active_tape() -> Tape:
    return _state.tapes[-1]


@contextlib.contextmanager
def graph_context() -> Iterator[Tape]:
    """Run a block against a private tape (one per training step or heatmap job)."""
    tape = Tape()
    _state.tapes.append(tape)
    try:
        yield tape
    finally:
        _state.tapes.pop()
        tape.reset()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """n-dimensional float64 array that may participate in a recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_generation",
                 "_node", "_retain")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._generation = -1
        self._node: int | None = None
        self._retain = False

    # -- basic accessors ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flattened view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate tensor after backward."""
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _on_tape(self, tape: Tape) -> bool:
        return (self._node is not None and self._tape is tape
                and self._generation == tape.generation)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, reset: bool = True) -> None:
        backward(self, reset=reset)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_op(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it if any input needs a gradient.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    inputs = tuple(inputs)
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == DTYPE else out_data.astype(DTYPE)
    out.grad = None
    out.requires_grad = needs
    out.name = None
    out._tape = None
    out._generation = -1
    out._node = None
    out._retain = False
    if needs:
        tape = active_tape()
        out._tape = tape
        out._generation = tape.generation
        out._node = tape.record(kind, inputs, backward_fn, out)
    return out


def backward(loss: Tensor, reset: bool = True) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires it.

    Intermediate tensors receive ``.grad`` only when ``retain_grad()`` was called.
    """
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if not loss._on_tape(tape):
        raise NoGraphError("loss was not produced by recorded operations on the active tape")

    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.output is not None and node.output._retain:
            node.output.grad = g.copy()
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._on_tape(tape):
                if inp._node in grads:
                    grads[inp._node] = grads[inp._node] + gi
                else:
                    grads[inp._node] = gi
            elif inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    if reset:
        tape.reset()


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op("div", ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("log", np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_op("mean", np.asarray(out), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return make_op("getitem", np.array(x.data[index]), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so every output lies strictly inside (0, 1)."""
    xd = x.data
    ez = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return make_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (N, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(
            f"linear input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return make_op("linear", out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    out = out + bias.data
    return make_op("linear", out, (x, weight, bias),
                   lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    if not tensors:
        raise InvalidArgumentError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise InvalidShapeError(f"cannot concatenate shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return make_op("concat", out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, H'*W') patch matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an (N, C_in, H, W) batch with a (C_out, C_in, kH, kW) kernel."""
    if stride < 1:
        raise InvalidArgumentError(f"stride must be a positive integer, got {stride}")
    if padding < 0:
        raise InvalidArgumentError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise InvalidShapeError(
            f"conv2d input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise InvalidShapeError(
            f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise InvalidShapeError(f"conv2d bias {bias.shape} does not match kernel {kernel.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    kd = kernel.data
    kmat = kd.reshape(o, -1)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        xr = x.data.reshape(n, c, h * w)
        out = (kmat @ xr).reshape(n, o, h, w)

        def bwd(g):
            gr = g.reshape(n, o, h * w)
            gx = (kmat.T @ gr).reshape(n, c, h, w)
            gk = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0).reshape(kd.shape)
            return (gx, gk) + ((gr.sum(axis=(0, 2)),) if bias is not None else ())
    else:
        cols = _im2col(x.data, kh, kw, stride, padding)
        out = (kmat @ cols).reshape(n, o, ho, wo)

        def bwd(g):
            gr = g.reshape(n, o, ho * wo)
            gk = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kd.shape)
            if stride == 1 and padding <= kh - 1 and padding <= kw - 1 and kh == kw:
                # input gradient = correlation of the re-padded output gradient
                # with the spatially flipped, in/out-swapped kernel
                flipped = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gcols = _im2col(g, kh, kw, 1, kh - 1 - padding)
                gx = (flipped @ gcols).reshape(n, c, h, w)
            else:
                gcols = (kmat.T @ gr).reshape(n, c, kh, kw, ho, wo)
                hp, wp = h + 2 * padding, w + 2 * padding
                gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
            return (gx, gk) + ((gr.sum(axis=(0, 2)),) if bias is not None else ())

    if bias is not None:
        out = out + bias.data[None, :, None, None]
        return make_op("conv2d", out, (x, kernel, bias), bwd)
    return make_op("conv2d", out, (x, kernel), bwd)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` average pooling (stride equals size)."""
    if x.ndim != 4:
        raise InvalidShapeError(f"avg_pool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise InvalidShapeError(f"avg_pool2d needs spatial dims divisible by {size}, got {x.shape}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def bwd(g):
        return (np.repeat(np.repeat(g * scale, size, axis=2), size, axis=3),)

    return make_op("avg_pool2d", out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise InvalidShapeError(f"global_avg_pool expects non-empty (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),)

    return make_op("global_avg_pool", out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization and regularization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization for (N, C) or (N, C, H, W) inputs.

    In training mode the batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise InvalidShapeError(f"batch_norm input {x.shape} vs {gamma.shape[0]} channels")
    shape = x.shape
    n, c = shape[0], shape[1]
    # work on an (N, C, M) view so reductions run over the contiguous axis first
    xd = x.data.reshape(n, c, -1)
    gd = gamma.data[:, None]

    def csum(a):
        return a.sum(axis=2).sum(axis=0)

    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[:, None]) * inv[:, None]
        out = gd * xhat + beta.data[:, None]

        def bwd_eval(g):
            g = g.reshape(n, c, -1)
            return ((g * (gd * inv[:, None])).reshape(shape),
                    np.einsum("ncm,ncm->c", g, xhat), csum(g))

        return make_op("batch_norm", out.reshape(shape), (x, gamma, beta), bwd_eval)

    m = n * xd.shape[2]
    mu = csum(xd) / m
    centered = xd - mu[:, None]
    var = np.einsum("ncm,ncm->c", centered, centered) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[:, None]
    out = gd * xhat + beta.data[:, None]
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var

    def bwd(g):
        g = g.reshape(n, c, -1)
        gbeta = csum(g)
        ggamma = np.einsum("ncm,ncm->c", g, xhat)
        scale = (gamma.data * inv / m)[:, None]
        gx = scale * (m * g - gbeta[:, None] - xhat * ggamma[:, None])
        return (gx.reshape(shape), ggamma, gbeta)

    return make_op("batch_norm", out.reshape(shape), (x, gamma, beta), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the gradient by ``factor``.

    Used to plant a deliberate backward fault when validating the gradient checker.
    """
    return make_op("scale_grad", x.data.copy(), (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tolerance]

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def finite_difference_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
                            step: float = 1e-5, tolerance: float = 1e-4,
                            names: Sequence[str] | None = None,
                            max_elements: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences, element by element.

    ``fn`` must rebuild the scalar loss from the current contents of ``params``
    and be deterministic. The reported error per parameter is the maximum over
    its elements of ``|a - n| / max(|a|, |n|, 1e-12)``. With ``max_elements``
    set, larger parameters are probed at that many elements drawn with ``seed``.
    """
    if step <= 0:
        raise InvalidArgumentError(f"finite-difference step must be positive, got {step}")
    if names is None:
        names = [p.name or f"param{i}" for i, p in enumerate(params)]

    with graph_context():
        for p in params:
            p.zero_grad()
        loss = fn()
        backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    errors: dict[str, float] = {}
    rng = np.random.default_rng(seed)
    with no_grad():
        for name, p, ga in zip(names, params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            worst = 0.0
            probes = range(flat.size)
            if max_elements is not None and flat.size > max_elements:
                probes = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            for i in probes:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn().data)
                flat[i] = orig - step
                fm = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericInstabilityError(
                        f"non-finite function value while probing {name}[{i}]")
                num = (fp - fm) / (2.0 * step)
                a = float(gflat[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-12)
                worst = max(worst, err)
            errors[name] = worst
    return GradCheckReport(errors, tolerance, step)
