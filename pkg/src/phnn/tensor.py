"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The value type is a thin wrapper around a C-contiguous ``numpy`` float64
array. Operations record themselves on the active :class:`Tape` (entered via
``with Tape():``) whenever at least one input participates in gradient
computation; ``backward`` then replays the tape in reverse. Outside a tape
context every op is a plain numpy computation with no recording overhead.

Tensors are treated as immutable after creation except for gradient
accumulation into ``.grad``; a tape has a single writer.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GradError(RuntimeError):
    """Raised when backward() is called on an unsuitable tensor."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _participates(self) -> bool:
        return self.requires_grad or self.node is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("inputs", "output", "backward_fn", "tape")

    def __init__(self, inputs, output, backward_fn, tape):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of operations; execution order is a topological order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False


_TAPES: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def record_op(out: Tensor, inputs: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
    """Attach a tape node to ``out`` if recording is active and useful.

    ``backward_fn`` maps the upstream gradient of ``out`` to one gradient
    array (or None) per input, in order.
    """
    tape = active_tape()
    if tape is None:
        return
    if not any(t._participates() for t in inputs):
        return
    node = TapeNode(tuple(inputs), out, backward_fn, tape)
    out.node = node
    tape.nodes.append(node)


def _accumulate(t: Tensor, g: Optional[np.ndarray]):
    if g is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Populate ``.grad`` on every participating tensor reachable from loss.

    Gradients accumulate additively across multiple uses of a tensor. Each
    tape node is visited exactly once, in reverse execution order.
    """
    if loss.data.size != 1:
        raise GradError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GradError("backward() on a tensor detached from any tape")
    tape = loss.node.tape

    # restrict the sweep to nodes that feed the loss
    reachable: set[int] = set()
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable.add(id(node))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in reachable:
                stack.append(t.node)

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if id(node) not in reachable:
            continue
        dout = node.output.grad
        if dout is None:
            continue
        grads = node.backward_fn(dout)
        for t, g in zip(node.inputs, grads):
            if t._participates():
                _accumulate(t, g)


# ---------------------------------------------------------------------------
# ops


def _needs(*tensors: Tensor) -> tuple:
    return tuple(t._participates() for t in tensors)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Rank-2 classic; higher ranks need equal leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank>=2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul leading dims disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    na, nb = _needs(a, b)

    def bwd(dout):
        da = dout @ b.data.swapaxes(-1, -2) if na else None
        db = a.data.swapaxes(-1, -2) @ dout if nb else None
        return da, db

    record_op(out, (a, b), bwd)
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with OCkk filters (no kernel flip)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs NCHW input and OCkk weight, got {x.shape}, {w.shape}")
    N, C, H, W = x.data.shape
    O, Cw, kh, kw = w.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {w.shape}")
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    k = kh
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ShapeError(f"kernel {k} exceeds padded input {H + 2 * padding}x{W + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # N,C,Ho,Wo,k,k (view)
    out_nhwo = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = Tensor(np.ascontiguousarray(out_nhwo.transpose(0, 3, 1, 2)))
    Ho, Wo = out.data.shape[2], out.data.shape[3]
    nx, nw = _needs(x, w)

    def bwd(dout):
        dw = dx = None
        if nw:
            dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        if nx:
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    # dxp slice strided by the forward stride receives this offset's share
                    contrib = np.tensordot(dout, w.data[:, :, u, v], axes=([1], [0]))
                    dxp[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += \
                        contrib.transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + H, padding:padding + W]
            if padding:
                dx = np.ascontiguousarray(dx)
        return dx, dw

    record_op(out, (x, w), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def bwd(dout):
        return (dout * mask,)

    record_op(out, (x,), bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(dout):
        return dout, dout

    record_op(out, (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    na, nb = _needs(a, b)

    def bwd(dout):
        return (dout * b.data if na else None,
                dout * a.data if nb else None)

    record_op(out, (a, b), bwd)
    return out


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply a tensor by a scalar gate tensor (the one sanctioned broadcast)."""
    if alpha.data.size != 1:
        raise ShapeError(f"scale gate must be scalar, got shape {alpha.shape}")
    a = float(alpha.data.reshape(()))
    out = Tensor(x.data * a)
    nx, na = _needs(x, alpha)

    def bwd(dout):
        dx = dout * a if nx else None
        dalpha = np.sum(dout * x.data).reshape(alpha.data.shape) if na else None
        return dx, dalpha

    record_op(out, (x, alpha), bwd)
    return out


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (non-learnable) array, broadcast against x."""
    out = Tensor(x.data + c)
    if out.data.shape != x.data.shape:
        raise ShapeError(f"add_const must preserve shape: {x.shape} + const {np.shape(c)}")

    def bwd(dout):
        return (dout,)

    record_op(out, (x,), bwd)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: rows of a (N,d) matrix or channels of NCHW."""
    if b.data.ndim != 1:
        raise ShapeError(f"bias must be rank-1, got {b.shape}")
    if x.data.ndim == 2:
        if x.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"bias length {b.shape} does not fit {x.shape}")
        out = Tensor(x.data + b.data)
        reduce_axes = (0,)
    elif x.data.ndim == 3:
        if x.data.shape[2] != b.data.shape[0]:
            raise ShapeError(f"bias length {b.shape} does not fit {x.shape}")
        out = Tensor(x.data + b.data)
        reduce_axes = (0, 1)
    elif x.data.ndim == 4:
        if x.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"bias length {b.shape} does not fit {x.shape}")
        out = Tensor(x.data + b.data[None, :, None, None])
        reduce_axes = (0, 2, 3)
    else:
        raise ShapeError(f"add_bias supports rank 2/3/4 inputs, got {x.shape}")
    nx, nb = _needs(x, b)

    def bwd(dout):
        return (dout if nx else None,
                dout.sum(axis=reduce_axes) if nb else None)

    record_op(out, (x, b), bwd)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    if x.data.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(dout):
        inner = (dout * y).sum(axis=axis, keepdims=True)
        return (y * (dout - inner),)

    record_op(out, (x,), bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / var 1, then apply affine."""
    if eps <= 0:
        raise ShapeError(f"layer_norm eps must be > 0, got {eps}")
    d = x.data.shape[-1]
    if d == 0:
        raise ShapeError(f"layer_norm over empty last axis of {x.shape}")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not fit {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    nx, ng, nb = _needs(x, gain, bias)
    lead = tuple(range(x.data.ndim - 1))

    def bwd(dout):
        dg = (dout * xhat).sum(axis=lead) if ng else None
        db = dout.sum(axis=lead) if nb else None
        dx = None
        if nx:
            gdy = dout * gain.data
            m1 = gdy.mean(axis=-1, keepdims=True)
            m2 = (gdy * xhat).mean(axis=-1, keepdims=True)
            dx = (gdy - m1 - xhat * m2) * inv
        return dx, dg, db

    record_op(out, (x, gain, bias), bwd)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean natural-log cross-entropy of rank-2 logits against class indices."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (rows, classes) logits, got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"targets shape {t.shape} does not fit logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.data.shape[1]):
        raise ShapeError(f"target index out of range for {logits.data.shape[1]} classes")
    R = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(R), t]
    out = Tensor(np.mean(lse - picked))

    def bwd(dout):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(R), t] -= 1.0
        return (p * (float(dout) / R),)

    record_op(out, (logits,), bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))

    def bwd(dout):
        return (np.full_like(x.data, float(dout)),)

    record_op(out, (x,), bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.mean(x.data))

    def bwd(dout):
        return (np.full_like(x.data, float(dout) / n),)

    record_op(out, (x,), bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if shape.count(-1) > 1:
        raise ShapeError(f"at most one -1 allowed in reshape target {shape}")
    if -1 in shape:
        rest = int(np.prod([s for s in shape if s != -1]))
        if rest == 0 or x.data.size % rest:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}")
        shape = tuple(x.data.size // rest if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape))

    def bwd(dout):
        return (dout.reshape(x.data.shape),)

    record_op(out, (x,), bwd)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"bad transpose axes {axes} for shape {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def bwd(dout):
        return (np.ascontiguousarray(dout.transpose(inv)),)

    record_op(out, (x,), bwd)
    return out


def pad_channels(x: Tensor, total: int) -> Tensor:
    """Zero-pad the channel axis of an NCHW tensor up to ``total`` channels."""
    if x.data.ndim != 4:
        raise ShapeError(f"pad_channels expects NCHW, got {x.shape}")
    C = x.data.shape[1]
    if total < C:
        raise ShapeError(f"cannot pad {C} channels down to {total}")
    if total == C:
        return x
    out = Tensor(np.pad(x.data, ((0, 0), (0, total - C), (0, 0), (0, 0))))

    def bwd(dout):
        return (np.ascontiguousarray(dout[:, :C]),)

    record_op(out, (x,), bwd)
    return out


def slice_cols(x: Tensor, k: int) -> Tensor:
    """Keep the first k columns of a (N, d) tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols expects rank-2, got {x.shape}")
    if not 0 < k <= x.data.shape[1]:
        raise ShapeError(f"cannot keep {k} columns of {x.shape}")
    if k == x.data.shape[1]:
        return x
    out = Tensor(np.ascontiguousarray(x.data[:, :k]))

    def bwd(dout):
        full = np.zeros_like(x.data)
        full[:, :k] = dout
        return (full,)

    record_op(out, (x,), bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of NCHW, yielding (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    N, C, H, W = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(dout):
        return (np.broadcast_to(dout[:, :, None, None] / (H * W), x.data.shape).copy(),)

    record_op(out, (x,), bwd)
    return out


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a (V, d) table by an integer id array."""
    if weight.data.ndim != 2:
        raise ShapeError(f"embedding table must be rank-2, got {weight.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise ShapeError(f"id out of range for table {weight.shape}")
    out = Tensor(weight.data[ids])

    def bwd(dout):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids.reshape(-1), dout.reshape(-1, weight.data.shape[1]))
        return (dw,)

    record_op(out, (weight,), bwd)
    return out


def pick(v: Tensor, i: int) -> Tensor:
    """Read one entry of a rank-1 tensor as a scalar tensor."""
    if v.data.ndim != 1:
        raise ShapeError(f"pick expects rank-1, got {v.shape}")
    if not 0 <= i < v.data.shape[0]:
        raise ShapeError(f"index {i} out of range for {v.shape}")
    out = Tensor(v.data[i])

    def bwd(dout):
        g = np.zeros_like(v.data)
        g[i] = float(dout)
        return (g,)

    record_op(out, (v,), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is |analytic - central| divided by
    (|analytic| + |central| + 1e-12). ``f`` must be deterministic and return
    a scalar tensor.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        y = f(probe)
        if y.data.size != 1:
            raise ShapeError(f"finite_diff_check needs a scalar-valued f, got {y.shape}")
        backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().reshape(-1)
    central = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = keep - h
        lo = f(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = keep
        central[i] = (hi - lo) / (2 * h)

    a = analytic.reshape(-1)
    denom = np.abs(a) + np.abs(central) + 1e-12
    return float(np.max(np.abs(a - central) / denom))


def finite_diff_check_params(f: Callable[[], Tensor], params: Sequence[Tensor],
                             h: float = 1e-5) -> float:
    """Gradient check for parameters living inside a model.

    ``f`` rebuilds the scalar loss from current parameter values. Analytic
    gradients come from one recorded pass; central differences perturb each
    parameter's storage in place (restored afterwards).
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    for p in params:
        p.grad = None
    with Tape():
        y = f()
        if y.data.size != 1:
            raise ShapeError(f"finite_diff_check_params needs a scalar loss, got {y.shape}")
        backward(y)

    worst = 0.0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = f().item()
            flat[i] = keep - h
            lo = f().item()
            flat[i] = keep
            central = (hi - lo) / (2 * h)
            err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
