"""Reverse-mode automatic differentiation over dense float64 arrays.

Deliberately small: 0-/1-/2-d tensors, the operations the encoder and the
training losses actually need, and a tape that is replayed exactly once per
backward pass. There is no broadcasting beyond scalar-with-tensor, no views,
and no in-place arithmetic; shape mismatches fail loudly instead.

Gradient conventions that matter for tests:
  * relu passes zero gradient at exactly 0 (subgradient choice),
  * max reductions send the whole gradient to the lowest-index argmax on ties.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

Array = np.ndarray


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    ``.grad`` when :func:`backward` runs on a scalar derived from them.
    Repeated backward calls add up, which is what gradient accumulation in
    the trainer relies on; call :meth:`zero_grad` between optimizer steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; everything routes through the module functions
    # so the tape sees one canonical set of operations.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class TapeNode:
    """One recorded operation: inputs, output, and its local gradient rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[Array], tuple[Array | None, ...]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Topologically ordered record of the operations behind one output.

    ``nodes[i]``'s inputs are all produced by nodes earlier in the list, so
    replaying the list in reverse visits every operation exactly once with
    its output gradient fully accumulated.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[TapeNode]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[TapeNode] = []
        seen: set[int] = set()
        stack: list[tuple[TapeNode, bool]] = []
        if out.node is not None:
            stack.append((out.node, False))
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp.node, False))
        return cls(order)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _record(op: str, inputs: Sequence[Tensor], out_data: Array,
            backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    out = Tensor(out_data)
    if any(_needs_grad(t) for t in inputs):
        out.node = TapeNode(op, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``."""
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = Tape.from_output(loss)
    grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for inp, g_in in zip(node.inputs, node.backward_fn(g_out)):
            if g_in is None:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = g_in if prev is None else prev + g_in
            if inp.node is None and inp.requires_grad:
                leaves[id(inp)] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise operations


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal nor scalar")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    # the only broadcast allowed is scalar-with-tensor
    return np.asarray(g.sum(), dtype=np.float64)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("add", a, b)
    out = a.data + b.data

    def bwd(g: Array):
        ga = _reduce_to(g, a.data.shape) if _needs_grad(a) else None
        gb = _reduce_to(g, b.data.shape) if _needs_grad(b) else None
        return ga, gb

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("sub", a, b)
    out = a.data - b.data

    def bwd(g: Array):
        ga = _reduce_to(g, a.data.shape) if _needs_grad(a) else None
        gb = _reduce_to(-g, b.data.shape) if _needs_grad(b) else None
        return ga, gb

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes("mul", a, b)
    out = a.data * b.data

    def bwd(g: Array):
        ga = _reduce_to(g * b.data, a.data.shape) if _needs_grad(a) else None
        gb = _reduce_to(g * a.data, b.data.shape) if _needs_grad(b) else None
        return ga, gb

    return _record("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bwd(g: Array):
        return (g * c,) if _needs_grad(x) else (None,)

    return _record("scale", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g: Array):
        return (g * (x.data > 0),) if _needs_grad(x) else (None,)

    return _record("relu", (x,), out, bwd)


def log1p(x: Tensor) -> Tensor:
    if np.any(x.data <= -1.0):
        raise DomainError("log1p requires all inputs > -1")
    out = np.log1p(x.data)

    def bwd(g: Array):
        return (g / (1.0 + x.data),) if _needs_grad(x) else (None,)

    return _record("log1p", (x,), out, bwd)


# ---------------------------------------------------------------------------
# matrix and reduction operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g: Array):
        ga = g @ b.data.T if _needs_grad(a) else None
        gb = a.data.T @ g if _needs_grad(b) else None
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose requires a 2-d tensor, got shape {x.data.shape}")
    out = np.ascontiguousarray(x.data.T)

    def bwd(g: Array):
        return (np.ascontiguousarray(g.T),) if _needs_grad(x) else (None,)

    return _record("transpose", (x,), out, bwd)


def _check_axis(x: Tensor, axis: int) -> None:
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.data.shape}")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    _check_axis(x, axis)
    out = x.data.sum(axis=axis)

    def bwd(g: Array):
        if not _needs_grad(x):
            return (None,)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _record("sum_axis", (x,), out, bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    _check_axis(x, axis)
    n = x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def bwd(g: Array):
        if not _needs_grad(x):
            return (None,)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape).copy(),)

    return _record("mean_axis", (x,), out, bwd)


def max_axis(x: Tensor, axis: int) -> Tensor:
    _check_axis(x, axis)
    out = x.data.max(axis=axis)
    idx = np.argmax(x.data, axis=axis)  # first occurrence == lowest index on ties

    def bwd(g: Array):
        if not _needs_grad(x):
            return (None,)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return _record("max_axis", (x,), out, bwd)


# ---------------------------------------------------------------------------
# softmax family (numerically stable via max shift)


def _check_vector(op: str, x: Tensor) -> None:
    if x.data.ndim != 1 or x.data.size < 1:
        raise ShapeError(f"{op} requires a non-empty 1-d tensor, got shape {x.data.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op}: input contains non-finite values")


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) of a 1-d tensor, overflow-free for |x| up to ~1e300."""
    _check_vector("logsumexp", x)
    m = x.data.max()
    e = np.exp(x.data - m)
    s = e.sum()
    out = np.asarray(m + math.log(s))
    p = e / s

    def bwd(g: Array):
        return (g * p,) if _needs_grad(x) else (None,)

    return _record("logsumexp", (x,), out, bwd)


def softmax(x: Tensor) -> Tensor:
    _check_vector("softmax", x)
    m = x.data.max()
    e = np.exp(x.data - m)
    p = e / e.sum()

    def bwd(g: Array):
        if not _needs_grad(x):
            return (None,)
        return (p * (g - np.dot(g, p)),)

    return _record("softmax", (x,), p, bwd)


def softmax_logsumexp(x: Tensor) -> tuple[Tensor, Tensor]:
    """Stable softmax probabilities together with the log-sum-exp scalar."""
    return softmax(x), logsumexp(x)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis of a 2-d tensor; rows may contain -inf."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_softmax requires a 2-d tensor, got shape {x.data.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g: Array):
        if not _needs_grad(x):
            return (None,)
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("row_softmax", (x,), p, bwd)


def logsumexp_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"logsumexp_rows requires a 2-d tensor, got shape {x.data.shape}")
    m = x.data.max(axis=1)
    e = np.exp(x.data - m[:, None])
    s = e.sum(axis=1)
    out = m + np.log(s)
    p = e / s[:, None]

    def bwd(g: Array):
        return (p * g[:, None],) if _needs_grad(x) else (None,)

    return _record("logsumexp_rows", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gather / stack / structural operations


def take_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; duplicate indices accumulate gradient."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows requires a 2-d tensor, got shape {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows requires a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.data.shape[0]} rows")
    out = x.data[idx]

    def bwd(g: Array):
        if not _needs_grad(x):
            return (None,)
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("take_rows", (x,), out, bwd)


def take_per_row(x: Tensor, col_indices) -> Tensor:
    """out[i] = x[i, col_indices[i]] for a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_per_row requires a 2-d tensor, got shape {x.data.shape}")
    cols = np.asarray(col_indices, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    if cols.shape != rows.shape:
        raise ShapeError("take_per_row: one column index per row required")
    if cols.size and (cols.min() < 0 or cols.max() >= x.data.shape[1]):
        raise ShapeError(f"take_per_row: column index out of range for {x.data.shape[1]} columns")
    out = x.data[rows, cols]

    def bwd(g: Array):
        if not _needs_grad(x):
            return (None,)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record("take_per_row", (x,), out, bwd)


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("stack_scalars requires at least one tensor")
    for t in xs:
        if t.data.shape != ():
            raise ShapeError(f"stack_scalars requires scalars, got shape {t.data.shape}")
    out = np.array([t.data for t in xs], dtype=np.float64)

    def bwd(g: Array):
        return tuple(np.asarray(g[i]) if _needs_grad(t) else None for i, t in enumerate(xs))

    return _record("stack_scalars", tuple(xs), out, bwd)


def stack_rows(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("stack_rows requires at least one tensor")
    width = xs[0].data.shape
    for t in xs:
        if t.data.ndim != 1 or t.data.shape != width:
            raise ShapeError("stack_rows requires equal-length 1-d tensors")
    out = np.stack([t.data for t in xs])

    def bwd(g: Array):
        return tuple(g[i] if _needs_grad(t) else None for i, t in enumerate(xs))

    return _record("stack_rows", tuple(xs), out, bwd)


def pad_cols(x: Tensor, n: int) -> Tensor:
    """Append n zero columns to a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"pad_cols requires a 2-d tensor, got shape {x.data.shape}")
    if n < 0:
        raise ShapeError("pad_cols: n must be >= 0")
    out = np.concatenate([x.data, np.zeros((x.data.shape[0], n))], axis=1)

    def bwd(g: Array):
        return (g[:, : x.data.shape[1]].copy(),) if _needs_grad(x) else (None,)

    return _record("pad_cols", (x,), out, bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalization with a learned per-column gain."""
    if x.data.ndim != 2 or gain.data.ndim != 1 or gain.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"rms_norm: got x {x.data.shape}, gain {gain.data.shape}")
    ncol = x.data.shape[1]
    r = np.sqrt((x.data * x.data).mean(axis=1) + eps)  # (rows,)
    y = x.data / r[:, None] * gain.data[None, :]

    def bwd(g: Array):
        gx = None
        ggain = None
        if _needs_grad(x):
            t = (g * gain.data[None, :] * x.data).sum(axis=1)
            gx = g * gain.data[None, :] / r[:, None] - x.data * (t / (ncol * r**3))[:, None]
        if _needs_grad(gain):
            ggain = (g * x.data / r[:, None]).sum(axis=0)
        return gx, ggain

    return _record("rms_norm", (x, gain), y, bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float) -> float:
    """Max relative error between f's analytic gradient at x and central differences.

    The relative error per coordinate is |analytic - central| / max(1e-8, |central|);
    a constant f therefore reports exactly 0 against the zero gradient.
    """
    if eps <= 0:
        raise ContractError("finite_difference_check requires eps > 0")
    saved_rg, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.data.shape != ():
            raise ContractError(f"finite_difference_check requires a scalar function, got shape {out.data.shape}")
        if not np.isfinite(out.data):
            raise NumericError("finite_difference_check: non-finite function value")
        backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        aflat = analytic.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(x).data)
            flat[i] = orig - eps
            f_minus = float(f(x).data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError("finite_difference_check: non-finite function value during probing")
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - central) / max(1e-8, abs(central))
            worst = max(worst, err)
        return worst
    finally:
        x.requires_grad = saved_rg
        x.grad = saved_grad


def grad_norm(tensors: Iterable[Tensor]) -> float:
    """Global L2 norm over the .grad buffers of the given tensors."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return math.sqrt(total)
