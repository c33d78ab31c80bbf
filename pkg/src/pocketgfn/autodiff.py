"""Dense float64 tensors with reverse-mode differentiation.

Define-by-run: while a :class:`Tape` is active, every primitive records a
node holding its inputs and a local vector-Jacobian rule.  ``backward`` walks
the recorded nodes in reverse creation order, which is a valid reverse
topological order because an operation can only consume tensors that already
exist.  Without an active tape, primitives run as plain numpy and record
nothing, so inference-only code pays no bookkeeping cost.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes cannot be combined."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class DiffTensor:
    """A dense float64 array with an optional gradient buffer.

    ``data`` is treated as read-only by every primitive; mutating it in place
    invalidates any tape that recorded the tensor (``finite_diff_check`` does
    so deliberately, between tapes).
    """

    __slots__ = ("data", "grad", "node_id", "_tape")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad: np.ndarray | None = None
        self.node_id: int = -1
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, on_tape={self._tape is not None})"

    # Operator sugar; scalars and arrays are lifted to constant leaves.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


@dataclass
class TapeNode:
    """One recorded primitive: inputs, output, and the local gradient rule.

    ``vjp`` maps the output gradient to one gradient per input (``None`` for
    inputs the rule does not differentiate).
    """

    inputs: tuple[DiffTensor, ...]
    output: DiffTensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitives; inputs always precede their consumers."""

    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()


def tensor(data, copy: bool = True) -> DiffTensor:
    """Create a leaf tensor (not recorded on any tape)."""
    arr = np.array(data, dtype=np.float64, copy=copy)
    return DiffTensor(arr)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[DiffTensor, ...], vjp) -> DiffTensor:
    out = DiffTensor(out_data)
    tape = active_tape()
    if tape is not None:
        out.node_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(TapeNode(inputs, out, vjp))
    return out


def backward(loss: DiffTensor) -> None:
    """Populate ``grad`` on every ancestor of ``loss``.

    ``loss`` must be a scalar (a single element).  Re-running backward on a
    tape that was already consumed is an error; rebuild the forward pass.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is a constant: it was not recorded on any tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; rebuild the forward pass")
    tape.consumed = True

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += gi


def zero_grads(tensors: Sequence[DiffTensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes that numpy broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    return add(a, neg(b))


def neg(a: DiffTensor) -> DiffTensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def scale(a: DiffTensor, factor: float) -> DiffTensor:
    f = float(factor)
    return _record(a.data * f, (a,), lambda g: (g * f,))


def square(a: DiffTensor) -> DiffTensor:
    return mul(a, a)


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul takes 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp)


def _parse_einsum2(spec: str) -> tuple[str, str, str]:
    lhs, _, out_sub = spec.partition("->")
    if not _:
        raise DimensionError(f"einsum2 spec needs an explicit output: {spec!r}")
    parts = lhs.split(",")
    if len(parts) != 2:
        raise DimensionError(f"einsum2 takes exactly two operands: {spec!r}")
    a_sub, b_sub = parts
    for sub in (a_sub, b_sub):
        if len(set(sub)) != len(sub):
            raise DimensionError(f"einsum2 forbids repeated indices within one operand: {spec!r}")
    # The gradient of an operand is itself an einsum of (output grad, other
    # operand), which only reconstructs indices present in that pair.
    for sub, other in ((a_sub, b_sub), (b_sub, a_sub)):
        missing = set(sub) - set(out_sub) - set(other)
        if missing:
            raise DimensionError(
                f"einsum2 index {sorted(missing)} of {spec!r} appears in neither the "
                "output nor the other operand, so its gradient is not defined here"
            )
    return a_sub, b_sub, out_sub


def einsum2(spec: str, a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Two-operand einsum with reverse-mode support.

    Restricted to specs with no repeated index inside a single operand and
    where every operand index appears in the output or the other operand.
    """
    a_sub, b_sub, out_sub = _parse_einsum2(spec)
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError:
        raise DimensionError(f"einsum2 {spec!r} rejects shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data)
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data)
        return ga, gb

    return _record(out, (a, b), vjp)


def relu(a: DiffTensor) -> DiffTensor:
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), vjp)


def tanh(a: DiffTensor) -> DiffTensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), vjp)


def exp(a: DiffTensor) -> DiffTensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def log(a: DiffTensor) -> DiffTensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record(out, (a,), vjp)


def sqrt(a: DiffTensor) -> DiffTensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), vjp)


def _check_mask(x: DiffTensor, mask: np.ndarray | None) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match input shape {x.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("softmax row is fully masked")
    return mask


def softmax_rows(x: DiffTensor, mask: np.ndarray | None = None) -> DiffTensor:
    """Numerically stable softmax over the last axis.

    ``mask`` marks the entries that participate; masked entries come out as
    exactly 0 and receive exactly zero gradient.
    """
    mask = _check_mask(x, mask)
    data = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = np.max(data, axis=-1, keepdims=True)
    e = np.exp(data - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = e / s

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (x,), vjp)


def log_softmax_rows(x: DiffTensor, mask: np.ndarray | None = None) -> DiffTensor:
    """Log of softmax over the last axis; masked entries are -inf."""
    mask = _check_mask(x, mask)
    data = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = np.max(data, axis=-1, keepdims=True)
    shifted = data - m
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = shifted - np.log(s)
    soft = e / s

    def vjp(g):
        gsum = g.sum(axis=-1, keepdims=True)
        dx = g - soft * gsum
        if mask is not None:
            dx = np.where(mask, dx, 0.0)
        return (dx,)

    return _record(out, (x,), vjp)


def layer_norm_rows(x: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Zero-mean unit-variance normalization over the last axis (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def vjp(g):
        gmean = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gmean - out * gy),)

    return _record(out, (x,), vjp)


def concat(parts: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    parts = list(parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"concat along axis {axis} rejects shapes {shapes}") from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), vjp)


def gather_rows(x: DiffTensor, indices) -> DiffTensor:
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), vjp)


def reshape(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), vjp)


def permute(x: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), vjp)


def sum_all(x: DiffTensor) -> DiffTensor:
    out = np.array([x.data.sum()])

    def vjp(g):
        return (np.full(x.shape, g[0]),)

    return _record(out, (x,), vjp)


def mean_rows(x: DiffTensor) -> DiffTensor:
    """Arithmetic mean over axis 0 of a 2-D tensor, kept as shape (1, c)."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows takes a 2-D tensor, got {x.shape}")
    n = x.shape[0]
    weights = tensor(np.full(n, 1.0 / n))
    return reshape(einsum2("nc,n->c", x, weights), (1, x.shape[1]))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"finite-diff {status}: max rel err {self.max_rel_err:.3e} vs tol {self.tol:.1e} ({self.n_checked} entries)"


def finite_diff_check(
    f: Callable[[DiffTensor], DiffTensor],
    x: DiffTensor,
    tol: float = 1e-4,
    step: float = 1e-5,
    seed: int = 0,
) -> FiniteDiffReport:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f`` must be deterministic.  Non-scalar outputs are contracted with fixed
    random coefficients so a single backward pass covers them.  ``x.data`` is
    perturbed in place during the sweep and restored afterwards.
    """
    probe = f(x)
    if not isinstance(probe, DiffTensor):
        raise TypeError("finite_diff_check expects f to return a DiffTensor")
    coeffs = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalarize_value(t: DiffTensor) -> float:
        return float((t.data * coeffs).sum())

    with Tape():
        y = f(x)
        loss = sum_all(mul(y, tensor(coeffs)))
        saved_grad = x.grad
        x.grad = None
        backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        x.grad = saved_grad

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = scalarize_value(f(x))
        flat[i] = orig - step
        f_minus = scalarize_value(f(x))
        flat[i] = orig
        nflat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return FiniteDiffReport(max_rel_err=max_rel, tol=tol, passed=max_rel < tol, n_checked=flat.size)
