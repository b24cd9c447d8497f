"""Tape-based reverse-mode autodiff over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :func:`backward` replays them in reverse. Outside a tape nothing is
recorded, which is how evaluation forwards run.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutogradError", "NonFiniteError", "ShapeError", "Tensor", "Tape",
    "backward", "set_precision", "get_precision", "precision", "dtype",
    "matmul", "add", "add_row", "sub", "mul", "mul_row", "scale", "relu", "gelu",
    "silu", "identity", "activation", "softmax", "layer_norm", "embedding",
    "cross_entropy", "reshape", "transpose", "mask_fill", "sum_all", "mean_all",
    "grad_check", "GradCheckReport",
]


class AutogradError(RuntimeError):
    pass


class NonFiniteError(AutogradError, FloatingPointError):
    pass


class ShapeError(AutogradError, ValueError):
    pass


_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def get_precision() -> str:
    return getattr(_state, "precision", "float32")


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _state.precision = name


def dtype():
    return _PRECISIONS[get_precision()]


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense array plus optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", *, _check: bool = True):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype())
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if _check:
            _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.name or '?'}, shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar for the common ops
    def __matmul__(self, other): return matmul(self, other)
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward/backward pair.

    Use as a context manager; ops run inside the block are recorded when at
    least one input requires a gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._owner: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, inputs: Sequence[Tensor], output: Tensor, fn: Callable) -> None:
        if self.consumed:
            raise AutogradError("tape already consumed")
        self._owner[id(output)] = len(self.nodes)
        self.nodes.append(_Node(tuple(inputs), output, fn))

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._owner

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(loss, self)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data, _check=False, name=name)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Returns a map ``id(tensor) -> gradient`` covering every tensor on the tape
    that requires a gradient (zeros for those unreachable from ``loss``).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = _current_tape()
        if tape is None:
            raise AutogradError("no tape given and none active")
    if tape.consumed:
        raise AutogradError("tape already consumed")
    if not tape.owns(loss):
        raise AutogradError("loss is not connected to the tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        for t in node.inputs:
            if t.requires_grad and not tape.owns(t):
                leaves[id(t)] = t
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result: dict[int, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            _check_finite(g, f"gradient of {leaf.name or 'leaf'}")
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[key] = leaf.grad
    tape.nodes.clear()
    return result


# ---------------------------------------------------------------- ops

def _need_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m)."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(ad @ bd, (a, b), fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Bias add: ``b`` (n,) broadcast over the leading axes of ``x`` (..., n)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_row: {x.shape} + {b.shape}")
    n = b.shape[0]
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(0)), "add_row")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_row(x: Tensor, v: Tensor) -> Tensor:
    """Elementwise scale by ``v`` (n,) broadcast over leading axes of ``x`` (..., n)."""
    if v.data.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"mul_row: {x.shape} * {v.shape}")
    xd, vd = x.data, v.data
    n = vd.shape[0]
    return _emit(xd * vd, (x, v),
                 lambda g: (g * vd, (g * xd).reshape(-1, n).sum(0)), "mul_row")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * np.asarray(c, dtype=x.data.dtype), (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit(x.data * pos, (x,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(out, (x,), fn, "gelu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _emit(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu, "gelu": gelu, "silu": silu, "identity": identity,
}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {name!r}") from None


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xd = x.data
    e = np.exp(xd - xd.max(-1, keepdims=True))
    s = e / e.sum(-1, keepdims=True)
    return _emit(s, (x,), lambda g: (s * (g - (g * s).sum(-1, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply per-feature gain and bias."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} vs width {n}")
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd, bd = gamma.data, beta.data

    def fn(g):
        g2 = g.reshape(-1, n)
        dgamma = (g2 * xhat.reshape(-1, n)).sum(0)
        dbeta = g2.sum(0)
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(-1, keepdims=True))
        return dx, dgamma, dbeta

    return _emit(xhat * gd + bd, (x, gamma, beta), fn, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids are integers in ``[0, rows)``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding index out of range [0, {rows})")

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(table.data[ids], (table,), fn, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits`` (N, V).

    ``weights`` (N,) selects/weights rows; the mean is over the weight sum.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects (N, V) logits")
    N, V = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != N:
        raise ShapeError(f"cross_entropy: {N} rows but {targets.shape[0]} targets")
    if targets.dtype.kind not in "iu":
        raise TypeError("targets must be integers")
    if N and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target index out of range [0, {V})")
    ld = logits.data
    w = np.ones(N, dtype=ld.dtype) if weights is None else np.asarray(weights, dtype=ld.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    shifted = ld - ld.max(1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(N)
    nll = -logp[rows, targets]
    loss = np.asarray((nll * w).sum() / total, dtype=ld.dtype)

    def fn(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (w / total)[:, None] * g,)

    return _emit(loss, (logits,), fn, "cross_entropy")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def mask_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant (no gradient flows there)."""
    mask = np.broadcast_to(mask, x.shape)
    keep = ~mask
    return _emit(np.where(mask, np.asarray(value, x.data.dtype), x.data), (x,),
                 lambda g: (g * keep,), "mask_fill")


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum(), x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit(np.asarray(x.data.mean(), x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


# ---------------------------------------------------------------- gradient checking

class GradCheckReport:
    def __init__(self, per_param: dict[str, float], tolerance: float):
        self.per_param = per_param
        self.tolerance = tolerance

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __repr__(self) -> str:
        return f"GradCheckReport(passed={self.passed}, max_rel_error={self.max_rel_error:.3e})"


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], tolerance: float = 1e-4,
               step: float = 1e-5, floor: float = 1e-6, max_params: int = 1000) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the report
    keeps the worst entry per parameter.
    """
    params = list(params)
    if sum(p.data.size for p in params) > max_params:
        raise ValueError(f"grad_check limited to {max_params} scalar parameters")
    if not params:
        return GradCheckReport({}, tolerance)
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        out = fn()
    backward(out, tape)
    report = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = fn().item()
            flat[j] = orig - step
            fm = fn().item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * step)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differences")
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report[p.name or f"param{i}"] = worst
    return GradCheckReport(report, tolerance)
