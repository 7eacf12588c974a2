"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Operations record onto the innermost active :class:`Graph`. Backward rules
are themselves written with recorded operations, so a backward pass run with
``create_graph=True`` extends the tape and can be differentiated again; this
is what makes exact second-order meta-gradients possible.

The public op set is deliberately closed: ``conv2d`` (3x3, stride 1, zero
padding 1), ``bias_add``, ``leaky_relu``, ``sigmoid``, ``add``, ``sub``,
``mul``, ``scale``, ``sum``, ``mean``, ``log`` and ``clamp``. The remaining
ops in this module only ever appear inside backward passes.
"""
from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractViolation, GraphReuseError, NonFiniteError
from .params import ParamSet

LEAKY_SLOPE = 0.1

_local = threading.local()


def _stack() -> list["Graph"]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def _recording_graph() -> "Graph | None":
    s = _stack()
    if not s:
        return None
    g = s[-1]
    return g if g._recording and not g.consumed else None


class Tensor:
    """A float64 array, optionally tracked by the active graph."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def constant(data: Any) -> Tensor:
    return Tensor(data, requires_grad=False)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """A tape of recorded operations, topologically ordered by construction.

    Use as a context manager. With ``retain_for_higher_order`` the tape keeps
    its intermediate state after a backward pass and accepts
    ``create_graph=True`` so that gradients can be differentiated again.
    """

    def __init__(self, retain_for_higher_order: bool = False):
        self.retain_for_higher_order = retain_for_higher_order
        self.nodes: list[Node] = []
        self.consumed = False
        self._recording = True

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        s = _stack()
        assert s and s[-1] is self
        s.pop()

    def _record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward: Callable) -> None:
        node = Node(op, inputs, out, backward)
        out.node = node
        out.requires_grad = True
        self.nodes.append(node)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def release(self) -> None:
        self.nodes = []
        self.consumed = True


class no_grad:
    """Suspend recording on the active graph."""

    def __enter__(self) -> None:
        s = _stack()
        self._g = s[-1] if s else None
        if self._g is not None:
            self._prev = self._g._recording
            self._g._recording = False

    def __exit__(self, *exc: object) -> None:
        if self._g is not None:
            self._g._recording = self._prev


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    g = _recording_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g._record(op, inputs, out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- primitive ops ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, scale(g, -1.0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (scale(g, c),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (expand(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _emit("mean", np.asarray(a.data.sum() / n), (a,),
                 lambda g: (scale(expand(g, shape), 1.0 / n),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractViolation("log of a non-positive value; clamp first")
    return _emit("log", np.log(a.data), (a,), lambda g: (mul(g, reciprocal(a)),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    mask = inside.astype(np.float64)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, constant(mask)),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out: Tensor

    def backward(g: Tensor) -> tuple[Tensor]:
        one = constant(np.ones_like(s))
        return (mul(g, mul(out, sub(one, out))),)

    out = _emit("sigmoid", s, (a,), backward)
    return out


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    d = np.where(x > 0, 1.0, slope)
    return _emit("leaky_relu", x * d, (a,), lambda g: (mul(g, constant(d)),))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 3 or b.shape != (x.shape[0],):
        raise ContractViolation(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    return _emit("bias_add", x.data + b.data[:, None, None], (x, b),
                 lambda g: (g, channel_sum(g)))


def _conv_shapes(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[0]:
        raise ContractViolation(f"conv2d: input {x.shape} incompatible with weight {w.shape}")


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; x is (C, H, W)."""
    _conv_shapes(x.data, w.data)
    cin, h, wd = x.shape
    cout = w.shape[0]
    y = w.data.reshape(cout, cin * 9) @ kernels.im2col3(np.ascontiguousarray(x.data))
    return _emit("conv2d", y.reshape(cout, h, wd), (x, w),
                 lambda g: (conv2d_input_grad(g, w), conv2d_weight_grad(x, g)))


# --- internal ops used by backward rules ------------------------------------

def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if a.shape != ():
        raise ContractViolation("expand takes a scalar")
    return _emit("expand", np.full(shape, float(a.data)), (a,), lambda g: (sum(g),))


def reciprocal(a: Tensor) -> Tensor:
    out: Tensor

    def backward(g: Tensor) -> tuple[Tensor]:
        return (scale(mul(g, mul(out, out)), -1.0),)

    out = _emit("reciprocal", 1.0 / a.data, (a,), backward)
    return out


def channel_sum(a: Tensor) -> Tensor:
    zeros = np.zeros(a.shape)
    return _emit("channel_sum", a.data.sum(axis=(1, 2)), (a,),
                 lambda g: (bias_add(constant(zeros), g),))


def conv2d_input_grad(g: Tensor, w: Tensor) -> Tensor:
    """Adjoint of ``conv2d(., w)`` applied to ``g``."""
    cout, h, wd = g.shape
    cin = w.shape[1]
    cols = w.data.reshape(cout, cin * 9).T @ g.data.reshape(cout, h * wd)
    return _emit("conv2d_input_grad", kernels.col2im3(cols, cin, h, wd), (g, w),
                 lambda z: (conv2d(z, w), conv2d_weight_grad(z, g)))


def conv2d_weight_grad(x: Tensor, g: Tensor) -> Tensor:
    """Gradient of ``<conv2d(x, w), g>`` with respect to ``w``."""
    cin, h, wd = x.shape
    cout = g.shape[0]
    dw = g.data.reshape(cout, h * wd) @ kernels.im2col3(np.ascontiguousarray(x.data)).T
    return _emit("conv2d_weight_grad", dw.reshape(cout, cin, 3, 3), (x, g),
                 lambda z: (conv2d_input_grad(g, z), conv2d(x, z)))


# --- differentiation --------------------------------------------------------

def grad(
    loss: Tensor,
    inputs: Sequence[Tensor],
    *,
    create_graph: bool = False,
    retain_graph: bool | None = None,
) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. ``inputs``.

    Inputs the loss does not depend on receive zero gradients.
    """
    if loss.shape != ():
        raise ContractViolation(f"gradient needs a scalar loss, got shape {loss.shape}")
    s = _stack()
    graph = s[-1] if s else None
    if graph is None:
        raise ContractViolation("gradient called outside of a Graph context")
    if graph.consumed:
        raise GraphReuseError("graph was already consumed by a previous backward pass")
    if create_graph and not graph.retain_for_higher_order:
        raise ConfigurationError("create_graph requires Graph(retain_for_higher_order=True)")
    if retain_graph is None:
        retain_graph = create_graph or graph.retain_for_higher_order

    grads: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = constant(np.ones(()))
    nodes = list(graph.nodes)
    wanted = {id(t) for t in inputs}
    prev = graph._recording
    graph._recording = create_graph
    try:
        for node in reversed(nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            if id(node.output) in wanted:
                grads[id(node.output)] = gout
            parts = node.backward(gout)
            for t, gin in zip(node.inputs, parts):
                if gin is None or not t.requires_grad:
                    continue
                k = id(t)
                grads[k] = add(grads[k], gin) if k in grads else gin
    finally:
        graph._recording = prev
    if not retain_graph:
        graph.release()
    out = []
    for t in inputs:
        gt = grads.get(id(t))
        out.append(gt if gt is not None else constant(np.zeros(t.shape)))
    return out


def leaves(params: Mapping[str, Any]) -> dict[str, Tensor]:
    """Fresh differentiable leaf tensors for every entry of ``params``."""
    return {k: Tensor(np.asarray(v), requires_grad=True) for k, v in params.items()}


def gradient(loss: Tensor, wrt: Mapping[str, Tensor], arch: Any = None) -> ParamSet:
    names = list(wrt)
    gs = grad(loss, [wrt[k] for k in names])
    return ParamSet({k: g.data for k, g in zip(names, gs)}, arch)


def value_and_gradient(
    fn: Callable[[dict[str, Tensor]], Tensor], theta: ParamSet
) -> tuple[float, ParamSet]:
    """Evaluate ``fn`` on leaf copies of ``theta`` and return (loss, grads)."""
    with Graph():
        th = leaves(theta)
        loss = fn(th)
        return loss.item(), gradient(loss, th, theta.arch)


@dataclass(frozen=True)
class MetaGradients:
    theta: ParamSet
    alpha: ParamSet
    adapted: ParamSet
    inner_loss: float
    outer_loss: float
    second_order: bool


def meta_gradient(
    outer_loss_fn: Callable[[dict[str, Tensor]], Tensor],
    inner_loss_fn: Callable[[dict[str, Tensor]], Tensor],
    theta: ParamSet,
    alpha: ParamSet,
    *,
    second_order: bool = True,
    graph: Graph | None = None,
) -> MetaGradients:
    """Gradients of ``outer(theta - alpha * grad inner(theta))`` w.r.t. theta and alpha.

    With ``second_order=False`` the inner gradient is treated as a constant
    (the first-order approximation), so the theta-gradient is the outer
    gradient evaluated at the adapted parameters.
    """
    theta.check_congruent(alpha)
    if graph is None:
        graph = Graph(retain_for_higher_order=True)
    if not graph.retain_for_higher_order:
        raise ConfigurationError("meta_gradient needs a graph with retain_for_higher_order=True")
    names = list(theta)
    with graph:
        th = leaves(theta)
        al = leaves(alpha)
        inner = inner_loss_fn(th)
        gi = grad(inner, [th[k] for k in names], create_graph=second_order, retain_graph=True)
        if not second_order:
            gi = [constant(g.data) for g in gi]
        adapted = {k: sub(th[k], mul(al[k], g)) for k, g in zip(names, gi)}
        outer = outer_loss_fn(adapted)
        gs = grad(outer, [th[k] for k in names] + [al[k] for k in names])
    n = len(names)
    return MetaGradients(
        theta=ParamSet({k: g.data for k, g in zip(names, gs[:n])}, theta.arch),
        alpha=ParamSet({k: g.data for k, g in zip(names, gs[n:])}, theta.arch),
        adapted=ParamSet({k: adapted[k].data for k in names}, theta.arch),
        inner_loss=inner.item(),
        outer_loss=outer.item(),
        second_order=second_order,
    )


def finite_difference(
    f: Callable[[ParamSet], float],
    theta: ParamSet,
    h: float = 1e-5,
    indices: Iterable[tuple[str, int]] | None = None,
) -> ParamSet:
    """Central-difference gradient of ``f`` at ``theta``.

    ``indices`` restricts the estimate to the given (name, flat index)
    components; the others are left at zero.
    """
    if h <= 0:
        raise ContractViolation("finite-difference step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    out = {k: np.zeros_like(v) for k, v in base.items()}
    if indices is None:
        indices = [(k, i) for k, v in base.items() for i in range(v.size)]
    for k, i in indices:
        flat = base[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = f(ParamSet(base, theta.arch))
        flat[i] = orig - h
        fm = f(ParamSet(base, theta.arch))
        flat[i] = orig
        out[k].reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return ParamSet(out, theta.arch)


def relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray],
                   floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over all components."""
    num = np.sqrt(np.sum([np.sum((np.asarray(a[k]) - np.asarray(b[k])) ** 2) for k in a]))
    na = np.sqrt(np.sum([np.sum(np.asarray(a[k]) ** 2) for k in a]))
    nb = np.sqrt(np.sum([np.sum(np.asarray(b[k]) ** 2) for k in b]))
    return float(num / max(na, nb, floor))
