"""Tape-based reverse-mode differentiation with hand-written adjoints.

A :class:`Tape` records each forward operation as a node holding the saved
intermediates its adjoint needs. :func:`backpropagate` walks the nodes once in
reverse order and accumulates gradients for every watched leaf variable.

Gradient convention for complex values: ``grad = dL/dRe(x) + 1j * dL/dIm(x)``
(twice the conjugate Wirtinger derivative). For real values it is the usual
gradient, and ``x - lr * grad`` is steepest descent in both cases.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    GraphConstructionError,
    InvalidArgumentError,
    NumericalFailureError,
    TapeConsistencyError,
)
from .instrument import counters

ROLES = ("probe", "object", "position", "power", "wavelength", "distance", "background")

_ids = itertools.count()


class Variable:
    """An optimisable array tagged with one of :data:`ROLES`."""

    def __init__(self, value, role: str, name: str | None = None, requires_grad: bool = True):
        if role not in ROLES:
            raise InvalidArgumentError(f"unknown variable role {role!r}")
        self.id = next(_ids)
        self.value = np.array(value)
        self.role = role
        self.name = name or role
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Variable({self.name}, role={self.role}, shape={self.value.shape})"


class GradientSet(dict):
    """Map ``Variable.id -> gradient array``; supports in-place summation."""

    def accumulate(self, other: "GradientSet"):
        for k, g in other.items():
            if k in self:
                self[k] = self[k] + g
            else:
                self[k] = np.array(g, copy=True)
        return self

    def for_variable(self, var: Variable):
        return self.get(var.id)


@dataclass
class WindowGrad:
    """Gradient that is non-zero only on ``index`` of the input array."""

    index: tuple
    value: np.ndarray


class Op:
    """A tape node type. Subclasses implement ``forward`` and ``backward``.

    ``forward(*values)`` returns ``(output, saved)``. ``backward(saved, g,
    needs)`` returns one gradient per input (``None`` where ``needs`` is
    false), each either a dense array shaped like the input or a
    :class:`WindowGrad`.
    """

    name = "op"
    linear = False

    def forward(self, *values):
        raise NotImplementedError

    def backward(self, saved, grad, needs):
        raise NotImplementedError


class Tensor:
    __slots__ = ("value", "tape", "index", "requires_grad")

    def __init__(self, value, tape, index, requires_grad):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape


@dataclass
class Node:
    op: Op
    inputs: tuple
    output: int
    saved: object
    nbytes: int = 0


def _nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, dict):
        return sum(_nbytes(v) for v in obj.values())
    if isinstance(obj, (tuple, list)):
        return sum(_nbytes(v) for v in obj)
    return 0


@dataclass
class Tape:
    check_finite: bool = False
    nodes: list = field(default_factory=list)
    shapes: list = field(default_factory=list)
    dtypes: list = field(default_factory=list)
    requires: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)
    released: bool = False

    def _new_tensor(self, value, requires_grad):
        idx = len(self.shapes)
        self.shapes.append(np.shape(value))
        self.dtypes.append(np.asarray(value).dtype)
        self.requires.append(bool(requires_grad))
        return Tensor(value, self, idx, requires_grad)

    def watch(self, var: Variable) -> Tensor:
        """Bind a leaf variable; each variable may be watched once per tape."""
        if var.id in self.leaves.values():
            raise GraphConstructionError(f"variable {var.name} is already a leaf of this tape")
        t = self._new_tensor(var.value, var.requires_grad)
        self.leaves[t.index] = var.id
        return t

    def constant(self, value) -> Tensor:
        return self._new_tensor(np.asarray(value), False)

    def apply(self, op: Op, *inputs: Tensor) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise GraphConstructionError(f"{op.name}: input recorded on a different tape")
        try:
            out, saved = op.forward(*(t.value for t in inputs))
        except ValueError as exc:
            raise GraphConstructionError(f"{op.name}: {exc}") from exc
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NumericalFailureError(f"non-finite output from node {len(self.nodes)} ({op.name})",
                                        node=len(self.nodes))
        rg = any(t.requires_grad for t in inputs)
        t_out = self._new_tensor(out, rg)
        node = Node(op, tuple(t.index for t in inputs), t_out.index, saved if rg else None)
        node.nbytes = _nbytes(node.saved)
        counters.allocate(node.nbytes)
        self.nodes.append(node)
        return t_out

    def release(self):
        if not self.released:
            for n in self.nodes:
                counters.release(n.nbytes)
                n.saved = None
                n.nbytes = 0
            self.released = True

    def __del__(self):
        try:
            self.release()
        except Exception:
            pass


def _add_into(grads, idx, g, shape, dtype):
    if isinstance(g, WindowGrad):
        if idx not in grads:
            grads[idx] = np.zeros(shape, dtype=np.result_type(dtype, g.value.dtype))
        grads[idx][g.index] += g.value
        return
    g = np.asarray(g)
    if g.shape != tuple(shape):
        raise TapeConsistencyError(f"gradient shape {g.shape} does not match tensor shape {tuple(shape)}")
    if idx in grads:
        grads[idx] = grads[idx] + g
    else:
        grads[idx] = g


def backpropagate(tape: Tape, upstream, output: Tensor | None = None, release: bool = True) -> GradientSet:
    """Reverse pass from ``output`` (default: last node) seeded with ``upstream``."""
    if tape.released:
        raise TapeConsistencyError("tape has already been consumed")
    if not tape.nodes:
        raise TapeConsistencyError("empty tape")
    out_idx = tape.nodes[-1].output if output is None else output.index
    upstream = np.asarray(upstream)
    if upstream.shape != tuple(tape.shapes[out_idx]):
        raise TapeConsistencyError(
            f"upstream shape {upstream.shape} does not match prediction {tuple(tape.shapes[out_idx])}")
    grads = {out_idx: upstream}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        needs = tuple(tape.requires[i] for i in node.inputs)
        if not any(needs):
            continue
        in_grads = node.op.backward(node.saved, g, needs)
        if len(in_grads) != len(node.inputs):
            raise TapeConsistencyError(f"{node.op.name}: adjoint returned {len(in_grads)} gradients "
                                       f"for {len(node.inputs)} inputs")
        for i, gi, need in zip(node.inputs, in_grads, needs):
            if need and gi is not None:
                _add_into(grads, i, gi, tape.shapes[i], tape.dtypes[i])
        if release:
            counters.release(node.nbytes)
            node.nbytes = 0
            node.saved = None
    result = GradientSet()
    for idx, var_id in tape.leaves.items():
        if idx in grads:
            g = grads[idx]
            if not np.issubdtype(tape.dtypes[idx], np.complexfloating) and np.iscomplexobj(g):
                g = g.real
            result[var_id] = g
    if release:
        tape.release()
    counters.add_gradient_pass()
    return result


# ---------------------------------------------------------------------------
# generic nodes (used by tests and small objectives)


class Square(Op):
    """Elementwise ``|x|**2`` (real output)."""

    name = "square"

    def forward(self, x):
        return (x * np.conj(x)).real if np.iscomplexobj(x) else x * x, x

    def backward(self, x, g, needs):
        return (2.0 * g * x,)


class MulConst(Op):
    name = "mul_const"
    linear = True

    def __init__(self, c):
        self.c = c

    def forward(self, x):
        return self.c * x, None

    def backward(self, saved, g, needs):
        return (np.conj(self.c) * g,)


class SumAll(Op):
    name = "sum"
    linear = True

    def forward(self, x):
        return np.asarray(np.sum(x)), x.shape

    def backward(self, shape, g, needs):
        return (np.broadcast_to(g, shape).copy(),)


def square(t: Tensor) -> Tensor:
    return t.tape.apply(Square(), t)


def mul_const(t: Tensor, c) -> Tensor:
    return t.tape.apply(MulConst(c), t)


def sum_all(t: Tensor) -> Tensor:
    return t.tape.apply(SumAll(), t)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradcheckReport:
    errors: dict
    details: dict

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float) -> bool:
        return all(e < tol for e in self.errors.values())


def gradcheck(
    loss_and_grad: Callable[[bool], tuple],
    variables: list[Variable],
    eps: dict | None = None,
    n_coords: int = 6,
    n_directions: int = 2,
    delta: float = 1e-12,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_and_grad(with_grad)`` evaluates the scalar loss at the variables'
    current values and, when ``with_grad`` is true, also returns the
    :class:`GradientSet`. Variable values are perturbed in place and restored.

    For each role the report holds ``max|g_ad - g_fd| / (max|g_fd| + delta)``
    over a sample of coordinates (the largest-gradient entries plus random
    ones, real and imaginary parts separately) and, per random direction
    tilted toward the gradient, the relative error of the directional
    derivative.
    """
    rng = np.random.default_rng(seed)
    eps = dict(eps or {})
    loss0, grads = loss_and_grad(True)
    if not np.isfinite(loss0):
        raise NumericalFailureError("non-finite loss at the gradcheck point")

    def fd(var, direction, h):
        base = var.value.copy()
        var.value[...] = base + h * direction
        lp, _ = loss_and_grad(False)
        var.value[...] = base - h * direction
        lm, _ = loss_and_grad(False)
        var.value[...] = base
        return (lp - lm) / (2 * h)

    errors, details = {}, {}
    for var in variables:
        if not var.requires_grad:
            continue
        g = grads.get(var.id)
        if g is None:
            g = np.zeros_like(var.value)
        v = var.value
        scale = float(np.sqrt(np.mean(np.abs(v) ** 2))) if v.size else 0.0
        h = eps.get(var.role, 1e-6 * scale if scale > 0 else 1e-8)
        is_c = np.iscomplexobj(v)
        flat = np.abs(g).ravel()
        order = np.argsort(flat)[::-1]
        picks = list(order[: n_coords // 2 + 1])
        picks += list(rng.choice(v.size, size=min(v.size, n_coords - len(picks) + 1), replace=False))
        ad, fdv = [], []
        for p in dict.fromkeys(int(i) for i in picks):
            parts = (1.0, 1j) if is_c else (1.0,)
            for unit in parts:
                d = np.zeros_like(v)
                d.flat[p] = unit
                ad.append(float(np.real(np.conj(unit) * g.flat[p])))
                fdv.append(fd(var, d, h))
        ad, fdv = np.array(ad), np.array(fdv)
        coord_err = float(np.max(np.abs(ad - fdv)) / (np.max(np.abs(fdv)) + delta))
        dir_err = 0.0
        gnorm = float(np.sqrt(np.sum(np.abs(g) ** 2)))
        for _ in range(n_directions):
            d = rng.standard_normal(v.shape)
            if is_c:
                d = d + 1j * rng.standard_normal(v.shape)
            d /= np.sqrt(np.sum(np.abs(d) ** 2))
            if v.size == 1:
                d = np.ones_like(v)
            elif gnorm > 0:
                # keep the directional derivative away from zero so roundoff cannot dominate
                d = d + g / gnorm
                d /= np.sqrt(np.sum(np.abs(d) ** 2))
            ad_d = float(np.real(np.sum(np.conj(d) * g)))
            fd_d = fd(var, d, h)
            dir_err = max(dir_err, abs(ad_d - fd_d) / (abs(fd_d) + delta))
        err = max(coord_err, dir_err)
        errors[var.role] = max(errors.get(var.role, 0.0), err)
        details[var.name] = {"coordinate": coord_err, "directional": dir_err, "step": h}
    return GradcheckReport(errors, details)


def adjoint_mismatch(forward: Callable, adjoint: Callable, x, y) -> float:
    """Dot-test residual ``|<A x, y> - <x, A^H y>| / (||A x|| ||y||)``.

    Inner products are complex (``np.vdot``), so for complex-linear maps the
    real and imaginary parts are both checked.
    """
    ax = np.asarray(forward(x))
    ahy = np.asarray(adjoint(y))
    if ax.shape != np.shape(y) or ahy.shape != np.shape(x):
        raise InvalidArgumentError(f"dot test shapes disagree: A x {ax.shape} vs y {np.shape(y)}, "
                                   f"A^H y {ahy.shape} vs x {np.shape(x)}")
    lhs = np.vdot(ax, y)
    rhs = np.vdot(x, ahy)
    scale = float(np.linalg.norm(ax) * np.linalg.norm(y)) or 1.0
    return float(abs(lhs - rhs) / scale)


def op_adjoint_mismatch(op: Op, x, y, *others) -> float:
    """Dot test of a linear :class:`Op` in its first input (other inputs held fixed)."""

    def fwd(v):
        return op.forward(v, *others)[0]

    def adj(g):
        saved = op.forward(x, *others)[1]
        needs = (True,) + (False,) * len(others)
        gx = op.backward(saved, g, needs)[0]
        if isinstance(gx, WindowGrad):
            dense = np.zeros(np.shape(x), dtype=np.result_type(np.asarray(x).dtype, gx.value.dtype))
            dense[gx.index] += gx.value
            return dense
        return gx

    return adjoint_mismatch(fwd, adj, x, y)
