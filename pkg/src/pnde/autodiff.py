"""Reverse-mode automatic differentiation on an explicit tape.

Values are double-precision numpy arrays (0-d for scalars). Every primitive
is recorded as one node on a Tape (a Wengert list): the op, the ids of its
input nodes, the forward value, and whatever the backward rule needs. The
backward sweep walks the list in reverse, so gradients are deterministic and
bitwise reproducible for identical tapes.

Vector primitives also accept a stack of inputs with one leading batch axis
(e.g. ``affine`` maps (B, i) to (B, o)); the adjoint rules sum over the batch
axis where the forward broadcasts.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import ShapeError
from .linalg import cholesky_factor, cholesky_solve_factored

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _asvalue(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    return v


class TapeOp:
    """A primitive: a forward rule plus the matching adjoint rule."""

    name = "op"

    def forward(self, *xs):
        """Return (value, saved). Must be pure: replaying reproduces value."""
        raise NotImplementedError

    def vjp(self, xs, value, saved, bar):
        """Return one adjoint per input (None for inputs without gradient)."""
        raise NotImplementedError


class _Leaf(TapeOp):
    name = "leaf"

    def __init__(self, value):
        self.value = value

    def forward(self):
        return self.value, None

    def vjp(self, xs, value, saved, bar):
        return ()


class _Const(_Leaf):
    name = "const"


class _Add(TapeOp):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
        return a + b, None

    def vjp(self, xs, value, saved, bar):
        return bar, bar


class _Sub(TapeOp):
    name = "sub"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes {a.shape} vs {b.shape}")
        return a - b, None

    def vjp(self, xs, value, saved, bar):
        return bar, -bar


class _Mul(TapeOp):
    name = "mul"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")
        return a * b, None

    def vjp(self, xs, value, saved, bar):
        a, b = xs
        return bar * b, bar * a


class _Scale(TapeOp):
    name = "scale"

    def __init__(self, c: float):
        self.c = float(c)

    def forward(self, a):
        return self.c * a, None

    def vjp(self, xs, value, saved, bar):
        return (self.c * bar,)


class _Lincomb(TapeOp):
    """y = sum_i c_i * x_i for constant coefficients (fused axpy chain)."""

    name = "lincomb"

    def __init__(self, coeffs):
        self.coeffs = tuple(float(c) for c in coeffs)

    def forward(self, *xs):
        if len(xs) != len(self.coeffs):
            raise ShapeError("lincomb: coefficient/operand count mismatch")
        y = self.coeffs[0] * xs[0]
        for c, x in zip(self.coeffs[1:], xs[1:]):
            y += c * x
        return y, None

    def vjp(self, xs, value, saved, bar):
        return tuple(c * bar for c in self.coeffs)


class _Dot(TapeOp):
    name = "dot"

    def forward(self, a, b):
        if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
            raise ShapeError(f"dot: shapes {a.shape} vs {b.shape}")
        return np.dot(a, b), None

    def vjp(self, xs, value, saved, bar):
        a, b = xs
        return bar * b, bar * a


class _Sum(TapeOp):
    name = "sum"

    def forward(self, a):
        return np.sum(a), None

    def vjp(self, xs, value, saved, bar):
        return (bar * np.ones_like(xs[0]),)


class _SumSq(TapeOp):
    name = "sumsq"

    def forward(self, a):
        return np.sum(a * a), None

    def vjp(self, xs, value, saved, bar):
        return (2.0 * bar * xs[0],)


class _Matmul(TapeOp):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
        return a @ b, None

    def vjp(self, xs, value, saved, bar):
        a, b = xs
        return bar @ b.T, a.T @ bar


class _Affine(TapeOp):
    """y = W x + b, with x either a vector (i,) or a batch (B, i)."""

    name = "affine"

    def forward(self, w, b, x):
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ShapeError(f"affine: weight {w.shape} vs bias {b.shape}")
        if x.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
            raise ShapeError(f"affine: weight {w.shape} vs input {x.shape}")
        return x @ w.T + b, None

    def vjp(self, xs, value, saved, bar):
        w, b, x = xs
        if x.ndim == 1:
            return np.outer(bar, x), bar, bar @ w
        return bar.T @ x, bar.sum(axis=0), bar @ w


def gelu_value(x: np.ndarray) -> np.ndarray:
    """Exact GELU x * Phi(x) with the erf-based normal CDF."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_derivative(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


class _Gelu(TapeOp):
    name = "gelu"

    def forward(self, x):
        return gelu_value(x), None

    def vjp(self, xs, value, saved, bar):
        return (bar * gelu_derivative(xs[0]),)


class _CholeskySolve(TapeOp):
    """X = A^{-1} B for SPD A; backward is the exact linear-solve adjoint."""

    name = "cholesky_solve"

    def forward(self, a, b):
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"cholesky_solve: matrix shape {a.shape}")
        if b.shape[0] != a.shape[0] or b.ndim not in (1, 2):
            raise ShapeError(f"cholesky_solve: matrix {a.shape} vs rhs {b.shape}")
        chol = cholesky_factor(a)
        x = cholesky_solve_factored(chol, b)
        return x, chol

    def vjp(self, xs, value, saved, bar):
        b_bar = cholesky_solve_factored(saved, bar)
        if value.ndim == 1:
            a_bar = -np.outer(b_bar, value)
        else:
            a_bar = -b_bar @ value.T
        return a_bar, b_bar


class Node:
    """Handle to one recorded value on a Tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self):
        return f"Node({self.idx}, shape={self.value.shape})"


class Gradients:
    """Accumulated adjoints keyed by leaf node id; unused leaves are zero."""

    def __init__(self, by_leaf: dict[int, np.ndarray]):
        self.by_leaf = by_leaf

    def __getitem__(self, leaf: Node) -> np.ndarray:
        return self.by_leaf[leaf.idx]

    def __len__(self):
        return len(self.by_leaf)


class Tape:
    """Append-only record of primitive applications (single writer)."""

    def __init__(self):
        self._ops: list[TapeOp] = []
        self._inputs: list[tuple[int, ...]] = []
        self._values: list[np.ndarray] = []
        self._saved: list = []
        self._leaf_ids: list[int] = []

    def __len__(self):
        return len(self._ops)

    def _record(self, op: TapeOp, input_ids: tuple[int, ...]) -> Node:
        value, saved = op.forward(*(self._values[i] for i in input_ids))
        value = _asvalue(value)
        self._ops.append(op)
        self._inputs.append(input_ids)
        self._values.append(value)
        self._saved.append(saved)
        return Node(self, len(self._ops) - 1, value)

    def apply(self, op: TapeOp, *nodes: Node) -> Node:
        """Record a custom primitive (used by the manifold/model layers)."""
        return self._record(op, tuple(n.idx for n in nodes))

    # -- inputs ---------------------------------------------------------
    def leaf(self, value, check_finite: bool = True) -> Node:
        """A differentiable input; its adjoint appears in Gradients."""
        v = _asvalue(value)
        if check_finite and not np.all(np.isfinite(v)):
            raise ShapeError("leaf value contains non-finite entries")
        node = self._record(_Leaf(v), ())
        self._leaf_ids.append(node.idx)
        return node

    def const(self, value) -> Node:
        """A non-differentiable input (targets, observed states)."""
        return self._record(_Const(_asvalue(value)), ())

    # -- primitives -----------------------------------------------------
    def add(self, a: Node, b: Node) -> Node:
        return self._record(_Add(), (a.idx, b.idx))

    def sub(self, a: Node, b: Node) -> Node:
        return self._record(_Sub(), (a.idx, b.idx))

    def mul(self, a: Node, b: Node) -> Node:
        return self._record(_Mul(), (a.idx, b.idx))

    def scale(self, a: Node, c: float) -> Node:
        return self._record(_Scale(c), (a.idx,))

    def lincomb(self, nodes: list[Node], coeffs) -> Node:
        return self._record(_Lincomb(coeffs), tuple(n.idx for n in nodes))

    def dot(self, a: Node, b: Node) -> Node:
        return self._record(_Dot(), (a.idx, b.idx))

    def sum(self, a: Node) -> Node:
        return self._record(_Sum(), (a.idx,))

    def sumsq(self, a: Node) -> Node:
        return self._record(_SumSq(), (a.idx,))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._record(_Matmul(), (a.idx, b.idx))

    def affine(self, w: Node, b: Node, x: Node) -> Node:
        return self._record(_Affine(), (w.idx, b.idx, x.idx))

    def gelu(self, x: Node) -> Node:
        return self._record(_Gelu(), (x.idx,))

    def cholesky_solve(self, a: Node, b: Node) -> Node:
        return self._record(_CholeskySolve(), (a.idx, b.idx))

    # -- reverse sweep ---------------------------------------------------
    def backward(self, seed: Node) -> Gradients:
        """Accumulate adjoints of a scalar seed into every leaf."""
        if seed.tape is not self:
            raise ShapeError("seed node belongs to a different tape")
        if seed.value.size != 1:
            raise ShapeError(
                f"backward seed must be scalar, got shape {seed.value.shape}"
            )
        bars: list[np.ndarray | None] = [None] * len(self._ops)
        bars[seed.idx] = np.ones_like(seed.value)
        for i in range(seed.idx, -1, -1):
            bar = bars[i]
            if bar is None:
                continue
            inputs = self._inputs[i]
            if not inputs:
                continue
            contribs = self._ops[i].vjp(
                tuple(self._values[j] for j in inputs),
                self._values[i],
                self._saved[i],
                bar,
            )
            for j, contrib in zip(inputs, contribs):
                if contrib is None or isinstance(self._ops[j], _Const):
                    continue
                if bars[j] is None:
                    bars[j] = np.zeros_like(self._values[j])
                bars[j] += contrib
        by_leaf = {}
        for i in self._leaf_ids:
            by_leaf[i] = bars[i] if bars[i] is not None else np.zeros_like(self._values[i])
        return Gradients(by_leaf)

    def replay(self) -> bool:
        """Re-run every forward rule; True iff all values reproduce bitwise."""
        for i, op in enumerate(self._ops):
            value, _ = op.forward(*(self._values[j] for j in self._inputs[i]))
            if not np.array_equal(np.asarray(value, dtype=np.float64), self._values[i]):
                return False
        return True


def grad_check(
    f: Callable[[Tape, Node], Node], x: np.ndarray, eps: float = 1e-5
) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` maps (tape, input node) to a scalar node and must be re-evaluable
    at perturbed inputs.
    """
    x = _asvalue(x)
    tape = Tape()
    xn = tape.leaf(x)
    y = f(tape, xn)
    grad = tape.backward(y)[xn]

    def value_at(xv):
        t = Tape()
        return float(f(t, t.leaf(xv)).value)

    worst = 0.0
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (value_at(xp.reshape(x.shape)) - value_at(xm.reshape(x.shape))) / (2 * eps)
        rel = abs(gflat[i] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, rel)
    return worst
