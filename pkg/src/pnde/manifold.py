"""Constraint manifolds M = {u : g(u) = 0} and tangent-space projection.

A ConstraintSet packages the residual map, its analytic Jacobian, and the
directional derivative of the Jacobian (the second-derivative contraction
needed to differentiate through the projection during training). All three
callables are vectorized over one leading batch axis.

The projection removes the component of a vector normal to the tangent
space: Proj_u(v) = v - Dg(u)^T (Dg Dg^T)^{-1} Dg(u) v. The m x m Gram matrix
is solved by Cholesky; a full-SVD pseudoinverse variant is kept as a
validation oracle only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Node, Tape, TapeOp
from .errors import NonConvergenceError, ShapeError
from .linalg import cholesky_factor, cholesky_solve_factored
from .state import StateVector

# Gram pivots below this fraction of trace(G) are treated as rank deficiency;
# regularizing silently would break the exact-constraint guarantee.
REL_PIVOT_FLOOR = 1e-12


@dataclass(frozen=True)
class ConstraintSet:
    """The map g, its Jacobian, and second-order directional information.

    ``residual(u) = values(u) - target`` defines g; keeping the target
    separate lets one constraint family serve trajectory-specific levels
    (e.g. per-trajectory energy) without rebuilding the callables.
    """

    n: int
    m: int
    values: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    jacobian_derivative: Callable[[np.ndarray, np.ndarray], np.ndarray]
    target: np.ndarray = field(repr=False)
    name: str = ""

    def __post_init__(self):
        if not self.m < self.n:
            raise ShapeError(f"need m < n, got m={self.m}, n={self.n}")
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))
        if self.target.shape != (self.m,):
            raise ShapeError(f"target shape {self.target.shape} != ({self.m},)")

    def residual(self, u: np.ndarray, target: np.ndarray | None = None) -> np.ndarray:
        t = self.target if target is None else target
        return self.values(u) - t

    def with_target(self, target) -> "ConstraintSet":
        return replace(self, target=np.asarray(target, dtype=np.float64))


@dataclass
class ProjectionWorkspace:
    """Per-call scratch exposing the Gram matrix and solve coefficients."""

    gram: np.ndarray
    coeffs: np.ndarray

    @classmethod
    def for_constraints(cls, c: ConstraintSet) -> "ProjectionWorkspace":
        return cls(gram=np.zeros((c.m, c.m)), coeffs=np.zeros(c.m))


def _as_u(u) -> np.ndarray:
    if isinstance(u, StateVector):
        return u.u
    return np.asarray(u, dtype=np.float64)


def _jac_vec(jac: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("...mn,...n->...m", jac, w)


def _jac_t_vec(jac: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.einsum("...mn,...m->...n", jac, a)


def gram_cholesky(jac: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of Dg Dg^T with the rank-deficiency floor."""
    gram = jac @ np.swapaxes(jac, -1, -2)
    return cholesky_factor(gram, rel_pivot_floor=REL_PIVOT_FLOOR)


def _project_parts(c: ConstraintSet, u: np.ndarray, v: np.ndarray):
    jac = c.jacobian(u)
    chol = gram_cholesky(jac)
    alpha = cholesky_solve_factored(chol, _jac_vec(jac, v))
    out = v - _jac_t_vec(jac, alpha)
    return out, jac, chol, alpha


def project_tangent(
    c: ConstraintSet,
    u,
    v: np.ndarray,
    workspace: ProjectionWorkspace | None = None,
) -> np.ndarray:
    """Orthogonal projection of v onto the tangent space at u.

    Accepts single vectors (n,) or stacks (B, n) on both u and v.
    """
    u = _as_u(u)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != c.n:
        raise ShapeError(f"vector length {v.shape[-1]} != ambient dim {c.n}")
    out, jac, chol, alpha = _project_parts(c, u, v)
    if workspace is not None:
        workspace.gram[...] = jac @ np.swapaxes(jac, -1, -2)
        workspace.coeffs[...] = alpha
    return out


def project_tangent_svd(c: ConstraintSet, u, v: np.ndarray) -> np.ndarray:
    """Same projection through the SVD pseudoinverse of Dg(u)^T (oracle)."""
    u = _as_u(u)
    v = np.asarray(v, dtype=np.float64)
    jac = c.jacobian(u)
    alpha = np.linalg.pinv(jac.T) @ v
    return v - jac.T @ alpha


def fd_jacobian(c: ConstraintSet, u, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the residual (oracle for analytics)."""
    u = np.array(_as_u(u), dtype=np.float64)
    rows = np.empty((c.m, u.size))
    for i in range(u.size):
        up = u.copy()
        um = u.copy()
        up[i] += eps
        um[i] -= eps
        rows[:, i] = (c.residual(up) - c.residual(um)) / (2.0 * eps)
    return rows


def fd_jacobian_derivative(c: ConstraintSet, u, w, eps: float = 1e-6) -> np.ndarray:
    """Central difference of the Jacobian along direction w (oracle)."""
    u = _as_u(u)
    w = np.asarray(w, dtype=np.float64)
    return (c.jacobian(u + eps * w) - c.jacobian(u - eps * w)) / (2.0 * eps)


def newton_retract(
    c: ConstraintSet, u_guess, tol: float = 1e-12, max_iter: int = 25
) -> np.ndarray:
    """Send a nearby point back onto M by minimum-norm Gauss-Newton steps.

    Each iterate solves the same Gram system as the projection:
    u <- u - Dg(u)^T (Dg Dg^T)^{-1} g(u).
    """
    u = np.array(_as_u(u_guess), dtype=np.float64)
    for _ in range(max_iter):
        r = c.residual(u)
        if np.max(np.abs(r)) <= tol:
            return u
        jac = c.jacobian(u)
        chol = gram_cholesky(jac)
        u = u - _jac_t_vec(jac, cholesky_solve_factored(chol, r))
    r = c.residual(u)
    raise NonConvergenceError(
        f"retraction did not reach tol={tol:g} in {max_iter} iterations "
        f"(residual {np.max(np.abs(r)):.3e})",
        residual=float(np.max(np.abs(r))),
    )


class ProjectTangentOp(TapeOp):
    """Taped projection, exact in both arguments.

    The u-path adjoint contracts the constraint's second derivative with the
    four rank-one blocks of the Gram-solve differential; by symmetry of
    second derivatives each block reduces to one jacobian_derivative call.
    """

    name = "project_tangent"

    def __init__(self, constraints: ConstraintSet):
        self.constraints = constraints

    def forward(self, u, v):
        out, jac, chol, alpha = _project_parts(self.constraints, u, v)
        return out, (jac, chol, alpha)

    def vjp(self, xs, value, saved, bar):
        u, v = xs
        jac, chol, alpha = saved
        beta = cholesky_solve_factored(chol, _jac_vec(jac, bar))
        v_bar = bar - _jac_t_vec(jac, beta)
        jd = self.constraints.jacobian_derivative
        jta = _jac_t_vec(jac, alpha)
        jtb = _jac_t_vec(jac, beta)
        u_bar = (
            -_jac_t_vec(jd(u, bar), alpha)
            - _jac_t_vec(jd(u, v), beta)
            + _jac_t_vec(jd(u, jta), beta)
            + _jac_t_vec(jd(u, jtb), alpha)
        )
        return u_bar, v_bar


def project_tangent_taped(
    tape: Tape, c: ConstraintSet, u: Node, v: Node
) -> Node:
    return tape.apply(ProjectTangentOp(c), u, v)
