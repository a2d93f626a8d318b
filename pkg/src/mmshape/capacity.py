"""Capacity ``cap(Omega) = min ||u||_H^2`` over ``u >= 1`` on ``Omega``.

On a finite atomic space every point is its own neighborhood, so the
constraint is imposed on ``Omega`` itself.  The primary route is an equality
constrained linear solve; :func:`capacity_qp` is an independent projected
gradient solver for the inequality-constrained problem and serves as oracle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bvp import RestrictedOperator
from .errors import InputError, ParameterError
from .mmspace import Domain, DiscreteSpace, sobolev_norm

TAU_POS = 1e-12


@dataclass
class CapacityResult:
    value: float
    potential: np.ndarray
    active_set: Domain
    method: str
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "active_size": self.active_set.size,
            "iterations": self.iterations,
        }


def _h_matrix(space: DiscreteSpace) -> sp.csr_matrix:
    return (space.form_matrix + sp.diags(space.measure)).tocsr()


def _result(space, u, method, iterations=0) -> CapacityResult:
    A = _h_matrix(space)
    value = float(u @ (A @ u))
    active = Domain.from_mask(space, np.abs(u - 1.0) <= 1e-10)
    return CapacityResult(value, u, active, method, iterations)


def capacity(space: DiscreteSpace, dom: Domain) -> CapacityResult:
    """Capacitary potential by solving ``(K + M) u = 0`` off ``dom`` with ``u = 1`` on it."""
    u = np.zeros(space.n)
    if dom.size == 0:
        return CapacityResult(0.0, u, Domain.empty(space), "linear")
    u[dom.mask] = 1.0
    free = ~dom.mask
    if free.any():
        A = _h_matrix(space)
        op = RestrictedOperator(space, free, 1.0)
        rhs = -(A[op.idx][:, dom.indices] @ np.ones(dom.size))
        u[op.idx] = op.solve(rhs)
    return _result(space, u, "linear")


def capacity_qp(space: DiscreteSpace, dom: Domain, tol: float = 1e-14,
                max_iter: int = 200_000) -> CapacityResult:
    """Projected-gradient oracle for ``min u^T (K+M) u`` s.t. ``u >= 1_Omega``, ``u >= 0``.

    Jacobi-scaled accelerated projected gradient with adaptive restart.  The
    diagonal scaling keeps the feasible box separable, so the projection is a
    clip.  Stops when the scaled projected-gradient step falls below ``tol``.
    """
    if dom.size == 0:
        return CapacityResult(0.0, np.zeros(space.n), Domain.empty(space), "qp")
    A = _h_matrix(space)
    d = A.diagonal()
    s = 1.0 / np.sqrt(d)
    B = sp.diags(s) @ A @ sp.diags(s)
    # largest eigenvalue of the scaled matrix bounds the step
    if space.n <= 400:
        L = float(np.linalg.eigvalsh(B.toarray())[-1])
    else:
        L = float(spla.eigsh(B, k=1, which="LA", return_eigenvectors=False)[0])
    step = 1.0 / L
    lower = np.where(dom.mask, 1.0, 0.0) / s  # bounds in the scaled variable y = u / s
    y = lower.copy()
    z = y.copy()
    t = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        grad = B @ z
        y_new = np.maximum(z - step * grad, lower)
        delta = y_new - y
        if np.linalg.norm(delta) <= tol * max(1.0, np.linalg.norm(y_new)):
            y = y_new
            break
        # restart momentum when it points uphill
        if np.dot(z - y_new, delta) < 0:
            t = 1.0
            z = y_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = y_new + ((t - 1.0) / t_new) * delta
            t = t_new
        y = y_new
    u = y * s
    return _result(space, u, "qp", it)


def quasi_support(space: DiscreteSpace, funcs, tau_pos: float = TAU_POS) -> Domain:
    """Union-of-supports set from ``w = sum_k 2^-k |u_k| / ||u_k||_H``.

    Every ``u_k`` vanishes (relative to ``tau_pos``) off the returned set.
    """
    funcs = [space.check_function(u) for u in funcs]
    if not funcs:
        raise InputError("quasi_support needs at least one function")
    if tau_pos < 0:
        raise ParameterError("tau_pos must be nonnegative")
    w = np.zeros(space.n)
    for k, u in enumerate(funcs, start=1):
        nrm = sobolev_norm(space, u)
        if nrm == 0.0:
            raise InputError(f"function {k} is identically zero")
        w += 2.0 ** (-k) * np.abs(u) / nrm
    return Domain.from_mask(space, w > tau_pos * w.max())


def atom_capacities(space: DiscreteSpace, points) -> np.ndarray:
    """``cap({x})`` for each listed point via ``1 / ((K+M)^{-1})_xx``.

    Minimizing ``u^T A u`` with ``u_x = 1`` gives the Schur complement of the
    free block, which equals the reciprocal diagonal entry of ``A^{-1}``.
    """
    points = np.asarray(points, dtype=np.int64)
    if points.size == 0:
        return np.zeros(0)
    lu = spla.splu(_h_matrix(space).tocsc())
    out = np.empty(points.size)
    for start in range(0, points.size, 256):
        chunk = points[start:start + 256]
        E = np.zeros((space.n, chunk.size))
        E[chunk, np.arange(chunk.size)] = 1.0
        X = lu.solve(E)
        out[start:start + chunk.size] = 1.0 / X[chunk, np.arange(chunk.size)]
    return out


def check_h0_equivalence(space: DiscreteSpace, dom: Domain) -> dict:
    """Per-atom ``cap({x})`` against ``m({x})`` for the points of ``dom``.

    Positive capacity of every atom means "zero almost everywhere" and "zero
    quasi everywhere" pick out the same functions, so the two Dirichlet
    spaces on ``dom`` coincide.
    """
    pts = dom.indices
    caps = atom_capacities(space, pts)
    masses = space.measure[pts]
    return {
        "points": pts.tolist(),
        "capacity": caps.tolist(),
        "measure": masses.tolist(),
        "all_positive": bool(np.all(caps > 0)),
        "cap_ge_measure": bool(np.all(caps >= masses - 1e-10)),
        "min_ratio": float(np.min(caps / masses)) if pts.size else None,
        "equivalent": bool(np.all(caps > 0)),
    }
