"""Dirichlet problems ``-div(D) w + a w = f`` on sub-domains.

The minimizer of ``F(v) = 1/2 a(v, v) + a/2 ||v||^2 - (f, v)`` over functions
vanishing off ``Omega`` solves the restricted system

    (K_OO + a M_OO) w_O = (M f)_O,

which is a symmetric M-matrix for every builder space.  That gives the
comparison and maximum principles checked at the bottom of this module.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, MMShapeError, ParameterError
from .mmspace import Domain, DiscreteSpace, dirichlet_form, is_in_h0

DIRECT_LIMIT = 50_000
SOLVE_RTOL = 1e-10
TAU_POS = 1e-12


@dataclass
class BvpSolution:
    """Minimizer ``w`` of the Dirichlet functional together with diagnostics."""

    w: np.ndarray
    objective: float
    a: float
    domain: Domain
    residual: float
    f: np.ndarray = field(repr=False, default=None)

    def apriori_bound(self, space: DiscreteSpace) -> tuple[float, float]:
        """``(lhs, rhs)`` of ``1/2 a(w,w) + a/4 ||w||^2 <= ||f||^2 / a``."""
        m = space.measure
        lhs = 0.5 * dirichlet_form(space, self.w, self.w) + 0.25 * self.a * float(np.dot(m, self.w**2))
        rhs = float(np.dot(m, self.f**2)) / self.a
        return lhs, rhs


class RestrictedOperator:
    """Factorization of ``K_OO + shift * M_OO`` reused across right-hand sides."""

    def __init__(self, space: DiscreteSpace, mask: np.ndarray, shift: float,
                 method: str = "auto", order: np.ndarray | None = None):
        self.space = space
        self.idx = np.flatnonzero(mask)
        if order is not None:
            order = np.asarray(order)
            if sorted(order.tolist()) != list(range(len(self.idx))):
                raise InputError("order must be a permutation of the domain points")
            self.idx = self.idx[order]
        K = space.form_matrix[self.idx][:, self.idx]
        self.matrix = (K + shift * sp.diags(space.measure[self.idx])).tocsc()
        size = len(self.idx)
        if method == "auto":
            method = "direct" if size <= DIRECT_LIMIT else "cg"
        if method not in ("direct", "cg"):
            raise ParameterError(f"unknown solver method {method!r}")
        self.method = method
        self._lu = spla.splu(self.matrix) if (method == "direct" and size) else None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if len(self.idx) == 0:
            return np.zeros(0)
        if self._lu is not None:
            return self._lu.solve(rhs)
        diag = self.matrix.diagonal()
        precond = spla.LinearOperator(self.matrix.shape, matvec=lambda x: x / diag)
        x, info = spla.cg(self.matrix, rhs, rtol=SOLVE_RTOL, atol=0.0, M=precond, maxiter=20 * len(rhs))
        if info != 0:
            raise MMShapeError(f"conjugate gradient did not converge (info={info})")
        return x

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        nb = float(np.linalg.norm(rhs))
        if nb == 0.0:
            return float(np.linalg.norm(self.matrix @ x))
        return float(np.linalg.norm(self.matrix @ x - rhs) / nb)


def solve_bvp(space: DiscreteSpace, dom: Domain, a: float, f, method: str = "auto",
              order=None) -> BvpSolution:
    """Solve the Dirichlet problem with zero-order coefficient ``a`` and source ``f``.

    ``f`` may be a scalar (constant function).  ``order`` permutes the
    elimination order, which must not change the answer.
    """
    if not a > 0:
        raise ParameterError(f"a must be positive, got {a}")
    f = space.broadcast(f, "f")
    if dom.mask.shape != (space.n,):
        raise InputError("domain does not belong to this space")
    w = np.zeros(space.n)
    if dom.size == 0:
        return BvpSolution(w, 0.0, float(a), dom, 0.0, f)
    op = RestrictedOperator(space, dom.mask, a, method=method, order=order)
    rhs = (space.measure * f)[op.idx]
    x = op.solve(rhs)
    res = op.residual(x, rhs)
    w[op.idx] = x
    if np.all(f >= 0):
        floor = -1e-12 * max(1.0, float(np.abs(w).max()))
        if w.min() < floor:
            raise MMShapeError(f"sign violation: min w = {w.min():.3e} for nonnegative f")
    return BvpSolution(w, objective(space, w, a, f), float(a), dom, res, f)


def objective(space: DiscreteSpace, w, a: float, f) -> float:
    """``F(w) = 1/2 a(w,w) + a/2 ||w||^2 - (f, w)``."""
    f = space.broadcast(f)
    m = space.measure
    return 0.5 * dirichlet_form(space, w, w) + 0.5 * a * float(np.dot(m, w * w)) - float(np.dot(m, f * w))


def torsion(space: DiscreteSpace, dom: Domain, **kwargs) -> BvpSolution:
    """Torsion function ``w_Omega``: the case ``a = f = 1``."""
    return solve_bvp(space, dom, 1.0, 1.0, **kwargs)


def penalized_minimizer(space: DiscreteSpace, dom: Domain, u, n: int) -> np.ndarray:
    """Minimizer of ``1/2 a(v,v) + n/2 ||v - u||^2`` over functions vanishing off ``dom``.

    Satisfies ``n ||u_n - u||^2 <= a(u, u)``.
    """
    if int(n) != n or n < 1:
        raise ParameterError("n must be a positive integer")
    u = space.check_function(u)
    if not is_in_h0(space, dom, u, 0.0):
        raise InputError("u does not vanish outside the domain")
    out = np.zeros(space.n)
    if dom.size == 0:
        return out
    op = RestrictedOperator(space, dom.mask, float(n))
    out[op.idx] = op.solve(n * space.measure[op.idx] * u[op.idx])
    return out


def energy_set_reduce(space: DiscreteSpace, dom: Domain, tau_pos: float = TAU_POS,
                      report: bool = False):
    """Positivity set ``{x in dom : w_dom(x) > tau_pos * max w_dom}``.

    With ``report=True`` also returns the removed measure ``m(dom minus result)``,
    which is zero exactly when ``dom`` is an energy set.
    """
    if tau_pos < 0:
        raise ParameterError("tau_pos must be nonnegative")
    if dom.size == 0:
        out = Domain.empty(space)
    else:
        w = torsion(space, dom).w
        out = Domain.from_mask(space, dom.mask & (w > tau_pos * w.max()))
    if report:
        return out, float(dom.measure_value - out.measure_value)
    return out


@dataclass
class ComparisonReport:
    trials: int
    seed: int
    worst_margin: dict
    violations: dict
    tol: float

    @property
    def ok(self) -> bool:
        return all(v == 0 for v in self.violations.values())

    def to_dict(self) -> dict:
        return {"trials": self.trials, "seed": self.seed, "tol": self.tol,
                "worst_margin": self.worst_margin, "violations": self.violations}


def random_subdomain(space: DiscreteSpace, rng: np.random.Generator, within: np.ndarray | None = None,
                     p: float | None = None) -> Domain:
    base = space.admissible if within is None else within
    if p is None:
        p = rng.uniform(0.2, 0.95)
    return Domain.from_mask(space, base & (rng.random(space.n) < p))


def check_comparison(space: DiscreteSpace, trials: int = 100, seed: int = 0,
                     tol: float = 1e-10) -> ComparisonReport:
    """Sample ``omega in Omega``, ``0 <= f <= g``, ``0 < a < A`` and check the three orderings.

    (a) ``w(omega, a, f) <= w(Omega, a, f)``, (b) ``w(Omega, A, f) <= w(Omega, a, f)``
    and (c) ``w(Omega, a, f) <= w(Omega, a, g)``, all pointwise.  Margins are
    ``max(lhs - rhs)``; a violation is a margin above ``tol``.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = {"a": -np.inf, "b": -np.inf, "c": -np.inf}
    bad = {"a": 0, "b": 0, "c": 0}
    for _ in range(trials):
        Om = random_subdomain(space, rng)
        om = random_subdomain(space, rng, within=Om.mask)
        f = rng.random(space.n)
        g = f + rng.random(space.n) * (rng.random(space.n) < 0.5)
        a = float(rng.uniform(0.1, 5.0))
        A = a * float(rng.uniform(1.01, 6.0))
        wOf = solve_bvp(space, Om, a, f).w
        margins = {
            "a": solve_bvp(space, om, a, f).w - wOf,
            "b": solve_bvp(space, Om, A, f).w - wOf,
            "c": wOf - solve_bvp(space, Om, a, g).w,
        }
        for key, diff in margins.items():
            mval = float(diff.max())
            worst[key] = max(worst[key], mval)
            bad[key] += int(mval > tol)
    return ComparisonReport(trials, seed, worst, bad, tol)


def write_field_csv(path, space: DiscreteSpace, values, name: str = "w") -> None:
    """CSV with point index, coordinates (if any) and one field column."""
    values = space.check_function(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        ncoord = 0 if space.coords is None else space.coords.shape[1]
        wr.writerow(["index"] + [f"x{i}" for i in range(ncoord)] + [name])
        for i in range(space.n):
            row = [i]
            if ncoord:
                row += [repr(float(c)) for c in space.coords[i]]
            row.append(repr(float(values[i])))
            wr.writerow(row)
