"""Convergence diagnostics for domain sequences on refining grids.

A :class:`GridHierarchy` holds one builder geometry at spacings ``h, h/2,
...`` with sparse prolongation operators.  Torsion functions of a domain
sequence are moved to the finest level, where distances, a limit proxy and
the semicontinuity checks are evaluated.

No finite computation certifies a limit.  Reports therefore state whether
the data are *consistent with* weak-gamma convergence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .builders import BuilderSpec, build
from .bvp import TAU_POS, torsion
from .errors import InputError, ParameterError, ResourceError
from .mmspace import Domain, DiscreteSpace, audit_axioms
from .spectrum import eigenvalues, ext_real

POINT_BUDGET = 2_000_000
CONSISTENT = "consistent with weak-gamma convergence"


def _vertex_1d(n_coarse: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Linear interpolation and child map for a vertex grid axis (``N+1 -> 2N+1``)."""
    N = n_coarse - 1
    nf = 2 * N + 1
    rows, cols, vals = [], [], []
    for i in range(n_coarse):
        rows.append(2 * i)
        cols.append(i)
        vals.append(1.0)
    for i in range(N):
        rows += [2 * i + 1, 2 * i + 1]
        cols += [i, i + 1]
        vals += [0.5, 0.5]
    P = sp.csr_matrix((vals, (rows, cols)), shape=(nf, n_coarse))
    child_parent = np.minimum(np.arange(nf) // 2, N)
    C = sp.csr_matrix((np.ones(nf), (np.arange(nf), child_parent)), shape=(nf, n_coarse))
    return P, C


def _cell_1d(n_coarse: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Periodic cell-centered interpolation (weights 3/4, 1/4) and child map."""
    N = n_coarse
    rows, cols, vals = [], [], []
    for i in range(N):
        rows += [2 * i, 2 * i, 2 * i + 1, 2 * i + 1]
        cols += [i, (i - 1) % N, i, (i + 1) % N]
        vals += [0.75, 0.25, 0.75, 0.25]
    P = sp.csr_matrix((vals, (rows, cols)), shape=(2 * N, N))
    C = sp.csr_matrix((np.ones(2 * N), (np.arange(2 * N), np.arange(2 * N) // 2)), shape=(2 * N, N))
    return P, C


def _kron_all(mats):
    out = mats[0]
    for M in mats[1:]:
        out = sp.kron(out, M, format="csr")
    return out.tocsr()


@dataclass
class GridHierarchy:
    """Nested refinements of one builder geometry."""

    spec: BuilderSpec
    levels: list
    prolong_f: list
    prolong_d: list
    audits: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> DiscreteSpace:
        return self.levels[-1]

    def h(self, level: int) -> float:
        return float(self.levels[level].meta["h"])

    def _check(self, a: int, b: int) -> None:
        if not (0 <= a <= b < self.depth):
            raise InputError(f"cannot prolong from level {a} to level {b}")

    def prolong_function(self, u, src: int, dst: int | None = None) -> np.ndarray:
        dst = self.depth - 1 if dst is None else dst
        self._check(src, dst)
        u = self.levels[src].check_function(u)
        for l in range(src, dst):
            u = self.prolong_f[l] @ u
        return u

    def prolong_domain(self, dom: Domain, src: int, dst: int | None = None,
                       mode: str = "children") -> Domain:
        """Move a domain to a finer level.

        ``children`` maps each coarse point onto its ``2^d`` children, which
        keeps the measure of uniform-mass grids exactly.  ``support`` takes
        the support of the interpolated indicator instead: prolonged functions
        of the domain then vanish outside it, and on vertex grids the
        Dirichlet boundary stays where it was.
        """
        dst = self.depth - 1 if dst is None else dst
        self._check(src, dst)
        if mode not in ("children", "support"):
            raise ParameterError(f"unknown domain prolongation mode {mode!r}")
        ops = self.prolong_d if mode == "children" else self.prolong_f
        mask = dom.mask.astype(float)
        for l in range(src, dst):
            mask = ops[l] @ mask
        mask = (mask > 0) & self.levels[dst].admissible
        return Domain.from_mask(self.levels[dst], mask)


def build_hierarchy(spec: BuilderSpec, levels: int, point_budget: int = POINT_BUDGET,
                    audit_trials: int = 10, seed: int = 0) -> GridHierarchy:
    """Spaces at ``h, h/2, ..., h/2^(levels-1)`` with prolongation maps.

    Each level is audited with ``audit_trials`` random pairs; a level that
    fails the audit raises.
    """
    if levels < 2:
        raise ParameterError("a hierarchy needs at least two levels")
    if spec.kind == "heisenberg":
        raise InputError("heisenberg lattices are not nested under h -> h/2; no hierarchy available")
    d = spec.dim
    finest_points = 1
    if spec.kind == "torus":
        for L in spec.extent:
            finest_points *= round(L / spec.h) * 2 ** (levels - 1)
    else:
        per_axis = (2 * spec.radius * max(spec.q or (1.0,)) ** 0.5) if spec.kind == "gaussian" else None
        for ax in range(d):
            L = per_axis if per_axis is not None else spec.extent[ax]
            finest_points *= int(np.ceil(L / spec.h)) * 2 ** (levels - 1) + 1
    if finest_points > point_budget:
        raise ResourceError(f"finest level would have {finest_points} points, budget is {point_budget}")
    spaces, pf, pd, audits = [], [], [], []
    s = spec
    for l in range(levels):
        space = build(s)
        if audit_trials:
            rep = audit_axioms(space, trials=audit_trials, seed=seed + l)
            if not rep.ok:
                raise InputError(f"level {l} fails the axiom audit")
            audits.append(rep)
        spaces.append(space)
        s = s.refined(2)
    for l in range(levels - 1):
        shape = spaces[l].meta["shape"]
        fine_shape = spaces[l + 1].meta["shape"]
        maker = _cell_1d if spec.kind == "torus" else _vertex_1d
        pairs = [maker(n) for n in shape]
        P = _kron_all([p for p, _ in pairs])
        C = _kron_all([c for _, c in pairs])
        if P.shape != (int(np.prod(fine_shape)), int(np.prod(shape))):
            raise InputError("refined grid is not nested in the coarse grid")
        pf.append(P)
        pd.append(C)
    return GridHierarchy(spec, spaces, pf, pd, audits)


def _l2(space: DiscreteSpace, u) -> float:
    return float(np.sqrt(np.dot(space.measure, u * u)))


def gamma_distance(H: GridHierarchy, A: tuple, B: tuple) -> float:
    """L2 distance on the finest level between prolonged torsion functions.

    ``A`` and ``B`` are ``(Domain, level)`` pairs.
    """
    (da, la), (db, lb) = A, B
    wa = H.prolong_function(torsion(H.levels[la], da).w, la)
    if (la, da.key) == (lb, db.key):
        return 0.0
    wb = H.prolong_function(torsion(H.levels[lb], db).w, lb)
    return _l2(H.finest, wa - wb)


def liminf_proxy(values: Sequence[float]) -> float:
    """Minimum over the two finest levels, or ``+inf`` for visibly divergent tails.

    A tail counts as divergent when the last two increments are positive and
    the later one is at least as large as the earlier one.
    """
    v = np.asarray(values, dtype=float)
    if np.any(np.isinf(v[-2:])):
        return float(np.min(v[-2:]))
    if len(v) >= 3:
        d1, d2 = v[-2] - v[-3], v[-1] - v[-2]
        if d1 > 0 and d2 > 0 and d2 >= d1:
            return np.inf
    return float(np.min(v[-2:]))


def richardson_slack(values: Sequence[float], factor: float = 10.0) -> float:
    """``factor`` times the geometric tail estimate ``|s_L - s_(L-1)| / 3``."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2 or np.any(np.isinf(v[-2:])):
        return 0.0
    return factor * abs(v[-1] - v[-2]) / 3.0


def _margin(liminf: float, value: float) -> float:
    if np.isinf(liminf):
        return np.inf
    return float(liminf - value)


@dataclass
class ConvergenceReport:
    """Finest-level limit proxy and semicontinuity checks for a domain sequence."""

    distances: np.ndarray
    consecutive: list
    threshold: float
    limit: np.ndarray = field(repr=False)
    limit_domain: Domain = field(repr=False)
    limit_torsion: np.ndarray = field(repr=False)
    domination_margin: float
    domination_gap: float
    level_measures: list
    limit_measure: float
    measure_margin: float
    level_lambdas: np.ndarray
    limit_lambdas: np.ndarray
    lambda_liminf: np.ndarray
    lambda_slack: np.ndarray
    lambda_margin: np.ndarray
    level_energies: list
    limit_energy: float
    energy_margin: float
    energy_slack: float
    h0_leakage: list
    limit_in_h0: bool
    tol: float = 1e-8
    extra: dict = field(default_factory=dict)

    def checks(self) -> dict:
        return {
            "domination": self.domination_margin <= self.tol,
            "measure_lsc": self.measure_margin >= -self.tol,
            "spectral_lsc": bool(np.all(self.lambda_margin >= -self.lambda_slack - self.tol)),
            "energy_lsc": self.energy_margin >= -self.energy_slack - self.tol,
            "limit_in_h0": self.limit_in_h0,
        }

    @property
    def verdict(self) -> str:
        bad = [k for k, ok in self.checks().items() if not ok]
        return CONSISTENT if not bad else "not consistent (failed: " + ", ".join(bad) + ")"

    @property
    def cauchy_decay(self) -> bool:
        c = self.consecutive
        return len(c) < 2 or c[-1] < c[0]

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "checks": self.checks(),
            "distances": self.distances.tolist(),
            "consecutive_distances": list(self.consecutive),
            "cauchy_decay": self.cauchy_decay,
            "threshold": self.threshold,
            "domination_margin": self.domination_margin,
            "domination_gap": self.domination_gap,
            "level_measures": list(self.level_measures),
            "limit_measure": self.limit_measure,
            "measure_margin": self.measure_margin,
            "level_lambdas": [[ext_real(v) for v in row] for row in self.level_lambdas],
            "limit_lambdas": [ext_real(v) for v in self.limit_lambdas],
            "lambda_liminf": [ext_real(v) for v in self.lambda_liminf],
            "lambda_slack": [float(v) for v in self.lambda_slack],
            "lambda_margin": [ext_real(v) for v in self.lambda_margin],
            "level_energies": list(self.level_energies),
            "limit_energy": self.limit_energy,
            "energy_margin": self.energy_margin,
            "energy_slack": self.energy_slack,
            "h0_leakage": list(self.h0_leakage),
            "limit_in_h0": self.limit_in_h0,
            "limit_domain_size": self.limit_domain.size,
            "tolerance": self.tol,
            "extra": self.extra,
        }


def weak_gamma_analyze(H: GridHierarchy, seq: Sequence[Domain], k: int = 2,
                       tau_pos: float = TAU_POS, tol: float = 1e-8) -> ConvergenceReport:
    """Limit proxy and semicontinuity checks for one domain per level.

    The proxy is ``w = (W_L - theta)^+`` where ``W_L`` is the finest torsion
    function and ``theta = max(tau_pos max W_L, ||W_L - W_(L-1)||_inf / 3)``
    absorbs the estimated distance to the limit.  The proxy domain is
    ``{w > 0}``.  Because ``W_L - theta`` is a subsolution on that set,
    ``w <= w_Omega`` holds exactly up to round-off.
    """
    if len(seq) != H.depth:
        raise InputError(f"need one domain per level ({H.depth}), got {len(seq)}")
    if k < 1:
        raise ParameterError("k must be >= 1")
    fine = H.finest
    L = H.depth
    W, leak = [], []
    for l, dom in enumerate(seq):
        w = torsion(H.levels[l], dom).w
        Wl = H.prolong_function(w, l)
        W.append(Wl)
        outside = ~H.prolong_domain(dom, l).mask
        tot = _l2(fine, Wl)
        leak.append(_l2(fine, np.where(outside, Wl, 0.0)) / tot if tot > 0 else 0.0)
    D = np.zeros((L, L))
    for i in range(L):
        for j in range(i + 1, L):
            D[i, j] = D[j, i] = _l2(fine, W[i] - W[j])
    consecutive = [float(D[i, i + 1]) for i in range(L - 1)]
    WL = W[-1]
    peak = float(WL.max()) if WL.size else 0.0
    theta = max(tau_pos * peak, float(np.abs(WL - W[-2]).max()) / 3.0)
    limit = np.maximum(WL - theta, 0.0)
    omega = Domain.from_mask(fine, (limit > 0) & fine.admissible)
    w_omega = torsion(fine, omega).w
    dom_margin = float((limit - w_omega).max())
    dom_gap = float((w_omega - limit).max())

    meas = [float(s.measure_value) for s in seq]
    m_lim = omega.measure_value
    meas_margin = min(meas[-2:]) - m_lim

    lam_levels = np.array([eigenvalues(H.levels[l], seq[l], k).eigenvalues for l in range(L)])
    lam_lim = eigenvalues(fine, omega, k).eigenvalues
    lam_inf = np.array([liminf_proxy(lam_levels[:, j]) for j in range(k)])
    lam_slack = np.array([richardson_slack(lam_levels[:, j]) for j in range(k)])
    lam_margin = np.array([_margin(lam_inf[j], lam_lim[j]) for j in range(k)])

    energies = [float(torsion(H.levels[l], seq[l]).objective) for l in range(L)]
    e_lim = float(torsion(fine, omega).objective)
    e_inf = liminf_proxy(energies)
    e_slack = richardson_slack(energies)
    e_margin = _margin(e_inf, e_lim)

    in_h0 = bool(np.all(limit[~omega.mask] <= tau_pos * max(peak, 1e-300)))
    return ConvergenceReport(
        D, consecutive, theta, limit, omega, w_omega, dom_margin, dom_gap, meas, m_lim,
        float(meas_margin), lam_levels, lam_lim, lam_inf, lam_slack, lam_margin, energies, e_lim,
        float(e_margin), float(e_slack), leak, in_h0, tol,
    )


def constant_sequence(H: GridHierarchy, dom: Domain, mode: str = "children") -> list:
    """Prolongations of one coarsest-level domain to every level."""
    return [dom if l == 0 else H.prolong_domain(dom, 0, l, mode=mode) for l in range(H.depth)]


def stripe_sequence(H: GridHierarchy, axis: int = 0, cells: int = 2) -> list:
    """Stripes ``cells * h_l`` wide alternating with gaps of the same width."""
    seq = []
    for l, space in enumerate(H.levels):
        width = cells * H.h(l)
        x = space.coords[:, axis]
        band = np.floor(x / width + 1e-9).astype(np.int64) % 2 == 0
        seq.append(Domain.from_mask(space, band & space.admissible))
    return seq


def hole_mask(space: DiscreteSpace, eps: float, radius: float, extent: Sequence[float]) -> np.ndarray:
    """Points within periodic distance ``radius`` of the lattice ``eps Z^d``."""
    x = space.coords
    ext = np.asarray(extent, dtype=float)
    for L in ext:
        ratio = L / eps
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise InputError(f"hole spacing {eps} does not tile the period {L}")
    offs = x - eps * np.round(x / eps)
    dist = np.sqrt(np.sum(offs**2, axis=1))
    mask = dist <= radius + 1e-12
    # every hole must contain a grid point
    centers = np.indices(tuple(int(round(L / eps)) for L in ext)).reshape(len(ext), -1).T * eps
    h = float(space.meta["h"])
    hits = np.round(x[mask] / eps).astype(np.int64) % np.array([int(round(L / eps)) for L in ext])
    if len({tuple(r) for r in hits.tolist()}) < len(centers):
        raise InputError(f"holes of radius {radius} are not resolved by the grid (h = {h})")
    return mask


def perforated_sequence(H: GridHierarchy, eps: Sequence[float], radius: Sequence[float]) -> list:
    if H.spec.kind != "torus":
        raise InputError("perforated sequences live on the periodic torus")
    if len(eps) != H.depth or len(radius) != H.depth:
        raise InputError("need one hole spacing and one radius per level")
    seq = []
    for l, space in enumerate(H.levels):
        h = H.h(l)
        if eps[l] <= 0:
            seq.append(Domain.whole(space))
            continue
        if eps[l] < 2 * h - 1e-12:
            raise InputError(f"hole spacing {eps[l]} is finer than the grid at level {l} (h = {h})")
        holes = hole_mask(space, eps[l], radius[l], H.spec.extent)
        seq.append(Domain.from_mask(space, space.admissible & ~holes))
    return seq


def perforated_study(H: GridHierarchy, eps: Sequence[float], radius: Sequence[float], k: int = 2,
                     tau_pos: float = TAU_POS) -> ConvergenceReport:
    """Torus minus a hole lattice at each level, analyzed as a weak-gamma sequence.

    ``eps[l] = 0`` means no holes at level ``l``.  The report's ``extra``
    holds the gamma distance of the finest domain to the limit proxy domain
    and to the full torus.
    """
    seq = perforated_sequence(H, eps, radius)
    rep = weak_gamma_analyze(H, seq, k=k, tau_pos=tau_pos)
    fine = H.finest
    L = H.depth - 1
    full = Domain.whole(fine)
    w_full = torsion(fine, full).w
    rep.extra.update({
        "gamma_distance_to_limit": gamma_distance(H, (seq[-1], L), (rep.limit_domain, L)),
        "gamma_distance_to_full": gamma_distance(H, (seq[-1], L), (full, L)),
        "max_w_full": float(w_full.max()),
        "eps": list(map(float, eps)),
        "radius": list(map(float, radius)),
    })
    return rep


def enlarge_sequence(H: GridHierarchy, seq: Sequence[Domain], target: Domain, eps) -> list:
    """``Omega_l`` united with ``{w_target > eps_l}``, with ``w_target`` from the coarsest level.

    ``eps`` is a positive scalar or one positive value per level.
    """
    eps_list = [float(eps)] * H.depth if np.ndim(eps) == 0 else [float(e) for e in eps]
    if len(eps_list) != H.depth:
        raise InputError("need one eps per level")
    if any(not e > 0 for e in eps_list):
        raise ParameterError("eps must be positive")
    w0 = torsion(H.levels[0], target).w
    out = []
    for l, dom in enumerate(seq):
        wl = H.prolong_function(w0, 0, l)
        out.append(Domain.from_mask(H.levels[l], dom.mask | ((wl > eps_list[l]) & H.levels[l].admissible)))
    return out
