"""Spectral and energy shape optimization under a measure constraint.

Minimizes ``J(Omega)`` over admissible domains with ``m(Omega) <= c`` where
``J`` is ``Phi(lambda_1, ..., lambda_K)`` for a monotone ``Phi`` or the
torsion energy ``E``.  Three searches are provided: exhaustive enumeration
(small spaces, exact), multistart local search and eigenfunction
thresholding.

Ties are broken by the smallest integer bit mask, with bit ``i`` standing for
point ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bvp import energy_set_reduce
from .errors import InputError, ParameterError, ResourceError
from .mmspace import Domain, DiscreteSpace
from .spectrum import dirichlet_energy, eigenvalues, ext_real

EXHAUSTIVE_LIMIT = 24
BATCH_LIMIT = 64
TIE_RTOL = 1e-12
_CHUNK = 1 << 13


# ---------------------------------------------------------------------------
# Phi functionals


@dataclass(frozen=True)
class PhiFunctional:
    """Monotone functional of the eigenvalue vector.

    ``single_k(k)`` picks ``lambda_k``; ``weighted_sum(c)`` is
    ``sum_i c_i lambda_i``; ``max_of(S)`` is ``max_{i in S} lambda_i``.
    Indices are 1-based.  ``custom`` wraps an arbitrary callable and is only
    accepted by the optimizers after :func:`phi_audit` passes.
    """

    kind: str
    params: tuple
    func: Callable | None = None
    k_custom: int = 0

    @classmethod
    def single_k(cls, k: int) -> "PhiFunctional":
        if int(k) != k or k < 1:
            raise ParameterError("k must be a positive integer")
        return cls("single_k", (int(k),))

    @classmethod
    def weighted_sum(cls, weights: Sequence[float], validate: bool = True) -> "PhiFunctional":
        w = tuple(float(x) for x in weights)
        if not w:
            raise ParameterError("weighted_sum needs at least one weight")
        if validate and any(x < 0 for x in w):
            raise ParameterError("weights must be nonnegative (pass validate=False to audit an invalid choice)")
        return cls("weighted_sum", w)

    @classmethod
    def max_of(cls, indices: Sequence[int]) -> "PhiFunctional":
        idx = tuple(sorted({int(i) for i in indices}))
        if not idx or idx[0] < 1:
            raise ParameterError("max_of needs positive 1-based indices")
        return cls("max_of", idx)

    @classmethod
    def custom(cls, func: Callable, k_max: int) -> "PhiFunctional":
        if k_max < 1:
            raise ParameterError("k_max must be >= 1")
        return cls("custom", (), func, int(k_max))

    @property
    def k_max(self) -> int:
        if self.kind == "single_k":
            return self.params[0]
        if self.kind == "weighted_sum":
            return len(self.params)
        if self.kind == "max_of":
            return self.params[-1]
        return self.k_custom

    @property
    def trusted(self) -> bool:
        """Library functional with valid parameters (monotone by construction)."""
        if self.kind == "weighted_sum":
            return all(x >= 0 for x in self.params)
        return self.kind in ("single_k", "max_of")

    def describe(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "k_max": self.k_max}


def phi_eval_batch(phi: PhiFunctional, Z: np.ndarray) -> np.ndarray:
    """Row-wise ``Phi`` for a ``(B, >= k_max)`` array of extended reals."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] < phi.k_max:
        raise InputError(f"spectrum has {Z.shape[1]} entries, Phi consumes {phi.k_max}")
    if phi.kind == "single_k":
        return Z[:, phi.params[0] - 1].copy()
    if phi.kind == "max_of":
        return Z[:, [i - 1 for i in phi.params]].max(axis=1)
    if phi.kind == "weighted_sum":
        w = np.asarray(phi.params)
        out = np.zeros(Z.shape[0])
        for i, wi in enumerate(w):
            if wi == 0.0:
                continue  # 0 * inf = 0
            out = out + wi * Z[:, i]
        return out
    return np.array([float(phi.func(z[: phi.k_max])) for z in Z])


def phi_eval(phi: PhiFunctional, spectrum) -> float:
    """``Phi`` of one spectrum vector; ``+inf`` entries propagate monotonically."""
    return float(phi_eval_batch(phi, np.asarray(spectrum, dtype=float)[None, :])[0])


@dataclass
class PhiAuditReport:
    samples: int
    seed: int
    monotone_violations: int
    lsc_violations: int
    worst_monotone: float
    worst_lsc: float
    counterexample: dict | None

    @property
    def ok(self) -> bool:
        return self.monotone_violations == 0 and self.lsc_violations == 0

    def to_dict(self) -> dict:
        return {
            "samples": self.samples, "seed": self.seed, "ok": self.ok,
            "monotone_violations": self.monotone_violations, "lsc_violations": self.lsc_violations,
            "worst_monotone": self.worst_monotone, "worst_lsc": self.worst_lsc,
            "counterexample": self.counterexample,
        }


def _random_spectrum(rng, k):
    z = np.sort(rng.exponential(5.0, size=k))
    if rng.random() < 0.2:
        cut = rng.integers(1, k + 1)
        z[cut:] = np.inf
    return z


def phi_audit(phi: PhiFunctional, samples: int = 200, seed: int = 0) -> PhiAuditReport:
    """Sample the monotonicity and lower-semicontinuity conditions.

    Monotonicity: ``Phi(z1) <= Phi(z2) + 1e-12`` for coordinatewise ``z1 <= z2``
    (random pairs plus unit bumps of each coordinate).  Semicontinuity:
    ``Phi(z) <= min`` over the tail of ``z + d 10^-j`` plus ``1e-9``.
    """
    if samples < 1:
        raise ParameterError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    k = phi.k_max
    mono_bad = lsc_bad = 0
    worst_m = worst_l = -np.inf
    cex = None
    for s in range(samples):
        z1 = _random_spectrum(rng, k)
        pairs = [z1 + rng.exponential(1.0, size=k) * (rng.random(k) < 0.7)]
        if s < k:
            bump = z1.copy()
            bump[s] += 1.0
            pairs.append(bump)
        f1 = phi_eval(phi, z1)
        for z2 in pairs:
            f2 = phi_eval(phi, z2)
            gap = f1 - f2
            if np.isnan(gap):
                gap = 0.0 if f1 == f2 else np.inf
            worst_m = max(worst_m, gap)
            if gap > 1e-12:
                mono_bad += 1
                if cex is None:
                    cex = {"condition": "monotone", "z1": [ext_real(v) for v in z1],
                           "z2": [ext_real(v) for v in z2], "phi_z1": ext_real(f1), "phi_z2": ext_real(f2)}
        z = _random_spectrum(rng, k)
        z[~np.isfinite(z)] = 50.0
        d = rng.standard_normal(k)
        seqv = [np.maximum(z + d * 10.0 ** (-j), 0.0) for j in range(1, 14)]
        tail = min(phi_eval(phi, v) for v in seqv[-3:])
        fz = phi_eval(phi, z)
        gap = fz - tail
        worst_l = max(worst_l, gap)
        if gap > 1e-9:
            lsc_bad += 1
            if cex is None:
                cex = {"condition": "lsc", "limit": z.tolist(), "phi_limit": fz, "tail_min": tail}
    return PhiAuditReport(samples, seed, mono_bad, lsc_bad, float(worst_m), float(worst_l), cex)


# ---------------------------------------------------------------------------
# objectives


class Objective:
    """``Phi(lambda(Omega))`` or ``E(Omega)`` with a per-mask cache."""

    def __init__(self, space: DiscreteSpace, target, audit_samples: int = 200):
        self.space = space
        if isinstance(target, str):
            if target not in ("energy", "E"):
                raise ParameterError(f"unknown objective {target!r}")
            self.phi = None
        elif isinstance(target, PhiFunctional):
            if not target.trusted:
                rep = phi_audit(target, audit_samples)
                if not rep.ok:
                    raise ParameterError(f"Phi fails the monotonicity/lsc audit: {rep.counterexample}")
            self.phi = target
        else:
            raise ParameterError("objective must be a PhiFunctional or 'energy'")
        self.cache: dict[bytes, float] = {}
        self.solves = 0
        self.adm = np.flatnonzero(space.admissible)
        self._dense = None
        if len(self.adm) <= BATCH_LIMIT:
            self._prepare_dense()

    @property
    def name(self) -> str:
        return "energy" if self.phi is None else f"phi:{self.phi.kind}{list(self.phi.params)}"

    @property
    def empty_value(self) -> float:
        return 0.0 if self.phi is None else phi_eval(self.phi, np.full(self.phi.k_max, np.inf))

    def _prepare_dense(self):
        a = self.adm
        K = self.space.form_matrix[a][:, a].toarray()
        m = self.space.measure[a]
        s = 1.0 / np.sqrt(m)
        self._dense = {"Ks": K * s[:, None] * s[None, :], "H": K + np.diag(m), "m": m}

    def fresh(self, dom: Domain) -> float:
        """Re-evaluate without the cache or the batch path."""
        if self.phi is None:
            return dirichlet_energy(self.space, dom)
        return phi_eval(self.phi, eigenvalues(self.space, dom, self.phi.k_max).eigenvalues)

    def batch(self, masks: np.ndarray) -> np.ndarray:
        """Values for a ``(B, n_adm)`` boolean array over the admissible points."""
        masks = np.asarray(masks, dtype=bool)
        out = np.empty(len(masks))
        todo = []
        for i, mk in enumerate(masks):
            key = np.packbits(mk).tobytes()
            v = self.cache.get(key)
            if v is None:
                todo.append(i)
            else:
                out[i] = v
        if todo:
            vals = self._compute(masks[todo])
            self.solves += len(todo)
            for j, i in enumerate(todo):
                out[i] = vals[j]
                self.cache[np.packbits(masks[i]).tobytes()] = vals[j]
        return out

    def _compute(self, masks: np.ndarray) -> np.ndarray:
        if self._dense is None:
            res = []
            for mk in masks:
                full = np.zeros(self.space.n, dtype=bool)
                full[self.adm[mk]] = True
                res.append(self.fresh(Domain.from_mask(self.space, full)))
            return np.array(res)
        if self.phi is None:
            return _energy_batch(self._dense["H"], self._dense["m"], masks)
        return phi_eval_batch(self.phi, _spectrum_batch(self._dense["Ks"], masks, self.phi.k_max))


def _spectrum_batch(Ks: np.ndarray, masks: np.ndarray, k: int) -> np.ndarray:
    """Smallest ``k`` eigenvalues of each masked principal submatrix (``+inf`` padded).

    Excluded points get diagonal ``-1`` and decoupled rows, so their
    eigenvalues sort first and are dropped.
    """
    B, n = masks.shape
    out = np.full((B, k), np.inf)
    for start in range(0, B, _CHUNK):
        mk = masks[start:start + _CHUNK]
        A = np.broadcast_to(Ks, (len(mk), n, n)).copy()
        keep = mk[:, :, None] & mk[:, None, :]
        A[~keep] = 0.0
        ii = np.arange(n)
        A[:, ii, ii] = np.where(mk, np.diagonal(Ks)[None, :], -1.0)
        ev = np.linalg.eigvalsh(A)
        size = mk.sum(axis=1)
        for j in range(k):
            col = (n - size) + j
            ok = j < size
            out[start:start + len(mk), j][ok] = np.maximum(ev[np.flatnonzero(ok), col[ok]], 0.0)
    return out


def _energy_batch(H: np.ndarray, m: np.ndarray, masks: np.ndarray) -> np.ndarray:
    B, n = masks.shape
    out = np.zeros(B)
    for start in range(0, B, _CHUNK):
        mk = masks[start:start + _CHUNK]
        A = np.broadcast_to(H, (len(mk), n, n)).copy()
        keep = mk[:, :, None] & mk[:, None, :]
        A[~keep] = 0.0
        ii = np.arange(n)
        A[:, ii, ii] = np.where(mk, np.diagonal(H)[None, :], 1.0)
        rhs = np.where(mk, m[None, :], 0.0)
        w = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
        out[start:start + len(mk)] = -0.5 * np.sum(w * rhs, axis=1)
    return out


# ---------------------------------------------------------------------------
# results and searches


@dataclass
class OptResult:
    best_domain: Domain
    best_value: float
    evaluations: int
    trace: list
    method: str
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "best_value": ext_real(self.best_value),
            "best_points": self.best_domain.indices.tolist(),
            "best_measure": self.best_domain.measure_value,
            "evaluations": self.evaluations,
            "trace": [[str(a), ext_real(b)] + list(rest) for a, b, *rest in self.trace],
            "extra": self.extra,
        }


def _bitmask_int(mask_adm: np.ndarray) -> int:
    return int(sum(1 << i for i in np.flatnonzero(mask_adm)))


def _to_domain(space: DiscreteSpace, adm: np.ndarray, mask_adm: np.ndarray) -> Domain:
    full = np.zeros(space.n, dtype=bool)
    full[adm[mask_adm]] = True
    return Domain.from_mask(space, full)


def _feasible(measure_sum: float, c: float) -> bool:
    return measure_sum <= c + 1e-12


def exhaustive_optimize(space: DiscreteSpace, objective, c: float) -> OptResult:
    """Exact minimizer over all admissible subsets with ``m(Omega) <= c``.

    Ties within ``1e-12`` relative go to the smallest bit mask.
    """
    obj = objective if isinstance(objective, Objective) else Objective(space, objective)
    adm = obj.adm
    n = len(adm)
    if n > EXHAUSTIVE_LIMIT:
        raise ResourceError(f"{n} admissible points exceed the exhaustive limit {EXHAUSTIVE_LIMIT}")
    m = space.measure[adm]
    bits = np.arange(n)
    best_val, best_code, evals = np.inf, None, 0
    values_all, codes_all = [], []
    for start in range(0, 1 << n, 1 << 16):
        codes = np.arange(start, min(start + (1 << 16), 1 << n), dtype=np.int64)
        masks = ((codes[:, None] >> bits[None, :]) & 1).astype(bool)
        meas = masks.astype(float) @ m
        feas = meas <= c + 1e-12
        if not feas.any():
            continue
        codes, masks = codes[feas], masks[feas]
        empty = ~masks.any(axis=1)
        vals = np.empty(len(codes))
        vals[empty] = obj.empty_value
        if (~empty).any():
            vals[~empty] = obj._compute(masks[~empty])
        evals += int((~empty).sum())
        values_all.append(vals)
        codes_all.append(codes)
    values = np.concatenate(values_all)
    codes = np.concatenate(codes_all)
    vmin = values.min()
    thr = vmin + TIE_RTOL * max(1.0, abs(vmin)) if np.isfinite(vmin) else vmin
    best_code = int(codes[np.flatnonzero(values <= thr)].min())
    mask = ((best_code >> bits) & 1).astype(bool)
    dom = _to_domain(space, adm, mask)
    fresh = obj.fresh(dom) if dom.size else obj.empty_value
    reduced = energy_set_reduce(space, dom)
    return OptResult(dom, fresh, evals, [], "exhaustive",
                     {"objective": obj.name, "c": c, "energy_set": bool(reduced == dom),
                      "feasible_subsets": int(len(values)), "batch_value": ext_real(vmin)})


def local_search_optimize(space: DiscreteSpace, objective, c: float, seed: int = 0,
                          restarts: int = 10, max_moves: int = 200) -> OptResult:
    """Multistart best-improvement descent with add, remove and swap moves.

    Restart ``r`` draws its randomness from the ``r``-th child of
    ``SeedSequence(seed)``; restarts run sequentially and are merged by value,
    then by bit mask.  A restart starts from a random greedy maximal feasible
    set and only accepts strictly improving moves.
    """
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    obj = objective if isinstance(objective, Objective) else Objective(space, objective)
    adm = obj.adm
    n = len(adm)
    m = space.measure[adm]
    trace = []
    results = []
    children = np.random.SeedSequence(seed).spawn(restarts)
    for r in range(restarts):
        rng = np.random.default_rng(children[r])
        cur = np.zeros(n, dtype=bool)
        total = 0.0
        for p in rng.permutation(n):
            if _feasible(total + m[p], c):
                cur[p] = True
                total += m[p]
        val = obj.batch(cur[None, :])[0] if cur.any() else obj.empty_value
        trace.append((f"r{r}:start", val, _bitmask_int(cur)))
        for _ in range(max_moves):
            cands, labels = _neighbors(cur, m, c)
            if not cands:
                break
            arr = np.array(cands)
            vals = np.empty(len(arr))
            nonempty = arr.any(axis=1)
            vals[~nonempty] = obj.empty_value
            if nonempty.any():
                vals[nonempty] = obj.batch(arr[nonempty])
            j = int(np.argmin(vals))
            if not vals[j] < val - TIE_RTOL * max(1.0, abs(val) if np.isfinite(val) else 1.0):
                break
            cur, val = arr[j], float(vals[j])
            trace.append((f"r{r}:{labels[j]}", val, _bitmask_int(cur)))
        results.append((val, _bitmask_int(cur), cur))
    vbest = min(v for v, _, _ in results)
    thr = vbest + TIE_RTOL * max(1.0, abs(vbest)) if np.isfinite(vbest) else vbest
    _, _, best = min(((v, code, mk) for v, code, mk in results if v <= thr), key=lambda t: t[1])
    dom = _to_domain(space, adm, best)
    fresh = obj.fresh(dom) if dom.size else obj.empty_value
    return OptResult(dom, fresh, obj.solves, trace, "local_search",
                     {"objective": obj.name, "c": c, "restarts": restarts, "seed": seed})


def _neighbors(cur: np.ndarray, m: np.ndarray, c: float):
    total = float(m[cur].sum())
    inside = np.flatnonzero(cur)
    outside = np.flatnonzero(~cur)
    cands, labels = [], []
    for y in outside:
        if _feasible(total + m[y], c):
            nb = cur.copy()
            nb[y] = True
            cands.append(nb)
            labels.append(f"add {y}")
    for x in inside:
        nb = cur.copy()
        nb[x] = False
        cands.append(nb)
        labels.append(f"remove {x}")
        for y in outside:
            if _feasible(total - m[x] + m[y], c):
                nb2 = nb.copy()
                nb2[y] = True
                cands.append(nb2)
                labels.append(f"swap {x}->{y}")
    return cands, labels


def superlevel_domain(space: DiscreteSpace, values: np.ndarray, within: np.ndarray, c: float) -> Domain:
    """Largest prefix of ``within`` sorted by ``values`` (descending) with measure ``<= c``."""
    idx = np.flatnonzero(within)
    order = idx[np.lexsort((idx, -values[idx]))]
    cum = np.cumsum(space.measure[order])
    take = order[cum <= c + 1e-12]
    return Domain.from_indices(space, take)


def threshold_iterate(space: DiscreteSpace, c: float, iters: int = 20,
                      start: Domain | None = None) -> OptResult:
    """Rearrangement heuristic for ``lambda_1`` under ``m(Omega) <= c``.

    Replaces ``Omega`` by the measure-``c`` superlevel set of ``|u_1|``.  A
    step that would raise ``lambda_1`` is rejected and the iteration stops, so
    the trace over feasible iterates is non-increasing.
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    if space.coords is None:
        raise InputError("threshold_iterate needs a space with coordinates")
    if not c > 0:
        raise ParameterError("c must be positive")
    cur = Domain.whole(space) if start is None else start
    best_dom, best_val = None, np.inf
    if cur.measure_value <= c + 1e-12:
        best_dom, best_val = cur, float(eigenvalues(space, cur, 1).eigenvalues[0])
    trace = [("start", best_val, cur.size)]
    evals = 1
    stop = "iters"
    for it in range(1, iters + 1):
        spec = eigenvalues(space, cur, 1)
        evals += 1
        if spec.finite == 0:
            stop = "empty"
            break
        u = np.abs(spec.eigenfunctions[0])
        nxt = superlevel_domain(space, u, cur.mask, c)
        val = float(eigenvalues(space, nxt, 1).eigenvalues[0])
        evals += 1
        if best_dom is not None and nxt == best_dom:
            trace.append((f"iter {it}: fixed point", val, nxt.size))
            stop = "fixed-point"
            break
        if val > best_val + 1e-8 * max(1.0, abs(best_val)):
            trace.append((f"iter {it}: rejected", val, nxt.size))
            stop = "no-improvement"
            break
        trace.append((f"iter {it}", val, nxt.size))
        if val <= best_val:
            best_dom, best_val = nxt, val
        cur = nxt
    if best_dom is None:
        best_dom = Domain.empty(space)
    return OptResult(best_dom, best_val, evals, trace, "threshold", {"c": c, "stop": stop})
