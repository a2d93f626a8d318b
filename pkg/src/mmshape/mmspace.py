"""Finite metric measure spaces carrying a row-based gradient operator.

A space is a finite point set with positive masses ``m_i`` and a family of
difference functionals ``g_r`` (rows).  Row ``r`` has a weight ``c_r >= 0`` and
a location point ``loc(r)``.  The pointwise gradient is

    Du(x) = sqrt( (1/m_x) * sum_{r : loc(r) = x} c_r (g_r . u)^2 )

so that ``sum_x Du(x)^2 m_x`` equals the quadratic form
``a(u, u) = sum_r c_r (g_r . u)^2`` exactly.  An edge ``(x, y, w)`` is encoded
as two rows, one located at each endpoint, each carrying weight ``w / 2``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import InputError, ParameterError

SCHEMA_VERSION = "mmspace/1"


@dataclass(frozen=True, eq=False)
class GradientOperator:
    """Sparse difference rows ``g_r`` with weights ``c_r`` and locations."""

    rows: sp.csr_matrix
    weights: np.ndarray
    location: np.ndarray

    @classmethod
    def from_edges(cls, n: int, tails, heads, weights) -> "GradientOperator":
        tails = np.asarray(tails, dtype=np.int64)
        heads = np.asarray(heads, dtype=np.int64)
        w = np.asarray(weights, dtype=float)
        m = len(tails)
        # row 2e sits at the tail, row 2e+1 at the head; both read u(head) - u(tail)
        data = np.tile([-1.0, 1.0], 2 * m)
        cols = np.empty(4 * m, dtype=np.int64)
        cols[0::4] = tails
        cols[1::4] = heads
        cols[2::4] = tails
        cols[3::4] = heads
        indptr = np.arange(0, 4 * m + 1, 2)
        rows = sp.csr_matrix((data, cols, indptr), shape=(2 * m, n))
        loc = np.empty(2 * m, dtype=np.int64)
        loc[0::2] = tails
        loc[1::2] = heads
        return cls(rows, np.repeat(w / 2.0, 2), loc)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def validate(self, n: int) -> None:
        if self.rows.shape[1] != n:
            raise InputError(f"gradient rows have {self.rows.shape[1]} columns, space has {n} points")
        if len(self.weights) != self.n_rows or len(self.location) != self.n_rows:
            raise InputError("weights/location length does not match the number of rows")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise InputError("row weights must be finite and nonnegative")
        if self.n_rows and (self.location.min() < 0 or self.location.max() >= n):
            raise InputError("row location out of range")
        nnz = np.diff(self.rows.indptr)
        if np.any(nnz < 2):
            raise InputError("every row needs at least two nonzero coefficients")
        sums = np.asarray(self.rows.sum(axis=1)).ravel()
        scale = np.asarray(abs(self.rows).sum(axis=1)).ravel()
        if np.any(np.abs(sums) > 1e-12 * scale):
            raise InputError("row coefficients must sum to zero")


@dataclass(frozen=True, eq=False)
class DiscreteSpace:
    """Finite metric measure space ``(X, m)`` with gradient operator ``D``.

    ``absorbed`` marks points that carry the outer Dirichlet condition of a
    builder; they belong to ``X`` but are never part of an admissible domain.
    """

    measure: np.ndarray
    grad: GradientOperator
    coords: np.ndarray | None = None
    labels: tuple[str, ...] | None = None
    absorbed: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.measure, dtype=float)
        object.__setattr__(self, "measure", m)
        if m.ndim != 1 or len(m) == 0:
            raise InputError("measure must be a nonempty vector")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise InputError("every point needs a finite positive mass")
        self.grad.validate(len(m))
        if self.absorbed is None:
            object.__setattr__(self, "absorbed", np.zeros(len(m), dtype=bool))
        else:
            a = np.asarray(self.absorbed, dtype=bool)
            if a.shape != m.shape:
                raise InputError("absorbed mask has the wrong length")
            object.__setattr__(self, "absorbed", a)
        if self.coords is not None:
            c = np.asarray(self.coords, dtype=float)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] != len(m):
                raise InputError("coords must have one row per point")
            object.__setattr__(self, "coords", c)
        if self.labels is not None and len(self.labels) != len(m):
            raise InputError("labels must have one entry per point")
        for arr in (self.measure, self.absorbed, self.coords):
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def from_edges(cls, measure, edges: Iterable[tuple[int, int, float]], **kwargs) -> "DiscreteSpace":
        """Graph space: each edge ``(x, y, w)`` contributes ``w (u_y - u_x)^2`` to the form."""
        edges = list(edges)
        n = len(measure)
        if edges:
            t, h, w = (np.array(col) for col in zip(*edges))
        else:
            t = h = np.zeros(0, dtype=np.int64)
            w = np.zeros(0)
        if np.any(t == h):
            raise InputError("self-loops carry no gradient")
        return cls(np.asarray(measure, dtype=float), GradientOperator.from_edges(n, t, h, w), **kwargs)

    @property
    def n(self) -> int:
        return len(self.measure)

    @property
    def total_measure(self) -> float:
        return float(self.measure.sum())

    @property
    def admissible(self) -> np.ndarray:
        return ~self.absorbed

    @cached_property
    def form_matrix(self) -> sp.csr_matrix:
        """Sparse symmetric matrix ``K`` with ``u^T K v = a(u, v)``."""
        G = self.grad.rows
        K = (G.T @ sp.diags(self.grad.weights) @ G).tocsr()
        K.sum_duplicates()
        return K

    @cached_property
    def _location_matrix(self) -> sp.csr_matrix:
        r = self.grad.n_rows
        return sp.csr_matrix(
            (np.ones(r), (self.grad.location, np.arange(r))), shape=(self.n, r)
        )

    def scaled(self, t: float) -> "DiscreteSpace":
        """Same space with every row weight multiplied by ``t``."""
        if t <= 0:
            raise ParameterError("scale factor must be positive")
        g = GradientOperator(self.grad.rows, self.grad.weights * t, self.grad.location)
        return DiscreteSpace(self.measure, g, self.coords, self.labels, self.absorbed, dict(self.meta))

    def check_function(self, u, name: str = "u") -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n,):
            raise InputError(f"{name} has shape {u.shape}, expected ({self.n},)")
        return u

    def broadcast(self, f, name: str = "f") -> np.ndarray:
        """Scalar shorthand for a constant function, otherwise a length check."""
        if np.ndim(f) == 0:
            return np.full(self.n, float(f))
        return self.check_function(f, name)


@dataclass(frozen=True, eq=False)
class Domain:
    """Subset ``Omega`` of the point set with its cached measure."""

    mask: np.ndarray
    measure_value: float

    @classmethod
    def from_mask(cls, space: DiscreteSpace, mask) -> "Domain":
        mask = np.asarray(mask, dtype=bool).copy()
        if mask.shape != (space.n,):
            raise InputError(f"domain mask has shape {mask.shape}, expected ({space.n},)")
        mask.setflags(write=False)
        return cls(mask, float(space.measure[mask].sum()))

    @classmethod
    def from_indices(cls, space: DiscreteSpace, indices: Iterable[int]) -> "Domain":
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= space.n):
            raise InputError("domain index out of range")
        mask = np.zeros(space.n, dtype=bool)
        mask[idx] = True
        return cls.from_mask(space, mask)

    @classmethod
    def empty(cls, space: DiscreteSpace) -> "Domain":
        return cls.from_mask(space, np.zeros(space.n, dtype=bool))

    @classmethod
    def whole(cls, space: DiscreteSpace) -> "Domain":
        """Every admissible point (all of ``X`` when nothing is absorbed)."""
        return cls.from_mask(space, space.admissible)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    @property
    def key(self) -> bytes:
        return np.packbits(self.mask).tobytes()

    def issubset(self, other: "Domain") -> bool:
        return bool(np.all(~self.mask | other.mask))

    def __eq__(self, other):
        if not isinstance(other, Domain):
            return NotImplemented
        return self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask))

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        idx = self.indices
        shown = idx[:8].tolist()
        tail = ", ..." if len(idx) > 8 else ""
        return f"Domain(size={len(idx)}, measure={self.measure_value:.6g}, points={shown}{tail})"


def _row_values(space: DiscreteSpace, u: np.ndarray) -> np.ndarray:
    return space.grad.rows @ u


def _pointwise(space: DiscreteSpace, row_sq: np.ndarray) -> np.ndarray:
    return np.sqrt((space._location_matrix @ (space.grad.weights * row_sq)) / space.measure)


def apply_gradient(space: DiscreteSpace, u) -> np.ndarray:
    """Pointwise ``Du``; always nonnegative."""
    u = space.check_function(u)
    return _pointwise(space, _row_values(space, u) ** 2)


def dirichlet_form(space: DiscreteSpace, u, v) -> float:
    """Bilinear form ``a(u, v) = sum_r c_r (g_r . u)(g_r . v)``."""
    u = space.check_function(u, "u")
    v = space.check_function(v, "v")
    gu = _row_values(space, u)
    gv = gu if v is u else _row_values(space, v)
    return float(np.dot(space.grad.weights * gu, gv))


def l2_norm(space: DiscreteSpace, u) -> float:
    u = space.check_function(u)
    return float(np.sqrt(np.dot(space.measure, u * u)))


def sobolev_norm(space: DiscreteSpace, u) -> float:
    """``(||u||^2_{L^2(m)} + ||Du||^2_{L^2(m)})^{1/2}``."""
    u = space.check_function(u)
    return float(np.sqrt(np.dot(space.measure, u * u) + dirichlet_form(space, u, u)))


def is_in_h0(space: DiscreteSpace, dom: Domain, u, tol: float = 0.0) -> bool:
    if tol < 0:
        raise ParameterError("tol must be nonnegative")
    u = space.check_function(u)
    outside = ~dom.mask
    return bool(np.all(np.abs(u[outside]) <= tol))


# ---------------------------------------------------------------------------
# axiom audit

HOLDS_EXACTLY = "holds-exactly"
HOLDS_AS_INEQUALITY = "holds-as-inequality"
VIOLATED = "violated"


@dataclass
class AxiomVerdict:
    name: str
    verdict: str
    residual: float
    counterexample: dict | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "verdict": self.verdict,
            "residual": self.residual,
            "counterexample": self.counterexample,
            "note": self.note,
        }


@dataclass
class AxiomReport:
    verdicts: dict[str, AxiomVerdict]
    trials: int
    seed: int

    def __getitem__(self, name: str) -> AxiomVerdict:
        return self.verdicts[name]

    @property
    def ok(self) -> bool:
        """No axiom is violated outright (equalities may hold only as inequalities)."""
        return all(v.verdict != VIOLATED for v in self.verdicts.values())

    def table(self) -> str:
        lines = [f"{'axiom':<8} {'verdict':<20} residual"]
        for v in self.verdicts.values():
            lines.append(f"{v.name:<8} {v.verdict:<20} {v.residual:.3e}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "axioms": {k: v.to_dict() for k, v in self.verdicts.items()},
        }


def audit_pair(space: DiscreteSpace, seed: int, trial: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``(u, v)`` pair used by :func:`audit_axioms` for a given trial."""
    rng = np.random.default_rng([seed, trial])
    u = rng.standard_normal(space.n)
    v = rng.standard_normal(space.n)
    mode = trial % 3
    if mode == 1:
        # sparse supports create many ties u == v == 0
        u[rng.random(space.n) < 0.5] = 0.0
        v[rng.random(space.n) < 0.5] = 0.0
    elif mode == 2:
        v = np.abs(v)
        u = -np.abs(u)
    return u, v


def _probe_pairs(space: DiscreteSpace, limit: int = 6):
    # indicator pairs of distinct points: the canonical witnesses of nonlocality
    pts = np.arange(min(space.n, limit))
    for i in pts:
        for j in pts:
            if i < j:
                u = np.zeros(space.n)
                v = np.zeros(space.n)
                u[i] = 1.0
                v[j] = 1.0
                yield ("probe", int(i), int(j)), u, v


class _Tracker:
    def __init__(self, name):
        self.name = name
        self.residual = 0.0
        self.witness = None

    def update(self, residual_vec, tag, u, v, n_small):
        k = int(np.argmax(residual_vec))
        r = float(residual_vec[k])
        if r > self.residual:
            self.residual = r
            w = {"pair": list(tag), "point": k}
            if n_small:
                w["u"] = u.tolist()
                w["v"] = v.tolist()
            self.witness = w


def audit_axioms(
    space: DiscreteSpace,
    trials: int = 200,
    seed: int = 0,
    exact_tol: float = 1e-12,
    ineq_tol: float = 1e-10,
) -> AxiomReport:
    """Check D1-D4 and the lattice identities on seeded random pairs.

    Residuals are relative to the size of the gradients involved.  The D4
    family is reported ``holds-as-inequality`` when the equality fails but the
    row-wise bound ``D(u v v)^2 <= (1/m) sum_r c_r max((g_r u)^2, (g_r v)^2)``
    (and ``D|u| <= Du``) holds.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    n_small = space.n <= 64
    names = ["D1", "D2", "D3", "D4", "D4-ineq", "wedge", "wedge-ineq", "abs", "abs-ineq"]
    tr = {k: _Tracker(k) for k in names}

    def pairs():
        yield from _probe_pairs(space)
        for t in range(trials):
            u, v = audit_pair(space, seed, t)
            yield ("trial", seed, t), u, v

    loc = space._location_matrix
    c = space.grad.weights
    m = space.measure
    for tag, u, v in pairs():
        gu, gv = _row_values(space, u), _row_values(space, v)
        Du = _pointwise(space, gu**2)
        Dv = _pointwise(space, gv**2)
        scale = max(float(Du.max(initial=0.0)), float(Dv.max(initial=0.0)), 1e-300)

        tr["D1"].update(np.maximum(-Du, 0.0) / scale, tag, u, v, n_small)
        Duv = apply_gradient(space, u + v)
        tr["D2"].update(np.maximum(Duv - Du - Dv, 0.0) / scale, tag, u, v, n_small)
        alpha = float(np.random.default_rng([seed, hash(tag) & 0xFFFF]).uniform(-3, 3))
        Dau = apply_gradient(space, alpha * u)
        tr["D3"].update(np.abs(Dau - abs(alpha) * Du) / (scale * max(abs(alpha), 1.0)), tag, u, v, n_small)

        rowmax = np.sqrt((loc @ (c * np.maximum(gu**2, gv**2))) / m)
        vee = apply_gradient(space, np.maximum(u, v))
        wedge = apply_gradient(space, np.minimum(u, v))
        gt = u > v
        tr["D4"].update(np.abs(vee - np.where(gt, Du, Dv)) / scale, tag, u, v, n_small)
        tr["D4-ineq"].update(np.maximum(vee - rowmax, 0.0) / scale, tag, u, v, n_small)
        tr["wedge"].update(np.abs(wedge - np.where(gt, Dv, Du)) / scale, tag, u, v, n_small)
        tr["wedge-ineq"].update(np.maximum(wedge - rowmax, 0.0) / scale, tag, u, v, n_small)
        Dabs = apply_gradient(space, np.abs(u))
        tr["abs"].update(np.abs(Dabs - Du) / scale, tag, u, v, n_small)
        tr["abs-ineq"].update(np.maximum(Dabs - Du, 0.0) / scale, tag, u, v, n_small)

    verdicts: dict[str, AxiomVerdict] = {}
    lattice_note = "H is the full finite-dimensional function space, closed under max, min and u ^ 1"
    verdicts["H1"] = AxiomVerdict("H1", HOLDS_EXACTLY, 0.0, note=lattice_note)
    verdicts["H2"] = AxiomVerdict("H2", HOLDS_EXACTLY, 0.0, note=lattice_note)
    for name, tol in (("D1", exact_tol), ("D2", ineq_tol), ("D3", exact_tol)):
        t = tr[name]
        ok = t.residual <= tol
        verdicts[name] = AxiomVerdict(name, HOLDS_EXACTLY if ok else VIOLATED, t.residual,
                                      None if ok else t.witness)
    for name, label in (("D4", "D4"), ("wedge", "D(u^v)"), ("abs", "D|u|")):
        eq, ineq = tr[name], tr[name + "-ineq"]
        if eq.residual <= ineq_tol:
            verdict, cex, res = HOLDS_EXACTLY, None, eq.residual
        elif ineq.residual <= ineq_tol:
            verdict, cex, res = HOLDS_AS_INEQUALITY, eq.witness, ineq.residual
        else:
            verdict, cex, res = VIOLATED, ineq.witness, ineq.residual
        verdicts[label] = AxiomVerdict(
            label, verdict, res, cex, note=f"equality residual {eq.residual:.3e}"
        )
    return AxiomReport(verdicts, trials, seed)


# ---------------------------------------------------------------------------
# serialization


def space_to_json(space: DiscreteSpace) -> dict:
    G = space.grad.rows.tocsr()
    return {
        "schema": SCHEMA_VERSION,
        "n": space.n,
        "measure": space.measure.tolist(),
        "coords": None if space.coords is None else space.coords.tolist(),
        "labels": None if space.labels is None else list(space.labels),
        "absorbed": np.flatnonzero(space.absorbed).tolist(),
        "rows": {
            "weight": space.grad.weights.tolist(),
            "location": space.grad.location.tolist(),
            "indptr": G.indptr.tolist(),
            "indices": G.indices.tolist(),
            "data": G.data.tolist(),
        },
        "meta": _jsonable_meta(space.meta),
    }


def _jsonable_meta(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        if isinstance(v, (str, int, float, bool, list, tuple, dict)) or v is None:
            out[k] = v
    return out


def space_from_json(doc: dict) -> DiscreteSpace:
    if doc.get("schema") != SCHEMA_VERSION:
        raise InputError(f"unsupported schema {doc.get('schema')!r}, expected {SCHEMA_VERSION!r}")
    n = int(doc["n"])
    measure = np.asarray(doc["measure"], dtype=float)
    rows = doc["rows"]
    G = sp.csr_matrix(
        (np.asarray(rows["data"], float), np.asarray(rows["indices"], np.int64),
         np.asarray(rows["indptr"], np.int64)),
        shape=(len(rows["weight"]), n),
    )
    grad = GradientOperator(G, np.asarray(rows["weight"], float), np.asarray(rows["location"], np.int64))
    absorbed = np.zeros(n, dtype=bool)
    absorbed[np.asarray(doc.get("absorbed") or [], dtype=np.int64)] = True
    coords = doc.get("coords")
    labels = doc.get("labels")
    return DiscreteSpace(
        measure,
        grad,
        None if coords is None else np.asarray(coords, float),
        None if labels is None else tuple(labels),
        absorbed,
        dict(doc.get("meta") or {}),
    )


def save_space(space: DiscreteSpace, path) -> None:
    Path(path).write_text(json.dumps(space_to_json(space), sort_keys=True), encoding="utf-8")


def load_space(path) -> DiscreteSpace:
    return space_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def export_form_matrix(space: DiscreteSpace, path, comment: str = "") -> None:
    """Write ``K`` in MatrixMarket coordinate format."""
    scipy.io.mmwrite(str(path), space.form_matrix.tocoo(), comment=comment, symmetry="symmetric")


def path_graph(n: int = 3, weight: float = 1.0, mass: float = 1.0) -> DiscreteSpace:
    """Path ``0 - 1 - ... - n-1`` with uniform edge weights and masses."""
    edges = [(i, i + 1, weight) for i in range(n - 1)]
    return DiscreteSpace.from_edges(np.full(n, float(mass)), edges, coords=np.arange(n, dtype=float))


def indicator(space: DiscreteSpace, points: Sequence[int]) -> np.ndarray:
    u = np.zeros(space.n)
    u[list(points)] = 1.0
    return u
