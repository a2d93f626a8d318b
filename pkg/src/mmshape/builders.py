"""Grid builders for the example geometries.

Every builder produces a :class:`~mmshape.mmspace.DiscreteSpace` whose rows
are two-point differences with nonnegative weights.  That single structural
choice gives the Markov inequalities and an M-matrix ``K + aM`` for free.

Vertex grids (euclidean, finsler, gaussian) place points at ``i * h`` on the
box ``[0, L]^d`` (gaussian: a centered box).  Dirichlet builders mark the
outermost layer as absorbed.  Edges lying inside a boundary face get a
trapezoid factor 1/2 per such face so that linear functions are integrated
exactly over the box.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import InputError, ParameterError
from .mmspace import DiscreteSpace, GradientOperator

KINDS = ("euclidean", "torus", "finsler", "gaussian", "heisenberg")


@dataclass(frozen=True)
class BuilderSpec:
    """Geometry description shared by all builders.

    ``anisotropy`` is a constant SPD matrix or a callable ``x -> A(x)``
    (finsler only).  ``q`` holds the covariance eigenvalues and ``radius`` the
    truncation radius (gaussian only).  ``z_ratio`` sets the vertical lattice
    spacing ``h^2 / (2 z_ratio)`` of the heisenberg grid.
    """

    kind: str
    extent: tuple[float, ...]
    h: float
    anisotropy: object = None
    q: tuple[float, ...] | None = None
    radius: float = 6.0
    z_ratio: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown builder kind {self.kind!r}; expected one of {KINDS}")
        ext = self.extent
        if np.ndim(ext) == 0:
            ext = (float(ext),)
        object.__setattr__(self, "extent", tuple(float(e) for e in ext))
        if not self.h > 0:
            raise ParameterError("grid spacing h must be positive")
        if any(not e > 0 for e in self.extent):
            raise InputError("extent must be positive along every axis")
        if len(self.extent) > 3:
            raise InputError("dimension above 3 is not supported")
        if self.q is not None:
            q = tuple(float(v) for v in np.atleast_1d(self.q))
            if any(not v > 0 for v in q):
                raise ParameterError("covariance eigenvalues q_k must be positive")
            object.__setattr__(self, "q", q)

    @property
    def dim(self) -> int:
        if self.kind == "gaussian" and self.q is not None:
            return len(self.q)
        return len(self.extent)

    def refined(self, factor: int = 2) -> "BuilderSpec":
        from dataclasses import replace

        return replace(self, h=self.h / factor)


def _axis_count(length: float, h: float, what: str = "extent") -> int:
    r = length / h
    n = int(round(r))
    if abs(r - n) > 1e-9 * max(1.0, r):
        raise InputError(f"{what} {length} is not an integer multiple of h = {h}")
    return n


def _lattice(shape: Sequence[int]) -> np.ndarray:
    return np.arange(int(np.prod(shape))).reshape(shape)


def _axis_edges(shape, axis_offsets, periodic: bool):
    """Tails, heads and tail multi-indices for one integer offset vector."""
    idx = _lattice(shape)
    d = len(shape)
    if periodic:
        tails = idx
        heads = idx
        for ax, o in enumerate(axis_offsets):
            if o:
                heads = np.roll(heads, -o, axis=ax)
        multi = np.indices(shape)
        return tails.ravel(), heads.ravel(), multi.reshape(d, -1)
    sl_t, sl_h = [], []
    for ax, o in enumerate(axis_offsets):
        n = shape[ax]
        if o >= 0:
            sl_t.append(slice(0, n - o))
            sl_h.append(slice(o, n))
        else:
            sl_t.append(slice(-o, n))
            sl_h.append(slice(0, n + o))
    multi = np.indices(shape)[(slice(None),) + tuple(sl_t)]
    return idx[tuple(sl_t)].ravel(), idx[tuple(sl_h)].ravel(), multi.reshape(d, -1)


def _trapezoid(shape, offsets, multi) -> np.ndarray:
    fac = np.ones(multi.shape[1])
    for ax, o in enumerate(offsets):
        if o == 0:
            on_face = (multi[ax] == 0) | (multi[ax] == shape[ax] - 1)
            fac[on_face] *= 0.5
    return fac


def _boundary_mask(shape) -> np.ndarray:
    multi = np.indices(shape)
    mask = np.zeros(shape, dtype=bool)
    for ax, n in enumerate(shape):
        mask |= (multi[ax] == 0) | (multi[ax] == n - 1)
    return mask.ravel()


def _assemble(n, tails, heads, weights, measure, coords, absorbed, meta) -> DiscreteSpace:
    tails = np.concatenate(tails)
    heads = np.concatenate(heads)
    weights = np.concatenate(weights)
    keep = weights > 0
    grad = GradientOperator.from_edges(n, tails[keep], heads[keep], weights[keep])
    return DiscreteSpace(measure, grad, coords=coords, absorbed=absorbed, meta=meta)


def _as_matrix_field(anisotropy, d) -> Callable[[np.ndarray], np.ndarray]:
    """Normalize the anisotropy input to a vectorized map ``(N, d) -> (N, d, d)``."""
    if anisotropy is None:
        A = np.eye(d)
    elif callable(anisotropy):
        def field_(x):
            out = np.array([np.asarray(anisotropy(p), dtype=float) for p in x])
            return out.reshape(len(x), d, d)
        return field_
    else:
        A = np.asarray(anisotropy, dtype=float)
        if A.ndim == 1:
            A = np.diag(A)
    if A.shape != (d, d):
        raise InputError(f"anisotropy must be {d}x{d}")

    def const(x):
        return np.broadcast_to(A, (len(x), d, d))

    return const


def _check_spd(A: np.ndarray) -> None:
    if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ParameterError("anisotropy A(x) is not symmetric")
    ev = np.linalg.eigvalsh(A)
    if np.any(ev <= 0):
        raise ParameterError("anisotropy A(x) is not positive definite at some sample point")


def _offset_coefficients(B: np.ndarray):
    """Split the dual metric ``B = A^{-1}`` onto nearest-neighbor offsets.

    Returns a list of ``(offset, coefficient array)``.  Off-diagonal entries
    ``b_ij`` go onto the diagonal offset ``e_i + sign(b_ij) e_j`` with weight
    ``|b_ij|`` and are subtracted from the axis weights; this needs ``B`` to be
    diagonally dominant for every coefficient to stay nonnegative.
    """
    d = B.shape[-1]
    out = []
    axis = [B[:, i, i].copy() for i in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            b = B[:, i, j]
            if np.all(np.abs(b) <= 1e-15 * np.abs(B).max()):
                continue
            for sgn in (1, -1):
                off = [0] * d
                off[i] = 1
                off[j] = sgn
                coef = np.where(np.sign(b) == sgn, np.abs(b), 0.0)
                out.append((tuple(off), coef))
            axis[i] = axis[i] - np.abs(b)
            axis[j] = axis[j] - np.abs(b)
    for i in range(d):
        if np.any(axis[i] < -1e-12 * np.abs(B).max()):
            raise ParameterError(
                "A(x)^{-1} is not diagonally dominant; the two-point stencil would need negative weights"
            )
        off = [0] * d
        off[i] = 1
        out.insert(i, (tuple(off), np.maximum(axis[i], 0.0)))
    return out


def _vertex_grid(spec: BuilderSpec, matrix_field) -> DiscreteSpace:
    d = len(spec.extent)
    h = spec.h
    shape = tuple(_axis_count(L, h) + 1 for L in spec.extent)
    if any(s < 2 for s in shape):
        raise InputError("extent/h must give at least two points per axis")
    n = int(np.prod(shape))
    coords = (np.indices(shape).reshape(d, -1).T * h).astype(float)
    A_pts = matrix_field(coords)
    _check_spd(A_pts)
    measure = np.sqrt(np.linalg.det(A_pts)) * h**d
    tails, heads, weights = [], [], []
    # offsets are the same everywhere; evaluate the split at edge midpoints per offset
    probe = _offset_coefficients(np.linalg.inv(A_pts))
    for off, _ in probe:
        t, hd, multi = _axis_edges(shape, off, periodic=False)
        if t.size == 0:
            continue
        mid = 0.5 * (coords[t] + coords[hd])
        A_mid = matrix_field(mid)
        _check_spd(A_mid)
        B = np.linalg.inv(A_mid)
        coef = dict(_offset_coefficients(B)).get(off)
        if coef is None:
            continue
        w = coef * np.sqrt(np.linalg.det(A_mid)) * h ** (d - 2) * _trapezoid(shape, off, multi)
        tails.append(t)
        heads.append(hd)
        weights.append(w)
    meta = {"kind": spec.kind, "h": h, "shape": list(shape), "extent": list(spec.extent),
            "grid": "vertex", "box_measure": float(np.prod(spec.extent))}
    return _assemble(n, tails, heads, weights, measure, coords, _boundary_mask(shape), meta)


def build_euclidean_grid(spec: BuilderSpec) -> DiscreteSpace:
    """Dirichlet grid on ``[0, L_1] x ... x [0, L_d]`` with masses ``h^d``."""
    if spec.kind != "euclidean":
        raise InputError("build_euclidean_grid needs kind = euclidean")
    return _vertex_grid(spec, _as_matrix_field(None, len(spec.extent)))


def build_finsler_grid(spec: BuilderSpec) -> DiscreteSpace:
    """Quadratic Finsler grid, ``F(x, X) = sqrt(X^T A(x) X)``.

    Masses are ``sqrt(det A) h^d``; edge weights use the dual metric ``A^{-1}``
    at the edge midpoint times ``sqrt(det A) h^{d-2}``.
    """
    if spec.kind != "finsler":
        raise InputError("build_finsler_grid needs kind = finsler")
    return _vertex_grid(spec, _as_matrix_field(spec.anisotropy, len(spec.extent)))


def build_periodic_torus(spec: BuilderSpec) -> DiscreteSpace:
    """Cell-centered periodic grid; no absorbed points, constants have zero energy."""
    if spec.kind != "torus":
        raise InputError("build_periodic_torus needs kind = torus")
    d = len(spec.extent)
    h = spec.h
    shape = tuple(_axis_count(L, h) for L in spec.extent)
    if any(s < 2 for s in shape):
        raise InputError("extent/h must give at least two cells per axis")
    n = int(np.prod(shape))
    coords = (np.indices(shape).reshape(d, -1).T + 0.5) * h
    tails, heads, weights = [], [], []
    for ax in range(d):
        off = [0] * d
        off[ax] = 1
        t, hd, _ = _axis_edges(shape, off, periodic=True)
        tails.append(t)
        heads.append(hd)
        weights.append(np.full(t.size, h ** (d - 2)))
    meta = {"kind": "torus", "h": h, "shape": list(shape), "extent": list(spec.extent),
            "grid": "cell", "box_measure": float(np.prod(spec.extent))}
    return _assemble(n, tails, heads, weights, np.full(n, h**d), coords, None, meta)


def gaussian_mass_cutoff(q: Sequence[float], radius: float) -> float:
    """Continuum Gaussian mass lying outside the truncation box."""
    half = radius * math.sqrt(max(q))
    inside = 1.0
    for qk in q:
        inside *= erf(half / math.sqrt(2.0 * qk))
    return float(1.0 - inside)


def build_gaussian_grid(spec: BuilderSpec) -> DiscreteSpace:
    """Gaussian-weighted grid on ``[-R sqrt(q_max), R sqrt(q_max)]^d``.

    Masses are proportional to the Gaussian density and normalized to total
    one.  Edge weights are the endpoint-averaged density times ``h^{d-2}``
    under the same normalization, so the form is the Ornstein-Uhlenbeck form.
    """
    if spec.kind != "gaussian":
        raise InputError("build_gaussian_grid needs kind = gaussian")
    q = spec.q if spec.q is not None else (1.0,) * len(spec.extent)
    d = len(q)
    if d > 3:
        raise InputError("gaussian builder supports at most 3 dimensions")
    if not spec.radius > 0:
        raise ParameterError("truncation radius must be positive")
    h = spec.h
    half = spec.radius * math.sqrt(max(q))
    # smallest centered vertex box covering [-half, half]
    cells = int(math.ceil(2 * half / h - 1e-9))
    if cells < 1:
        raise InputError("extent/h must give at least two points per axis")
    shape = (cells + 1,) * d
    n = int(np.prod(shape))
    coords = np.indices(shape).reshape(d, -1).T * h - 0.5 * cells * h
    qa = np.asarray(q)
    density = np.exp(-0.5 * np.sum(coords**2 / qa, axis=1)) / np.prod(np.sqrt(2 * np.pi * qa))
    Z = float(np.sum(density) * h**d)
    half = 0.5 * cells * h
    measure = density * h**d / Z
    tails, heads, weights = [], [], []
    for ax in range(d):
        off = [0] * d
        off[ax] = 1
        t, hd, _ = _axis_edges(shape, off, periodic=False)
        tails.append(t)
        heads.append(hd)
        weights.append(0.5 * (density[t] + density[hd]) / Z * h ** (d - 2))
    cutoff = gaussian_mass_cutoff(q, half / math.sqrt(max(q)))
    if cutoff > 1e-6:
        warnings.warn(f"gaussian truncation drops continuum mass {cutoff:.3e} > 1e-6", stacklevel=2)
    meta = {"kind": "gaussian", "h": h, "shape": list(shape), "q": list(q), "radius": spec.radius,
            "grid": "vertex", "mass_cutoff": cutoff}
    return _assemble(n, tails, heads, weights, measure, coords, None, meta)


def build_heisenberg_grid(spec: BuilderSpec) -> DiscreteSpace:
    """Heisenberg-group lattice with horizontal two-point differences.

    Points are ``(i h, j h, k h_z)`` with ``h_z = h^2 / (2 z_ratio)``,
    ``|i|, |j| <= N`` and ``k`` periodic.  The horizontal neighbors of ``p`` are
    the group translates ``p * (h, 0, 0)`` and ``p * (0, h, 0)``, which land
    exactly on lattice points: the ``z`` index shifts by ``-j z_ratio`` and
    ``+i z_ratio`` respectively.  The faces ``|i| = N`` and ``|j| = N`` are
    absorbed.
    """
    if spec.kind != "heisenberg":
        raise InputError("build_heisenberg_grid needs kind = heisenberg")
    if len(spec.extent) != 3:
        raise InputError("heisenberg builder needs a 3D extent (x, y, z)")
    h = spec.h
    zr = int(spec.z_ratio)
    if zr < 1 or zr != spec.z_ratio:
        raise ParameterError("z_ratio must be a positive integer")
    hz = h * h / (2 * zr)
    Nx = _axis_count(spec.extent[0] / 2, h, what="half x-extent")
    Ny = _axis_count(spec.extent[1] / 2, h, what="half y-extent")
    Nz = _axis_count(spec.extent[2], hz, what="z-extent (in units of h^2/(2 z_ratio))")
    if Nx < 1 or Ny < 1 or Nz < 2:
        raise InputError("extent/h must give at least two points per axis")
    shape = (2 * Nx + 1, 2 * Ny + 1, Nz)
    idx = _lattice(shape)
    n = idx.size
    I, J, Kz = np.indices(shape)
    ia, ja = I - Nx, J - Ny
    coords = np.stack([ia.ravel() * h, ja.ravel() * h, Kz.ravel() * hz], axis=1).astype(float)
    tails, heads, weights = [], [], []
    base = h * h * hz / (h * h)
    # X1 direction: (i, j, k) -> (i+1, j, k - j zr)
    sel = I < shape[0] - 1
    t = idx[sel]
    hd = idx[I[sel] + 1, J[sel], (Kz[sel] - ja[sel] * zr) % Nz]
    fac = np.where((J[sel] == 0) | (J[sel] == shape[1] - 1), 0.5, 1.0)
    tails.append(t)
    heads.append(hd)
    weights.append(base * fac)
    # X2 direction: (i, j, k) -> (i, j+1, k + i zr)
    sel = J < shape[1] - 1
    t = idx[sel]
    hd = idx[I[sel], J[sel] + 1, (Kz[sel] + ia[sel] * zr) % Nz]
    fac = np.where((I[sel] == 0) | (I[sel] == shape[0] - 1), 0.5, 1.0)
    tails.append(t)
    heads.append(hd)
    weights.append(base * fac)
    absorbed = ((I == 0) | (I == shape[0] - 1) | (J == 0) | (J == shape[1] - 1)).ravel()
    measure = np.full(n, h * h * hz)
    meta = {"kind": "heisenberg", "h": h, "hz": hz, "z_ratio": zr, "shape": list(shape),
            "extent": [2 * Nx * h, 2 * Ny * h, Nz * hz], "grid": "heisenberg",
            "box_measure": float(2 * Nx * h * 2 * Ny * h * Nz * hz)}
    return _assemble(n, tails, heads, weights, measure, coords, absorbed, meta)


_DISPATCH = {
    "euclidean": build_euclidean_grid,
    "torus": build_periodic_torus,
    "finsler": build_finsler_grid,
    "gaussian": build_gaussian_grid,
    "heisenberg": build_heisenberg_grid,
}


def build(spec: BuilderSpec) -> DiscreteSpace:
    """Dispatch on ``spec.kind``."""
    return _DISPATCH[spec.kind](spec)
