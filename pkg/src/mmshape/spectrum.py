"""Dirichlet eigenvalues ``lambda_k(Omega)`` and the torsion energy ``E(Omega)``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bvp import RestrictedOperator, torsion
from .errors import ParameterError
from .mmspace import Domain, DiscreteSpace, dirichlet_form

DENSE_LIMIT = 2000


def ext_real(x: float):
    """JSON-friendly extended real: ``inf`` becomes the string ``"inf"``."""
    x = float(x)
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return x


def parse_ext_real(x) -> float:
    return float(x)


@dataclass
class SpectrumResult:
    """Smallest ``k`` Dirichlet eigenvalues with ``m``-orthonormal eigenfunctions.

    ``eigenvalues`` always has length ``k``; entries beyond the number of
    domain points are ``+inf`` and have no eigenfunction row.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    residuals: np.ndarray
    domain: Domain
    method: str

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def finite(self) -> int:
        return self.eigenfunctions.shape[0]

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [ext_real(v) for v in self.eigenvalues],
            "residuals": [float(r) for r in self.residuals],
            "method": self.method,
            "domain_size": self.domain.size,
            "domain_measure": self.domain.measure_value,
        }


def _normalize(V: np.ndarray, m: np.ndarray) -> np.ndarray:
    gram = V.T @ (m[:, None] * V)
    L = np.linalg.cholesky(gram)
    V = np.linalg.solve(L, V.T).T
    # deterministic sign: largest entry positive
    pick = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pick, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def eigenvalues(space: DiscreteSpace, dom: Domain, k: int = 1, method: str = "auto") -> SpectrumResult:
    """Smallest ``k`` eigenvalues of ``K_OO u = lambda M_OO u``."""
    if int(k) != k or k < 1:
        raise ParameterError("k must be a positive integer")
    k = int(k)
    idx = dom.indices
    size = len(idx)
    lam = np.full(k, np.inf)
    if size == 0:
        return SpectrumResult(lam, np.zeros((0, space.n)), np.zeros(0), dom, "empty")
    kf = min(k, size)
    m = space.measure[idx]
    if method == "auto":
        method = "dense" if (size <= DENSE_LIMIT or kf >= size - 1) else "shift-invert"
    K = space.form_matrix[idx][:, idx]
    if method == "dense":
        # symmetric scaling by M^{-1/2} keeps the standard problem well conditioned
        s = 1.0 / np.sqrt(m)
        A = (K.toarray() * s[:, None]) * s[None, :]
        vals, vecs = sla.eigh(A, subset_by_index=[0, kf - 1])
        V = vecs * s[:, None]
    elif method == "shift-invert":
        op = RestrictedOperator(space, dom.mask, 1.0)
        OPinv = spla.LinearOperator((size, size), matvec=op.solve, dtype=float)
        v0 = np.random.default_rng(0).standard_normal(size)
        vals, V = spla.eigsh(K.tocsc(), k=kf, M=sp.diags(m).tocsc(), sigma=-1.0, which="LM",
                             OPinv=OPinv, v0=v0, tol=1e-13)
        order = np.argsort(vals)
        vals, V = vals[order], V[:, order]
    else:
        raise ParameterError(f"unknown eigen method {method!r}")
    V = _normalize(V, m)
    vals = np.maximum(vals, 0.0)
    R = K @ V - (m[:, None] * V) * vals[None, :]
    res = np.linalg.norm(R / np.sqrt(m)[:, None], axis=0)
    lam[:kf] = vals
    funcs = np.zeros((kf, space.n))
    funcs[:, idx] = V.T
    return SpectrumResult(lam, funcs, res, dom, method)


def first_eigenvalue(space: DiscreteSpace, dom: Domain) -> float:
    return float(eigenvalues(space, dom, 1).eigenvalues[0])


def rayleigh_quotient(space: DiscreteSpace, u) -> float:
    u = space.check_function(u)
    den = float(np.dot(space.measure, u * u))
    if den == 0.0:
        return np.inf
    return dirichlet_form(space, u, u) / den


def dirichlet_energy(space: DiscreteSpace, dom: Domain) -> float:
    """``E(Omega) = F(w_Omega) = -1/2 * integral of w_Omega``."""
    return float(torsion(space, dom).objective)
