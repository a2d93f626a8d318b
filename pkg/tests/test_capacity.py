import numpy as np
import pytest

from helpers import random_connected_graph, small_space
from mmshape.bvp import random_subdomain
from mmshape.capacity import (atom_capacities, capacity, capacity_qp, check_h0_equivalence,
                              quasi_support)
from mmshape.errors import InputError, ParameterError
from mmshape.mmspace import Domain, path_graph
from mmshape.spectrum import eigenvalues


def test_p3_middle_atom(p3):
    # potential (1/2, 1, 1/2) gives u^T (K + M) u = 2
    r = capacity(p3, Domain.from_indices(p3, [1]))
    assert r.value == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(r.potential, [0.5, 1.0, 0.5], atol=1e-12)


def test_p3_end_atom(p3):
    # u = (1, u1, u2): free block [[3, -1], [-1, 2]] u = (1, 0) gives u = (2/5, 1/5)
    r = capacity(p3, Domain.from_indices(p3, [0]))
    assert r.value == pytest.approx(2 - 0.4, abs=1e-12)


def test_empty_and_whole(p3):
    assert capacity(p3, Domain.empty(p3)).value == 0.0
    assert capacity(p3, Domain.whole(p3)).value == pytest.approx(3.0)


def test_qp_oracle_agrees(small):
    rng = np.random.default_rng(0)
    for _ in range(3):
        dom = random_subdomain(small, rng)
        a = capacity(small, dom).value
        b = capacity_qp(small, dom).value
        assert abs(a - b) <= 1e-8 * max(1.0, a)


def test_potential_bounds(small):
    dom = random_subdomain(small, np.random.default_rng(1))
    u = capacity(small, dom).potential
    assert u.min() >= -1e-12 and u.max() <= 1 + 1e-12
    assert np.all(u[dom.mask] == 1.0)


def test_monotone_and_dominates_measure():
    rng = np.random.default_rng(2)
    g = random_connected_graph(rng, 12)
    for _ in range(20):
        big = random_subdomain(g, rng)
        sub = random_subdomain(g, rng, within=big.mask)
        cb, cs = capacity(g, big).value, capacity(g, sub).value
        assert cs <= cb + 1e-10
        assert cb >= big.measure_value - 1e-10


def test_atom_capacities_match_linear_route(p3):
    caps = atom_capacities(p3, [0, 1, 2])
    np.testing.assert_allclose(caps, [1.6, 2.0, 1.6], atol=1e-12)
    assert atom_capacities(p3, []).size == 0


def test_h0_equivalence_report():
    s = small_space("torus")
    rep = check_h0_equivalence(s, Domain.whole(s))
    assert rep["equivalent"] and rep["all_positive"] and rep["cap_ge_measure"]
    assert rep["min_ratio"] >= 1.0 - 1e-12


def test_quasi_support_of_eigenfunctions(p3):
    dom = Domain.from_indices(p3, [0, 1])
    r = eigenvalues(p3, dom, 2)
    assert quasi_support(p3, list(r.eigenfunctions)) == dom


def test_quasi_support_errors(p3):
    with pytest.raises(InputError):
        quasi_support(p3, [])
    with pytest.raises(InputError):
        quasi_support(p3, [np.zeros(3)])
    with pytest.raises(ParameterError):
        quasi_support(p3, [np.ones(3)], tau_pos=-1)


def test_whole_space_capacity_equals_measure_when_constants_are_null():
    s = path_graph(7, weight=3.0, mass=0.4)
    assert capacity(s, Domain.whole(s)).value == pytest.approx(s.total_measure, rel=1e-12)


def test_quasi_support_examples(p3):
    assert quasi_support(p3, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]) == Domain.from_indices(p3, [0, 2])
    assert quasi_support(p3, [[0.0, 2.0, -1.0]]) == Domain.from_indices(p3, [1, 2])
    basis = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    assert quasi_support(p3, basis) == Domain.from_indices(p3, [0, 1])
