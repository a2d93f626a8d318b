import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_connected_graph
from mmshape.builders import BuilderSpec, build
from mmshape.errors import InputError, ParameterError, ResourceError
from mmshape.mmspace import DiscreteSpace, Domain, path_graph
from mmshape.optimizer import (Objective, PhiFunctional, exhaustive_optimize, local_search_optimize,
                               phi_audit, phi_eval, superlevel_domain, threshold_iterate)
from mmshape.spectrum import eigenvalues

LAMBDA_PAIR = (3 - math.sqrt(5)) / 2


def test_p3_lambda1_optimum_and_tie_break(p3):
    # {x1, x2} and {x2, x3} tie; the smaller bit mask 0b011 wins
    r = exhaustive_optimize(p3, PhiFunctional.single_k(1), 2.0)
    assert r.best_value == pytest.approx(LAMBDA_PAIR, abs=1e-12)
    assert r.best_domain == Domain.from_indices(p3, [0, 1])
    assert r.extra["energy_set"]


def test_p3_weighted_sum(p3):
    # connected pairs give lambda_1 + lambda_2 = 3; the split pair {x1, x3} gives 1 + 1
    r = exhaustive_optimize(p3, PhiFunctional.weighted_sum([1, 1]), 2.0)
    assert r.best_value == pytest.approx(2.0, abs=1e-12)
    assert r.best_domain == Domain.from_indices(p3, [0, 2])


def test_p3_energy(p3):
    r = exhaustive_optimize(p3, "energy", 2.0)
    assert r.best_value == pytest.approx(-0.7, abs=1e-12)
    assert r.best_domain == Domain.from_indices(p3, [0, 1])
    assert exhaustive_optimize(p3, "energy", 3.0).best_value == pytest.approx(-1.5)


def test_budget_below_every_atom_gives_empty(p3):
    r = exhaustive_optimize(p3, PhiFunctional.single_k(1), 0.5)
    assert r.best_domain.size == 0 and r.best_value == np.inf
    assert exhaustive_optimize(p3, "energy", 0.5).best_value == 0.0


def test_exhaustive_limit():
    s = path_graph(25)
    with pytest.raises(ResourceError):
        exhaustive_optimize(s, "energy", 3.0)


def test_phi_values():
    z = [1.0, 2.0, 4.0]
    assert phi_eval(PhiFunctional.single_k(2), z) == 2.0
    assert phi_eval(PhiFunctional.weighted_sum([1, 0, 2]), z) == 9.0
    assert phi_eval(PhiFunctional.max_of([1, 3]), z) == 4.0
    # zero weights do not see infinite entries
    assert phi_eval(PhiFunctional.weighted_sum([1, 0]), [1.0, np.inf]) == 1.0


def test_phi_parameter_validation():
    with pytest.raises(ParameterError):
        PhiFunctional.single_k(0)
    with pytest.raises(ParameterError):
        PhiFunctional.weighted_sum([1, -1])
    with pytest.raises(ParameterError):
        PhiFunctional.max_of([0, 2])


@pytest.mark.parametrize("phi", [PhiFunctional.single_k(3), PhiFunctional.weighted_sum([1, 0, 2]),
                                 PhiFunctional.max_of([1, 2])])
def test_phi_audit_passes_library_functionals(phi):
    assert phi_audit(phi, samples=100).ok


def test_phi_audit_flags_negative_weight():
    rep = phi_audit(PhiFunctional.weighted_sum([1, -1], validate=False), samples=100)
    assert not rep.ok
    assert rep.counterexample["condition"] == "monotone"


def test_phi_audit_flags_discontinuity():
    # jumps down at z = 1 from above: not lower semicontinuous there
    phi = PhiFunctional.custom(lambda z: 0.0 if z[0] > 1.0 else float(z[0]), 1)
    rep = phi_audit(phi, samples=300)
    assert not rep.ok


def test_untrusted_phi_rejected_by_objective(p3):
    with pytest.raises(ParameterError):
        Objective(p3, PhiFunctional.weighted_sum([1, -1], validate=False))
    with pytest.raises(ParameterError):
        Objective(p3, "volume")


def test_custom_phi_accepted_after_audit(p3):
    phi = PhiFunctional.custom(lambda z: float(z[0] + 2 * z[1]), 2)
    r = exhaustive_optimize(p3, phi, 3.0)
    assert np.isfinite(r.best_value)


def test_batch_matches_fresh():
    rng = np.random.default_rng(0)
    g = random_connected_graph(rng, 9)
    for target in (PhiFunctional.weighted_sum([1, 1]), "energy"):
        obj = Objective(g, target)
        masks = rng.random((30, 9)) < 0.6
        masks[:, 0] = True
        vals = obj.batch(masks)
        for mk, v in zip(masks, vals):
            fresh = obj.fresh(Domain.from_mask(g, mk))
            assert v == pytest.approx(fresh, rel=1e-9, abs=1e-12)


def test_objective_cache_counts_solves(p3):
    obj = Objective(p3, "energy")
    mk = np.array([[True, True, False]])
    obj.batch(mk)
    obj.batch(mk)
    assert obj.solves == 1


def test_local_search_never_beats_exhaustive():
    rng = np.random.default_rng(5)
    for _ in range(4):
        g = random_connected_graph(rng, int(rng.integers(6, 11)))
        c = 0.5 * g.total_measure
        for target in (PhiFunctional.single_k(1), "energy"):
            ex = exhaustive_optimize(g, target, c)
            ls = local_search_optimize(g, target, c, seed=1, restarts=10)
            assert ls.best_value >= ex.best_value - 1e-9 * max(1.0, abs(ex.best_value))
            assert ls.best_domain.measure_value <= c + 1e-12


def test_local_search_reproducible():
    g = random_connected_graph(np.random.default_rng(9), 10)
    a = local_search_optimize(g, "energy", 4.0, seed=3, restarts=5).to_dict()
    b = local_search_optimize(g, "energy", 4.0, seed=3, restarts=5).to_dict()
    assert a == b


def test_absorbed_points_never_selected():
    s = build(BuilderSpec("euclidean", (1.0,), 1 / 8))
    r = exhaustive_optimize(s, PhiFunctional.single_k(1), 0.4)
    assert not np.any(r.best_domain.mask & s.absorbed)


def test_superlevel_domain(p3):
    d = superlevel_domain(p3, np.array([0.2, 0.9, 0.5]), np.ones(3, bool), 2.0)
    assert d == Domain.from_indices(p3, [1, 2])


def test_threshold_iterate_square_patch():
    s = build(BuilderSpec("euclidean", (1.0, 1.0), 1 / 16))
    r = threshold_iterate(s, 0.25, iters=10)
    assert r.best_domain.measure_value <= 0.25 + 1e-12
    vals = [v for label, v, _ in r.trace if "rejected" not in label]
    assert all(b <= a + 1e-8 * abs(a) for a, b in zip(vals[1:], vals[2:]))
    assert r.best_value == pytest.approx(eigenvalues(s, r.best_domain, 1).eigenvalues[0])


def test_threshold_needs_coordinates():
    s = DiscreteSpace.from_edges([1.0, 1.0], [(0, 1, 1.0)])
    with pytest.raises(InputError):
        threshold_iterate(s, 1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["lambda1", "energy"]))
def test_exhaustive_result_is_feasible_and_minimal_property(seed, which):
    rng = np.random.default_rng(seed)
    g = random_connected_graph(rng, int(rng.integers(3, 8)))
    c = float(rng.uniform(0.3, 1.0)) * g.total_measure
    target = PhiFunctional.single_k(1) if which == "lambda1" else "energy"
    r = exhaustive_optimize(g, target, c)
    assert r.best_domain.measure_value <= c + 1e-12
    obj = Objective(g, target)
    for _ in range(10):
        mk = rng.random(g.n) < 0.5
        dom = Domain.from_mask(g, mk)
        if dom.measure_value <= c and dom.size:
            assert obj.fresh(dom) >= r.best_value - 1e-9 * max(1.0, abs(r.best_value))


def test_phi_infinite_entries():
    assert phi_eval(PhiFunctional.single_k(1), [2.0, 5.0]) == 2.0
    assert phi_eval(PhiFunctional.weighted_sum([1, 2]), [1.0, np.inf]) == np.inf
    assert phi_eval(PhiFunctional.max_of([1, 2]), [1.0, np.inf]) == np.inf


def test_max_of_lsc_along_sequence():
    phi = PhiFunctional.max_of([1, 2])
    tail = [phi_eval(phi, [1.0, 2.0 + 1.0 / n]) for n in range(1, 50)]
    assert phi_eval(phi, [1.0, 2.0]) <= min(tail)


def test_large_budget_selects_everything():
    g = random_connected_graph(np.random.default_rng(3), 7)
    full = Domain.whole(g)
    assert exhaustive_optimize(g, PhiFunctional.single_k(1), g.total_measure).best_domain == full
    ls = local_search_optimize(g, "energy", g.total_measure, seed=0, restarts=3)
    assert ls.best_domain == full


def test_zero_budget(p3):
    assert exhaustive_optimize(p3, PhiFunctional.single_k(1), 0.0).best_value == np.inf
    assert exhaustive_optimize(p3, "energy", 0.0).best_value == 0.0


def test_local_search_matches_exhaustive_on_p3(p3):
    ex = exhaustive_optimize(p3, PhiFunctional.single_k(1), 2.0)
    ls = local_search_optimize(p3, PhiFunctional.single_k(1), 2.0, seed=0, restarts=5)
    assert ls.best_value == pytest.approx(ex.best_value, abs=1e-12)


def test_local_search_trace_reproducible():
    g = random_connected_graph(np.random.default_rng(8), 9)
    a = local_search_optimize(g, PhiFunctional.single_k(1), 4.0, seed=5, restarts=4).trace
    b = local_search_optimize(g, PhiFunctional.single_k(1), 4.0, seed=5, restarts=4).trace
    assert a == b


def test_threshold_fixed_point_on_ball():
    s = build(BuilderSpec("euclidean", (1.0, 1.0), 1 / 64))
    c = s.coords - 0.5
    ball = Domain.from_mask(s, (np.hypot(c[:, 0], c[:, 1]) <= 0.25) & s.admissible)
    r = threshold_iterate(s, ball.measure_value, iters=5, start=ball)
    assert r.extra["stop"] == "fixed-point"
    assert len(r.trace) == 2
    assert r.best_domain == ball
