import numpy as np
import pytest

from advcorr.errors import NumericalError, QPInfeasibleError
from advcorr.qp import (
    QPInstance,
    QPSolution,
    brute_force_project,
    project,
    restricted_project,
    run_block_coordinate,
)
from oracles import pool_from_arrays, pv, random_feasible_qp


def kkt_ok(G, r, sol, tol=1e-8):
    lam = sol.duals
    w = sol.w.values
    resid = G @ w - r
    assert lam.min() >= 0.0
    assert resid.max() <= tol
    assert np.max(np.abs(lam * resid) / (1.0 + np.abs(r))) <= tol


class TestProject:
    def test_no_cuts_returns_anchor(self):
        anchor = pv([1.0, -2.0, 3.0])
        sol = project(QPInstance(anchor, pool_from_arrays(np.empty((0, 3)), [])))
        assert sol.status == "optimal"
        assert np.array_equal(sol.w.values, anchor.values)
        assert sol.max_violation == 0.0

    def test_halfspace_analytic(self):
        # min ||w-(1,1)||^2/2 s.t. w0+w1 <= 0 has solution (0,0), lambda 1.
        sol = project(QPInstance(pv([1.0, 1.0]), pool_from_arrays([[1.0, 1.0]], [0.0])),
                      tol=1e-12, max_sweeps=500)
        assert sol.status == "optimal"
        assert np.allclose(sol.w.values, [0.0, 0.0], atol=1e-9)
        assert sol.duals[0] == pytest.approx(1.0, abs=1e-9)

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(101)
        for _ in range(40):
            J = int(rng.integers(2, 7))
            n = int(rng.integers(1, 5))
            anchor, pool, _ = random_feasible_qp(rng, J, n)
            sol = project(QPInstance(anchor, pool), tol=1e-10, max_sweeps=50000)
            oracle = brute_force_project(anchor, pool)
            assert sol.status == "optimal"
            assert np.abs(sol.w.values - oracle.values).max() <= 1e-6
            kkt_ok(pool.matrix(), pool.rhs(), sol)

    def test_idempotent(self):
        rng = np.random.default_rng(103)
        anchor, pool, _ = random_feasible_qp(rng, 5, 3)
        tol = 1e-10
        first = project(QPInstance(anchor, pool), tol=tol, max_sweeps=50000)
        second = project(QPInstance(first.w, pool), tol=tol, max_sweeps=50000)
        assert np.abs(second.w.values - first.w.values).max() <= 2 * 1e-8

    def test_objective_dominance_over_feasible_witness(self):
        rng = np.random.default_rng(107)
        for _ in range(20):
            anchor, pool, witness = random_feasible_qp(rng, 6, 4)
            sol = project(QPInstance(anchor, pool), tol=1e-10, max_sweeps=50000)
            d_proj = np.linalg.norm(sol.w.values - anchor.values)
            d_wit = np.linalg.norm(witness - anchor.values)
            assert d_proj <= d_wit + 1e-8

    def test_warm_start_reconverges_immediately(self):
        rng = np.random.default_rng(109)
        anchor, pool, _ = random_feasible_qp(rng, 5, 4)
        first = project(QPInstance(anchor, pool), tol=1e-10, max_sweeps=50000)
        warm = project(QPInstance(anchor, pool, warm_start_duals=first.duals),
                       tol=1e-10, max_sweeps=50000)
        assert warm.status == "optimal"
        assert warm.iterations_used <= first.iterations_used
        assert np.allclose(warm.w.values, first.w.values, atol=1e-8)

    def test_negative_warm_start_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            QPInstance(pv([0.0]), pool_from_arrays([[1.0]], [0.0]),
                       warm_start_duals=np.array([-1.0]))

    def test_infeasible_detected_by_divergence(self):
        # g.w <= -1 and -g.w <= -1 cannot both hold.
        pool = pool_from_arrays([[1.0, 0.0], [-1.0, 0.0]], [-1.0, -1.0])
        sol = project(QPInstance(pv([0.0, 0.0]), pool),
                      tol=1e-10, max_sweeps=200000, dual_bound=100.0)
        assert sol.status == "infeasible_detected"

    def test_zero_normal_violated_cut_is_infeasible(self):
        pool = pool_from_arrays([[0.0, 0.0]], [-1.0])
        sol = project(QPInstance(pv([0.5, 0.5]), pool), tol=1e-10)
        assert sol.status == "infeasible_detected"

    def test_max_iter_reports_best_iterate(self):
        rng = np.random.default_rng(113)
        anchor, pool, _ = random_feasible_qp(rng, 6, 4)
        sol = project(QPInstance(anchor, pool), tol=1e-14, max_sweeps=2)
        assert sol.status in ("max_iter", "optimal")
        assert isinstance(sol, QPSolution)
        assert sol.max_violation >= 0.0


class TestBruteForce:
    def test_inactive_cut_returns_anchor(self):
        anchor = pv([0.0, 0.0])
        pool = pool_from_arrays([[1.0, 1.0]], [5.0])
        assert np.array_equal(brute_force_project(anchor, pool).values, anchor.values)

    def test_conflicting_parallel_cuts_raise(self):
        pool = pool_from_arrays([[1.0, 0.0], [-1.0, 0.0]], [-1.0, -1.0])
        with pytest.raises(QPInfeasibleError):
            brute_force_project(pv([0.0, 0.0]), pool)

    def test_enumeration_bound(self):
        G = np.ones((13, 2))
        pool = pool_from_arrays(G, np.ones(13))
        with pytest.raises(ValueError, match="12"):
            brute_force_project(pv([0.0, 0.0]), pool)


class TestRestrictedProject:
    def test_fixed_coordinates_shift_rhs(self):
        # free w0 with w1 pinned at 1: w0 + 1 <= 0 projects anchor 1 to -1.
        anchor = pv([1.0, 1.0])
        pool = pool_from_arrays([[1.0, 1.0]], [0.0])
        sol = restricted_project(anchor, pool, [0], tol=1e-12, max_sweeps=1000)
        assert sol.status == "optimal"
        assert np.allclose(sol.w.values, [-1.0, 1.0], atol=1e-9)

    def test_fixed_values_override_anchor(self):
        anchor = pv([1.0, 1.0])
        pool = pool_from_arrays([[1.0, 1.0]], [0.0])
        fixed = np.array([1.0, -3.0])
        sol = restricted_project(anchor, pool, [0], fixed_values=fixed,
                                 tol=1e-12, max_sweeps=1000)
        # with w1=-3 the cut is slack at the anchor value w0=1
        assert np.allclose(sol.w.values, [1.0, -3.0], atol=1e-12)

    def test_proposition2_disjoint_reselection_is_invariant(self):
        # After a feasible restricted solve, optimizing over a disjoint
        # free set (rest fixed at the solution) must return it unchanged.
        rng = np.random.default_rng(211)
        for _ in range(25):
            J = int(rng.integers(6, 12))
            n = int(rng.integers(1, 5))
            free_a = rng.choice(J, size=max(2, J // 3), replace=False)
            G = rng.normal(size=(n, J))
            anchor = pv(rng.normal(size=J))
            witness = anchor.values.copy()
            witness[free_a] += rng.normal(size=len(free_a))
            r = G @ witness + rng.uniform(0.05, 0.5, n)
            pool = pool_from_arrays(G, r)
            first = restricted_project(anchor, pool, free_a, tol=1e-10, max_sweeps=50000)
            assert first.status == "optimal"
            rest = np.setdiff1d(np.arange(J), free_a)
            free_b = rng.choice(rest, size=min(3, len(rest)), replace=False)
            second = restricted_project(anchor, pool, free_b,
                                        fixed_values=first.w.values,
                                        tol=1e-10, max_sweeps=50000)
            assert second.status == "optimal"
            assert np.abs(second.w.values - first.w.values).max() <= 1e-8


class TestBlockCoordinate:
    def test_validates_arguments(self):
        anchor = pv(np.zeros(4))
        pool = pool_from_arrays([[1.0, 0, 0, 0]], [1.0])
        with pytest.raises(ValueError, match="fix ratio"):
            run_block_coordinate(anchor, pool, p=1.0, T=1, seed=0, always_free=[])
        with pytest.raises(ValueError, match="T"):
            run_block_coordinate(anchor, pool, p=0.5, T=0, seed=0, always_free=[])

    def test_feasible_output_with_biases_free(self):
        # The production setting: fix 80% of weights, keep biases free, T=1.
        rng = np.random.default_rng(223)
        J = 40
        bias_idx = np.arange(30, 40)
        G = rng.normal(size=(6, J))
        witness = rng.normal(size=J)
        r = G @ witness + rng.uniform(0.05, 0.5, 6)
        anchor = pv(witness + rng.normal(scale=1.0, size=J))
        sol = run_block_coordinate(anchor, pool_from_arrays(G, r), p=0.8, T=1,
                                   seed=3, always_free=bias_idx,
                                   tol=1e-10, max_sweeps=50000)
        assert sol.status == "optimal"
        assert (G @ sol.w.values - r).max() <= 1e-8

    def test_objective_never_beats_full_projection(self):
        rng = np.random.default_rng(227)
        for seed in range(5):
            anchor, pool, _ = random_feasible_qp(rng, 12, 4)
            full = project(QPInstance(anchor, pool), tol=1e-10, max_sweeps=50000)
            blocked = run_block_coordinate(anchor, pool, p=0.5, T=1, seed=seed,
                                           always_free=[], tol=1e-10, max_sweeps=50000)
            obj_full = np.sum((full.w.values - anchor.values) ** 2)
            obj_block = np.sum((blocked.w.values - anchor.values) ** 2)
            assert obj_block >= obj_full - 1e-9

    def test_multiple_sweeps_keep_overlap_and_feasibility(self):
        rng = np.random.default_rng(229)
        anchor, pool, _ = random_feasible_qp(rng, 20, 5)
        sol = run_block_coordinate(anchor, pool, p=0.6, T=4, seed=11,
                                   always_free=[0, 1], tol=1e-10, max_sweeps=50000)
        assert sol.status == "optimal"
        assert (pool.matrix() @ sol.w.values - pool.rhs()).max() <= 1e-8

    def test_infeasible_restriction_recovers_by_doubling(self):
        # A cut supported on coordinate 0 only: restrictions that fix
        # coordinate 0 are infeasible, so recovery must widen the free set.
        G = np.zeros((1, 4))
        G[0, 0] = 1.0
        r = np.array([-1.0])
        anchor = pv(np.zeros(4))
        pool = pool_from_arrays(G, r)
        hit_recovery = hit_error = False
        for seed in range(30):
            try:
                sol = run_block_coordinate(anchor, pool, p=0.75, T=1, seed=seed,
                                           always_free=[], tol=1e-10, max_sweeps=5000)
            except NumericalError:
                hit_error = True
                continue
            assert sol.status == "optimal"
            assert sol.w.values[0] == pytest.approx(-1.0, abs=1e-8)
            hit_recovery = True
        assert hit_recovery  # at least one seed exercised a successful solve
        assert hit_error  # and at least one exhausted the doubling recovery
