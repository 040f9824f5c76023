import math

import numpy as np
import pytest

from pdhj.errors import AuditError, ContractError, DomainError
from pdhj.evolution import (
    DelayDynamics,
    OperatorSpec,
    audit_hypotheses,
    build_p_laplacian,
    make_linear_operator,
    sample_reachable_set,
    solve_delay_evolution,
)
from pdhj.pathcore import Path, StateSpace, TimeGrid, sup_norm


def linear_dynamics(L=0.0, dim=1, gain=1.0):
    return DelayDynamics.forced(make_linear_operator(dim=dim, gain=gain), L)


class TestAuditHypotheses:
    def test_identity_operator_clean(self):
        report = audit_hypotheses(make_linear_operator(dim=1, gain=1.0), 500, seed=1)
        assert report.passed
        assert report.monotonicity_min >= -1e-12
        assert report.coercivity_min >= 1.0 - 1e-9

    def test_negated_identity_flagged(self):
        bad = OperatorSpec(space=StateSpace(dim=2), eval_fn=lambda t, v: -v,
                           c1=1.0, c2=1.0, kind="custom")
        report = audit_hypotheses(bad, 300, seed=2)
        assert not report.passed
        assert any("coercivity" in v for v in report.violations)
        assert any("monotonicity" in v for v in report.violations)

    def test_p_laplacian_monotone_over_1000_pairs(self):
        op = build_p_laplacian(8, 3.0)
        report = audit_hypotheses(op, 1000, seed=3)
        assert report.passed
        assert report.monotonicity_min >= -1e-12
        assert report.coercivity_min >= op.c2

    def test_nonfinite_output_raises_with_sample(self):
        bad = OperatorSpec(space=StateSpace(dim=1),
                           eval_fn=lambda t, v: np.full_like(v, np.inf) if abs(v[0]) > 0 else v,
                           c1=1.0, c2=1.0, kind="custom")
        with pytest.raises(AuditError) as err:
            audit_hypotheses(bad, 50, seed=4)
        assert err.value.sample is not None


class TestPLaplacian:
    def test_p2_matches_tridiagonal_stiffness(self):
        n = 8
        op = build_p_laplacian(n, 2.0)
        h = 1.0 / (n + 1)
        main = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
        stiffness = main / h ** 2
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.standard_normal(n)
            assert np.allclose(op(0.0, x), stiffness @ x, atol=1e-10)

    def test_zero_at_origin(self):
        op = build_p_laplacian(6, 3.0)
        assert np.allclose(op(0.0, np.zeros(6)), 0.0)

    def test_asymmetric_for_p_gt_2_but_monotone(self):
        op = build_p_laplacian(8, 3.0)
        rng = np.random.default_rng(6)
        asymmetry = 0.0
        for _ in range(50):
            x, y = rng.standard_normal(8), rng.standard_normal(8)
            asymmetry = max(asymmetry,
                            abs(float(op(0.0, x) @ y) - float(op(0.0, y) @ x)))
            assert float((op(0.0, x) - op(0.0, y)) @ (x - y)) >= -1e-12
        assert asymmetry > 1e-6

    def test_estimated_c2_positive(self):
        for p, n in ((2.0, 8), (3.0, 16), (4.0, 32)):
            assert build_p_laplacian(n, p).c2 > 0


def history_path(grid, value=1.0, dim=1):
    return Path.constant(grid, [value] * dim)


class TestSolveDelayEvolution:
    def test_linear_decay_matches_closed_form(self):
        # x' + x = 0, x(0) = 1  ->  x(1) = exp(-1)
        grid = TimeGrid(0.0, 1.0, 64)
        report = solve_delay_evolution(linear_dynamics(), 0.0, history_path(grid))
        err = abs(report.path.values[-1, 0] - math.exp(-1.0))
        assert err <= 2.0 * grid.mesh

    def test_forced_saturation_matches_closed_form(self):
        # x' + x = 1, x(0) = 0  ->  x(t) = 1 - exp(-t)
        grid = TimeGrid(0.0, 1.0, 64)
        dyn = linear_dynamics(L=2.0)
        forcing = np.ones((64, 1))
        report = solve_delay_evolution(dyn, 0.0, Path.zero(grid), forcing=forcing)
        expected = 1.0 - np.exp(-grid.nodes)
        assert np.max(np.abs(report.path.values[:, 0] - expected)) <= 2.0 * grid.mesh

    def test_zero_fixed_point(self):
        grid = TimeGrid(0.0, 1.0, 32)
        op = build_p_laplacian(4, 3.0)
        dyn = DelayDynamics.forced(op, 0.0)
        report = solve_delay_evolution(dyn, 0.0, Path.zero(grid, dim=4))
        assert np.allclose(report.path.values, 0.0, atol=1e-12)

    def test_first_order_convergence_window(self):
        errors = []
        for n in (8, 16, 32, 64, 128):
            grid = TimeGrid(0.0, 1.0, n)
            report = solve_delay_evolution(linear_dynamics(), 0.0, history_path(grid))
            errors.append(abs(report.path.values[-1, 0] - math.exp(-1.0)))
        ratios = [a / b for a, b in zip(errors[:-1], errors[1:])]
        assert all(1.7 <= r <= 2.3 for r in ratios)

    def test_history_preserved_and_deterministic(self):
        grid = TimeGrid(0.0, 1.0, 16)
        rng = np.random.default_rng(7)
        hist = Path(grid, rng.standard_normal((17, 1)))
        dyn = linear_dynamics(L=1.0)
        forcing = 0.3 * np.ones((16, 1))
        a = solve_delay_evolution(dyn, 0.5, hist, forcing=forcing)
        b = solve_delay_evolution(dyn, 0.5, hist, forcing=forcing)
        k0 = grid.node_index(0.5)
        assert np.array_equal(a.path.values[: k0 + 1], hist.values[: k0 + 1])
        assert np.array_equal(a.path.values, b.path.values)

    def test_dissipativity_per_step(self):
        # f = 0 and monotone A with A(t,0)=0 force |x_{k+1}| <= |x_k|
        grid = TimeGrid(0.0, 1.0, 24)
        op = build_p_laplacian(6, 3.0)
        rng = np.random.default_rng(8)
        x0 = Path.constant(grid, rng.standard_normal(6))
        report = solve_delay_evolution(DelayDynamics.forced(op, 0.0), 0.0, x0)
        norms = np.linalg.norm(report.path.values, axis=1)
        assert np.all(np.diff(norms) <= 1e-9)

    def test_forcing_bound_violation_raises(self):
        grid = TimeGrid(0.0, 1.0, 8)
        dyn = linear_dynamics(L=0.1)
        with pytest.raises(ContractError):
            solve_delay_evolution(dyn, 0.0, Path.zero(grid), forcing=np.ones((8, 1)))

    def test_t0_must_be_grid_node(self):
        grid = TimeGrid(0.0, 1.0, 8)
        with pytest.raises(DomainError):
            solve_delay_evolution(linear_dynamics(), 0.3, Path.zero(grid))

    def test_unsolvable_step_raises_with_index(self):
        from pdhj.errors import SolverError
        grid = TimeGrid(0.0, 1.0, 4)
        dt = grid.mesh
        # A cancels the identity part and leaves a constant: g has no root
        bad = OperatorSpec(space=StateSpace(dim=2),
                           eval_fn=lambda t, v: -v / dt + np.array([1.0, 0.0]) / dt,
                           c1=1.0, c2=1.0, kind="custom")
        dyn = DelayDynamics.forced(bad, 0.0)
        with pytest.raises(SolverError) as err:
            solve_delay_evolution(dyn, 0.0, Path.zero(grid, dim=2))
        assert err.value.step_index == 0

    def test_stiff_p_laplacian_step(self):
        grid = TimeGrid(0.0, 0.5, 16)
        op = build_p_laplacian(12, 4.0)
        x0 = Path.constant(grid, np.sin(np.linspace(0.1, 3.0, 12)))
        report = solve_delay_evolution(DelayDynamics.forced(op, 0.0), 0.0, x0)
        assert report.residual_estimate <= 1e-8
        assert np.all(np.isfinite(report.path.values))


class TestSampleReachableSet:
    def test_zero_l_gives_unforced_trajectory(self):
        grid = TimeGrid(0.0, 1.0, 16)
        dyn = linear_dynamics(L=0.0)
        reports = sample_reachable_set(dyn, 0.0, history_path(grid), 3, seed=11)
        baseline = solve_delay_evolution(dyn, 0.0, history_path(grid))
        for rep in reports:
            assert np.array_equal(rep.path.values, baseline.path.values)
            assert np.allclose(rep.forcing_trace, 0.0)

    def test_forcing_bound_replay_check(self):
        grid = TimeGrid(0.0, 1.0, 20)
        dyn = linear_dynamics(L=0.7)
        reports = sample_reachable_set(dyn, 0.0, history_path(grid), 8, seed=12)
        for rep in reports:
            for k, f_k in enumerate(rep.forcing_trace):
                limit = 0.7 * (1.0 + sup_norm(rep.path, grid.nodes[k]))
                assert np.linalg.norm(f_k) <= limit + 1e-9

    def test_history_agreement_and_seed_determinism(self):
        grid = TimeGrid(0.0, 1.0, 16)
        rng = np.random.default_rng(13)
        hist = Path(grid, rng.standard_normal((17, 2)))
        dyn = DelayDynamics.forced(make_linear_operator(dim=2), 0.5)
        runs_a = sample_reachable_set(dyn, 0.25, hist, 4, seed=14)
        runs_b = sample_reachable_set(dyn, 0.25, hist, 4, seed=14)
        k0 = grid.node_index(0.25)
        for a, b in zip(runs_a, runs_b):
            assert np.array_equal(a.path.values, b.path.values)
            assert np.array_equal(a.path.values[: k0 + 1], hist.values[: k0 + 1])

    def test_jobs_do_not_change_results(self):
        grid = TimeGrid(0.0, 1.0, 12)
        dyn = linear_dynamics(L=0.5)
        serial = sample_reachable_set(dyn, 0.0, history_path(grid), 6, seed=15)
        threaded = sample_reachable_set(dyn, 0.0, history_path(grid), 6, seed=15, jobs=3)
        for a, b in zip(serial, threaded):
            assert np.array_equal(a.path.values, b.path.values)

    def test_report_serializes(self):
        grid = TimeGrid(0.0, 1.0, 8)
        rep = sample_reachable_set(linear_dynamics(L=0.3), 0.0, history_path(grid), 1, seed=16)[0]
        obj = rep.to_json_obj()
        assert obj["forcing_algorithm"] == "ball-uniform-pcg64/v1"
        assert obj["step_count"] == 8
