import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from f2f.energy import BlockLayout, FrozenProblem, apply_update
from f2f.imaging import build_pyramid
from f2f.solver import (
    BUNDLING, TRACKING, NormalSystem, NumericalError, SolveSchedule, gauss_newton_irls, jtj_apply,
    pcg_solve, write_trace_csv,
)
from f2f.tracking import FrameFitProblem
from oracles import (
    exact_landmarks, gauss_solve, gradient_gate_state, random_scene, random_spd, render, wishart_spd,
)

# ---------------------------------------------------------------------------
# PCG


def test_identity_one_step(rng):
    b = rng.standard_normal(7)
    res = pcg_solve(lambda x: x, b, np.ones(7), 1)
    assert np.array_equal(res.x, b)
    assert res.iterations == 1


def test_diagonal_system_with_jacobi_is_exact_in_one_step():
    d = np.array([2.0, 5.0, 0.25])
    b = np.array([1.0, -3.0, 2.0])
    res = pcg_solve(lambda x: d * x, b, d, 1)
    np.testing.assert_allclose(res.x, b / d, rtol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_pcg_matches_dense_direct_solve(seed):
    rng = np.random.default_rng(seed)
    A = wishart_spd(rng, 20)
    b = rng.standard_normal(20)
    x = pcg_solve(lambda v: A @ v, b, np.diag(A).copy(), 20).x
    ref = gauss_solve(A, b)
    assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)


def test_ill_conditioned_system_needs_extra_iterations(rng):
    # in floating point CG loses conjugacy on a spread spectrum, so n steps are not enough
    A = random_spd(rng, 20, cond=1e3)
    b = rng.standard_normal(20)
    ref = gauss_solve(A, b)
    x = pcg_solve(lambda v: A @ v, b, np.diag(A).copy(), 60).x
    assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)


def test_pcg_runs_exactly_the_requested_iterations(rng):
    A = random_spd(rng, 20)
    res = pcg_solve(lambda v: A @ v, rng.standard_normal(20), np.diag(A).copy(), 4)
    assert res.iterations == 4
    assert len(res.residual_norms) == 5


def test_pcg_early_exit_is_opt_in(rng):
    A = random_spd(rng, 20, cond=10)
    b = rng.standard_normal(20)
    res = pcg_solve(lambda v: A @ v, b, np.diag(A).copy(), 200, rtol=1e-10)
    assert res.iterations < 200
    assert res.residual_norms[-1] <= 1e-10 * np.linalg.norm(b)


def test_pcg_zero_rhs(rng):
    res = pcg_solve(lambda v: v, np.zeros(4), np.ones(4), 3)
    assert np.array_equal(res.x, np.zeros(4))


def test_pcg_non_finite_raises(rng):
    with pytest.raises(NumericalError):
        pcg_solve(lambda v: v, np.array([1.0, np.nan]), np.ones(2), 2)
    with pytest.raises(NumericalError):
        pcg_solve(lambda v: v * np.inf, np.ones(2), np.ones(2), 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 12))
def test_two_matvec_split_matches_explicit_normal_matrix(seed, m, n):
    r = np.random.default_rng(seed)
    J = r.standard_normal((m, n))
    x = r.standard_normal(n)
    ref = (J.T @ J) @ x
    assert np.linalg.norm(jtj_apply(J, x) - ref) <= 1e-10 * max(1.0, np.linalg.norm(ref))


def test_preconditioner_is_floored():
    ns = NormalSystem(np.zeros((3, 2)), np.zeros(3))
    assert np.all(ns.precond >= 1e-12)


# ---------------------------------------------------------------------------
# schedules


def test_schedule_presets():
    assert [(s.level, s.gn_iterations, s.pcg_iterations) for s in TRACKING.levels] == [(2, 1, 4), (3, 7, 4)]
    assert [(s.level, s.gn_iterations, s.pcg_iterations) for s in BUNDLING.levels] == \
        [(1, 25, 4), (2, 5, 4), (3, 1, 4)]
    assert TRACKING.n_levels == 2 and BUNDLING.n_levels == 3


@pytest.mark.parametrize("bad", [[], [(3, 0, 4)], [(3, 1, 0)], [(3, 1, 1), (2, 1, 1)], [(4, 1, 1)]])
def test_invalid_schedules_rejected(bad):
    with pytest.raises(ValueError):
        SolveSchedule.parse(bad)


# ---------------------------------------------------------------------------
# Gauss-Newton


def frame_problem(prior, p, width, active=("delta", "gamma", "rot", "trans"), levels=2):
    frame = render(prior, p, width, width)
    return FrameFitProblem(prior, build_pyramid(frame, levels), exact_landmarks(prior, p), active=active)


def test_stationary_at_ground_truth(prior, rng):
    p = random_scene(prior, rng, 64, 64, light=0.03)
    p.delta[:] = 0.0  # the regularizer's minimum, so ground truth is stationary for every term
    # finest level only: a box-filtered frame is not a self-render at the coarser resolution
    res = gauss_newton_irls(frame_problem(prior, p, 64), p, [(3, 7, 4)])
    assert max(res.step_norms) < 1e-8
    assert res.trace[-1].E_col < 1e-12 and res.trace[-1].E_lan < 1e-20


@pytest.mark.parametrize("seed", range(3))
def test_pose_only_solve_converges(prior, seed):
    rng = np.random.default_rng(100 + seed)
    p = random_scene(prior, rng, 64, 64)
    prob = frame_problem(prior, p, 64, active=("rot", "trans"))
    axis = rng.standard_normal(3)
    init = p.copy()
    init.pose = p.pose.compose_increment(np.deg2rad(5.0) * axis / np.linalg.norm(axis), np.zeros(3))
    e0 = prob.energy(init, 3).E_col
    res = gauss_newton_irls(prob, init, TRACKING)
    assert res.trace[-1].E_col < 1e-6 * e0


def perturbed_problem(prior, seed, width=64):
    rng = np.random.default_rng(seed)
    p = random_scene(prior, rng, width, width)
    prob = frame_problem(prior, p, width)
    init = p.copy()
    axis = rng.standard_normal(3)
    init.pose = p.pose.compose_increment(np.deg2rad(rng.uniform(1, 5)) * axis / np.linalg.norm(axis),
                                         [0.02 * rng.standard_normal(), 0.02 * rng.standard_normal(), 0.0])
    init.delta[:] = 0.0
    return prob, init


def test_monotonicity_audit(prior):
    steps = increases = 0
    for seed in range(10):
        prob, init = perturbed_problem(prior, 200 + seed)
        res = gauss_newton_irls(prob, init, TRACKING)
        tr = res.trace
        for a, b in zip(tr, tr[1:]):
            if a.level != b.level:
                continue  # the pyramid level changes the energy's sampling
            steps += 1
            increases += b.E_total > a.E_total * (1 + 1e-12)
        first_fine = next(r for r in tr if r.level == 3)
        assert tr[-1].E_total < 0.5 * first_fine.E_total
    assert increases <= 0.05 * steps, (increases, steps)


def test_trace_csv(prior, tmp_path):
    prob, init = perturbed_problem(prior, 7)
    res = gauss_newton_irls(prob, init, TRACKING)
    assert len(res.trace) == 1 + 1 + 1 + 7  # start of each level plus one row per step
    path = tmp_path / "trace.csv"
    write_trace_csv(res.trace, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "level", "E_total", "E_col", "E_lan", "E_reg", "|V|"]
    assert len(rows) == len(res.trace) + 1
    assert float(rows[-1][2]) == res.trace[-1].E_total


def test_step_halving_never_increases_energy(prior):
    prob, init = perturbed_problem(prior, 11)
    res = gauss_newton_irls(prob, init, TRACKING, step_halving=30)
    assert len(res.trace) == 10
    for a, b in zip(res.trace, res.trace[1:]):
        if a.level == b.level:
            assert b.E_total <= a.E_total


def test_solver_is_deterministic(prior):
    prob, init = perturbed_problem(prior, 3)
    a = gauss_newton_irls(prob, init, TRACKING).params
    b = gauss_newton_irls(prob, init, TRACKING).params
    for name in ("delta", "gamma"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.pose.R.tobytes() == b.pose.R.tobytes() and a.pose.t.tobytes() == b.pose.t.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences_of_the_surrogate(prior, seed):
    p, raster, target, lms = gradient_gate_state(prior, seed)
    prob = FrozenProblem.from_raster(prior, p, raster, target, lms)
    lay = BlockLayout(prior)
    J, F = prob.linearize(p, lay)
    g = -(J.T @ F)
    fd = np.zeros(lay.size)
    for k in range(lay.size):
        h = 1e-6
        e = np.zeros(lay.size)
        e[k] = h
        fp = prob.residual(apply_update(p, lay, e))
        fm = prob.residual(apply_update(p, lay, -e))
        fd[k] = -(0.5 * fp @ fp - 0.5 * fm @ fm) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)
