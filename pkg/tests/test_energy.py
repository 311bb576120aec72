import numpy as np
import pytest

from f2f.energy import (
    BlockLayout, EmptyVisibilityError, EnergyWeights, FrozenProblem, IrlsState, Landmarks, SceneParams,
    analytic_jacobian, apply_update, energy_terms, eval_energy, residual_col, residual_lan, residual_reg,
)
from f2f.imaging import Frame, RasterOutput, rasterize, sh_basis
from f2f.model import FacePrior, eval_geometry
from oracles import exact_landmarks, gradient_gate_state, jacobian_fd_errors, random_scene, render


def one_pixel_raster(color) -> RasterOutput:
    c = np.zeros((1, 1, 3))
    c[0, 0] = color
    return RasterOutput(color=c, depth=np.ones((1, 1)), tri_id=np.zeros((1, 1), dtype=np.int64),
                        bary=np.full((1, 1, 3), 1 / 3), visible=np.array([[0, 0]]))


# ---------------------------------------------------------------------------
# energy evaluation


def test_self_render_energy_vanishes(prior, rng):
    p = random_scene(prior, rng, 64, 64, coef_sigmas=0.0, light=0.03)
    frame = render(prior, p, 64, 64)
    rep = eval_energy(prior, p, frame, exact_landmarks(prior, p))
    assert rep.E_col == 0.0
    assert rep.E_lan < 1e-20
    assert rep.E_reg == 0.0
    assert rep.n_visible > 0


def test_regularizer_vanishes_at_the_mean(prior):
    p = SceneParams.neutral(prior, 32, 32)
    assert np.array_equal(residual_reg(prior, p, EnergyWeights()), np.zeros(prior.d_id + prior.d_alb + prior.d_exp))


def test_one_pixel_photometric_energy(prior):
    raster = one_pixel_raster([0.3, 0.0, 0.4])
    rep = energy_terms(np.array([[0.3, 0.0, 0.4]]), 0.0, 0.0, 1, EnergyWeights())
    assert rep.E_col == pytest.approx(0.5, abs=1e-15)
    # and through eval_energy with a hand-made raster over a black frame
    rep = eval_energy(prior, SceneParams.neutral(prior, 1, 1), Frame(np.zeros((1, 1, 3))), None, raster=raster)
    assert rep.E_col == pytest.approx(0.5, abs=1e-15)
    assert rep.n_visible == 1


def test_empty_visibility_is_an_error(prior):
    p = SceneParams.neutral(prior, 16, 16, depth=-3.0)
    with pytest.raises(EmptyVisibilityError):
        eval_energy(prior, p, Frame(np.zeros((16, 16, 3))), None)


# ---------------------------------------------------------------------------
# photometric rows


def test_zero_residual_rows():
    raster = one_pixel_raster([0.2, 0.3, 0.4])
    rows, pix = residual_col(raster, Frame(np.full((1, 1, 3), [0.2, 0.3, 0.4])))
    assert np.all(rows == 0.0)
    assert pix.tolist() == [[0, 0]]


def test_irls_floor_keeps_weights_finite():
    irls = IrlsState(np.array([0.0, 1e-9, 0.5]))
    assert np.all(np.isfinite(irls.weights))
    assert irls.weights[0] == pytest.approx(1e4)
    assert irls.weights[2] == pytest.approx(2.0)


def scalar_l21(c, obs):
    total = 0.0
    for o in obs:
        total += np.sqrt(sum((c[i] - o[i]) ** 2 for i in range(3)))
    return total / len(obs)


def scalar_irls_step(c, obs, eps=1e-4):
    """Weighted mean with weights 1 / max(||c - o||, eps)."""
    num = [0.0, 0.0, 0.0]
    den = 0.0
    for o in obs:
        n = np.sqrt(sum((c[i] - o[i]) ** 2 for i in range(3)))
        w = 1.0 / max(n, eps)
        den += w
        for i in range(3):
            num[i] += w * o[i]
    return np.array([x / den for x in num])


def test_irls_step_decreases_l21_energy_on_a_toy(rng):
    # three pixels render one shared color c; the input shows three different colors
    obs = rng.uniform(0, 1, (3, 3))
    c = np.array([0.9, 0.1, 0.5])
    for _ in range(5):
        color = np.tile(c, (1, 3, 1))
        raster = RasterOutput(color=color, depth=np.ones((1, 3)), tri_id=np.zeros((1, 3), dtype=np.int64),
                              bary=np.full((1, 3, 3), 1 / 3), visible=np.array([[0, 0], [1, 0], [2, 0]]))
        F, _ = residual_col(raster, Frame(obs[None]))
        # d rows / d c: each pixel's block is its row scale times I3
        s = F.reshape(3, 3)[:, 0] / (c[0] - obs[:, 0])
        J = np.concatenate([si * np.eye(3) for si in s])
        c_new = c - np.linalg.solve(J.T @ J, J.T @ F)
        np.testing.assert_allclose(c_new, scalar_irls_step(c, obs), atol=1e-12)
        assert scalar_l21(c_new, obs) < scalar_l21(c, obs)
        c = c_new


def test_irls_surrogate_is_tangent(prior, rng):
    p, raster, target, lms = gradient_gate_state(prior, 3)
    prob = FrozenProblem.from_raster(prior, p, raster, target, None, EnergyWeights(w_lan=0.0, w_reg=0.0))
    F = prob.residual(p)
    r = prob.raw_photo(p)
    norms = np.linalg.norm(r, axis=1)
    e_surrogate = float(F @ F)
    e_true = float(np.mean(np.maximum(norms, 0) ** 2 / np.maximum(norms, 1e-4)))
    assert e_surrogate == pytest.approx(e_true, rel=1e-12)
    big = norms >= 1e-4
    np.testing.assert_allclose(np.mean(norms[big] ** 2 / norms[big]), np.mean(norms[big]), rtol=1e-12)


# ---------------------------------------------------------------------------
# landmark rows


def test_landmarks_vanish_at_ground_truth(prior, rng):
    p = random_scene(prior, rng)
    rows, ok = residual_lan(prior, p, exact_landmarks(prior, p))
    assert ok.all()
    assert np.max(np.abs(rows)) < 1e-10


def test_zero_confidence_row_contributes_nothing(prior, rng):
    p = random_scene(prior, rng)
    lm = exact_landmarks(prior, p)
    pts = lm.points.copy()
    pts[0] += 50.0
    conf = np.ones(len(lm))
    conf[0] = 0.0
    rows, _ = residual_lan(prior, p, Landmarks(pts, conf, lm.vertex_ids))
    assert np.max(np.abs(rows)) < 1e-10


def test_single_landmark_hand_value(prior, rng):
    p = random_scene(prior, rng)
    lm = exact_landmarks(prior, p)
    one = Landmarks(lm.points[:1] + np.array([3.0, 4.0]), np.ones(1), lm.vertex_ids[:1])
    rows, _ = residual_lan(prior, p, one, EnergyWeights(w_lan=10.0))
    assert float(rows @ rows) == pytest.approx(250.0, rel=1e-10)


def test_landmark_behind_camera_is_dropped(prior):
    p = SceneParams.neutral(prior, 64, 64, depth=0.45)  # the camera plane cuts through the landmarks
    lm = Landmarks(np.zeros((len(prior.landmark_vertices), 2)), np.ones(len(prior.landmark_vertices)),
                   prior.landmark_vertices)
    rows, ok = residual_lan(prior, p, lm)
    assert 0 < (~ok).sum() < len(ok)
    assert len(rows) == 2 * ok.sum()


# ---------------------------------------------------------------------------
# regularizer rows


def test_regularizer_unit_sigma(prior):
    p = SceneParams.neutral(prior, 8, 8)
    p.alpha[0] = prior.sigma_id[0]
    r = residual_reg(prior, p, EnergyWeights(w_reg=2.5e-5))
    assert float(r @ r) == pytest.approx(2.5e-5, rel=1e-14)


def test_regularizer_matches_scalar_loop(prior, rng):
    p = random_scene(prior, rng)
    w = EnergyWeights()
    ref = []
    for coef, sig in ((p.alpha, prior.sigma_id), (p.beta, prior.sigma_alb), (p.delta, prior.sigma_exp)):
        for i in range(len(coef)):
            ref.append(np.sqrt(w.w_reg) * coef[i] / sig[i])
    np.testing.assert_allclose(residual_reg(prior, p, w), ref, rtol=1e-14)


def test_regularizer_is_invariant_to_column_rescaling(prior, rng):
    # scaling a basis column by s while its sigma shrinks by s describes the same shape
    # distribution; the coefficient that reproduces the same geometry then has the same
    # regularizer value
    s = 3.7
    B = np.array(prior.basis_id)
    B[:, 2] *= s
    sig = np.array(prior.sigma_id)
    sig[2] /= s
    q = FacePrior(prior.mean_shape, prior.mean_albedo, B, prior.basis_alb, prior.basis_exp, sig,
                  prior.sigma_alb, prior.sigma_exp, prior.triangles, prior.landmark_vertices,
                  prior.mouth_region, prior.uv_coords, prior.mouth_landmarks)
    p = random_scene(prior, rng)
    pq = p.copy()
    pq.alpha[2] /= s
    np.testing.assert_allclose(eval_geometry(q, pq.alpha, pq.delta), eval_geometry(prior, p.alpha, p.delta),
                               atol=1e-14)
    a = residual_reg(prior, p, EnergyWeights())
    b = residual_reg(q, pq, EnergyWeights())
    assert float(a @ a) == pytest.approx(float(b @ b), rel=1e-13)


# ---------------------------------------------------------------------------
# Jacobians


def test_regularizer_jacobian_closed_form(prior, rng):
    p = random_scene(prior, rng)
    raster = rasterize(prior, p, 64, 64)
    frame = render(prior, p, 64, 64)
    J = analytic_jacobian(prior, p, raster, frame, None, None, ("alpha",))
    nreg = prior.d_id + prior.d_alb + prior.d_exp
    Jr = J[-nreg:][: prior.d_id]
    np.testing.assert_allclose(Jr, np.diag(np.sqrt(2.5e-5) / prior.sigma_id), atol=1e-15)


def test_lighting_jacobian_closed_form(prior, rng):
    p = random_scene(prior, rng)
    raster = rasterize(prior, p, 64, 64)
    frame = render(prior, random_scene(prior, rng), 64, 64)
    lay = BlockLayout(prior, ("gamma",))
    prob = FrozenProblem.from_raster(prior, p, raster, frame, None)
    J, _ = prob.linearize(p, lay)
    m = raster.n_visible
    s = np.sqrt(1.0 / m) * np.sqrt(prob.irls_w)
    B = sh_basis(raster.normals)
    rho = raster.albedo
    Jp = J[: 3 * m].reshape(m, 3, 3, 9)  # pixel, channel row, channel column, band
    for c in range(3):
        np.testing.assert_allclose(Jp[:, c, c, :], (s * rho[:, c])[:, None] * B, rtol=1e-9, atol=1e-14)
        for c2 in range(3):
            if c2 != c:
                assert np.all(Jp[:, c, c2, :] == 0)


def test_inactive_blocks_are_omitted(prior, rng):
    p, raster, target, lms = gradient_gate_state(prior, 1)
    J_all, _ = FrozenProblem.from_raster(prior, p, raster, target, lms).linearize(p, BlockLayout(prior))
    lay = BlockLayout(prior, ("delta", "rot"))
    J, _ = FrozenProblem.from_raster(prior, p, raster, target, lms).linearize(p, lay)
    full = BlockLayout(prior)
    assert J.shape[1] == prior.d_exp + 3
    np.testing.assert_allclose(J[:, : prior.d_exp], J_all[:, full.slice("delta")])
    np.testing.assert_allclose(J[:, prior.d_exp:], J_all[:, full.slice("rot")])


def test_linearization_residual_matches_residual(prior):
    p, raster, target, lms = gradient_gate_state(prior, 2)
    prob = FrozenProblem.from_raster(prior, p, raster, target, lms)
    _, F = prob.linearize(p, BlockLayout(prior))
    np.testing.assert_allclose(F, prob.residual(p), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(prior, seed):
    errs = jacobian_fd_errors(prior, seed)
    assert max(errs.values()) < 1e-3, errs


def test_update_is_additive_and_compositional(prior, rng):
    p = random_scene(prior, rng)
    lay = BlockLayout(prior)
    step = rng.standard_normal(lay.size) * 1e-3
    q = apply_update(p, lay, step)
    np.testing.assert_allclose(q.delta - p.delta, step[lay.slice("delta")], atol=1e-15)
    np.testing.assert_allclose(q.kappa.as_array() - p.kappa.as_array(), step[lay.slice("kappa")], atol=1e-12)
    R_inc = q.pose.R @ p.pose.R.T
    assert np.max(np.abs(R_inc.T @ R_inc - np.eye(3))) < 1e-12
