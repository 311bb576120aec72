"""Tracking objective: robust photo-consistency, landmark alignment and statistical prior.

Residual rows are pre-scaled so that the squared norm of the stacked vector is the
IRLS surrogate of the total energy::

    photo    sqrt(w_col / |V|) * sqrt(w_p) * (C_S(p) - C_I(p))       (3 rows / pixel)
    landmark sqrt(w_lan / |F|) * sqrt(w_conf_j) * (f_j - proj(v_j))  (2 rows / feature)
    prior    sqrt(w_reg) * coeff_i / sigma_i

with IRLS weights ``w_p = 1 / max(||r_p(P_old)||, eps)``.

Within one Gauss-Newton step the visibility pattern is frozen: every pixel of V
keeps the triangle it saw. Its surface point is re-derived by intersecting the
pixel ray with that triangle's plane under the current parameters, so C_S(p) is
a smooth function of every block (pose, identity, expression, albedo, lighting,
intrinsics) and its derivative is the true derivative of the rendered color
away from visibility changes. The observed color C_I(p) is a constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import (
    CameraIntrinsics, Frame, RasterOutput, RigidPose, Z_NEAR, projection_jacobian, rasterize,
    sh_basis, sh_basis_grad, vertex_incidence, vertex_normals,
)
from .model import FacePrior, eval_albedo, eval_geometry

BLOCK_ORDER = ("alpha", "beta", "delta", "gamma", "rot", "trans", "kappa")
IRLS_EPS = 1e-4


class EmptyVisibilityError(RuntimeError):
    """No visible pixels: the pose must be re-initialized."""


@dataclass
class EnergyWeights:
    w_col: float = 1.0
    w_lan: float = 10.0
    w_reg: float = 2.5e-5


@dataclass
class SceneParams:
    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray  # (3, 9)
    pose: RigidPose
    kappa: CameraIntrinsics

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(3, 9)

    @classmethod
    def neutral(cls, prior: FacePrior, width: int, height: int, gamma=None, depth: float = 3.0):
        from .imaging import ambient_gamma
        return cls(np.zeros(prior.d_id), np.zeros(prior.d_alb), np.zeros(prior.d_exp),
                   ambient_gamma() if gamma is None else gamma,
                   RigidPose(np.eye(3), np.array([0.0, 0.0, depth])),
                   CameraIntrinsics.default_for(width, height))

    def copy(self) -> "SceneParams":
        return SceneParams(self.alpha.copy(), self.beta.copy(), self.delta.copy(), self.gamma.copy(),
                           self.pose.copy(), CameraIntrinsics(**vars(self.kappa)))

    def check_dims(self, prior: FacePrior) -> None:
        if (self.alpha.shape != (prior.d_id,) or self.beta.shape != (prior.d_alb,)
                or self.delta.shape != (prior.d_exp,)):
            raise ValueError("parameter dimensions do not match the prior")
        vals = np.concatenate([self.alpha, self.beta, self.delta, self.gamma.ravel(), self.pose.R.ravel(),
                               self.pose.t, self.kappa.as_array()])
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite parameters")


@dataclass
class Landmarks:
    """Feature observations of one frame: pixel positions, confidences and model vertex ids."""
    points: np.ndarray  # (m, 2)
    conf: np.ndarray  # (m,)
    vertex_ids: np.ndarray  # (m,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.conf)

    def scaled(self, factor: float) -> "Landmarks":
        return Landmarks(self.points / factor, self.conf, self.vertex_ids)

    @classmethod
    def empty(cls) -> "Landmarks":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class IrlsState:
    norms: np.ndarray  # per visible pixel ||r_p(P_old)||
    eps: float = IRLS_EPS

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / np.maximum(self.norms, self.eps)

    @classmethod
    def from_residuals(cls, r: np.ndarray, eps: float = IRLS_EPS) -> "IrlsState":
        return cls(np.linalg.norm(r, axis=1), eps)


class BlockLayout:
    """Column layout of the active parameter blocks."""

    def __init__(self, prior: FacePrior, active=BLOCK_ORDER):
        sizes = {"alpha": prior.d_id, "beta": prior.d_alb, "delta": prior.d_exp, "gamma": 27,
                 "rot": 3, "trans": 3, "kappa": 4}
        unknown = set(active) - set(sizes)
        if unknown:
            raise ValueError(f"unknown blocks {sorted(unknown)}")
        self.prior = prior
        self.active = tuple(b for b in BLOCK_ORDER if b in active)
        self.sizes = sizes
        self.offsets = {}
        off = 0
        for b in self.active:
            self.offsets[b] = off
            off += sizes[b]
        self.size = off

    def slice(self, block: str) -> slice:
        o = self.offsets[block]
        return slice(o, o + self.sizes[block])

    def __contains__(self, block):
        return block in self.offsets


def rotation_pivot(prior: FacePrior) -> np.ndarray:
    """Model-space point that rotation increments turn about: the mean-shape centroid.

    Turning about a point inside the face rather than the model origin keeps the
    rotation and translation columns of the Jacobian nearly decoupled.
    """
    return prior.mean_shape.reshape(-1, 3).mean(axis=0)


def apply_update(params: SceneParams, layout: BlockLayout, step: np.ndarray,
                 prior: FacePrior | None = None) -> SceneParams:
    """Additive update for linear blocks, left-compositional for rotation (about the pivot)."""
    p = params.copy()
    if "alpha" in layout:
        p.alpha = p.alpha + step[layout.slice("alpha")]
    if "beta" in layout:
        p.beta = p.beta + step[layout.slice("beta")]
    if "delta" in layout:
        p.delta = p.delta + step[layout.slice("delta")]
    if "gamma" in layout:
        p.gamma = p.gamma + step[layout.slice("gamma")].reshape(3, 9)
    prior = prior if prior is not None else layout.prior
    dw = step[layout.slice("rot")] if "rot" in layout else np.zeros(3)
    dt = step[layout.slice("trans")] if "trans" in layout else np.zeros(3)
    p.pose = p.pose.compose_increment(dw, dt, rotation_pivot(prior))
    if "kappa" in layout:
        p.kappa = CameraIntrinsics.from_array(p.kappa.as_array() + step[layout.slice("kappa")])
    return p


# ---------------------------------------------------------------------------
# residuals


def _level_cam(params: SceneParams, scale: float) -> CameraIntrinsics:
    return params.kappa.scaled(scale)


def residual_reg(prior: FacePrior, params: SceneParams, weights: EnergyWeights,
                 blocks=("alpha", "beta", "delta")) -> np.ndarray:
    sw = np.sqrt(weights.w_reg)
    parts = []
    if "alpha" in blocks:
        parts.append(sw * params.alpha / prior.sigma_id)
    if "beta" in blocks:
        parts.append(sw * params.beta / prior.sigma_alb)
    if "delta" in blocks:
        parts.append(sw * params.delta / prior.sigma_exp)
    return np.concatenate(parts) if parts else np.zeros(0)


def _landmark_geometry(prior, params, landmarks, cam, verts=None):
    if verts is None:
        verts = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)
    v = verts[landmarks.vertex_ids]
    X = v @ params.pose.R.T + params.pose.t
    ok = X[:, 2] > Z_NEAR
    zs = np.where(ok, X[:, 2], 1.0)
    u = np.stack([cam.fx * X[:, 0] / zs + cam.cx, cam.fy * X[:, 1] / zs + cam.cy], axis=1)
    return v, X, u, ok


def residual_lan(prior: FacePrior, params: SceneParams, landmarks: Landmarks,
                 weights: EnergyWeights | None = None, cam: CameraIntrinsics | None = None,
                 verts=None):
    """Landmark rows (2 per valid feature). Returns ``(rows, valid_mask)``.

    Features whose vertex lies behind the camera are dropped; ``(~valid).sum()``
    is the warning count.
    """
    weights = weights or EnergyWeights()
    cam = cam or params.kappa
    if len(landmarks) == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    _, _, u, ok = _landmark_geometry(prior, params, landmarks, cam, verts)
    nf = int(ok.sum())
    if nf == 0:
        return np.zeros(0), ok
    scale = np.sqrt(weights.w_lan / nf) * np.sqrt(landmarks.conf[ok])
    rows = scale[:, None] * (landmarks.points[ok] - u[ok])
    return rows.ravel(), ok


def residual_col(raster: RasterOutput, frame: Frame, irls: IrlsState | None = None,
                 weights: EnergyWeights | None = None):
    """Weighted photometric rows at the linearization point.

    Returns ``(rows, pixels)``: rows has 3 entries per visible pixel, and
    ``pixels`` maps row block i to the (x, y) pixel it came from.
    """
    weights = weights or EnergyWeights()
    vis = raster.visible
    if len(vis) == 0:
        return np.zeros(0), vis
    r = raster.color[vis[:, 1], vis[:, 0]] - frame.rgb[vis[:, 1], vis[:, 0]]
    irls = irls or IrlsState.from_residuals(r)
    s = np.sqrt(weights.w_col / len(vis)) * np.sqrt(irls.weights)
    return (s[:, None] * r).ravel(), vis


@dataclass
class EnergyReport:
    E_total: float
    E_col: float
    E_lan: float
    E_reg: float
    n_visible: int
    n_landmarks_dropped: int = 0


def energy_terms(r_col: np.ndarray, lan_sq: float, reg_sq: float, n_visible: int,
                 weights: EnergyWeights, dropped: int = 0) -> EnergyReport:
    e_col = float(np.mean(np.linalg.norm(r_col, axis=1))) if n_visible else float("nan")
    e_lan = lan_sq / weights.w_lan if weights.w_lan > 0 else 0.0
    e_reg = reg_sq / weights.w_reg if weights.w_reg > 0 else 0.0
    total = weights.w_col * e_col + lan_sq + reg_sq
    return EnergyReport(total, e_col, e_lan, e_reg, n_visible, dropped)


def _unweighted_lan_sq(prior, params, landmarks, cam, weights, verts=None):
    rows, ok = residual_lan(prior, params, landmarks, weights, cam, verts)
    return float(rows @ rows), int((~ok).sum()) if len(ok) else 0


def eval_energy(prior: FacePrior, params: SceneParams, frame: Frame, landmarks: Landmarks | None,
                weights: EnergyWeights | None = None, raster: RasterOutput | None = None,
                cam: CameraIntrinsics | None = None) -> EnergyReport:
    """True energy (l2,1 photo term, not the IRLS surrogate)."""
    weights = weights or EnergyWeights()
    cam = cam or params.kappa
    if raster is None:
        raster = rasterize(prior, params, frame.width, frame.height, cam)
    if raster.n_visible == 0:
        raise EmptyVisibilityError("no visible pixels; re-initialize the pose")
    vis = raster.visible
    r = raster.color[vis[:, 1], vis[:, 0]] - frame.rgb[vis[:, 1], vis[:, 0]]
    lan_sq, dropped = _unweighted_lan_sq(prior, params, landmarks or Landmarks.empty(), cam, weights)
    reg = residual_reg(prior, params, weights)
    return energy_terms(r, lan_sq, float(reg @ reg), len(vis), weights, dropped)


# ---------------------------------------------------------------------------
# frozen-raster residual and its analytic Jacobian


@dataclass
class _Photo:
    r: np.ndarray  # (m, 3) raw residual
    b: np.ndarray  # (m, 3) barycentrics of the pixel ray in its frozen triangle
    s: np.ndarray  # (m,) sum of the unnormalized ray coordinates
    Minv: np.ndarray  # (m, 3, 3) inverse of [X_0 X_1 X_2]
    Xk: np.ndarray  # (m, 3, 3) camera-space triangle corners, [pixel, corner, coord]
    ray: np.ndarray  # (m, 3) unnormalized pixel ray
    n: np.ndarray  # (m, 3) camera normal
    m_len: np.ndarray  # (m,) length of the interpolated model normal
    rho: np.ndarray  # (m, 3) albedo
    irr: np.ndarray  # (m, 3) irradiance
    basis: np.ndarray  # (m, 9)
    vid: np.ndarray  # (m, 3) vertex ids
    verts: np.ndarray
    unit_vn: np.ndarray
    raw_vn: np.ndarray
    albedo_v: np.ndarray


def pixel_rays(cam: CameraIntrinsics, pix: np.ndarray) -> np.ndarray:
    """Camera-space rays (z = 1) through the given image points."""
    return np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy,
                     np.ones(len(pix))], axis=1)


def _photo(prior, params, tri, pix, target, cam) -> _Photo:
    verts = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)
    unit_vn, raw_vn = vertex_normals(verts, prior.triangles)
    albedo_v = eval_albedo(prior, params.beta).reshape(-1, 3)
    vid = prior.triangles[tri]
    Xk = verts[vid] @ params.pose.R.T + params.pose.t  # (m, k, c)
    ray = pixel_rays(cam, pix)
    Minv = np.linalg.inv(np.transpose(Xk, (0, 2, 1)))
    y = np.einsum("mkc,mc->mk", Minv, ray)
    s = y.sum(axis=1)
    b = y / s[:, None]
    mvec = np.einsum("mk,mkc->mc", b, unit_vn[vid])
    m_len = np.linalg.norm(mvec, axis=1)
    n = (mvec @ params.pose.R.T) / m_len[:, None]
    rho = np.einsum("mk,mkc->mc", b, albedo_v[vid])
    basis = sh_basis(n)
    irr = basis @ params.gamma.T
    r = rho * irr - target
    return _Photo(r, b, s, Minv, Xk, ray, n, m_len, rho, irr, basis, vid, verts, unit_vn, raw_vn,
                  albedo_v)


@dataclass
class FrozenProblem:
    """Everything held fixed during one Gauss-Newton step on one frame and level.

    Each visible pixel keeps the triangle it saw at the linearization point; its
    barycentrics are re-derived from the pixel ray for any parameter vector.
    """
    prior: FacePrior
    pix: np.ndarray  # (m, 2) pixel centers in level units
    target: np.ndarray  # (m, 3) observed colors C_I(p)
    tri: np.ndarray  # (m,) frozen triangle ids
    landmarks: Landmarks  # in level pixel units
    irls_w: np.ndarray  # per-pixel IRLS weights
    weights: EnergyWeights
    scale: float = 1.0  # level downsample factor
    reg_blocks: tuple = ("alpha", "beta", "delta")

    @classmethod
    def from_raster(cls, prior, params, raster, frame: Frame, landmarks, weights=None, scale=1.0,
                    reg_blocks=("alpha", "beta", "delta"), eps=IRLS_EPS):
        weights = weights or EnergyWeights()
        vis = raster.visible
        if len(vis) == 0:
            raise EmptyVisibilityError("no visible pixels; re-initialize the pose")
        tri = raster.tri_id[vis[:, 1], vis[:, 0]]
        pix = vis.astype(np.float64) + 0.5
        target = frame.rgb[vis[:, 1], vis[:, 0]]
        prob = cls(prior, pix, target, tri, landmarks or Landmarks.empty(), np.ones(len(vis)),
                   weights, scale, tuple(reg_blocks))
        r = prob.raw_photo(params)
        prob.irls_w = IrlsState(np.linalg.norm(r, axis=1), eps).weights
        return prob

    @classmethod
    def landmarks_only(cls, prior, landmarks, weights=None, scale=1.0,
                       reg_blocks=("alpha", "beta", "delta")):
        """No photometric rows; used for pose warm starts without visibility."""
        return cls(prior, np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                   landmarks, np.zeros(0), weights or EnergyWeights(), scale, tuple(reg_blocks))

    def cam(self, params) -> CameraIntrinsics:
        return _level_cam(params, self.scale)

    def raw_photo(self, params) -> np.ndarray:
        if len(self.tri) == 0:
            return np.zeros((0, 3))
        return _photo(self.prior, params, self.tri, self.pix, self.target, self.cam(params)).r

    def residual(self, params) -> np.ndarray:
        """Stacked weighted residual vector F(P) under the frozen raster and IRLS weights."""
        w = self.weights
        r = self.raw_photo(params)
        s = np.sqrt(w.w_col / max(len(self.tri), 1)) * np.sqrt(self.irls_w)
        lan, _ = residual_lan(self.prior, params, self.landmarks, w, self.cam(params))
        reg = residual_reg(self.prior, params, w, self.reg_blocks)
        return np.concatenate([(s[:, None] * r).ravel(), lan, reg])

    def true_photo_energy(self, params) -> float:
        return float(np.mean(np.linalg.norm(self.raw_photo(params), axis=1)))

    def linearize(self, params, layout: BlockLayout):
        """Return ``(J, F)`` at ``params`` for the active blocks of ``layout``."""
        return analytic_jacobian_frozen(self, params, layout)


def _normal_derivs(ph: _Photo, prior: FacePrior, D: np.ndarray, R: np.ndarray):
    """d n_cam / d coeff at fixed barycentrics for geometry basis D (3n, d) -> (m, 3, d)."""
    d = D.shape[1]
    Dv = D.reshape(-1, 3, d)
    tris = prior.triangles
    v = ph.verts
    e1 = v[tris[:, 1]] - v[tris[:, 0]]
    e2 = v[tris[:, 2]] - v[tris[:, 0]]
    de1 = Dv[tris[:, 1]] - Dv[tris[:, 0]]  # (F, 3, d)
    de2 = Dv[tris[:, 2]] - Dv[tris[:, 0]]
    dfn = np.cross(de1, e2[:, :, None], axisa=1, axisb=1, axisc=1) + \
        np.cross(e1[:, :, None], de2, axisa=1, axisb=1, axisc=1)
    inc = vertex_incidence(tris, v.shape[0])
    draw = (inc @ dfn.reshape(len(tris), 3 * d)).reshape(-1, 3, d)
    nrm = np.linalg.norm(ph.raw_vn, axis=1)
    nrm = np.where(nrm > 0, nrm, 1.0)
    u = ph.unit_vn
    dunit = (draw - u[:, :, None] * np.einsum("vc,vcd->vd", u, draw)[:, None, :]) / nrm[:, None, None]
    dm = np.einsum("mk,mkcd->mcd", ph.b, dunit[ph.vid])
    dRm = np.einsum("ij,mjd->mid", R, dm) / ph.m_len[:, None, None]
    n = ph.n
    return dRm - n[:, :, None] * np.einsum("mc,mcd->md", n, dRm)[:, None, :]


def _bary_derivs(ph: _Photo, dX: np.ndarray | None, dray: np.ndarray | None) -> np.ndarray:
    """Barycentric change for corner motion dX (m, k, 3, d) and ray change dray (m, 3, d)."""
    y = ph.b * ph.s[:, None]
    rhs = 0.0
    if dX is not None:
        rhs = -np.einsum("mk,mkcd->mcd", y, dX)
    if dray is not None:
        rhs = rhs + dray
    dy = np.einsum("mkc,mcd->mkd", ph.Minv, rhs)
    return (dy - ph.b[:, :, None] * dy.sum(axis=1, keepdims=True)) / ph.s[:, None, None]


def _photo_block(prob: FrozenProblem, params: SceneParams, layout: BlockLayout, cam):
    prior = prob.prior
    w = prob.weights
    R = params.pose.R
    m = len(prob.tri)
    ph = _photo(prior, params, prob.tri, prob.pix, prob.target, cam)
    s = np.sqrt(w.w_col / m) * np.sqrt(prob.irls_w)

    Jp = np.zeros((m, 3, layout.size))
    shade_grad = np.einsum("cj,mjk->mck", params.gamma, sh_basis_grad(ph.n))  # d irr_c / d n
    dr_dn = ph.rho[:, :, None] * shade_grad  # (m, 3, 3)
    # color change per barycentric: albedo and normal interpolation
    Rn = np.einsum("ij,mkj->mik", R, ph.unit_vn[ph.vid]) / ph.m_len[:, None, None]  # (m, 3, k)
    dn_db = Rn - ph.n[:, :, None] * np.einsum("mc,mck->mk", ph.n, Rn)[:, None, :]
    dr_db = np.transpose(ph.albedo_v[ph.vid], (0, 2, 1)) * ph.irr[:, :, None] + \
        np.einsum("mcj,mjk->mck", dr_dn, dn_db)  # (m, 3, k)

    for name, basis in (("alpha", prior.basis_id), ("delta", prior.basis_exp)):
        if name not in layout:
            continue
        d = basis.shape[1]
        Dv = basis.reshape(-1, 3, d)
        dX = np.einsum("ij,mkjd->mkid", R, Dv[ph.vid])
        db = _bary_derivs(ph, dX, None)
        dn = _normal_derivs(ph, prior, basis, R)
        Jp[:, :, layout.slice(name)] = np.einsum("mck,mkd->mcd", dr_db, db) + \
            np.einsum("mck,mkd->mcd", dr_dn, dn)
    if "beta" in layout:
        Av = prior.basis_alb.reshape(-1, 3, prior.d_alb)
        drho = np.einsum("mk,mkcd->mcd", ph.b, Av[ph.vid])
        Jp[:, :, layout.slice("beta")] = ph.irr[:, :, None] * drho
    if "gamma" in layout:
        g = np.zeros((m, 3, 3, 9))
        for c in range(3):
            g[:, c, c, :] = ph.rho[:, c:c + 1] * ph.basis
        Jp[:, :, layout.slice("gamma")] = g.reshape(m, 3, 27)
    if "rot" in layout:
        q = params.pose.R @ rotation_pivot(prior) + params.pose.t
        Rv = ph.Xk - q  # (m, k, 3)
        dX = -_skew_batch(Rv.reshape(-1, 3)).reshape(m, 3, 3, 3)  # d X_k / d omega = -[R v_k]x
        db = _bary_derivs(ph, dX, None)
        skn = -_skew_batch(ph.n)
        Jp[:, :, layout.slice("rot")] = np.einsum("mck,mkd->mcd", dr_db, db) + \
            np.einsum("mck,mkd->mcd", dr_dn, skn)
    if "trans" in layout:
        dX = np.broadcast_to(np.eye(3), (m, 3, 3, 3))
        Jp[:, :, layout.slice("trans")] = np.einsum("mck,mkd->mcd", dr_db, _bary_derivs(ph, dX, None))
    if "kappa" in layout:
        dray = np.zeros((m, 3, 4))
        dray[:, 0, 0] = -ph.ray[:, 0] / cam.fx
        dray[:, 1, 1] = -ph.ray[:, 1] / cam.fy
        dray[:, 0, 2] = -1.0 / cam.fx
        dray[:, 1, 3] = -1.0 / cam.fy
        dray /= prob.scale
        Jp[:, :, layout.slice("kappa")] = np.einsum("mck,mkd->mcd", dr_db, _bary_derivs(ph, None, dray))
    Jp *= s[:, None, None]
    F_photo = (s[:, None] * ph.r).ravel()
    return Jp.reshape(3 * m, layout.size), F_photo, ph.verts


def _skew_batch(v: np.ndarray) -> np.ndarray:
    z = np.zeros(len(v))
    return np.stack([np.stack([z, -v[:, 2], v[:, 1]], 1),
                     np.stack([v[:, 2], z, -v[:, 0]], 1),
                     np.stack([-v[:, 1], v[:, 0], z], 1)], 1)


def analytic_jacobian_frozen(prob: FrozenProblem, params: SceneParams, layout: BlockLayout):
    prior = prob.prior
    w = prob.weights
    cam = prob.cam(params)
    R = params.pose.R
    m = len(prob.tri)
    if m == 0:
        verts = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)
        Jp2, F_photo = np.zeros((0, layout.size)), np.zeros(0)
    else:
        Jp2, F_photo, verts = _photo_block(prob, params, layout, cam)

    # landmarks
    lan, ok = residual_lan(prior, params, prob.landmarks, w, cam, verts)
    J_lan = np.zeros((len(lan), layout.size))
    if len(lan):
        v, X, _, _ = _landmark_geometry(prior, params, prob.landmarks, cam, verts)
        vids = prob.landmarks.vertex_ids[ok]
        v, X = v[ok], X[ok]
        nf = len(vids)
        sc = np.sqrt(w.w_lan / nf) * np.sqrt(prob.landmarks.conf[ok])
        Jl = np.zeros((nf, 2, layout.size))
        Jpl = projection_jacobian(cam, X)
        for name, basis in (("alpha", prior.basis_id), ("delta", prior.basis_exp)):
            if name in layout:
                Dv = basis.reshape(-1, 3, basis.shape[1])[vids]
                Jl[:, :, layout.slice(name)] = np.einsum("mjk,kl,mld->mjd", Jpl, R, Dv)
        if "rot" in layout:
            Rv = X - (R @ rotation_pivot(prior) + params.pose.t)
            Jl[:, :, layout.slice("rot")] = np.einsum("mjk,mkl->mjl", Jpl, -_skew_batch(Rv))
        if "trans" in layout:
            Jl[:, :, layout.slice("trans")] = Jpl
        if "kappa" in layout:
            Jk = np.zeros((nf, 2, 4))
            Jk[:, 0, 0] = X[:, 0] / X[:, 2]
            Jk[:, 1, 1] = X[:, 1] / X[:, 2]
            Jk[:, 0, 2] = 1.0
            Jk[:, 1, 3] = 1.0
            Jl[:, :, layout.slice("kappa")] = Jk / prob.scale
        # residual is f - u
        J_lan = -(sc[:, None, None] * Jl).reshape(2 * nf, layout.size)

    reg = residual_reg(prior, params, w, prob.reg_blocks)
    J_reg = np.zeros((len(reg), layout.size))
    sw = np.sqrt(w.w_reg)
    row = 0
    for name, sig in (("alpha", prior.sigma_id), ("beta", prior.sigma_alb), ("delta", prior.sigma_exp)):
        if name not in prob.reg_blocks:
            continue
        if name in layout:
            sl = layout.slice(name)
            J_reg[np.arange(row, row + len(sig)), np.arange(sl.start, sl.stop)] = sw / sig
        row += len(sig)

    J = np.concatenate([Jp2, J_lan, J_reg])
    F = np.concatenate([F_photo, lan, reg])
    return J, F


def analytic_jacobian(prior: FacePrior, params: SceneParams, raster: RasterOutput, frame: Frame,
                      landmarks: Landmarks | None, irls: IrlsState | None = None,
                      active_blocks=BLOCK_ORDER, weights: EnergyWeights | None = None,
                      scale: float = 1.0) -> np.ndarray:
    """Dense Jacobian of the stacked residual; columns follow ``BlockLayout(prior, active_blocks)``."""
    prob = FrozenProblem.from_raster(prior, params, raster, frame, landmarks, weights, scale)
    if irls is not None:
        prob.irls_w = irls.weights
    J, _ = prob.linearize(params, BlockLayout(prior, active_blocks))
    return J
