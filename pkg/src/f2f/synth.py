"""Synthetic ground-truth sequences rendered from the face prior."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import Landmarks, SceneParams
from .imaging import CameraIntrinsics, Frame, RasterOutput, RigidPose, ambient_gamma, rasterize
from .model import FacePrior, eval_geometry

BOUND_SIGMAS = 2.5
# named random sub-streams derived from the run seed
STREAMS = {"prior": 0, "trajectory": 1, "noise": 2}


def sub_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, STREAMS[name]]))


def background(width: int, height: int) -> np.ndarray:
    """Smooth, deterministic backdrop."""
    y, x = np.mgrid[0:height, 0:width]
    x = (x + 0.5) / width
    y = (y + 0.5) / height
    return np.stack([0.30 + 0.20 * x, 0.35 + 0.10 * y, 0.40 + 0.05 * x * y], axis=-1)


@dataclass
class MouthInterior:
    """Dark mouth cavity that opens with the jaw-open expression mode (column 0).

    The model itself cannot render it, so reenactment has to fetch it from the
    mouth database.
    """
    enabled: bool = False
    darkness: float = 0.75
    radius_u: float = 0.11
    radius_v: float = 0.035

    def opening(self, prior: FacePrior, delta: np.ndarray) -> float:
        return float(np.clip(delta[0] / (2.0 * prior.sigma_exp[0]), 0.0, 1.0))

    def shade(self, prior: FacePrior, raster: RasterOutput, delta: np.ndarray) -> np.ndarray:
        """Per-visible-pixel multiplicative factor."""
        s = self.opening(prior, delta)
        vis = raster.visible
        if not self.enabled or s <= 0 or len(vis) == 0:
            return np.ones(len(vis))
        tri = raster.tri_id[vis[:, 1], vis[:, 0]]
        b = raster.bary[vis[:, 1], vis[:, 0]]
        uv = np.einsum("mk,mkc->mc", b, prior.uv_coords[prior.triangles[tri]])
        cu, cv = 0.5, 0.725
        q = ((uv[:, 0] - cu) / self.radius_u) ** 2 + ((uv[:, 1] - cv) / (self.radius_v * s + 1e-9)) ** 2
        return 1.0 - self.darkness * s * np.exp(-q * q)


def render_frame(prior: FacePrior, params: SceneParams, width: int, height: int,
                 mouth: MouthInterior | None = None, bg: np.ndarray | None = None) -> tuple[Frame, RasterOutput]:
    raster = rasterize(prior, params, width, height)
    img = background(width, height) if bg is None else bg.copy()
    vis = raster.visible
    if len(vis):
        col = raster.color[vis[:, 1], vis[:, 0]]
        if mouth is not None and mouth.enabled:
            col = col * mouth.shade(prior, raster, params.delta)[:, None]
        img[vis[:, 1], vis[:, 0]] = col
    return Frame(np.clip(img, 0.0, 1.0)), raster


def project_landmarks(prior: FacePrior, params: SceneParams, noise_px: float = 0.0,
                      rng: np.random.Generator | None = None) -> Landmarks:
    vids = prior.landmark_vertices
    v = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)[vids]
    X = v @ params.pose.R.T + params.pose.t
    k = params.kappa
    u = np.stack([k.fx * X[:, 0] / X[:, 2] + k.cx, k.fy * X[:, 1] / X[:, 2] + k.cy], axis=1)
    if noise_px > 0:
        u = u + noise_px * rng.standard_normal(u.shape)
    return Landmarks(u, np.ones(len(vids)), vids)


@dataclass
class SynthConfig:
    width: int = 64
    height: int = 64
    n_frames: int = 30
    seed: int = 0
    landmark_noise: float = 0.5
    depth: float = 3.0
    sigma_rot: float = 0.06  # rad
    sigma_trans: float = 0.05  # model units
    sigma_gamma: float = 0.08  # on SH bands 1-2 (band 0 fixed at unit irradiance)
    max_step_sigmas: float = 0.2  # per-frame change cap, in sigmas
    smoothness: float = 0.85  # AR(1) factor on per-frame velocities
    mouth_interior: bool = False
    focal_scale: float = 1.0  # true focal length / width


@dataclass
class GroundTruth:
    index: int
    params: SceneParams
    landmarks: np.ndarray  # exact projections (n, 2)

    def record(self) -> dict:
        p = self.params
        return {
            "frame": self.index,
            "alpha": p.alpha.tolist(), "beta": p.beta.tolist(), "delta": p.delta.tolist(),
            "pose": {"axis_angle": p.pose.axis_angle.tolist(), "t": p.pose.t.tolist()},
            "gamma": p.gamma.tolist(), "kappa": p.kappa.as_array().tolist(),
            "landmarks": self.landmarks.tolist(),
        }


def _walk(rng, n_frames: int, sigma: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Smooth bounded random walk in units of ``sigma``; starts at a random in-bound point."""
    d = len(sigma)
    x = np.empty((n_frames, d))
    pos = rng.uniform(-1.0, 1.0, d)
    vel = np.zeros(d)
    cap = cfg.max_step_sigmas
    for i in range(n_frames):
        x[i] = pos
        vel = cfg.smoothness * vel + (1 - cfg.smoothness) * rng.standard_normal(d) * cap * 2
        vel = np.clip(vel, -cap, cap)
        nxt = pos + vel
        # reflect off the bounds
        over = np.abs(nxt) > BOUND_SIGMAS
        vel[over] = -vel[over]
        pos = np.clip(np.where(over, pos + vel, nxt), -BOUND_SIGMAS, BOUND_SIGMAS)
    return x * sigma[None, :]


def sample_identity(prior: FacePrior, rng: np.random.Generator):
    a = np.clip(rng.standard_normal(prior.d_id), -BOUND_SIGMAS, BOUND_SIGMAS) * prior.sigma_id
    b = np.clip(rng.standard_normal(prior.d_alb), -BOUND_SIGMAS, BOUND_SIGMAS) * prior.sigma_alb
    return a, b


def synth_trajectory(prior: FacePrior, cfg: SynthConfig, alpha=None, beta=None) -> list[SceneParams]:
    rng = sub_rng(cfg.seed, "trajectory")
    a0, b0 = sample_identity(prior, rng)
    alpha = a0 if alpha is None else np.asarray(alpha, dtype=np.float64)
    beta = b0 if beta is None else np.asarray(beta, dtype=np.float64)
    n = cfg.n_frames
    deltas = _walk(rng, n, prior.sigma_exp, cfg)
    rots = _walk(rng, n, np.full(3, cfg.sigma_rot), cfg)
    trans = _walk(rng, n, np.full(3, cfg.sigma_trans), cfg)
    gam = _walk(rng, n, np.full(24, cfg.sigma_gamma), cfg)
    kappa = CameraIntrinsics(cfg.focal_scale * cfg.width, cfg.focal_scale * cfg.width,
                             cfg.width / 2.0, cfg.height / 2.0)
    out = []
    for i in range(n):
        g = ambient_gamma()
        g[:, 1:] += gam[i].reshape(3, 8)
        pose = RigidPose.from_axis_angle(rots[i], trans[i] + np.array([0.0, 0.0, cfg.depth]))
        out.append(SceneParams(alpha.copy(), beta.copy(), deltas[i], g, pose,
                               CameraIntrinsics(**vars(kappa))))
    return out


@dataclass
class SynthSequence:
    frames: list
    landmarks: list
    truth: list
    config: SynthConfig = field(default_factory=SynthConfig)


def synth_sequence(prior: FacePrior, cfg: SynthConfig, alpha=None, beta=None) -> SynthSequence:
    traj = synth_trajectory(prior, cfg, alpha, beta)
    noise = sub_rng(cfg.seed, "noise")
    mouth = MouthInterior(enabled=cfg.mouth_interior)
    bg = background(cfg.width, cfg.height)
    frames, lms, truth = [], [], []
    for i, p in enumerate(traj):
        fr, _ = render_frame(prior, p, cfg.width, cfg.height, mouth, bg)
        exact = project_landmarks(prior, p)
        noisy = project_landmarks(prior, p, cfg.landmark_noise, noise) if cfg.landmark_noise > 0 else exact
        frames.append(fr)
        lms.append(noisy)
        truth.append(GroundTruth(i, p, exact.points))
    return SynthSequence(frames, lms, truth, cfg)
