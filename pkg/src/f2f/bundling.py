"""Joint identity / intrinsics calibration over keyframes.

Unknowns are split into a global block {alpha, beta, kappa} shared by every
keyframe and one local block {delta, gamma, rot, trans} per keyframe. The
stacked vector is ``[global | local_1 | ... | local_k]``. Each keyframe is
linearized on its own into a dense Jacobian over ``[global | local_f]`` (in the
per-frame block order) and the promoter of frame f scatters that per-frame
vector into the stacked one.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .energy import (
    BLOCK_ORDER, BlockLayout, EmptyVisibilityError, EnergyReport, EnergyWeights, FrozenProblem,
    Landmarks, SceneParams, residual_reg, rotation_pivot,
)
from .imaging import CameraIntrinsics, Frame, RigidPose, SH_C0, build_pyramid, rasterize
from .model import FacePrior, eval_albedo, eval_geometry
from .parallel import ordered_map
from .solver import (
    BUNDLING, FINEST_LEVEL, LinearizedSystem, PRECOND_FLOOR, SolveSchedule, gauss_newton_irls,
    level_scale, pyramid_index,
)
from .tracking import FrameFitProblem, _report_at, photometric_rms

log = logging.getLogger(__name__)

GLOBAL_BLOCKS = ("alpha", "beta", "kappa")
LOCAL_BLOCKS = ("delta", "gamma", "rot", "trans")


class KeyframeError(ValueError):
    pass


def select_keyframes(n_frames: int, k: int, mode: str = "uniform", landmarks=None) -> list[int]:
    """Pick k frame indices.

    ``uniform``: floor(i (L-1) / (k-1)). ``diversity``: greedy max-min over
    landmark configurations (centered, scale-normalized), starting at frame 0.
    """
    if k < 1:
        raise KeyframeError("k must be >= 1")
    if n_frames < k:
        raise KeyframeError(f"sequence of {n_frames} frames is shorter than k={k}")
    if mode == "uniform":
        if k == 1:
            return [0]
        return [(i * (n_frames - 1)) // (k - 1) for i in range(k)]
    if mode != "diversity":
        raise KeyframeError(f"unknown keyframe mode {mode!r}")
    if landmarks is None or len(landmarks) != n_frames:
        raise KeyframeError("diversity mode needs one landmark set per frame")
    desc = np.stack([_shape_descriptor(lm.points) for lm in landmarks])
    chosen = [0]
    dist = np.linalg.norm(desc - desc[0], axis=1)
    while len(chosen) < k:
        cand = dist.copy()
        cand[chosen] = -np.inf
        j = int(np.argmax(cand))  # first index wins ties
        chosen.append(j)
        dist = np.minimum(dist, np.linalg.norm(desc - desc[j], axis=1))
    return sorted(chosen)


def _shape_descriptor(points: np.ndarray) -> np.ndarray:
    c = points - points.mean(axis=0)
    s = np.sqrt(np.mean(np.sum(c * c, axis=1)))
    return (c / (s if s > 0 else 1.0)).ravel()


@dataclass
class Keyframe:
    frame: Frame
    landmarks: Landmarks
    index: int = 0


class ParamLayout:
    """Stacked layout ``[global | local_1 | ... | local_k]`` and its promoters."""

    def __init__(self, prior: FacePrior, k: int, solve_kappa: bool = True):
        self.prior = prior
        self.k = k
        self.globals = tuple(b for b in GLOBAL_BLOCKS if solve_kappa or b != "kappa")
        self.frame_layout = BlockLayout(prior, self.globals + LOCAL_BLOCKS)
        fl = self.frame_layout
        g_idx = np.concatenate([np.arange(fl.slice(b).start, fl.slice(b).stop) for b in fl.active
                                if b in self.globals])
        l_idx = np.concatenate([np.arange(fl.slice(b).start, fl.slice(b).stop) for b in fl.active
                                if b in LOCAL_BLOCKS])
        self.n_global = len(g_idx)
        self.n_local = len(l_idx)
        self.size = self.n_global + k * self.n_local
        # per-frame position -> stacked position
        self._maps = []
        for f in range(k):
            m = np.empty(fl.size, dtype=np.int64)
            m[g_idx] = np.arange(self.n_global)
            m[l_idx] = self.n_global + f * self.n_local + np.arange(self.n_local)
            self._maps.append(m)
        # stacked positions of each global block (kappa trails the locals in the frame layout)
        self.global_slices = {}
        for b in self.globals:
            pos = self._maps[0][fl.slice(b)]
            self.global_slices[b] = slice(int(pos[0]), int(pos[-1]) + 1)

    def promote(self, f: int, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.size)
        out[self._maps[f]] = x
        return out

    def restrict(self, f: int, x: np.ndarray) -> np.ndarray:
        return x[self._maps[f]]

    def local_slice(self, f: int) -> slice:
        o = self.n_global + f * self.n_local
        return slice(o, o + self.n_local)

    def promote_into(self, f: int, acc: np.ndarray, x: np.ndarray) -> None:
        acc[self._maps[f]] += x


@dataclass
class LocalParams:
    delta: np.ndarray
    pose: RigidPose
    gamma: np.ndarray

    def copy(self) -> "LocalParams":
        return LocalParams(self.delta.copy(), self.pose.copy(), self.gamma.copy())


@dataclass
class BundleParams:
    alpha: np.ndarray
    beta: np.ndarray
    kappa: CameraIntrinsics
    locals: list

    def frame_params(self, f: int) -> SceneParams:
        lp = self.locals[f]
        return SceneParams(self.alpha, self.beta, lp.delta, lp.gamma, lp.pose,
                           CameraIntrinsics(**vars(self.kappa)))

    def copy(self) -> "BundleParams":
        return BundleParams(self.alpha.copy(), self.beta.copy(), CameraIntrinsics(**vars(self.kappa)),
                            [lp.copy() for lp in self.locals])


def _colsumsq(J: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", J, J)


@dataclass
class _FrameLin:
    J: np.ndarray
    F: np.ndarray
    report: EnergyReport


class BundleProblem:
    """Multi-frame problem for :func:`gauss_newton_irls` (globals shared, locals per frame)."""

    def __init__(self, prior: FacePrior, keyframes: list[Keyframe], weights: EnergyWeights | None = None,
                 schedule: SolveSchedule = BUNDLING, kappa_levels=None, threads: int | None = None):
        self.prior = prior
        self.keyframes = keyframes
        self.weights = weights or EnergyWeights()
        self.schedule = SolveSchedule.parse(schedule)
        levels = [s.level for s in self.schedule.levels]
        # kappa is solved on the two coarsest scheduled levels only
        self.kappa_levels = set(levels[:2]) if kappa_levels is None else set(kappa_levels)
        self.pyramids = [build_pyramid(kf.frame, self.schedule.n_levels) for kf in keyframes]
        self.threads = threads
        self._layouts = {}

    @property
    def k(self) -> int:
        return len(self.keyframes)

    def layout(self, level: int) -> ParamLayout:
        solve_kappa = level in self.kappa_levels
        if solve_kappa not in self._layouts:
            self._layouts[solve_kappa] = ParamLayout(self.prior, self.k, solve_kappa)
        return self._layouts[solve_kappa]

    def _frozen(self, params: BundleParams, level: int, f: int):
        scale = level_scale(level)
        frame = self.pyramids[f][pyramid_index(level)]
        p = params.frame_params(f)
        cam = p.kappa.scaled(scale)
        raster = rasterize(self.prior, p, frame.width, frame.height, cam)
        if raster.n_visible == 0:
            raise EmptyVisibilityError(f"keyframe {f}: no visible pixels at level {level}")
        lms = self.keyframes[f].landmarks.scaled(scale)
        prob = FrozenProblem.from_raster(self.prior, p, raster, frame, lms, self.weights, scale, ("delta",))
        return prob, raster, frame, p

    def _frame_report(self, prob, raster, frame, p):
        return _report_at(self.prior, p, frame, prob.landmarks, self.weights, raster, prob.cam(p), ("delta",))

    def _linearize_frame(self, params, level, f) -> _FrameLin:
        prob, raster, frame, p = self._frozen(params, level, f)
        J, F = prob.linearize(p, self.layout(level).frame_layout)
        return _FrameLin(J, F, self._frame_report(prob, raster, frame, p))

    def _global_reg(self, params: BundleParams, lay: ParamLayout):
        """Identity / albedo prior rows, counted once for the whole bundle."""
        F = residual_reg(self.prior, params.frame_params(0), self.weights, ("alpha", "beta"))
        J = np.zeros((len(F), lay.size))
        sw = np.sqrt(self.weights.w_reg)
        row = 0
        for name, sig in (("alpha", self.prior.sigma_id), ("beta", self.prior.sigma_alb)):
            sl = lay.global_slices[name]
            J[np.arange(row, row + len(sig)), np.arange(sl.start, sl.stop)] = sw / sig
            row += len(sig)
        return J, F

    def combine_reports(self, reports, params) -> EnergyReport:
        reg = residual_reg(self.prior, params.frame_params(0), self.weights, ("alpha", "beta"))
        reg_sq = float(reg @ reg)
        w = self.weights
        e_reg = sum(r.E_reg for r in reports) + (reg_sq / w.w_reg if w.w_reg > 0 else 0.0)
        total = sum(r.E_total for r in reports) + reg_sq
        return EnergyReport(total, float(np.mean([r.E_col for r in reports])),
                            float(np.mean([r.E_lan for r in reports])), e_reg,
                            int(sum(r.n_visible for r in reports)),
                            int(sum(r.n_landmarks_dropped for r in reports)))

    def linearize(self, params: BundleParams, level: int) -> LinearizedSystem:
        lay = self.layout(level)
        lins = ordered_map(lambda f: self._linearize_frame(params, level, f), range(self.k), self.threads)
        Jg, Fg = self._global_reg(params, lay)
        grad = Jg.T @ Fg
        diag = _colsumsq(Jg)
        for f, lin in enumerate(lins):
            lay.promote_into(f, grad, lin.J.T @ lin.F)
            lay.promote_into(f, diag, _colsumsq(lin.J))
        Js = [lin.J for lin in lins]

        def apply_JtJ(x):
            return bundle_apply_JtJ(Js, lay, x, Jg)

        report = self.combine_reports([lin.report for lin in lins], params)
        return LinearizedSystem(apply_JtJ, -grad, np.maximum(diag, PRECOND_FLOOR), report)

    def energy(self, params: BundleParams, level: int) -> EnergyReport:
        def one(f):
            prob, raster, frame, p = self._frozen(params, level, f)
            return self._frame_report(prob, raster, frame, p)
        return self.combine_reports(ordered_map(one, range(self.k), self.threads), params)

    def apply_update(self, params: BundleParams, step: np.ndarray, level: int) -> BundleParams:
        lay = self.layout(level)
        out = params.copy()
        fl = lay.frame_layout
        pivot = rotation_pivot(self.prior)
        out.alpha = out.alpha + step[lay.global_slices["alpha"]]
        out.beta = out.beta + step[lay.global_slices["beta"]]
        if "kappa" in lay.global_slices:
            out.kappa = CameraIntrinsics.from_array(out.kappa.as_array() + step[lay.global_slices["kappa"]])
        for f in range(self.k):
            x = lay.restrict(f, step)
            lp = out.locals[f]
            lp.delta = lp.delta + x[fl.slice("delta")]
            lp.gamma = lp.gamma + x[fl.slice("gamma")].reshape(3, 9)
            lp.pose = lp.pose.compose_increment(x[fl.slice("rot")], x[fl.slice("trans")], pivot)
        return out


def bundle_gradient(Js, Fs, lay: ParamLayout, Jg=None, Fg=None) -> np.ndarray:
    """Stacked J^T F: sum over frames of the promoted per-frame gradients."""
    g = np.zeros(lay.size) if Jg is None else Jg.T @ Fg
    for f, (J, F) in enumerate(zip(Js, Fs)):
        lay.promote_into(f, g, J.T @ F)
    return g


def bundle_apply_JtJ(Js, lay: ParamLayout, x: np.ndarray, Jg=None) -> np.ndarray:
    """J^T (J x) over the stacked system, one frame block at a time."""
    out = np.zeros(lay.size) if Jg is None else Jg.T @ (Jg @ x)
    for f, J in enumerate(Js):
        lay.promote_into(f, out, J.T @ (J @ lay.restrict(f, x)))
    return out


# ---------------------------------------------------------------------------
# initialization


def _landmark_pose_guess(prior: FacePrior, lms: Landmarks, cam: CameraIntrinsics) -> RigidPose:
    """Frontal pose whose projected mean-shape landmarks match the observed centroid and spread."""
    v = prior.mean_shape.reshape(-1, 3)[lms.vertex_ids]
    vc = v[:, :2].mean(axis=0)
    sm = np.sqrt(np.mean(np.sum((v[:, :2] - vc) ** 2, axis=1)))
    pc = lms.points.mean(axis=0)
    si = np.sqrt(np.mean(np.sum((lms.points - pc) ** 2, axis=1)))
    z = cam.fx * sm / max(si, 1e-9) - np.mean(v[:, 2])
    zc = z + np.mean(v[:, 2])
    tx = (pc[0] - cam.cx) * zc / cam.fx - vc[0]
    ty = (pc[1] - cam.cy) * zc / cam.fy - vc[1]
    return RigidPose(np.eye(3), np.array([tx, ty, z]))


def warm_start_pose(prior: FacePrior, params: SceneParams, lms: Landmarks, iterations: int = 20,
                    weights: EnergyWeights | None = None) -> SceneParams:
    """Landmark-only pose fit (photometric weight zero) from a frontal guess."""
    w = weights or EnergyWeights()
    w0 = EnergyWeights(0.0, w.w_lan if w.w_lan > 0 else 1.0, w.w_reg)
    p = params.copy()
    if len(lms) == 0:
        return p
    p.pose = _landmark_pose_guess(prior, lms, p.kappa)
    prob = FrameFitProblem(prior, [], lms, w0, ("rot", "trans"))
    res = gauss_newton_irls(prob, p, SolveSchedule(((FINEST_LEVEL, iterations, 6),)))
    return res.params


def fit_ambient_gamma(prior: FacePrior, params: SceneParams, frame: Frame) -> np.ndarray:
    """Per-channel least-squares fit of the constant SH band only."""
    g = np.zeros((3, 9))
    p = params.copy()
    p.gamma = np.zeros((3, 9))
    p.gamma[:, 0] = 1.0 / SH_C0  # unit irradiance so the raster color equals albedo
    raster = rasterize(prior, p, frame.width, frame.height)
    if raster.n_visible == 0:
        raise EmptyVisibilityError("no visible pixels for the lighting fit")
    vis = raster.visible
    rho = raster.albedo
    obs = frame.rgb[vis[:, 1], vis[:, 0]]
    a = rho * SH_C0
    den = np.sum(a * a, axis=0)
    g[:, 0] = np.where(den > 0, np.sum(a * obs, axis=0) / np.where(den > 0, den, 1.0), 1.0 / SH_C0)
    return g


def initialize_bundle(prior: FacePrior, keyframes: list[Keyframe], weights=None):
    """Zero coefficients, landmark warm-started poses, ambient lighting; drops frames with empty V.

    Returns ``(params, kept_keyframes, dropped_indices)``.
    """
    if not keyframes:
        raise KeyframeError("no keyframes")
    w, h = keyframes[0].frame.width, keyframes[0].frame.height
    for kf in keyframes:
        if (kf.frame.width, kf.frame.height) != (w, h):
            raise KeyframeError("all keyframes must share one resolution")
    kappa = CameraIntrinsics.default_for(w, h)
    base = SceneParams(np.zeros(prior.d_id), np.zeros(prior.d_alb), np.zeros(prior.d_exp),
                       np.zeros((3, 9)), RigidPose(np.eye(3), np.array([0.0, 0.0, 3.0])), kappa)
    kept, locals_, dropped = [], [], []
    for kf in keyframes:
        p = warm_start_pose(prior, base, kf.landmarks, weights=weights)
        try:
            p.gamma = fit_ambient_gamma(prior, p, kf.frame)
        except EmptyVisibilityError:
            log.warning("keyframe %d dropped: no visible pixels after warm start", kf.index)
            dropped.append(kf.index)
            continue
        kept.append(kf)
        locals_.append(LocalParams(p.delta.copy(), p.pose.copy(), p.gamma.copy()))
    if not kept:
        raise KeyframeError("every keyframe was dropped")
    params = BundleParams(np.zeros(prior.d_id), np.zeros(prior.d_alb), kappa, locals_)
    return params, kept, dropped


@dataclass
class BundleResult:
    params: BundleParams
    keyframe_indices: list
    dropped: list
    frame_rms: list
    trace: list = field(default_factory=list)

    def calibration_dict(self) -> dict:
        p = self.params
        return {
            "alpha": p.alpha.tolist(),
            "beta": p.beta.tolist(),
            "kappa": p.kappa.as_array().tolist(),
            "keyframes": [
                {"frame": int(i), "delta": lp.delta.tolist(), "pose": {
                    "axis_angle": lp.pose.axis_angle.tolist(), "t": lp.pose.t.tolist()},
                 "gamma": lp.gamma.tolist(), "rms": r}
                for i, lp, r in zip(self.keyframe_indices, p.locals, self.frame_rms)
            ],
            "dropped": [int(i) for i in self.dropped],
        }


def run_bundling(prior: FacePrior, keyframes: list[Keyframe], schedule: SolveSchedule = BUNDLING,
                 weights: EnergyWeights | None = None, threads: int | None = None,
                 init: BundleParams | None = None, step_halving: int = 0) -> BundleResult:
    weights = weights or EnergyWeights()
    dropped = []
    if init is None:
        init, keyframes, dropped = initialize_bundle(prior, keyframes, weights)
    # solve in frame-id order so every reduction is independent of the caller's ordering;
    # results come back in the caller's order
    order = sorted(range(len(keyframes)), key=lambda f: keyframes[f].index)
    canon = BundleParams(init.alpha, init.beta, init.kappa, [init.locals[f] for f in order])
    problem = BundleProblem(prior, [keyframes[f] for f in order], weights, schedule, threads=threads)
    res = gauss_newton_irls(problem, canon, problem.schedule, step_halving=step_halving)
    q = res.params
    back = [0] * len(order)
    for j, f in enumerate(order):
        back[f] = q.locals[j]
    p = BundleParams(q.alpha, q.beta, q.kappa, back)
    rms = [photometric_rms(prior, p.frame_params(f), kf.frame) for f, kf in enumerate(keyframes)]
    return BundleResult(p, [kf.index for kf in keyframes], dropped, rms, res.trace)


def save_calibration(result: BundleResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.calibration_dict(), fh, indent=1)


def load_calibration(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    return {
        "alpha": np.asarray(d["alpha"], dtype=np.float64),
        "beta": np.asarray(d["beta"], dtype=np.float64),
        "kappa": CameraIntrinsics.from_array(d["kappa"]),
        "keyframes": d.get("keyframes", []),
    }
