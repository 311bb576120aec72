"""Per-frame expression, pose and lighting tracking with a calibrated identity."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .energy import (
    BlockLayout, EmptyVisibilityError, EnergyReport, EnergyWeights, FrozenProblem, Landmarks,
    SceneParams, apply_update, eval_energy,
)
from .imaging import CameraIntrinsics, Frame, RigidPose, build_pyramid, rasterize
from .model import FacePrior
from .solver import (
    TRACKING, LinearizedSystem, NormalSystem, SolveSchedule, gauss_newton_irls, level_scale,
    pyramid_index,
)

log = logging.getLogger(__name__)

TRACK_BLOCKS = ("delta", "gamma", "rot", "trans")


class FrameFitProblem:
    """Single-frame fit over a subset of parameter blocks, served per pyramid level."""

    def __init__(self, prior: FacePrior, pyramid: list[Frame], landmarks: Landmarks | None,
                 weights: EnergyWeights | None = None, active=TRACK_BLOCKS,
                 reg_blocks=("alpha", "beta", "delta")):
        self.prior = prior
        self.pyramid = pyramid
        self.landmarks = landmarks if landmarks is not None else Landmarks.empty()
        self.weights = weights or EnergyWeights()
        self._active = active
        self.layout = BlockLayout(prior, active) if not callable(active) else None
        self.reg_blocks = tuple(reg_blocks)

    def layout_for(self, level: int) -> BlockLayout:
        """``active`` may be a block tuple or a callable mapping level -> block tuple."""
        if self.layout is not None:
            return self.layout
        return BlockLayout(self.prior, self._active(level))

    @property
    def photometric(self) -> bool:
        return self.weights.w_col > 0

    def frozen(self, params: SceneParams, level: int):
        scale = level_scale(level)
        lms = self.landmarks.scaled(scale)
        if not self.photometric:
            prob = FrozenProblem.landmarks_only(self.prior, lms, self.weights, scale, self.reg_blocks)
            return prob, None, None
        frame = self.pyramid[pyramid_index(level)]
        cam = params.kappa.scaled(scale)
        raster = rasterize(self.prior, params, frame.width, frame.height, cam)
        if raster.n_visible == 0:
            raise EmptyVisibilityError(f"no visible pixels at level {level}")
        prob = FrozenProblem.from_raster(self.prior, params, raster, frame, lms, self.weights, scale,
                                         self.reg_blocks)
        return prob, raster, frame

    def _report(self, prob: FrozenProblem, params, raster, frame) -> EnergyReport:
        if raster is None:
            F = prob.residual(params)
            lan_sq = float(F @ F)
            return EnergyReport(lan_sq, 0.0, lan_sq / self.weights.w_lan, 0.0, 0)
        return _report_at(self.prior, params, frame, prob.landmarks, self.weights, raster,
                          prob.cam(params), self.reg_blocks)

    def linearize(self, params: SceneParams, level: int) -> LinearizedSystem:
        prob, raster, frame = self.frozen(params, level)
        J, F = prob.linearize(params, self.layout_for(level))
        ns = NormalSystem(J, F)
        return LinearizedSystem(ns.apply_JtJ, ns.rhs, ns.precond, self._report(prob, params, raster, frame))

    def energy(self, params: SceneParams, level: int) -> EnergyReport:
        prob, raster, frame = self.frozen(params, level)
        return self._report(prob, params, raster, frame)

    def apply_update(self, params, step, level):
        return apply_update(params, self.layout_for(level), step)


def _report_at(prior, params, frame, landmarks, weights, raster, cam, reg_blocks):
    from .energy import energy_terms, residual_lan, residual_reg
    vis = raster.visible
    r = raster.color[vis[:, 1], vis[:, 0]] - frame.rgb[vis[:, 1], vis[:, 0]]
    lan, ok = residual_lan(prior, params, landmarks, weights, cam)
    reg = residual_reg(prior, params, weights, reg_blocks)
    return energy_terms(r, float(lan @ lan), float(reg @ reg), len(vis), weights,
                        int((~ok).sum()) if len(ok) else 0)


def photometric_rms(prior: FacePrior, params: SceneParams, frame: Frame) -> float:
    """RMS of the per-channel color residual over the visible face pixels."""
    raster = rasterize(prior, params, frame.width, frame.height)
    if raster.n_visible == 0:
        return float("nan")
    vis = raster.visible
    r = raster.color[vis[:, 1], vis[:, 0]] - frame.rgb[vis[:, 1], vis[:, 0]]
    return float(np.sqrt(np.mean(r * r)))


@dataclass
class TrackerConfig:
    schedule: SolveSchedule = TRACKING
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    divergence_threshold: float = 0.25
    gamma_smoothing: float = 0.5
    step_halving: int = 0


@dataclass
class TrackerState:
    prior: FacePrior
    alpha: np.ndarray
    beta: np.ndarray
    kappa: CameraIntrinsics
    delta: np.ndarray
    pose: RigidPose
    gamma: np.ndarray
    config: TrackerConfig = field(default_factory=TrackerConfig)
    frame_index: int = 0
    n_lost: int = 0

    @classmethod
    def from_params(cls, prior: FacePrior, params: SceneParams, config: TrackerConfig | None = None):
        return cls(prior, params.alpha.copy(), params.beta.copy(), CameraIntrinsics(**vars(params.kappa)),
                   params.delta.copy(), params.pose.copy(), params.gamma.copy(),
                   config or TrackerConfig())

    def params(self) -> SceneParams:
        return SceneParams(self.alpha.copy(), self.beta.copy(), self.delta.copy(), self.gamma.copy(),
                           self.pose.copy(), CameraIntrinsics(**vars(self.kappa)))


@dataclass
class FrameResult:
    index: int
    params: SceneParams
    status: str  # "ok" or "lost"
    report: EnergyReport | None
    rms: float
    trace: list = field(default_factory=list)

    def record(self) -> dict:
        rep = self.report
        return {
            "frame": self.index,
            "status": self.status,
            "delta": self.params.delta.tolist(),
            "pose": {"axis_angle": self.params.pose.axis_angle.tolist(), "t": self.params.pose.t.tolist()},
            "gamma": self.params.gamma.tolist(),
            "E_total": None if rep is None else rep.E_total,
            "E_col": None if rep is None else rep.E_col,
            "E_lan": None if rep is None else rep.E_lan,
            "E_reg": None if rep is None else rep.E_reg,
            "n_visible": 0 if rep is None else rep.n_visible,
            "rms": self.rms,
        }


def track_frame(state: TrackerState, frame: Frame, landmarks: Landmarks | None,
                schedule: SolveSchedule | None = None) -> FrameResult:
    """Fit delta, pose and gamma to ``frame`` starting from the previous frame; updates ``state``.

    ``schedule`` overrides the configured one (e.g. a longer first-frame solve).
    """
    cfg = state.config
    schedule = cfg.schedule if schedule is None else SolveSchedule.parse(schedule)
    init = state.params()
    pyramid = build_pyramid(frame, schedule.n_levels)
    problem = FrameFitProblem(state.prior, pyramid, landmarks, cfg.weights, TRACK_BLOCKS)
    idx = state.frame_index
    tracked_before = idx - state.n_lost > 0
    state.frame_index += 1
    try:
        if tracked_before:
            # free lighting can explain a corrupt frame (e.g. all black), so the
            # warm start is checked too: a frame far from the tracked state is lost
            rep0 = problem.energy(init, schedule.levels[-1].level)
            if not np.isfinite(rep0.E_col) or rep0.E_col > cfg.divergence_threshold:
                log.warning("frame %d lost: warm-start E_col %.4g above threshold", idx, rep0.E_col)
                state.n_lost += 1
                return FrameResult(idx, init, "lost", rep0, float("nan"))
        res = gauss_newton_irls(problem, init, schedule, step_halving=cfg.step_halving)
    except EmptyVisibilityError as exc:
        log.warning("frame %d lost: %s", idx, exc)
        state.n_lost += 1
        return FrameResult(idx, init, "lost", None, float("nan"))
    solved = res.params
    rep = problem.energy(solved, schedule.levels[-1].level)
    if not np.isfinite(rep.E_col) or rep.E_col > cfg.divergence_threshold:
        log.warning("frame %d lost: E_col %.4g above threshold", idx, rep.E_col)
        state.n_lost += 1
        return FrameResult(idx, init, "lost", rep, float("nan"), res.trace)
    rms = photometric_rms(state.prior, solved, frame)
    a = cfg.gamma_smoothing
    state.delta = solved.delta.copy()
    state.pose = solved.pose.copy()
    state.gamma = a * state.gamma + (1.0 - a) * solved.gamma
    out = state.params()
    return FrameResult(idx, out, "ok", rep, rms, res.trace)


def track_sequence(state: TrackerState, frames, landmark_stream, params_path=None, metrics_path=None):
    """Track every frame; optionally write the JSON-lines parameter stream and a metrics CSV.

    Returns ``(results, summary)`` where summary has mean / std photometric RMS
    over frames that were not lost.
    """
    results = []
    for frame, lms in zip(frames, landmark_stream):
        results.append(track_frame(state, frame, lms))
    if params_path is not None:
        with open(params_path, "w") as fh:
            for r in results:
                fh.write(json.dumps(r.record()) + "\n")
    rms = np.array([r.rms for r in results if r.status == "ok"])
    summary = {
        "frames": len(results),
        "lost": sum(r.status == "lost" for r in results),
        "rms_mean": float(rms.mean()) if len(rms) else float("nan"),
        "rms_std": float(rms.std()) if len(rms) else float("nan"),
    }
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "status", "E_total", "E_col", "E_lan", "n_visible", "rms"])
            for r in results:
                rep = r.report
                w.writerow([r.index, r.status, "" if rep is None else repr(rep.E_total),
                            "" if rep is None else repr(rep.E_col), "" if rep is None else repr(rep.E_lan),
                            0 if rep is None else rep.n_visible, repr(r.rms)])
    return results, summary
