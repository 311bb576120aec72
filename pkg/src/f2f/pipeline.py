"""Stage drivers behind the CLI: synth, calibrate, build-mouth-db, track, reenact, eval.

Derived artifacts go to ``paths.out``:

- ``calibration_<role>.json`` and ``bundling_trace_<role>.csv`` (calibrate)
- ``track_<role>.jsonl``, ``metrics_<role>.csv``, ``trace_<role>.csv`` (track)
- ``mouth_db.f2fmouth`` and ``mouth_db.json`` (build-mouth-db)
- ``transfer.f2fxfer``, ``reenact/frames/``, ``reenact/metrics.csv``, ``reenact/summary.json`` (reenact)
- ``eval.json`` (eval)
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundling import Keyframe, load_calibration, run_bundling, save_calibration, select_keyframes, warm_start_pose
from .config import ConfigError
from .energy import EnergyWeights, SceneParams
from .imaging import Frame, RigidPose, rasterize
from .io import Sequence, write_frame, write_json, write_jsonl, write_sequence
from .model import FacePrior, PriorConfig, load_prior, synth_prior
from .mouth import (
    MouthConfig, MouthDescriptor, MouthNotVisible, RetrievalState, blend_and_composite, build_chart,
    build_database, composite_weights, compute_lbp, load_database, mouth_landmarks_2d, normalize_mouth,
    retrieve, save_database, shaded_albedo_texture,
)
from .parallel import thread_count
from .solver import TRACE_FIELDS, SolveSchedule
from .synth import SynthConfig, synth_sequence
from .tracking import FrameResult, TrackerConfig, TrackerState, track_frame
from .transfer import build_transfer_operator, save_operator, transfer_expression

log = logging.getLogger(__name__)

MOUTH_DB_FILE = "mouth_db.f2fmouth"
TRANSFER_FILE = "transfer.f2fxfer"


class MissingArtifactError(ConfigError):
    """A stage input is missing; the message names the stage that produces it."""


def out_dir(cfg) -> Path:
    d = Path(cfg["paths"]["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def get_prior(cfg) -> FacePrior:
    path = cfg["paths"]["prior"]
    if path is not None:
        if not Path(path).exists():
            raise MissingArtifactError(f"prior file {path} not found")
        return load_prior(path)
    return synth_prior(PriorConfig(**cfg["prior"]))


def weights_of(cfg) -> EnergyWeights:
    return EnergyWeights(**cfg["weights"])


def sequence_path(cfg, role: str) -> Path:
    if role == "source" and cfg["paths"]["source"] is not None:
        return Path(cfg["paths"]["source"])
    return Path(cfg["paths"]["target"])


def open_sequence(cfg, role: str) -> Sequence:
    path = sequence_path(cfg, role)
    try:
        return Sequence(path)
    except FileNotFoundError:
        raise MissingArtifactError(f"{role} sequence {path} not found; run `f2f synth` "
                                   "or point paths.{role} at a frame directory") from None


def self_reenactment(cfg) -> bool:
    src = cfg["paths"]["source"]
    return src is None or Path(src).resolve() == Path(cfg["paths"]["target"]).resolve()


def roles(cfg) -> list:
    return ["target"] if self_reenactment(cfg) else ["target", "source"]


def calibration_role(cfg, role: str) -> str:
    return "target" if self_reenactment(cfg) else role


def frame_cap(cfg, n: int) -> int:
    m = cfg.get("max_frames")
    return n if m is None else min(n, int(m))


# ---------------------------------------------------------------------------
# synth


def synth_config(cfg) -> SynthConfig:
    s = dict(cfg["synth"])
    if cfg.get("max_frames") is not None:
        s["n_frames"] = int(cfg["max_frames"])
    return SynthConfig(seed=int(cfg["seed"]), **s)


def cmd_synth(cfg) -> dict:
    """Render a synthetic sequence into ``paths.target``."""
    prior = get_prior(cfg)
    scfg = synth_config(cfg)
    seq = synth_sequence(prior, scfg)
    root = Path(cfg["paths"]["target"])
    write_sequence(root, seq.frames, seq.landmarks, [g.record() for g in seq.truth],
                   {"seed": scfg.seed, "synthetic": True, "landmark_noise": scfg.landmark_noise,
                    "mouth_interior": scfg.mouth_interior})
    return {"sequence": str(root), "frames": len(seq.frames)}


# ---------------------------------------------------------------------------
# calibrate


def calibration_path(cfg, role: str) -> Path:
    return Path(cfg["paths"]["out"]) / f"calibration_{calibration_role(cfg, role)}.json"


def cmd_calibrate(cfg) -> dict:
    prior = get_prior(cfg)
    b = cfg["bundling"]
    out = out_dir(cfg)
    summary = {}
    for role in roles(cfg):
        seq = open_sequence(cfg, role)
        n = frame_cap(cfg, seq.n_frames)
        lms = [seq.landmarks(i) for i in range(n)]
        idx = select_keyframes(n, b["k"], b["keyframes"], lms if b["keyframes"] == "diversity" else None)
        kfs = [Keyframe(seq.frame(i), lms[i], i) for i in idx]
        res = run_bundling(prior, kfs, SolveSchedule.parse(b["schedule"]), weights_of(cfg),
                           threads=thread_count(), step_halving=b["step_halving"])
        save_calibration(res, calibration_path(cfg, role))
        _write_trace(out / f"bundling_trace_{role}.csv", [(None, r) for r in res.trace])
        summary[role] = {"keyframes": res.keyframe_indices, "dropped": res.dropped,
                         "rms": res.frame_rms, "E_final": res.trace[-1].E_total}
    return summary


def _write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", *TRACE_FIELDS[:-1], "|V|"])
        for frame, r in rows:
            w.writerow(["" if frame is None else frame, r.iteration, r.level, repr(r.E_total), repr(r.E_col),
                        repr(r.E_lan), repr(r.E_reg), r.n_visible])


# ---------------------------------------------------------------------------
# tracking


def tracker_config(cfg) -> TrackerConfig:
    t = cfg["tracking"]
    return TrackerConfig(SolveSchedule.parse(t["schedule"]), weights_of(cfg), t["divergence_threshold"],
                         t["gamma_smoothing"], t["step_halving"])


def load_role_calibration(cfg, role: str) -> dict:
    path = calibration_path(cfg, role)
    if not path.exists():
        raise MissingArtifactError(f"no calibration for the {calibration_role(cfg, role)} sequence at {path}; "
                                   "run `f2f calibrate` first")
    return load_calibration(path)


def initial_tracker(prior: FacePrior, calib: dict, seq: Sequence, cfg):
    """Tracker state for frame 0 and whether frame 0 needs the longer first-frame solve.

    Frame 0 is always a uniform keyframe, so its calibrated local parameters are
    reused when available; otherwise the pose is warm-started from landmarks.
    """
    kf = {int(k["frame"]): k for k in calib["keyframes"]}
    d_exp = prior.d_exp
    if 0 in kf:
        k = kf[0]
        pose = RigidPose.from_axis_angle(k["pose"]["axis_angle"], k["pose"]["t"])
        params = SceneParams(calib["alpha"], calib["beta"], np.asarray(k["delta"], dtype=np.float64),
                             np.asarray(k["gamma"], dtype=np.float64), pose, calib["kappa"])
        return TrackerState.from_params(prior, params, tracker_config(cfg)), False
    gammas = [np.asarray(k["gamma"], dtype=np.float64) for k in calib["keyframes"]]
    gamma = np.mean(gammas, axis=0) if gammas else np.zeros((3, 9))
    base = SceneParams(calib["alpha"], calib["beta"], np.zeros(d_exp), gamma,
                       RigidPose(np.eye(3), np.array([0.0, 0.0, 3.0])), calib["kappa"])
    lms = seq.landmarks(0)
    if lms is not None:
        base = warm_start_pose(prior, base, lms, weights=weights_of(cfg))
    return TrackerState.from_params(prior, base, tracker_config(cfg)), True


def track_role(cfg, prior: FacePrior, role: str, stop: int) -> list[FrameResult]:
    """Track frames [0, stop) of one sequence from its calibration."""
    calib = load_role_calibration(cfg, role)
    seq = open_sequence(cfg, role)
    stop = min(stop, seq.n_frames)
    state, cold = initial_tracker(prior, calib, seq, cfg)
    first = SolveSchedule.parse(cfg["tracking"]["first_frame_schedule"])
    results = []
    for i in range(stop):
        sched = first if (i == 0 and cold) else None
        results.append(track_frame(state, seq.frame(i), seq.landmarks(i), sched))
        if results[-1].status != "ok":
            log.warning("%s frame %d: %s", role, i, results[-1].status)
    return results


def _summary(results) -> dict:
    rms = np.array([r.rms for r in results if r.status == "ok"])
    return {"frames": len(results), "lost": sum(r.status != "ok" for r in results),
            "rms_mean": float(rms.mean()) if len(rms) else None,
            "rms_std": float(rms.std()) if len(rms) else None}


def write_track(cfg, role: str, results) -> None:
    out = out_dir(cfg)
    write_jsonl(out / f"track_{role}.jsonl", [r.record() for r in results])
    with open(out / f"metrics_{role}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "status", "E_total", "E_col", "E_lan", "n_visible", "rms"])
        for r in results:
            rep = r.report
            w.writerow([r.index, r.status, "" if rep is None else repr(rep.E_total),
                        "" if rep is None else repr(rep.E_col), "" if rep is None else repr(rep.E_lan),
                        0 if rep is None else rep.n_visible, repr(r.rms)])
    _write_trace(out / f"trace_{role}.csv", [(r.index, row) for r in results for row in r.trace])


def cmd_track(cfg) -> dict:
    prior = get_prior(cfg)
    role = cfg["tracking"]["role"]
    seq = open_sequence(cfg, role)
    results = track_role(cfg, prior, role, frame_cap(cfg, seq.n_frames))
    write_track(cfg, role, results)
    return {role: _summary(results)}


# ---------------------------------------------------------------------------
# mouth database


def mouth_config(cfg) -> MouthConfig:
    m = cfg["mouth"]
    return MouthConfig(k=m["k"], texture_size=m["texture_size"], omega=tuple(tuple(p) for p in m["omega"]),
                       min_visible=m["min_visible"])


def db_range(cfg, n: int) -> tuple:
    r = cfg["mouth"]["db_frames"]
    if r is None:
        return 0, max(1, n // 2)
    return min(r[0], n), min(r[1], n)


def cmd_build_mouth_db(cfg) -> dict:
    prior = get_prior(cfg)
    seq = open_sequence(cfg, "target")
    n = frame_cap(cfg, seq.n_frames)
    a, b = db_range(cfg, n)
    if b <= a:
        raise ConfigError(f"mouth database range [{a}, {b}) is empty for {n} frames")
    results = track_role(cfg, prior, "target", b)
    keep = [r for r in results[a:b] if r.status == "ok"]
    mcfg = mouth_config(cfg)
    db = build_database(prior, [seq.frame(r.index) for r in keep], [r.params for r in keep], mcfg,
                        build_chart(prior, mcfg.texture_size), [r.index for r in keep])
    out = out_dir(cfg)
    save_database(db, out / MOUTH_DB_FILE)
    info = {"frames": db.frame_ids, "k": db.k, "representatives": db.frame_ids[db.representatives],
            "labels": db.labels, "range": [a, b]}
    write_json(out / "mouth_db.json", info)
    return {"frames": db.n_frames, "k": db.k}


# ---------------------------------------------------------------------------
# reenactment


@dataclass
class ReenactFrame:
    index: int
    status: str
    rms_face: float
    rms_mouth: float
    target_frame: int | None
    inbetween_frame: int | None
    in_db: bool


def region_rms(a: Frame, b: Frame, weight: np.ndarray) -> float:
    m = weight > 0
    if not m.any():
        return float("nan")
    d = a.rgb[m] - b.rgb[m]
    return float(np.sqrt(np.mean(d * d)))


def query_descriptor(prior, params_T: SceneParams, source_frame: Frame, params_S: SceneParams, chart,
                     mcfg: MouthConfig) -> MouthDescriptor:
    """Transferred expression with target pose and landmarks; LBP from the driving actor's mouth."""
    try:
        tex = normalize_mouth(source_frame, params_S, prior, chart, mcfg.min_visible)
    except MouthNotVisible:
        tex = np.clip(shaded_albedo_texture(prior, params_T, chart), 0.0, 1.0)
    return MouthDescriptor(params_T.pose.R.copy(), params_T.delta.copy(), mouth_landmarks_2d(prior, params_T),
                           compute_lbp(tex))


def cmd_reenact(cfg) -> dict:
    prior = get_prior(cfg)
    out = out_dir(cfg)
    db_path = out / MOUTH_DB_FILE
    calib_T = load_role_calibration(cfg, "target")
    calib_S = load_role_calibration(cfg, "source")
    if not db_path.exists():
        raise MissingArtifactError(f"no mouth database at {db_path}; run `f2f build-mouth-db` first")
    db = load_database(db_path)
    seq_T = open_sequence(cfg, "target")
    seq_S = open_sequence(cfg, "source")
    n = frame_cap(cfg, min(seq_T.n_frames, seq_S.n_frames))
    rng = cfg["reenact"]["frames"]
    a, b = (0, n) if rng is None else (min(rng[0], n), min(rng[1], n))
    tracks_T = track_role(cfg, prior, "target", b)
    tracks_S = tracks_T if self_reenactment(cfg) else track_role(cfg, prior, "source", b)
    d_exp = prior.d_exp
    op = build_transfer_operator(prior, calib_T["alpha"], np.zeros(d_exp), calib_S["alpha"], np.zeros(d_exp))
    save_operator(op, out / TRANSFER_FILE)
    mcfg = mouth_config(cfg)
    chart = build_chart(prior, mcfg.texture_size)
    state = RetrievalState()
    db_ids = set(int(i) for i in db.frame_ids)
    frames_dir = out / "reenact" / "frames"
    rows = []
    for i in range(a, b):
        video = seq_T.frame(i)
        tT, tS = tracks_T[i], tracks_S[i]
        if tT.status != "ok" or tS.status != "ok":
            write_frame(frames_dir, i, video)
            rows.append(ReenactFrame(i, "lost", float("nan"), float("nan"), None, None, i in db_ids))
            continue
        p = tT.params.copy()
        p.delta = transfer_expression(op, prior, tS.params.delta)
        raster = rasterize(prior, p, video.width, video.height)
        K = query_descriptor(prior, p, seq_S.frame(i) if not self_reenactment(cfg) else video, tS.params,
                             chart, mcfg)
        ret = retrieve(db, K, state)
        frame = blend_and_composite(prior, db, chart, ret, state, video, raster, p, mcfg)
        write_frame(frames_dir, i, frame)
        wb, _, wm = composite_weights(raster, prior.mouth_region, mcfg.erode_px, mcfg.feather_px)
        rows.append(ReenactFrame(i, "ok", region_rms(frame, video, 1.0 - wb), region_rms(frame, video, wm),
                                 int(db.frame_ids[ret.target_frame]), int(db.frame_ids[ret.inbetween_frame]),
                                 i in db_ids))
    with open(out / "reenact" / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "status", "rms_face", "rms_mouth", "target_frame", "inbetween_frame", "in_db"])
        for r in rows:
            w.writerow([r.index, r.status, repr(r.rms_face), repr(r.rms_mouth),
                        "" if r.target_frame is None else r.target_frame,
                        "" if r.inbetween_frame is None else r.inbetween_frame, int(r.in_db)])
    summary = reenact_summary(rows)
    write_json(out / "reenact" / "summary.json", summary)
    return summary


def reenact_summary(rows) -> dict:
    def stats(sel):
        v = np.array([r.rms_face for r in sel if r.status == "ok"])
        m = np.array([r.rms_mouth for r in sel if r.status == "ok" and np.isfinite(r.rms_mouth)])
        return {"frames": len(sel), "rms_face": float(v.mean()) if len(v) else None,
                "rms_mouth": float(m.mean()) if len(m) else None}
    return {"all": stats(rows), "in_db": stats([r for r in rows if r.in_db]),
            "held_out": stats([r for r in rows if not r.in_db]),
            "lost": sum(r.status != "ok" for r in rows)}


# ---------------------------------------------------------------------------
# eval


def _rot_err_deg(Ra, Rb) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def cmd_eval(cfg) -> dict:
    from .io import read_jsonl
    out = out_dir(cfg)
    report = {}
    for role in roles(cfg):
        path = out / f"track_{role}.jsonl"
        if not path.exists():
            raise MissingArtifactError(f"no tracking output at {path}; run `f2f track` first")
        recs = read_jsonl(path)
        seq = open_sequence(cfg, role)
        ok = [r for r in recs if r["status"] == "ok"]
        entry = {"frames": len(recs), "lost": len(recs) - len(ok),
                 "rms_mean": float(np.mean([r["rms"] for r in ok])) if ok else None}
        if seq.has_truth():
            truth = {int(t["frame"]): t for t in seq.truth()}
            de, re_, te = [], [], []
            for r in ok:
                t = truth.get(int(r["frame"]))
                if t is None:
                    continue
                dt, dr = np.asarray(t["delta"]), np.asarray(r["delta"])
                de.append(float(np.linalg.norm(dr - dt) / max(np.linalg.norm(dt), 1e-12)))
                Ra = RigidPose.from_axis_angle(r["pose"]["axis_angle"], r["pose"]["t"]).R
                Rb = RigidPose.from_axis_angle(t["pose"]["axis_angle"], t["pose"]["t"]).R
                re_.append(_rot_err_deg(Ra, Rb))
                te.append(float(np.linalg.norm(np.asarray(r["pose"]["t"]) - np.asarray(t["pose"]["t"]))))
            entry.update({"delta_rel_err_mean": float(np.mean(de)) if de else None,
                          "rot_err_deg_mean": float(np.mean(re_)) if re_ else None,
                          "trans_err_mean": float(np.mean(te)) if te else None})
            cal = calibration_path(cfg, role)
            if cal.exists():
                a = load_calibration(cal)["alpha"]
                a_true = np.asarray(seq.truth()[0]["alpha"])
                entry["alpha_rel_err"] = float(np.linalg.norm(a - a_true) / max(np.linalg.norm(a_true), 1e-12))
        report[role] = entry
    summ = out / "reenact" / "summary.json"
    if summ.exists():
        import json
        report["reenact"] = json.loads(summ.read_text())
    write_json(out / "eval.json", report)
    return report
