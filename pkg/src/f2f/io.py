"""Frame, landmark and parameter-stream file formats.

Frames live in linear color in memory. On disk each frame is written twice:
an 8-bit sRGB PNG for viewing and a float32 PFM (linear) for metrics. sRGB
encoding is the piecewise IEC 61966-2-1 curve::

    s = 12.92 c                      for c <= 0.0031308
    s = 1.055 c^(1/2.4) - 0.055      otherwise

quantized as round(255 s) after clipping c to [0, 1]; decoding inverts the
curve with threshold 0.04045.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .energy import Landmarks
from .imaging import Frame

FRAME_DIR = "frames"
LANDMARKS_FILE = "landmarks.jsonl"
TRUTH_FILE = "ground_truth.jsonl"
META_FILE = "meta.json"


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def srgb_to_linear(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def write_png(path, rgb_linear: np.ndarray) -> None:
    q = np.rint(linear_to_srgb(rgb_linear) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        q = np.asarray(im.convert("RGB"), dtype=np.float64)
    return srgb_to_linear(q / 255.0)


def write_pfm(path, rgb: np.ndarray) -> None:
    """Little-endian color PFM, rows stored bottom to top."""
    rgb = np.asarray(rgb, dtype="<f4")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    img = data.reshape(h, w, channels)[::-1].astype(np.float64)
    return np.repeat(img, 3, axis=2) if channels == 1 else img


def frame_stem(i: int) -> str:
    return f"{i:06d}"


def write_frame(directory, i: int, frame: Frame) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png(d / f"{frame_stem(i)}.png", frame.rgb)
    write_pfm(d / f"{frame_stem(i)}.pfm", frame.rgb)


def read_frame(directory, i: int) -> Frame:
    """PFM when present (lossless), otherwise the PNG."""
    d = Path(directory)
    pfm = d / f"{frame_stem(i)}.pfm"
    if pfm.exists():
        return Frame(read_pfm(pfm))
    png = d / f"{frame_stem(i)}.png"
    if not png.exists():
        raise FileNotFoundError(f"missing frame {i} in {d}")
    return Frame(read_png(png))


def _clean(x):
    """JSON-ready copy: numpy to lists, non-finite floats to None."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True)


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(dumps(r) + "\n")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n")


def landmark_record(i: int, lms: Landmarks) -> dict:
    return {"frame": i, "points": lms.points, "conf": lms.conf, "vertex_ids": lms.vertex_ids}


def landmarks_from_record(rec: dict) -> Landmarks:
    pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
    conf = np.asarray(rec.get("conf", np.ones(len(pts))), dtype=np.float64)
    return Landmarks(pts, conf, np.asarray(rec["vertex_ids"], dtype=np.int64))


class Sequence:
    """A frame directory with its landmark sidecar (and ground truth for synthetic data)."""

    def __init__(self, root):
        self.root = Path(root)
        meta = self.root / META_FILE
        if not meta.exists():
            raise FileNotFoundError(f"{self.root} is not a sequence directory (no {META_FILE}); run `f2f synth`")
        self.meta = json.loads(meta.read_text())
        self.n_frames = int(self.meta["n_frames"])
        self._landmarks = None

    @property
    def frame_dir(self) -> Path:
        return self.root / FRAME_DIR

    def frame(self, i: int) -> Frame:
        return read_frame(self.frame_dir, i)

    def landmarks(self, i: int) -> Landmarks | None:
        if self._landmarks is None:
            path = self.root / LANDMARKS_FILE
            self._landmarks = {}
            if path.exists():
                for rec in read_jsonl(path):
                    self._landmarks[int(rec["frame"])] = landmarks_from_record(rec)
        return self._landmarks.get(i)

    def has_truth(self) -> bool:
        return (self.root / TRUTH_FILE).exists()

    def truth(self) -> list:
        return read_jsonl(self.root / TRUTH_FILE)


def write_sequence(root, frames, landmarks, truth_records=None, meta=None) -> None:
    root = Path(root)
    (root / FRAME_DIR).mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        write_frame(root / FRAME_DIR, i, fr)
    write_jsonl(root / LANDMARKS_FILE, [landmark_record(i, lm) for i, lm in enumerate(landmarks)])
    if truth_records is not None:
        write_jsonl(root / TRUTH_FILE, truth_records)
    m = {"n_frames": len(frames), "width": frames[0].width, "height": frames[0].height}
    m.update(meta or {})
    write_json(root / META_FILE, m)
