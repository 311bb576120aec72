"""Linear face prior: mean shape/albedo plus identity, albedo and expression bases.

Geometry is ``a_id + E_id @ alpha + E_exp @ delta`` and albedo is
``a_alb + E_alb @ beta``. Vectors are stored interleaved per vertex
(x0, y0, z0, x1, ...). Coefficients are unnormalized; the standard deviations
only enter the statistical regularizer.

Model space uses camera-like axes: x right, y down, z away from the viewer, so
the face bulges toward -z and front-facing triangle normals point to -z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container

PRIOR_MAGIC = "F2FPRIOR1"

# Named mouth landmarks, in the order they appear in FacePrior.mouth_landmarks.
MOUTH_LANDMARK_NAMES = ("left_corner", "right_corner", "upper_mid", "lower_mid")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FacePrior:
    mean_shape: np.ndarray
    mean_albedo: np.ndarray
    basis_id: np.ndarray
    basis_alb: np.ndarray
    basis_exp: np.ndarray
    sigma_id: np.ndarray
    sigma_alb: np.ndarray
    sigma_exp: np.ndarray
    triangles: np.ndarray
    landmark_vertices: np.ndarray
    mouth_region: np.ndarray
    uv_coords: np.ndarray
    # positions inside landmark_vertices of MOUTH_LANDMARK_NAMES
    mouth_landmarks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        for name in ("mean_shape", "mean_albedo", "basis_id", "basis_alb", "basis_exp",
                     "sigma_id", "sigma_alb", "sigma_exp", "uv_coords"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("triangles", "landmark_vertices", "mouth_region", "mouth_landmarks"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def d_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def d_alb(self) -> int:
        return self.basis_alb.shape[1]

    @property
    def d_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def mouth_landmark_vertices(self) -> np.ndarray:
        return self.landmark_vertices[self.mouth_landmarks]

    def validate(self) -> None:
        n3 = self.mean_shape.shape[0]
        if n3 % 3 or self.mean_albedo.shape != (n3,):
            raise DimensionError("mean vectors must have length 3n")
        for name in ("basis_id", "basis_alb", "basis_exp"):
            b = getattr(self, name)
            if b.ndim != 2 or b.shape[0] != n3:
                raise DimensionError(f"{name} must be 3n x d")
            if not np.all(np.isfinite(b)):
                raise DimensionError(f"{name} has non-finite entries")
        for basis, sig in (("basis_id", "sigma_id"), ("basis_alb", "sigma_alb"), ("basis_exp", "sigma_exp")):
            s = getattr(self, sig)
            if s.shape != (getattr(self, basis).shape[1],):
                raise DimensionError(f"{sig} length does not match {basis}")
            if not np.all(s > 0):
                raise DimensionError(f"{sig} must be strictly positive")
        tri = self.triangles
        if tri.ndim != 2 or tri.shape[1] != 3 or tri.shape[0] == 0:
            raise DimensionError("triangles must be a nonempty list of index triples")
        if tri.min() < 0 or tri.max() >= self.n_vertices:
            raise DimensionError("triangle index out of range")
        if self.uv_coords.shape != (self.n_vertices, 2):
            raise DimensionError("uv_coords must be n x 2")
        if len(self.landmark_vertices) and (self.landmark_vertices.max() >= self.n_vertices):
            raise DimensionError("landmark vertex out of range")
        if len(self.mouth_region) and (self.mouth_region.max() >= self.n_triangles):
            raise DimensionError("mouth triangle out of range")


def _check_len(vec, n, what):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n,):
        raise DimensionError(f"{what}: expected length {n}, got shape {vec.shape}")
    return vec


def eval_geometry(prior: FacePrior, alpha, delta) -> np.ndarray:
    """Vertex positions (length 3n) for identity ``alpha`` and expression ``delta``."""
    alpha = _check_len(alpha, prior.d_id, "alpha")
    delta = _check_len(delta, prior.d_exp, "delta")
    return prior.mean_shape + prior.basis_id @ alpha + prior.basis_exp @ delta


def eval_albedo(prior: FacePrior, beta) -> np.ndarray:
    """Per-vertex RGB albedo (length 3n), unclamped."""
    beta = _check_len(beta, prior.d_alb, "beta")
    return prior.mean_albedo + prior.basis_alb @ beta


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices.reshape(-1, 3)
    e1 = v[triangles[:, 1]] - v[triangles[:, 0]]
    e2 = v[triangles[:, 2]] - v[triangles[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


# ---------------------------------------------------------------------------
# synthetic prior


@dataclass
class PriorConfig:
    n_subdiv: int = 3
    d_id: int = 8
    d_alb: int = 8
    d_exp: int = 12
    seed: int = 0


# half-axes of the face ellipsoid in model units
_AXES = (0.8, 1.0, 0.6)
_N_MODES = 6
_SIGMA_DECAY = 0.8
_MOUTH_CENTER = (0.5, 0.725)
_MOUTH_RADII = (0.16, 0.075)
_EXP_REACH = 0.4  # expression bumps are centered within this uv radius of the face center
_EXP_PEAK = 0.03


def _grid(n_subdiv: int):
    n = 4 * 2 ** n_subdiv
    u, v = np.meshgrid(np.linspace(0.0, 1.0, n + 1), np.linspace(0.0, 1.0, n + 1), indexing="xy")
    u = u.ravel()
    v = v.ravel()
    s = 2 * u - 1
    t = 2 * v - 1
    # square-to-disk map keeps the grid regular while rounding the outline
    xd = s * np.sqrt(1 - t * t / 2)
    yd = t * np.sqrt(1 - s * s / 2)
    a, b, c = _AXES
    r2 = np.clip(xd * xd + yd * yd, 0, 1)
    z = -c * np.sqrt(1 - 0.9 * r2)
    verts = np.stack([a * xd, b * yd, z], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v11, v10))
            tris.append((v00, v01, v11))
    return n, verts, np.stack([u, v], axis=1), np.asarray(tris, dtype=np.int64)


def _landmark_uvs():
    pts = []
    # jaw and chin contour
    for ang in np.linspace(np.deg2rad(20), np.deg2rad(160), 9):
        pts.append((0.5 + 0.44 * np.cos(ang), 0.5 + 0.44 * np.sin(ang)))
    for side in (0.0, 1.0):
        sgn = 1 if side else -1
        for du in (-0.08, 0.0, 0.08):
            pts.append((0.5 + sgn * 0.17 + du, 0.28))  # brows
        cx = 0.5 + sgn * 0.17
        pts += [(cx - 0.06, 0.38), (cx + 0.06, 0.38), (cx, 0.35), (cx, 0.41)]  # eyes
    pts += [(0.5, 0.42), (0.5, 0.5), (0.5, 0.58), (0.5, 0.62), (0.44, 0.6), (0.56, 0.6)]  # nose
    mouth = [(0.38, 0.725), (0.62, 0.725), (0.5, 0.69), (0.5, 0.765)]
    mouth_idx = list(range(len(pts), len(pts) + 4))
    pts += mouth
    pts += [(0.44, 0.695), (0.56, 0.695), (0.44, 0.755), (0.56, 0.755)]  # outer lips
    return np.asarray(pts), mouth_idx


def _cos_modes(uv: np.ndarray, m: int) -> np.ndarray:
    """(n, m*m) matrix of cos(pi p u) cos(pi q v) and a per-mode frequency weight."""
    cols = []
    weights = []
    for p in range(m):
        for q in range(m):
            cols.append(np.cos(np.pi * p * uv[:, 0]) * np.cos(np.pi * q * uv[:, 1]))
            weights.append(1.0 / (1.0 + p + q) ** 2)
    return np.stack(cols, axis=1), np.asarray(weights)


def _random_fields(rng, modes, weights, count, coord_scale, window=None):
    n = modes.shape[0]
    fields = np.empty((3 * n, count))
    for k in range(count):
        f = np.empty((n, 3))
        for c in range(3):
            coef = rng.standard_normal(len(weights)) * weights
            f[:, c] = coord_scale[c] * (modes @ coef)
        if window is not None:
            f *= window[:, None]
        fields[:, k] = f.ravel()
    return fields


def _orthonormalize(fields: np.ndarray, what: str) -> np.ndarray:
    q, r = np.linalg.qr(fields)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-8 * diag.max():
        raise DimensionError(f"{what}: requested dimension exceeds what the mesh resolution supports")
    # sign convention: positive diagonal of R, so column k keeps the direction of field k
    return q * np.sign(np.diag(r))[None, :]


def _mean_albedo(uv: np.ndarray) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]

    def blob(cu, cv, ru, rv):
        return np.exp(-(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2))

    skin = np.array([0.62, 0.46, 0.38])
    alb = np.tile(skin, (len(u), 1))
    alb = alb * (1.0 + 0.06 * np.cos(3 * np.pi * u)[:, None] * np.cos(2 * np.pi * v)[:, None])
    lips = blob(_MOUTH_CENTER[0], _MOUTH_CENTER[1], 0.14, 0.05)
    alb = alb * (1 - lips[:, None]) + np.array([0.58, 0.28, 0.28]) * lips[:, None]
    for cu in (0.33, 0.67):
        brow = blob(cu, 0.28, 0.09, 0.025)
        alb = alb * (1 - brow[:, None]) + np.array([0.30, 0.22, 0.18]) * brow[:, None]
        eye = blob(cu, 0.38, 0.05, 0.025)
        alb = alb * (1 - eye[:, None]) + np.array([0.22, 0.18, 0.16]) * eye[:, None]
        cheek = 0.5 * blob(cu, 0.55, 0.1, 0.08)
        alb = alb * (1 - cheek[:, None]) + np.array([0.68, 0.42, 0.38]) * cheek[:, None]
    return alb.ravel()


def _jaw_open_field(uv: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Designed first expression mode: lower lip and chin move down, upper lip slightly up."""
    u, v = uv[:, 0], uv[:, 1]
    cu, cv = _MOUTH_CENTER
    side = np.exp(-((u - cu) / 0.22) ** 2)
    below = 1.0 / (1.0 + np.exp(-(v - cv) / 0.015))
    fall = np.exp(-np.clip(v - cv, 0, None) / 0.25) * np.exp(-np.clip(cv - v, 0, None) / 0.04)
    dy = side * fall * (below - 0.25 * (1 - below))
    dz = 0.3 * side * fall * below
    f = np.zeros_like(verts)
    f[:, 1] = dy
    f[:, 2] = dz
    return f.ravel()


def _localized_fields(rng, uv: np.ndarray, verts: np.ndarray, count: int) -> np.ndarray:
    """Jaw-open mode plus Gaussian bumps at farthest-point-spread face locations.

    Localized modes mimic blendshape rigs and keep the columns of the image
    Jacobian close to orthogonal, which the Jacobi-preconditioned inner solver
    relies on.
    """
    n = len(uv)
    cand = np.nonzero(np.hypot(uv[:, 0] - 0.5, uv[:, 1] - 0.5) < _EXP_REACH)[0]
    start = np.asarray(_MOUTH_CENTER)
    dist = np.linalg.norm(uv[cand] - start, axis=1)
    centers = []
    for _ in range(count - 1):
        j = cand[np.argmax(dist)]
        centers.append(uv[j])
        dist = np.minimum(dist, np.linalg.norm(uv[cand] - uv[j], axis=1))
    radius = 0.6 * np.sqrt(np.pi * _EXP_REACH ** 2 / count)
    fields = np.empty((3 * n, count))
    fields[:, 0] = _jaw_open_field(uv, verts)
    for k, c in enumerate(centers, start=1):
        w = np.exp(-np.sum((uv - c) ** 2, axis=1) / radius ** 2)
        d = rng.standard_normal(3) * (1.0, 1.0, 0.5)
        fields[:, k] = (w[:, None] * (d / np.linalg.norm(d))[None, :]).ravel()
    return fields


def synth_prior(cfg: PriorConfig | None = None, **overrides) -> FacePrior:
    """Deterministic synthetic face prior.

    The mesh is a regular grid mapped onto the front half of an ellipsoid.
    Identity and albedo bases are random smooth fields (low-order cosine modes)
    orthonormalized by QR; expression modes are a designed jaw-open field followed
    by localized bumps. Standard deviations decay geometrically.
    """
    cfg = cfg or PriorConfig()
    for k, val in overrides.items():
        setattr(cfg, k, val)
    for name in ("d_id", "d_alb", "d_exp"):
        if getattr(cfg, name) < 1:
            raise DimensionError(f"{name} must be >= 1")
    if cfg.n_subdiv < 0:
        raise DimensionError("n_subdiv must be >= 0")
    n_grid, verts, uv, tris = _grid(cfg.n_subdiv)
    n = verts.shape[0]
    m = min(_N_MODES, n_grid + 1)
    limit = min(3 * n, 3 * m * m)
    for name in ("d_id", "d_alb", "d_exp"):
        if getattr(cfg, name) > limit:
            raise DimensionError(
                f"{name}={getattr(cfg, name)} exceeds what the mesh resolution supports ({limit})")

    rng_root = np.random.SeedSequence(cfg.seed & 0xFFFFFFFFFFFFFFFF)
    rng_id, rng_alb, rng_exp = [np.random.default_rng(s) for s in rng_root.spawn(3)]
    modes, weights = _cos_modes(uv, m)

    id_fields = _random_fields(rng_id, modes, weights, cfg.d_id, (1.0, 1.0, 1.6))
    basis_id = _orthonormalize(id_fields, "identity basis")

    cu, cv = _MOUTH_CENTER
    exp_fields = _localized_fields(rng_exp, uv, verts, cfg.d_exp)
    basis_exp = _orthonormalize(exp_fields, "expression basis")

    alb_fields = np.empty((3 * n, cfg.d_alb))
    for k in range(cfg.d_alb):
        coef = rng_alb.standard_normal(len(weights)) * weights
        scalar = modes @ coef
        tint = 1.0 + 0.3 * rng_alb.standard_normal(3)
        alb_fields[:, k] = (scalar[:, None] * tint[None, :]).ravel()
    basis_alb = _orthonormalize(alb_fields, "albedo basis")

    decay = lambda d: _SIGMA_DECAY ** np.arange(d)
    root = np.sqrt(3 * n)
    sigma_id = 0.05 * root * decay(cfg.d_id)
    # one sigma of a mode moves its peak vertex by ~2% of the face height
    peak = np.abs(basis_exp).reshape(n, 3, -1)
    peak = np.linalg.norm(peak, axis=1).max(axis=0)
    sigma_exp = _EXP_PEAK / peak * decay(cfg.d_exp)
    mean_albedo = _mean_albedo(uv)
    sigma_alb = 0.03 * root * decay(cfg.d_alb)
    # keep the 3-sigma albedo box inside [-0.5, 1.5]
    reach = np.abs(basis_alb) @ (3 * sigma_alb)
    worst = max(np.max(mean_albedo + reach) - 1.5, -0.5 - np.min(mean_albedo - reach), 0.0)
    if worst > 0:
        sigma_alb = sigma_alb * 0.95 * (1.5 - np.max(mean_albedo)) / np.max(reach)

    lm_uv, mouth_idx = _landmark_uvs()
    ij = np.rint(lm_uv * n_grid).astype(np.int64)
    landmark_vertices = ij[:, 1] * (n_grid + 1) + ij[:, 0]
    if len(np.unique(landmark_vertices)) != len(landmark_vertices):
        # coarse grids snap distinct landmarks together; keep first occurrences
        _, first = np.unique(landmark_vertices, return_index=True)
        keep = np.sort(first)
        remap = {old: new for new, old in enumerate(keep)}
        mouth_idx = [remap[i] for i in mouth_idx if i in remap]
        landmark_vertices = landmark_vertices[keep]

    cen = uv[tris].mean(axis=1)
    inside = ((cen[:, 0] - cu) / _MOUTH_RADII[0]) ** 2 + ((cen[:, 1] - cv) / _MOUTH_RADII[1]) ** 2 <= 1.0
    mouth_region = np.nonzero(inside)[0]

    return FacePrior(
        mean_shape=verts.ravel(),
        mean_albedo=mean_albedo,
        basis_id=basis_id,
        basis_alb=basis_alb,
        basis_exp=basis_exp,
        sigma_id=sigma_id,
        sigma_alb=sigma_alb,
        sigma_exp=sigma_exp,
        triangles=tris,
        landmark_vertices=landmark_vertices,
        mouth_region=mouth_region,
        uv_coords=uv,
        mouth_landmarks=np.asarray(mouth_idx, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# serialization

_FIELDS = ("mean_shape", "mean_albedo", "basis_id", "basis_alb", "basis_exp", "sigma_id",
           "sigma_alb", "sigma_exp", "triangles", "landmark_vertices", "mouth_region",
           "uv_coords", "mouth_landmarks")


def _prior_shapes(dims):
    n, d_id, d_alb, d_exp, n_tri, n_lm, n_mouth, n_mlm = dims
    return [(3 * n,), (3 * n,), (3 * n, d_id), (3 * n, d_alb), (3 * n, d_exp), (d_id,), (d_alb,),
            (d_exp,), (n_tri, 3), (n_lm,), (n_mouth,), (n, 2), (n_mlm,)]


def save_prior(prior: FacePrior, path) -> None:
    """Write the binary container plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    dims = [prior.n_vertices, prior.d_id, prior.d_alb, prior.d_exp, prior.n_triangles,
            len(prior.landmark_vertices), len(prior.mouth_region), len(prior.mouth_landmarks)]
    write_container(path, PRIOR_MAGIC, dims, [getattr(prior, f) for f in _FIELDS])
    sidecar = {
        "format": PRIOR_MAGIC,
        "n_vertices": dims[0], "d_id": dims[1], "d_alb": dims[2], "d_exp": dims[3],
        "n_triangles": dims[4], "n_landmarks": dims[5], "n_mouth_triangles": dims[6],
        "mouth_landmark_names": list(MOUTH_LANDMARK_NAMES[: dims[7]]),
        "fields": list(_FIELDS),
        "landmark_vertices": prior.landmark_vertices.tolist(),
        "mouth_landmarks": prior.mouth_landmarks.tolist(),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_prior(path) -> FacePrior:
    _, arrays = read_container(path, PRIOR_MAGIC, _prior_shapes)
    kw = dict(zip(_FIELDS, arrays))
    for name in ("triangles", "landmark_vertices", "mouth_region", "mouth_landmarks"):
        kw[name] = np.rint(kw[name]).astype(np.int64)
    return FacePrior(**kw)
