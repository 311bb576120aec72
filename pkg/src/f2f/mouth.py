"""Mouth database, retrieval and compositing.

Mouth appearance is stored as textures in the prior's UV parameterization
(a fixed-size chart around the mouth triangles), so frames with different
poses become directly comparable. Retrieval picks the closest cluster
representative under a combined parameter / landmark / LBP distance, then an
inbetween frame on a fully connected appearance graph that is close to both
that representative and the previously used frame.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .container import read_container, write_container
from .energy import SceneParams
from .imaging import CameraIntrinsics, Frame, RasterOutput, rasterize_mesh, sh_shade, vertex_normals
from .model import FacePrior, MOUTH_LANDMARK_NAMES, eval_albedo, eval_geometry

log = logging.getLogger(__name__)

MOUTH_MAGIC = "F2FMOUTH1"
LBP_BINS = 59
LBP_CELLS = 4
LUMA = np.array([0.2126, 0.7152, 0.0722])
# every pair among the four mouth landmarks (includes corner-corner and upper-lower lip)
DEFAULT_OMEGA = tuple(itertools.combinations(range(len(MOUTH_LANDMARK_NAMES)), 2))


class MouthNotVisible(ValueError):
    pass


@dataclass
class MouthConfig:
    k: int = 10
    texture_size: int = 64
    omega: tuple = DEFAULT_OMEGA
    min_visible: float = 0.5  # fraction of mouth triangles that must face the camera
    max_rounds: int = 50
    blend: float = 0.5  # weight of the newly retrieved texture
    align_radius: int = 4
    shade_eps: float = 1e-3
    ratio_clamp: tuple = (0.2, 5.0)
    erode_px: int = 1
    feather_px: float = 2.0


# ---------------------------------------------------------------------------
# texture chart


@dataclass(frozen=True, eq=False)
class MouthChart:
    """Texel -> (triangle, barycentric) map over the UV bounding box of the mouth triangles."""
    size: int
    bounds: np.ndarray  # (umin, vmin, umax, vmax)
    tri: np.ndarray  # (size, size) global triangle ids
    bary: np.ndarray  # (size, size, 3)
    covered: np.ndarray  # (size, size) bool, False where inpainted from the nearest covered texel

    def uv_to_texel(self, uv: np.ndarray) -> np.ndarray:
        """UV -> continuous (row, col) array coordinates (texel centers at integers)."""
        u0, v0, u1, v1 = self.bounds
        col = (uv[..., 0] - u0) / (u1 - u0) * self.size - 0.5
        row = (uv[..., 1] - v0) / (v1 - v0) * self.size - 0.5
        return np.stack([row, col], axis=-1)


def build_chart(prior: FacePrior, size: int = 64) -> MouthChart:
    mtri = prior.triangles[prior.mouth_region]
    if len(mtri) == 0:
        raise MouthNotVisible("prior has no mouth triangles")
    uv = prior.uv_coords
    used = uv[np.unique(mtri)]
    u0, v0 = used.min(axis=0)
    u1, v1 = used.max(axis=0)
    pts = np.column_stack([(uv[:, 0] - u0) / (u1 - u0) * size, (uv[:, 1] - v0) / (v1 - v0) * size,
                           np.ones(len(uv))])
    sub, bary, _, _, _ = rasterize_mesh(pts, mtri, CameraIntrinsics(1.0, 1.0, 0.0, 0.0), size, size,
                                        cull_back=False)
    covered = sub >= 0
    if not covered.any():
        raise MouthNotVisible("mouth chart has no covered texels")
    # nearest covered texel for the rest
    _, (ri, ci) = ndimage.distance_transform_edt(~covered, return_indices=True)
    sub = sub[ri, ci]
    bary = bary[ri, ci]
    tri = prior.mouth_region[sub]
    arrs = [np.array([u0, v0, u1, v1]), tri, bary, covered]
    for a in arrs:
        a.setflags(write=False)
    return MouthChart(size, *arrs)


def _texel_geometry(prior: FacePrior, chart: MouthChart, params: SceneParams):
    """Camera-space surface points and unit normals of every texel."""
    verts = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)
    vid = prior.triangles[chart.tri]  # (s, s, 3)
    P = np.einsum("ijk,ijkc->ijc", chart.bary, verts[vid])
    unit_vn, _ = vertex_normals(verts, prior.triangles)
    n = np.einsum("ijk,ijkc->ijc", chart.bary, unit_vn[vid])
    R, t = params.pose.R, params.pose.t
    X = P @ R.T + t
    n = n @ R.T
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return X, n


def front_facing_fraction(prior: FacePrior, params: SceneParams) -> float:
    """Share of mouth triangles with front-facing (negative) projected signed area."""
    verts = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)
    X = verts @ params.pose.R.T + params.pose.t
    if np.any(X[:, 2] <= 0):
        X = X.copy()
        X[X[:, 2] <= 0, 2] = np.nan
    k = params.kappa
    p = np.stack([k.fx * X[:, 0] / X[:, 2] + k.cx, k.fy * X[:, 1] / X[:, 2] + k.cy], axis=1)
    T = p[prior.triangles[prior.mouth_region]]
    a = ((T[:, 1, 0] - T[:, 0, 0]) * (T[:, 2, 1] - T[:, 0, 1])
         - (T[:, 1, 1] - T[:, 0, 1]) * (T[:, 2, 0] - T[:, 0, 0]))
    return float(np.mean(a < 0))


def bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear lookup at array coordinates, clamped at the border; img is (h, w, c)."""
    coords = np.stack([rows.ravel(), cols.ravel()])
    out = [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[-1])]
    return np.stack(out, axis=-1).reshape(rows.shape + (img.shape[-1],))


def normalize_mouth(frame: Frame, params: SceneParams, prior: FacePrior, chart: MouthChart,
                    min_visible: float = 0.5) -> np.ndarray:
    """Resample the frame's mouth region into the UV chart; (size, size, 3) texture."""
    frac = front_facing_fraction(prior, params)
    if frac < min_visible:
        raise MouthNotVisible(f"only {frac:.0%} of mouth triangles face the camera")
    X, _ = _texel_geometry(prior, chart, params)
    k = params.kappa
    x = k.fx * X[..., 0] / X[..., 2] + k.cx
    y = k.fy * X[..., 1] / X[..., 2] + k.cy
    return bilinear(frame.rgb, y - 0.5, x - 0.5)


def shaded_albedo_texture(prior: FacePrior, params: SceneParams, chart: MouthChart) -> np.ndarray:
    """What the model itself renders at each texel (used as a round-trip reference)."""
    _, n = _texel_geometry(prior, chart, params)
    albedo_v = eval_albedo(prior, params.beta).reshape(-1, 3)
    rho = np.einsum("ijk,ijkc->ijc", chart.bary, albedo_v[prior.triangles[chart.tri]])
    return sh_shade(n, rho, params.gamma)


# ---------------------------------------------------------------------------
# LBP


def _uniform_lut() -> np.ndarray:
    """Code -> bin: the 58 uniform patterns (<= 2 circular transitions) in code order, then one catch-all."""
    lut = np.full(256, LBP_BINS - 1, dtype=np.int64)
    nxt = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        if sum(bits[i] != bits[(i + 1) % 8] for i in range(8)) <= 2:
            lut[code] = nxt
            nxt += 1
    return lut


UNIFORM_LUT = _uniform_lut()
# neighbor offsets (drow, dcol) clockwise from top-left; neighbor i sets bit 7 - i
_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def lbp_codes(lum: np.ndarray) -> np.ndarray:
    """8-neighbor LBP codes with edge replication; neighbor >= center sets the bit."""
    h, w = lum.shape
    pad = np.pad(lum, 1, mode="edge")
    code = np.zeros((h, w), dtype=np.int64)
    for i, (dr, dc) in enumerate(_NEIGHBORS):
        nb = pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        code |= (nb >= lum).astype(np.int64) << (7 - i)
    return code


def compute_lbp(texture: np.ndarray, cells: int = LBP_CELLS) -> np.ndarray:
    """Concatenated per-cell uniform-pattern histograms (counts) of the luminance LBP."""
    tex = np.asarray(texture, dtype=np.float64)
    lum = tex @ LUMA if tex.ndim == 3 else tex
    bins = UNIFORM_LUT[lbp_codes(lum)]
    h, w = lum.shape
    rows = np.minimum(np.arange(h) * cells // h, cells - 1)
    cols = np.minimum(np.arange(w) * cells // w, cells - 1)
    cell = rows[:, None] * cells + cols[None, :]
    hist = np.bincount((cell * LBP_BINS + bins).ravel(), minlength=cells * cells * LBP_BINS)
    return hist.astype(np.float64)


# ---------------------------------------------------------------------------
# descriptors and distances


@dataclass
class MouthDescriptor:
    R: np.ndarray
    delta: np.ndarray
    F: np.ndarray  # (n_mouth_landmarks, 2) pixels
    L: np.ndarray


def mouth_landmarks_2d(prior: FacePrior, params: SceneParams) -> np.ndarray:
    vids = prior.mouth_landmark_vertices()
    v = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)[vids]
    X = v @ params.pose.R.T + params.pose.t
    k = params.kappa
    return np.stack([k.fx * X[:, 0] / X[:, 2] + k.cx, k.fy * X[:, 1] / X[:, 2] + k.cy], axis=1)


def describe(prior: FacePrior, params: SceneParams, texture: np.ndarray) -> MouthDescriptor:
    return MouthDescriptor(params.pose.R.copy(), np.asarray(params.delta, dtype=np.float64).copy(),
                           mouth_landmarks_2d(prior, params), compute_lbp(texture))


def dist_p(KT: MouthDescriptor, KS: MouthDescriptor) -> float:
    return float(np.sum((KT.delta - KS.delta) ** 2) + np.sum((KT.R - KS.R) ** 2))


def _pair_lengths(F: np.ndarray, omega) -> np.ndarray:
    idx = np.asarray(omega, dtype=np.int64).reshape(-1, 2)
    return np.linalg.norm(F[..., idx[:, 0], :] - F[..., idx[:, 1], :], axis=-1)


def dist_m(KT: MouthDescriptor, KS: MouthDescriptor, omega=DEFAULT_OMEGA) -> float:
    d = _pair_lengths(KT.F, omega) - _pair_lengths(KS.F, omega)
    return float(np.sum(d * d))


def chi_squared(a: np.ndarray, b: np.ndarray) -> float:
    """sum (a - b)^2 / (a + b); bins with a + b = 0 contribute 0."""
    s = a + b
    nz = s > 0
    return float(np.sum((a[nz] - b[nz]) ** 2 / s[nz]))


def dist_l(KT: MouthDescriptor, KS: MouthDescriptor) -> float:
    return chi_squared(KT.L, KS.L)


def ncc_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - normalized cross-correlation over all RGB texels (0 for identical textures)."""
    if np.array_equal(a, b):
        return 0.0
    x = a.ravel() - a.mean()
    y = b.ravel() - b.mean()
    den = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if den == 0.0:
        return 1.0
    return float(1.0 - np.dot(x, y) / den)


def w_c(KT: MouthDescriptor, KS: MouthDescriptor, omega=DEFAULT_OMEGA) -> float:
    return float(np.exp(-dist_m(KT, KS, omega) ** 2))


def dist_a(KT: MouthDescriptor, KS: MouthDescriptor, dc: float | None = None, omega=DEFAULT_OMEGA) -> float:
    """Appearance term; ``dc`` is D_c(tau, t), omitted when there is no previous retrieval."""
    out = dist_l(KT, KS)
    if dc is not None:
        out += w_c(KT, KS, omega) * dc
    return out


def dist_total(KT: MouthDescriptor, KS: MouthDescriptor, dc: float | None = None, omega=DEFAULT_OMEGA) -> float:
    return dist_p(KT, KS) + dist_m(KT, KS, omega) + dist_a(KT, KS, dc, omega)


# batched forms over descriptor arrays (rows = database frames)


@dataclass
class DescriptorSet:
    R: np.ndarray  # (n, 3, 3)
    delta: np.ndarray  # (n, d)
    F: np.ndarray  # (n, m, 2)
    L: np.ndarray  # (n, bins)

    @classmethod
    def stack(cls, descs) -> "DescriptorSet":
        return cls(np.stack([d.R for d in descs]), np.stack([d.delta for d in descs]),
                   np.stack([d.F for d in descs]), np.stack([d.L for d in descs]))

    def __len__(self) -> int:
        return len(self.delta)

    def __getitem__(self, i) -> MouthDescriptor:
        return MouthDescriptor(self.R[i], self.delta[i], self.F[i], self.L[i])


def _chi_squared_rows(a: np.ndarray, B: np.ndarray) -> np.ndarray:
    s = a[None, :] + B
    d = (a[None, :] - B) ** 2
    return np.sum(np.divide(d, s, out=np.zeros_like(d), where=s > 0), axis=1)


def query_terms(KT: MouthDescriptor, S: DescriptorSet, omega=DEFAULT_OMEGA):
    """Per-row (D_p, D_m, D_l) of one query against a descriptor set."""
    dp = np.sum((S.delta - KT.delta) ** 2, axis=1) + np.sum((S.R - KT.R) ** 2, axis=(1, 2))
    dm = np.sum((_pair_lengths(S.F, omega) - _pair_lengths(KT.F, omega)[None, :]) ** 2, axis=1)
    dl = _chi_squared_rows(KT.L, S.L)
    return dp, dm, dl


def pairwise_static(S: DescriptorSet, omega=DEFAULT_OMEGA) -> np.ndarray:
    """D_p + D_m + D_l between all frames (the offline distance, no D_c term)."""
    n = len(S)
    D = np.empty((n, n))
    for i in range(n):
        dp, dm, dl = query_terms(S[i], S, omega)
        D[i] = dp + dm + dl
    np.fill_diagonal(D, 0.0)
    return D


def ncc_matrix(textures: np.ndarray) -> np.ndarray:
    """Pairwise 1 - NCC between textures (n, s, s, 3); exact zeros for identical textures."""
    n = len(textures)
    X = textures.reshape(n, -1)
    X = X - X.mean(axis=1, keepdims=True)
    nrm = np.linalg.norm(X, axis=1)
    Y = X / np.where(nrm > 0, nrm, 1.0)[:, None]
    D = 1.0 - Y @ Y.T
    zero = nrm == 0
    D[zero, :] = 1.0
    D[:, zero] = 1.0
    # identical textures (including the diagonal) are exactly 0 apart
    flat = textures.reshape(n, -1)
    _, inv = np.unique(flat, axis=0, return_inverse=True)
    D[inv.ravel()[:, None] == inv.ravel()[None, :]] = 0.0
    return 0.5 * (D + D.T)


# ---------------------------------------------------------------------------
# clustering


def kmedoids(D: np.ndarray, k: int, max_rounds: int = 50):
    """k-medoids on a precomputed distance matrix.

    Seeds by greedy max-min from item 0, then alternates nearest-medoid assignment
    and per-cluster medoid update until the medoids stop changing. Ties go to
    the lowest index. Returns ``(labels, medoids)``.
    """
    n = D.shape[0]
    k = min(k, n)
    medoids = [0]
    near = D[0].copy()
    while len(medoids) < k:
        cand = near.copy()
        cand[medoids] = -np.inf
        j = int(np.argmax(cand))
        medoids.append(j)
        near = np.minimum(near, D[j])
    medoids = np.array(medoids)
    labels = np.argmin(D[:, medoids], axis=1)
    for _ in range(max_rounds):
        new = medoids.copy()
        for c in range(k):
            members = np.nonzero(labels == c)[0]
            if len(members) == 0:
                continue
            cost = D[np.ix_(members, members)].sum(axis=1)
            new[c] = members[int(np.argmin(cost))]
        labels = np.argmin(D[:, new], axis=1)
        if np.array_equal(new, medoids):
            break
        medoids = new
    # medoids are members of their own cluster
    labels[medoids] = np.arange(k)
    return labels, medoids


# ---------------------------------------------------------------------------
# database


@dataclass
class MouthDatabase:
    frame_ids: np.ndarray  # source frame index of every entry
    textures: np.ndarray  # (n, s, s, 3)
    gammas: np.ndarray  # (n, 3, 9)
    descriptors: DescriptorSet
    labels: np.ndarray
    representatives: np.ndarray
    graph: np.ndarray  # (n, n) appearance-graph edge weights
    chart_bounds: np.ndarray
    omega: tuple = DEFAULT_OMEGA

    @property
    def n_frames(self) -> int:
        return len(self.frame_ids)

    @property
    def k(self) -> int:
        return len(self.representatives)

    def clusters(self) -> list:
        return [np.nonzero(self.labels == c)[0] for c in range(self.k)]

    def dc(self, tau: int | None, t: int) -> float | None:
        if tau is None:
            return None
        return ncc_distance(self.textures[tau], self.textures[t])

    def dist_to(self, KT: MouthDescriptor, t: int, tau: int | None = None) -> float:
        return dist_total(KT, self.descriptors[t], self.dc(tau, t), self.omega)


def build_database(prior: FacePrior, frames, params_list, cfg: MouthConfig | None = None,
                   chart: MouthChart | None = None, frame_ids=None) -> MouthDatabase:
    cfg = cfg or MouthConfig()
    chart = chart or build_chart(prior, cfg.texture_size)
    frame_ids = range(len(frames)) if frame_ids is None else frame_ids
    ids, texs, gams, descs = [], [], [], []
    for fid, fr, p in zip(frame_ids, frames, params_list):
        try:
            tex = normalize_mouth(fr, p, prior, chart, cfg.min_visible)
        except MouthNotVisible as exc:
            log.warning("frame %d excluded from mouth database: %s", fid, exc)
            continue
        ids.append(int(fid))
        texs.append(tex)
        gams.append(np.asarray(p.gamma, dtype=np.float64).reshape(3, 9))
        descs.append(describe(prior, p, tex))
    if not ids:
        raise MouthNotVisible("no usable frames for the mouth database")
    k = cfg.k
    if len(ids) < k:
        log.warning("only %d usable frames; lowering k from %d", len(ids), k)
        k = len(ids)
    S = DescriptorSet.stack(descs)
    D = pairwise_static(S, cfg.omega)
    labels, medoids = kmedoids(D, k, cfg.max_rounds)
    textures = np.stack(texs)
    graph = appearance_graph(S, textures, cfg.omega)
    return MouthDatabase(np.array(ids), textures, np.stack(gams), S, labels, medoids, graph,
                         chart.bounds.copy(), tuple(cfg.omega))


def appearance_graph(S: DescriptorSet, textures: np.ndarray, omega=DEFAULT_OMEGA) -> np.ndarray:
    """Edge weight = (1 - NCC) + D_p + D_m; symmetric with a zero diagonal."""
    n = len(S)
    G = ncc_matrix(textures)
    for i in range(n):
        dp, dm, _ = query_terms(S[i], S, omega)
        G[i] += dp + dm
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, 0.0)
    return G


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalState:
    tau: int | None = None
    texture: np.ndarray | None = None  # last blended (output) mouth texture


@dataclass
class Retrieval:
    target_frame: int
    inbetween_frame: int


def retrieve(db: MouthDatabase, KT: MouthDescriptor, state: RetrievalState) -> Retrieval:
    reps = db.representatives
    d = [db.dist_to(KT, int(r), state.tau) for r in reps]
    target = int(reps[int(np.argmin(d))])
    if state.tau is None:
        inbetween = target
    else:
        inbetween = int(np.argmin(db.graph[:, state.tau] + db.graph[:, target]))
    state.tau = inbetween
    return Retrieval(target, inbetween)


# ---------------------------------------------------------------------------
# blending and compositing


def align_translation(moving: np.ndarray, fixed: np.ndarray, radius: int = 4):
    """Shift ``moving`` to best match ``fixed`` (SSD) over integer shifts in [-radius, radius]^2,
    refined to subpixel by a per-axis parabola. Returns ``(aligned, (drow, dcol))``.
    """
    def shifted(s):
        return ndimage.shift(moving, (s[0], s[1], 0), order=1, mode="nearest")

    def ssd(s):
        d = shifted(s) - fixed
        return float(np.sum(d * d))

    r = int(radius)
    grid = np.array([[ssd((i, j)) for j in range(-r, r + 1)] for i in range(-r, r + 1)])
    bi, bj = np.unravel_index(int(np.argmin(grid)), grid.shape)
    best = np.array([bi - r, bj - r], dtype=np.float64)
    for axis, (i, j) in enumerate(((bi, bj), (bi, bj))):
        lo = (i - 1, j) if axis == 0 else (i, j - 1)
        hi = (i + 1, j) if axis == 0 else (i, j + 1)
        if min(lo) < 0 or max(hi) > 2 * r:
            continue
        a, b, c = grid[lo], grid[i, j], grid[hi]
        den = a - 2 * b + c
        if den > 0:
            best[axis] += np.clip(0.5 * (a - c) / den, -0.5, 0.5)
    best = np.clip(best, -r, r)
    if not best.any():
        return moving.copy(), (0.0, 0.0)
    return shifted(best), (float(best[0]), float(best[1]))


def illumination_ratio(normals: np.ndarray, gamma_now, gamma_retrieved, eps: float = 1e-3,
                       clamp=(0.2, 5.0)) -> np.ndarray:
    """Per-texel, per-channel irradiance ratio current / retrieved, clamped."""
    ones = np.ones(normals.shape[:-1] + (3,))
    now = sh_shade(normals, ones, gamma_now)
    ret = sh_shade(normals, ones, gamma_retrieved)
    return np.clip(now / np.maximum(ret, eps), clamp[0], clamp[1])


def blend_textures(db: MouthDatabase, frame: int, state: RetrievalState, normals: np.ndarray,
                   gamma_now, cfg: MouthConfig) -> np.ndarray:
    """Relight the retrieved texture to the current illumination, align the previous
    output texture to it and mix them; updates ``state.texture``.
    """
    new = db.textures[frame] * illumination_ratio(normals, gamma_now, db.gammas[frame], cfg.shade_eps,
                                                  cfg.ratio_clamp)
    if state.texture is None:
        out = new
    else:
        prev, _ = align_translation(state.texture, new, cfg.align_radius)
        out = (1.0 - cfg.blend) * prev + cfg.blend * new
    state.texture = out
    return out


def composite_weights(raster: RasterOutput, mouth_triangles: np.ndarray, erode_px: int = 1,
                      feather_px: float = 2.0):
    """(w_background, w_face, w_mouth); they sum to one at every pixel."""
    cover = raster.mask()
    if erode_px > 0:
        cover = ndimage.binary_erosion(cover, iterations=erode_px)
    face = np.clip(ndimage.distance_transform_edt(cover) / feather_px, 0.0, 1.0)
    in_mouth = np.isin(raster.tri_id, mouth_triangles) & cover
    mouth = np.clip(ndimage.distance_transform_edt(in_mouth) / feather_px, 0.0, 1.0)
    w_mouth = face * mouth
    w_face = face - w_mouth
    return 1.0 - face, w_face, w_mouth


def project_texture(prior: FacePrior, raster: RasterOutput, texture: np.ndarray, chart_bounds) -> np.ndarray:
    """Sample the mouth texture at every covered pixel through the current model's UV; (h, w, 3)."""
    out = np.zeros(raster.tri_id.shape + (3,))
    ys, xs = np.nonzero(raster.tri_id >= 0)
    if len(ys) == 0:
        return out
    tri = raster.tri_id[ys, xs]
    uv = np.einsum("mk,mkc->mc", raster.bary[ys, xs], prior.uv_coords[prior.triangles[tri]])
    u0, v0, u1, v1 = chart_bounds
    s = texture.shape[0]
    cols = (uv[:, 0] - u0) / (u1 - u0) * s - 0.5
    rows = (uv[:, 1] - v0) / (v1 - v0) * s - 0.5
    out[ys, xs] = bilinear(texture, rows, cols)
    return out


def blend_and_composite(prior: FacePrior, db: MouthDatabase, chart: MouthChart, retrieval: Retrieval,
                        state: RetrievalState, video: Frame, raster: RasterOutput, params: SceneParams,
                        cfg: MouthConfig | None = None) -> Frame:
    """Composite the rendered face and the relit mouth texture over the target video frame."""
    cfg = cfg or MouthConfig()
    _, normals = _texel_geometry(prior, chart, params)
    tex = blend_textures(db, retrieval.inbetween_frame, state, normals, params.gamma, cfg)
    wb, wf, wm = composite_weights(raster, prior.mouth_region, cfg.erode_px, cfg.feather_px)
    face = np.clip(raster.color, 0.0, 1.0)
    mouth = project_texture(prior, raster, np.clip(tex, 0.0, 1.0), db.chart_bounds)
    out = wb[..., None] * video.rgb + wf[..., None] * face + wm[..., None] * mouth
    return Frame(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# serialization


def save_database(db: MouthDatabase, path) -> None:
    n, s = db.textures.shape[:2]
    S = db.descriptors
    om = np.asarray(db.omega, dtype=np.float64).reshape(-1, 2)
    dims = [n, s, S.delta.shape[1], S.F.shape[1], S.L.shape[1], db.k, len(om)]
    write_container(path, MOUTH_MAGIC, dims, [
        db.frame_ids, db.textures, db.gammas, S.R, S.delta, S.F, S.L,
        db.labels, db.representatives, db.graph, db.chart_bounds, om,
    ])


def _mouth_shapes(dims):
    n, s, d, m, nl, k, no = dims
    return [(n,), (n, s, s, 3), (n, 3, 9), (n, 3, 3), (n, d), (n, m, 2), (n, nl),
            (n,), (k,), (n, n), (4,), (no, 2)]


def load_database(path) -> MouthDatabase:
    _, a = read_container(path, MOUTH_MAGIC, _mouth_shapes)
    ids, tex, gam, R, delta, F, L, labels, reps, graph, bounds, om = a
    omega = tuple((int(i), int(j)) for i, j in om)
    return MouthDatabase(ids.astype(np.int64), tex, gam, DescriptorSet(R, delta, F, L),
                         labels.astype(np.int64), reps.astype(np.int64), graph, bounds, omega)
