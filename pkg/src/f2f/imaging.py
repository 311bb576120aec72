"""Image formation: rigid transform, pinhole projection, SH shading, rasterization, pyramids.

Conventions
-----------
* Camera looks down +z; image x to the right, y down; top-left origin.
* Pixel (x, y) has its center at continuous coordinate (x + 0.5, y + 0.5).
* Real spherical harmonics, bands 0-2, in (l, m) order
  (0,0) (1,-1) (1,0) (1,1) (2,-2) (2,-1) (2,0) (2,1) (2,2)::

      B0 = 1 / (2 sqrt(pi))                       = 0.282095
      B1 = sqrt(3 / (4 pi)) * y                   = 0.488603 y
      B2 = sqrt(3 / (4 pi)) * z                   = 0.488603 z
      B3 = sqrt(3 / (4 pi)) * x                   = 0.488603 x
      B4 = sqrt(15 / (4 pi)) * x y                = 1.092548 xy
      B5 = sqrt(15 / (4 pi)) * y z                = 1.092548 yz
      B6 = sqrt(5 / (16 pi)) * (3 z^2 - 1)        = 0.315392 (3z^2 - 1)
      B7 = sqrt(15 / (4 pi)) * x z                = 1.092548 xz
      B8 = sqrt(15 / (16 pi)) * (x^2 - y^2)       = 0.546274 (x^2 - y^2)

  Illumination is a (3, 9) array: one row of SH coefficients per RGB channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

Z_NEAR = 1e-3

SH_C0 = 0.5 / np.sqrt(np.pi)
SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))
SH_C2 = np.sqrt(15.0 / (4.0 * np.pi))
SH_C3 = np.sqrt(5.0 / (16.0 * np.pi))
SH_C4 = np.sqrt(15.0 / (16.0 * np.pi))


# ---------------------------------------------------------------------------
# rigid pose and camera


def rodrigues(w) -> np.ndarray:
    """Rotation matrix of the axis-angle vector ``w``."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * (K @ K)


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass
class RigidPose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def from_axis_angle(cls, w, t) -> "RigidPose":
        return cls(rodrigues(w), t)

    @property
    def axis_angle(self) -> np.ndarray:
        return Rotation.from_matrix(self.R).as_rotvec()

    def compose_increment(self, dw, dt, pivot=None) -> "RigidPose":
        """Rotate by ``dw`` about the model-space point ``pivot``, then translate by ``dt``.

        Camera-space points move as X' = exp([dw]) (X - q) + q + dt with
        q = R pivot + t; pivot None means the model origin.
        """
        dR = rodrigues(dw)
        if pivot is None:
            return RigidPose(dR @ self.R, self.t + dt)
        rc = self.R @ np.asarray(pivot, dtype=np.float64)
        return RigidPose(dR @ self.R, self.t + rc - dR @ rc + dt)

    def copy(self) -> "RigidPose":
        return RigidPose(self.R.copy(), self.t.copy())


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def default_for(cls, width: int, height: int) -> "CameraIntrinsics":
        return cls(float(width), float(width), width / 2.0, height / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @classmethod
    def from_array(cls, a) -> "CameraIntrinsics":
        return cls(*[float(x) for x in a])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image downsampled by ``factor`` (pixel edges stay aligned)."""
        return CameraIntrinsics(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor)


def transform_point(pose: RigidPose, v) -> np.ndarray:
    """R v + t, for a single point or an (n, 3) array."""
    v = np.asarray(v, dtype=np.float64)
    return v @ pose.R.T + pose.t


def project_point(cam: CameraIntrinsics, v_cam, z_near: float = Z_NEAR):
    """Pinhole projection. Returns ``(uv, ok)``; points with z <= z_near are culled (ok False)."""
    v = np.atleast_2d(np.asarray(v_cam, dtype=np.float64))
    z = v[:, 2]
    ok = z > z_near
    zs = np.where(ok, z, 1.0)
    uv = np.stack([cam.fx * v[:, 0] / zs + cam.cx, cam.fy * v[:, 1] / zs + cam.cy], axis=1)
    uv[~ok] = np.nan
    if np.ndim(v_cam) == 1:
        return uv[0], bool(ok[0])
    return uv, ok


def projection_jacobian(cam: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """d(uv)/dX for camera points X (n, 3) -> (n, 2, 3)."""
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    J = np.zeros((X.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    return J


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(n: np.ndarray) -> np.ndarray:
    """SH basis values for unit normals (..., 3) -> (..., 9)."""
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y, SH_C1 * z, SH_C1 * x,
        SH_C2 * x * y, SH_C2 * y * z, SH_C3 * (3 * z * z - 1), SH_C2 * x * z, SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_grad(n: np.ndarray) -> np.ndarray:
    """d B_j / d n for normals (m, 3) -> (m, 9, 3) (treating n as unconstrained)."""
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    g = np.zeros((n.shape[0], 9, 3))
    g[:, 1, 1] = SH_C1
    g[:, 2, 2] = SH_C1
    g[:, 3, 0] = SH_C1
    g[:, 4, 0] = SH_C2 * y
    g[:, 4, 1] = SH_C2 * x
    g[:, 5, 1] = SH_C2 * z
    g[:, 5, 2] = SH_C2 * y
    g[:, 6, 2] = SH_C3 * 6 * z
    g[:, 7, 0] = SH_C2 * z
    g[:, 7, 2] = SH_C2 * x
    g[:, 8, 0] = SH_C4 * 2 * x
    g[:, 8, 1] = -SH_C4 * 2 * y
    return g


def sh_shade(normal, albedo, gamma) -> np.ndarray:
    """Lambertian SH shading: albedo_c * sum_j gamma[c, j] B_j(normal). Unclamped."""
    gamma = np.asarray(gamma, dtype=np.float64).reshape(3, 9)
    normal = np.asarray(normal, dtype=np.float64)
    irradiance = sh_basis(normal) @ gamma.T
    return np.asarray(albedo, dtype=np.float64) * irradiance


def ambient_gamma(level: float = 1.0) -> np.ndarray:
    """Illumination whose irradiance is ``level`` for every normal."""
    g = np.zeros((3, 9))
    g[:, 0] = level / SH_C0
    return g


# ---------------------------------------------------------------------------
# frames and pyramids


@dataclass
class Frame:
    rgb: np.ndarray  # (height, width, 3), linear color

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("frame must be height x width x 3")
        if not np.all(np.isfinite(rgb)):
            raise ValueError("frame has non-finite values")
        self.rgb = np.clip(rgb, 0.0, 1.0)

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


def build_pyramid(frame: Frame, levels: int) -> list[Frame]:
    """Index 0 is full resolution; each next entry is a 2x2 box-filter downsample."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    f = 2 ** (levels - 1)
    if frame.width % f or frame.height % f:
        raise ValueError(f"frame size {frame.width}x{frame.height} not divisible by {f}")
    out = [frame]
    img = frame.rgb
    for _ in range(levels - 1):
        img = 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])
        out.append(Frame(img))
    return out


def _keys(s):
    a = -0.5
    s = np.abs(s)
    return np.where(s <= 1, ((a + 2) * s - (a + 3)) * s * s + 1,
                    np.where(s < 2, ((a * s - 5 * a) * s + 8 * a) * s - 4 * a, 0.0))


def _keys_deriv(s):
    a = -0.5
    sg = np.sign(s)
    s = np.abs(s)
    d = np.where(s <= 1, (3 * (a + 2) * s - 2 * (a + 3)) * s,
                 np.where(s < 2, (3 * a * s - 10 * a) * s + 8 * a, 0.0))
    return sg * d


def sample_image(img: np.ndarray, uv: np.ndarray, with_grad: bool = False):
    """Cubic-convolution (Keys, a=-0.5) sample of an (h, w, c) image at continuous coords.

    The interpolant is C1 and reproduces pixel values at pixel centers; its gradient
    there is the central difference. Borders extend the edge pixels.
    """
    h, w, c = img.shape
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    ix = np.floor(x).astype(np.int64)
    iy = np.floor(y).astype(np.int64)
    fx = x - ix
    fy = y - iy
    offs = np.arange(-1, 3)
    wx = _keys(fx[:, None] - offs[None, :])
    wy = _keys(fy[:, None] - offs[None, :])
    cols = np.clip(ix[:, None] + offs[None, :], 0, w - 1)
    rows = np.clip(iy[:, None] + offs[None, :], 0, h - 1)
    patch = img[rows[:, :, None], cols[:, None, :]]  # (n, 4, 4, c)
    val = np.einsum("nl,nk,nlkc->nc", wy, wx, patch)
    if not with_grad:
        return val
    dwx = _keys_deriv(fx[:, None] - offs[None, :])
    dwy = _keys_deriv(fy[:, None] - offs[None, :])
    gx = np.einsum("nl,nk,nlkc->nc", wy, dwx, patch)
    gy = np.einsum("nl,nk,nlkc->nc", dwy, wx, patch)
    return val, np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------------------
# mesh helpers


@lru_cache(maxsize=16)
def _incidence(triangles_bytes: bytes, n_vertices: int) -> sp.csr_matrix:
    tris = np.frombuffer(triangles_bytes, dtype=np.int64).reshape(-1, 3)
    nt = tris.shape[0]
    rows = tris.ravel()
    cols = np.repeat(np.arange(nt), 3)
    return sp.csr_matrix((np.ones(3 * nt), (rows, cols)), shape=(n_vertices, nt))


def vertex_incidence(triangles: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Sparse (n_vertices, n_triangles) 0/1 matrix of vertex-triangle membership."""
    return _incidence(np.ascontiguousarray(triangles, dtype=np.int64).tobytes(), n_vertices)


def face_normals(verts: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unnormalized (area-weighted) face normals."""
    e1 = verts[triangles[:, 1]] - verts[triangles[:, 0]]
    e2 = verts[triangles[:, 2]] - verts[triangles[:, 0]]
    return np.cross(e1, e2)


def vertex_normals(verts: np.ndarray, triangles: np.ndarray):
    """Area-weighted vertex normals. Returns ``(unit_normals, raw_sums)``."""
    raw = vertex_incidence(triangles, verts.shape[0]) @ face_normals(verts, triangles)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    return raw / np.where(norm > 0, norm, 1.0), raw


# ---------------------------------------------------------------------------
# rasterization


@dataclass
class RasterOutput:
    color: np.ndarray  # (h, w, 3) synthesized color, unclamped, 0 outside V
    depth: np.ndarray  # (h, w), inf outside V
    tri_id: np.ndarray  # (h, w), -1 outside V
    bary: np.ndarray  # (h, w, 3), perspective-correct, 0 outside V
    visible: np.ndarray  # (m, 2) integer (x, y) of pixels in V, row-major order
    n_degenerate: int = 0
    n_culled_near: int = 0
    normals: np.ndarray | None = None  # (m, 3) camera-space normals of V
    albedo: np.ndarray | None = None  # (m, 3) interpolated albedo of V

    @property
    def width(self) -> int:
        return self.tri_id.shape[1]

    @property
    def height(self) -> int:
        return self.tri_id.shape[0]

    @property
    def n_visible(self) -> int:
        return self.visible.shape[0]

    def visible_tri(self) -> np.ndarray:
        return self.tri_id[self.visible[:, 1], self.visible[:, 0]]

    def visible_bary(self) -> np.ndarray:
        return self.bary[self.visible[:, 1], self.visible[:, 0]]

    def mask(self) -> np.ndarray:
        return self.tri_id >= 0


def rasterize_mesh(verts_cam: np.ndarray, triangles: np.ndarray, cam: CameraIntrinsics,
                   width: int, height: int, z_near: float = Z_NEAR, cull_back: bool = True):
    """Z-buffered rasterization of camera-space triangles.

    Returns ``(tri_id, bary, depth, n_degenerate, n_culled_near)``. Coverage is tested
    at pixel centers with closed edges; depth ties resolve to the lower triangle index.
    Front faces have negative signed area in image coordinates (y down).
    """
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)

    z = verts_cam[:, 2]
    okv = z > z_near
    ok_tri = okv[triangles].all(axis=1)
    n_near = int((~ok_tri).sum())
    zs = np.where(okv, z, 1.0)
    p = np.stack([cam.fx * verts_cam[:, 0] / zs + cam.cx, cam.fy * verts_cam[:, 1] / zs + cam.cy], axis=1)

    tidx = np.nonzero(ok_tri)[0]
    P = p[triangles[tidx]]  # (t, 3, 2)
    area2 = ((P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1])
             - (P[:, 1, 1] - P[:, 0, 1]) * (P[:, 2, 0] - P[:, 0, 0]))
    degenerate = np.abs(area2) < 1e-12
    n_deg = int(degenerate.sum())
    keep = ~degenerate
    if cull_back:
        keep &= area2 < 0
    tidx, P, area2 = tidx[keep], P[keep], area2[keep]
    if len(tidx) == 0:
        return tri_id, bary, depth, n_deg, n_near

    xmin = np.maximum(np.ceil(P[:, :, 0].min(axis=1) - 0.5), 0).astype(np.int64)
    xmax = np.minimum(np.floor(P[:, :, 0].max(axis=1) - 0.5), width - 1).astype(np.int64)
    ymin = np.maximum(np.ceil(P[:, :, 1].min(axis=1) - 0.5), 0).astype(np.int64)
    ymax = np.minimum(np.floor(P[:, :, 1].max(axis=1) - 0.5), height - 1).astype(np.int64)
    nx = np.maximum(xmax - xmin + 1, 0)
    ny = np.maximum(ymax - ymin + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return tri_id, bary, depth, n_deg, n_near
    owner = np.repeat(np.arange(len(tidx)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    px = xmin[owner] + local % nx[owner]
    py = ymin[owner] + local // nx[owner]
    cx = px + 0.5
    cy = py + 0.5

    Q = P[owner]
    a = area2[owner]

    def edge(i, j):
        return ((Q[:, i, 0] - cx) * (Q[:, j, 1] - cy) - (Q[:, i, 1] - cy) * (Q[:, j, 0] - cx)) / a

    l0 = edge(1, 2)
    l1 = edge(2, 0)
    l2 = edge(0, 1)
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    owner, px, py = owner[inside], px[inside], py[inside]
    lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
    tz = z[triangles[tidx[owner]]]
    w = lam / tz
    s = w.sum(axis=1)
    b = w / s[:, None]
    d = 1.0 / s
    tri = tidx[owner]
    pix = py * width + px
    order = np.lexsort((tri, d, pix))
    pix_s = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    sel = order[first]
    tri_id[py[sel], px[sel]] = tri[sel]
    bary[py[sel], px[sel]] = b[sel]
    depth[py[sel], px[sel]] = d[sel]
    return tri_id, bary, depth, n_deg, n_near


def shade_points(tri: np.ndarray, b: np.ndarray, triangles: np.ndarray, unit_vn: np.ndarray,
                 albedo_v: np.ndarray, R: np.ndarray, gamma: np.ndarray):
    """Shade surface points given by (triangle, barycentric) pairs.

    Returns ``(color, normal_cam, albedo)`` with color unclamped.
    """
    vid = triangles[tri]  # (m, 3)
    m = np.einsum("mk,mkc->mc", b, unit_vn[vid])
    n = m @ R.T
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    rho = np.einsum("mk,mkc->mc", b, albedo_v[vid])
    color = sh_shade(n, rho, gamma)
    return color, n, rho


def rasterize(prior, params, width: int, height: int, cam: CameraIntrinsics | None = None,
              z_near: float = Z_NEAR) -> RasterOutput:
    """Render the face model for ``params`` (alpha, beta, delta, gamma, pose, kappa).

    ``cam`` overrides ``params.kappa`` (used for pyramid levels).
    """
    from .model import eval_albedo, eval_geometry

    cam = cam if cam is not None else params.kappa
    verts = eval_geometry(prior, params.alpha, params.delta).reshape(-1, 3)
    verts_cam = transform_point(params.pose, verts)
    tri_id, bary, depth, n_deg, n_near = rasterize_mesh(
        verts_cam, prior.triangles, cam, width, height, z_near)
    ys, xs = np.nonzero(tri_id >= 0)
    visible = np.stack([xs, ys], axis=1)
    color = np.zeros((height, width, 3))
    normals = albedo = None
    if len(visible):
        unit_vn, _ = vertex_normals(verts, prior.triangles)
        albedo_v = eval_albedo(prior, params.beta).reshape(-1, 3)
        c, normals, albedo = shade_points(tri_id[ys, xs], bary[ys, xs], prior.triangles, unit_vn,
                                          albedo_v, params.pose.R, params.gamma)
        color[ys, xs] = c
    return RasterOutput(color=color, depth=depth, tri_id=tri_id, bary=bary, visible=visible,
                        n_degenerate=n_deg, n_culled_near=n_near, normals=normals, albedo=albedo)
