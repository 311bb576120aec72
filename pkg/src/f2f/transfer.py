"""Expression transfer between identities, solved in expression-coefficient space.

Each source triangle contributes a 3x3 deformation gradient (neutral to
deformed). The target expression is the coefficient vector whose target edges
best reproduce those gradients applied to the target's neutral edges. Target
edges are affine in the coefficients, so the problem is a small linear least
squares system ``A delta_T = b`` whose matrix depends only on the target identity
and the expression basis. Its pseudo-inverse is computed once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .model import FacePrior, eval_geometry

log = logging.getLogger(__name__)

XFER_MAGIC = "F2FXFER1"
DEGENERATE_AREA = 1e-12
PINV_RTOL = 1e-10  # singular values below this * sigma_max are dropped
RANK_RTOL = 1e-8  # build fails if sigma_min <= this * sigma_max


class RankDeficiencyError(ValueError):
    pass


def _edges(verts: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Two spanning edges per triangle, shape (F, 3, 2) with edges as columns."""
    v = verts.reshape(-1, 3)
    v0 = v[triangles[:, 0]]
    return np.stack([v[triangles[:, 1]] - v0, v[triangles[:, 2]] - v0], axis=2)


def _frames(verts: np.ndarray, triangles: np.ndarray):
    """Per-triangle frames [e1 e2 n/sqrt|n|] and triangle areas."""
    E = _edges(verts, triangles)
    n = np.cross(E[:, :, 0], E[:, :, 1])
    nn = np.linalg.norm(n, axis=1)
    third = n / np.sqrt(np.where(nn > 0, nn, 1.0))[:, None]
    return np.concatenate([E, third[:, :, None]], axis=2), 0.5 * nn


def _inverse_frames(V: np.ndarray, area: np.ndarray):
    bad = area < DEGENERATE_AREA
    Vinv = np.empty_like(V)
    Vinv[bad] = np.eye(3)
    if np.any(~bad):
        Vinv[~bad] = np.linalg.inv(V[~bad])
    return Vinv, bad


def _gradients(Vinv: np.ndarray, bad: np.ndarray, deformed: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    Vh, _ = _frames(deformed, triangles)
    A = Vh @ Vinv
    A[bad] = np.eye(3)
    return A


def deformation_gradients(prior: FacePrior, alpha_S, delta_N_S, delta_S) -> np.ndarray:
    """Per-triangle 3x3 maps taking neutral source frames to deformed source frames.

    Degenerate neutral triangles (area below 1e-12) get the identity.
    """
    neutral = eval_geometry(prior, alpha_S, delta_N_S)
    V, area = _frames(neutral, prior.triangles)
    Vinv, bad = _inverse_frames(V, area)
    if bad.any():
        log.warning("%d degenerate neutral triangles mapped to identity", int(bad.sum()))
    return _gradients(Vinv, bad, eval_geometry(prior, alpha_S, delta_S), prior.triangles)


def _basis_edges(prior: FacePrior) -> np.ndarray:
    """Edge vectors of every expression basis column, rows ordered (triangle, edge, coord)."""
    tri = prior.triangles
    B = prior.basis_exp.reshape(-1, 3, prior.d_exp)  # (n, 3, d)
    b0 = B[tri[:, 0]]
    e1 = B[tri[:, 1]] - b0  # (F, 3, d)
    e2 = B[tri[:, 2]] - b0
    return np.stack([e1, e2], axis=1).reshape(-1, prior.d_exp)


@dataclass(frozen=True, eq=False)
class TransferOperator:
    A: np.ndarray  # (6F, d_exp)
    singular_values: np.ndarray
    pinv: np.ndarray  # (d_exp, 6F)
    base_edges: np.ndarray  # (F, 2, 3) target edges at delta = 0
    neutral_target_edges: np.ndarray  # (F, 3, 2) target edges at delta_N_T
    source_frames_inv: np.ndarray  # (F, 3, 3) inverse neutral source frames
    source_degenerate: np.ndarray  # (F,) bool
    alpha_S: np.ndarray
    alpha_T: np.ndarray
    delta_N_S: np.ndarray
    delta_N_T: np.ndarray

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            getattr(self, name).setflags(write=False)

    @property
    def n_triangles(self) -> int:
        return self.base_edges.shape[0]

    @property
    def condition(self) -> float:
        s = self.singular_values
        return float(s[0] / s[-1])

    def rhs(self, prior: FacePrior, delta_S) -> np.ndarray:
        """b = vec(A_i(delta_S) * neutral target edges) - target edges at delta = 0."""
        G = _gradients(self.source_frames_inv, self.source_degenerate,
                       eval_geometry(prior, self.alpha_S, delta_S), prior.triangles)
        mapped = G @ self.neutral_target_edges  # (F, 3, 2)
        return (mapped.transpose(0, 2, 1) - self.base_edges).ravel()


def build_transfer_operator(prior: FacePrior, alpha_T, delta_N_T, alpha_S=None, delta_N_S=None) -> TransferOperator:
    """Assemble A from the expression basis edges and factor it once.

    The source identity and neutral expression default to the target's (self-transfer).
    """
    alpha_T = np.asarray(alpha_T, dtype=np.float64).copy()
    delta_N_T = np.asarray(delta_N_T, dtype=np.float64).copy()
    alpha_S = alpha_T.copy() if alpha_S is None else np.asarray(alpha_S, dtype=np.float64).copy()
    delta_N_S = delta_N_T.copy() if delta_N_S is None else np.asarray(delta_N_S, dtype=np.float64).copy()
    tri = prior.triangles
    A = _basis_edges(prior)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-1] <= RANK_RTOL * s[0]:
        weak = np.nonzero(s <= RANK_RTOL * s[0])[0]
        dirs = "; ".join(np.array2string(Vt[i], precision=3, max_line_width=10_000) for i in weak)
        raise RankDeficiencyError(
            f"transfer matrix rank {len(s) - len(weak)} < {len(s)}; deficient coefficient directions: {dirs}")
    keep = s > PINV_RTOL * s[0]
    pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    base = _edges(eval_geometry(prior, alpha_T, np.zeros(prior.d_exp)), tri).transpose(0, 2, 1)
    neutral_T = _edges(eval_geometry(prior, alpha_T, delta_N_T), tri)
    V, area = _frames(eval_geometry(prior, alpha_S, delta_N_S), tri)
    Vinv, bad = _inverse_frames(V, area)
    if bad.any():
        log.warning("%d degenerate neutral source triangles mapped to identity", int(bad.sum()))
    return TransferOperator(A, s, pinv, np.ascontiguousarray(base), neutral_T, Vinv, bad,
                            alpha_S, alpha_T, delta_N_S, delta_N_T)


def transfer_expression(op: TransferOperator, prior: FacePrior, delta_S) -> np.ndarray:
    """Target coefficients minimizing ||A delta_T - b(delta_S)||^2 (no smoothness term)."""
    return op.pinv @ op.rhs(prior, delta_S)


def save_operator(op: TransferOperator, path) -> None:
    F = op.n_triangles
    d = op.A.shape[1]
    write_container(path, XFER_MAGIC, [F, d, len(op.alpha_S)], [
        op.A, op.singular_values, op.pinv, op.base_edges, op.neutral_target_edges,
        op.source_frames_inv, op.source_degenerate.astype(np.float64),
        op.alpha_S, op.alpha_T, op.delta_N_S, op.delta_N_T,
    ])


def _xfer_shapes(dims):
    F, d, did = dims
    return [(6 * F, d), (d,), (d, 6 * F), (F, 2, 3), (F, 3, 2), (F, 3, 3), (F,),
            (did,), (did,), (d,), (d,)]


def load_operator(path) -> TransferOperator:
    _, arr = read_container(path, XFER_MAGIC, _xfer_shapes)
    arr[6] = arr[6] != 0
    return TransferOperator(*arr)
