"""Human and object motion fields.

The human side moves each point by its nearest canonical vertex's skinning
matrix plus a learned spatiotemporal offset. The object side is rigid: the
per-point skinning matrices are averaged into one affine transform (not
re-orthonormalized; the trainable residual absorbs the drift), then a
per-clip (or per-frame) residual rotation/translation is applied.

The correspondence loss compares, per object point, the skinning matrix of
its canonical-bound vertex against a softly assigned matrix around its
posed-space position; a hard nearest-vertex assignment is piecewise constant
in the residual and carries no usable gradient, so the soft k-NN form (k=8,
temperature tau in squared meters) is the optimizable variant, with the hard
form retained for evaluation.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from gscompose import quat
from gscompose.body import (
    PoseParams,
    SkinnedBody,
    forward_kinematics,
    lbs_deform,
    nearest_vertices,
    weights_to_matrices,
)
from gscompose.errors import RejectedInputError


@dataclass
class ObjectBinding:
    """Hard nearest-canonical-vertex binding of M points to a body.

    Computed once in canonical composition space; arrays are frozen.
    """

    vertex_indices: np.ndarray  # (M,)
    weight_rows: np.ndarray     # (M, K) cached canonical LBS weight rows

    def __post_init__(self):
        self.vertex_indices = np.asarray(self.vertex_indices, dtype=int)
        self.weight_rows = np.asarray(self.weight_rows, dtype=float)
        self.vertex_indices.setflags(write=False)
        self.weight_rows.setflags(write=False)

    @property
    def count(self) -> int:
        return self.vertex_indices.shape[0]

    def matrices(self, joint_transforms) -> np.ndarray:
        """(M, 4, 4) per-point skinning matrices at the given joint transforms."""
        return weights_to_matrices(self.weight_rows, joint_transforms)


def bind_points(points, body: SkinnedBody) -> ObjectBinding:
    """Bind points to their single nearest canonical vertex (k = 1)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise RejectedInputError("cannot bind an empty point set")
    idx, _ = nearest_vertices(pts, body.template_vertices, k=1)
    idx = idx[:, 0]
    return ObjectBinding(idx, body.skin_weights[idx].copy())


@dataclass
class ResidualTransform:
    """Trainable rigid residual applied after the averaged motion field.

    One (R, T) pair shared across the clip by default; `per_frame` switches
    to one pair per frame. R is kept unit-norm by the optimizer after every
    step; `at(frame)` normalizes defensively.
    """

    rotation: np.ndarray     # (4,) or (F, 4) raw quaternion(s)
    translation: np.ndarray  # (3,) or (F, 3)
    per_frame: bool = False

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)

    @classmethod
    def identity(cls, frames: int | None = None) -> "ResidualTransform":
        if frames is None:
            return cls(quat.IDENTITY.copy(), np.zeros(3))
        return cls(np.tile(quat.IDENTITY, (frames, 1)), np.zeros((frames, 3)), per_frame=True)

    def at(self, frame: int = 0):
        if self.per_frame:
            return quat.normalize(self.rotation[frame]), self.translation[frame]
        return quat.normalize(self.rotation), self.translation

    def raw_at(self, frame: int = 0):
        if self.per_frame:
            return self.rotation[frame], self.translation[frame]
        return self.rotation, self.translation


def human_deform(points, binding: ObjectBinding, body: SkinnedBody, pose: PoseParams,
                 field=None, t: float = 0.0) -> np.ndarray:
    """Per-point nearest-vertex skinning plus an optional learned offset.

    With a zero-initialized field (or none) this is pure per-point LBS.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if binding is None:
        raise RejectedInputError("points are unbound; call bind_points first")
    if binding.count != pts.shape[0]:
        raise RejectedInputError(
            f"binding covers {binding.count} points, got {pts.shape[0]}"
        )
    g = forward_kinematics(body, pose)
    m = binding.matrices(g)
    out = np.einsum("nab,nb->na", m[:, :3, :3], pts) + m[:, :3, 3] + pose.root_translation
    if field is not None:
        out = out + field.offsets(pts, t)[:, :3]
    return out


def object_base_transform(binding: ObjectBinding, body: SkinnedBody, pose: PoseParams,
                          joint_transforms=None) -> np.ndarray:
    """Entrywise mean of the M per-point skinning matrices (4x4 affine).

    Deliberately not re-orthonormalized; rigidity deviation is a reported
    diagnostic, not an error.
    """
    if binding.count < 1:
        raise RejectedInputError("binding is empty")
    g = joint_transforms if joint_transforms is not None else forward_kinematics(body, pose)
    mean_row = binding.weight_rows.mean(axis=0)
    return weights_to_matrices(mean_row[None, :], g)[0]


def rigidity_deviation(mat) -> float:
    """||R^T R - I||_F of the linear block; 0 for an exact rigid transform."""
    r = np.asarray(mat, dtype=float)[:3, :3]
    return float(np.linalg.norm(r.T @ r - np.eye(3)))


def polar_rotation(m3) -> np.ndarray:
    """Nearest rotation to a 3x3 linear map (polar factor, det +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m3, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def apply_residual(points, residual: ResidualTransform, frame: int = 0) -> np.ndarray:
    """x' = R x + T (column convention)."""
    q, t = residual.at(frame)
    return np.atleast_2d(np.asarray(points, dtype=float)) @ quat.to_matrix(q).T + t


def residual_vjp(points, residual: ResidualTransform, grad_out, frame: int = 0):
    """Pull dL/d(output points) back to the raw (R, T) of this frame's pair."""
    q_raw, _ = residual.raw_at(frame)
    dq, _ = quat.rotate_vjp(q_raw, points, grad_out)
    dt = np.asarray(grad_out, dtype=float).sum(axis=0)
    return dq, dt


@dataclass
class PosedFrame:
    """Per-frame cache: joint transforms, posed vertices, posed-space index."""

    body: SkinnedBody
    pose: PoseParams
    joint_transforms: np.ndarray
    posed_vertices: np.ndarray

    @classmethod
    def build(cls, body: SkinnedBody, pose: PoseParams) -> "PosedFrame":
        return cls(body, pose, forward_kinematics(body, pose), lbs_deform(body, pose))

    def vertex_matrices(self, vertex_indices) -> np.ndarray:
        return weights_to_matrices(self.body.skin_weights[vertex_indices], self.joint_transforms)


def correspondence_loss(binding: ObjectBinding, frame: PosedFrame, points_t,
                        tau: float = 0.01, k: int = 8, hard: bool = False):
    """Discrepancy between canonical-bound and posed-space skinning matrices.

    points_t are the object points already moved to this frame. Returns
    (loss, dloss/dpoints_t); the per-vertex matrices are constants of the
    pose, so gradients flow only through the soft assignment distances.
    With hard=True the nearest-vertex matrix is used and the gradient is
    zero (evaluation only).
    """
    if tau <= 0:
        raise RejectedInputError(f"temperature tau must be > 0, got {tau}")
    pts = np.atleast_2d(np.asarray(points_t, dtype=float))
    m = pts.shape[0]
    if binding.count != m:
        raise RejectedInputError(f"binding covers {binding.count} points, got {m}")
    g_c = binding.matrices(frame.joint_transforms)[:, :3, :]  # (M, 3, 4)

    kk = min(k, frame.body.vertex_count) if not hard else 1
    idx, dist = nearest_vertices(pts, frame.posed_vertices, k=kk)
    cand = frame.vertex_matrices(idx.ravel()).reshape(m, kk, 4, 4)[:, :, :3, :]

    if hard:
        g_o = cand[:, 0]
        diff = g_c - g_o
        return float(np.mean(np.sum(diff * diff, axis=(1, 2)))), np.zeros_like(pts)

    d2 = dist**2
    logits = -d2 / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    # deviation form: exact zero diff when every candidate equals the bound
    # matrix (e.g. the rest pose), not zero-within-rounding
    eye = np.eye(4)[:3, :]
    g_o = eye + np.einsum("mk,mkab->mab", w, cand - eye)
    diff = g_c - g_o
    loss = float(np.mean(np.sum(diff * diff, axis=(1, 2))))

    # dL/dw_j = -(2/M) <diff_i, cand_ij - I>, then softmax and distance chains
    dw = -(2.0 / m) * np.einsum("mab,mkab->mk", diff, cand - eye)
    inner = np.sum(dw * w, axis=1, keepdims=True)
    dd2 = -(w * (dw - inner)) / tau
    dpts = 2.0 * np.einsum("mk,mka->ma", dd2, pts[:, None, :] - frame.posed_vertices[idx])
    return loss, dpts


def penetration_fraction(object_points, posed_vertices, faces) -> float:
    """Share of points with generalized winding number > 1/2 w.r.t. the mesh."""
    pts = np.atleast_2d(np.asarray(object_points, dtype=float))
    verts = np.asarray(posed_vertices, dtype=float)
    tris = verts[np.asarray(faces, dtype=int)]  # (F, 3, 3)
    edge1 = tris[:, 1] - tris[:, 0]
    edge2 = tris[:, 2] - tris[:, 0]
    area2 = np.linalg.norm(np.cross(edge1, edge2), axis=1)
    good = area2 > 1e-14
    if not good.all():
        warnings.warn(f"skipping {int((~good).sum())} degenerate faces", stacklevel=2)
        tris = tris[good]
    inside = 0
    for p in pts:
        a = tris[:, 0] - p
        b = tris[:, 1] - p
        c = tris[:, 2] - p
        la = np.linalg.norm(a, axis=1)
        lb = np.linalg.norm(b, axis=1)
        lc = np.linalg.norm(c, axis=1)
        det = np.einsum("fa,fa->f", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("fa,fa->f", a, b) * lc
            + np.einsum("fa,fa->f", b, c) * la
            + np.einsum("fa,fa->f", c, a) * lb
        )
        omega = 2.0 * np.arctan2(det, denom)
        if omega.sum() / (4.0 * np.pi) > 0.5:
            inside += 1
    return inside / pts.shape[0]
