"""Generic skinned parametric body (SMPL-X-compatible shape).

Blend shapes, forward kinematics, linear blend skinning, per-vertex skinning
matrices, and exact nearest-vertex queries. Real SMPL-X data drops in by
mapping its fields onto the skeleton asset format documented at the bottom
of this module (v_template -> template_vertices, kintree parents ->
joint_parents, J -> joint_rest_positions, lbs_weights -> skin_weights
triplets, shapedirs/exprdirs/posedirs -> the optional bases).
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from gscompose import quat
from gscompose.errors import FormatError, RejectedInputError


@dataclass
class SkinnedBody:
    template_vertices: np.ndarray        # (V, 3)
    faces: np.ndarray                    # (F, 3) int
    joint_parents: np.ndarray            # (K,) int, parents[0] == -1
    joint_rest_positions: np.ndarray     # (K, 3)
    skin_weights: np.ndarray             # (V, K) row-stochastic
    shape_basis: np.ndarray | None = None       # (V, 3, |beta|)
    expression_basis: np.ndarray | None = None  # (V, 3, |phi|)
    pose_basis: np.ndarray | None = None        # (V, 3, 9*(K-1))

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=int)
        self.joint_parents = np.asarray(self.joint_parents, dtype=int)
        self.joint_rest_positions = np.asarray(self.joint_rest_positions, dtype=float)
        self.skin_weights = np.asarray(self.skin_weights, dtype=float)
        v, k = self.vertex_count, self.joint_count
        if self.skin_weights.shape != (v, k):
            raise RejectedInputError(f"skin_weights shape {self.skin_weights.shape} != ({v}, {k})")
        if self.joint_parents[0] != -1:
            raise RejectedInputError("joint 0 must be the root (parent -1)")
        if np.any(self.joint_parents[1:] >= np.arange(1, k)):
            raise RejectedInputError("joint parents must be topologically ordered (parent < child)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise RejectedInputError("faces index out-of-range vertices")
        if np.any(self.skin_weights < -1e-12):
            raise RejectedInputError("skin weights must be nonnegative")
        sums = self.skin_weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise RejectedInputError("skin-weight rows must sum to 1 within 1e-5")

    @property
    def vertex_count(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joint_parents.shape[0]


@dataclass
class PoseParams:
    joint_rotations: np.ndarray                 # (K, 3) axis-angle, radians
    root_translation: np.ndarray = None         # (3,)
    betas: np.ndarray | None = None
    expressions: np.ndarray | None = None

    def __post_init__(self):
        self.joint_rotations = np.atleast_2d(np.asarray(self.joint_rotations, dtype=float))
        if self.root_translation is None:
            self.root_translation = np.zeros(3)
        self.root_translation = np.asarray(self.root_translation, dtype=float)
        if not np.all(np.isfinite(self.joint_rotations)) or not np.all(np.isfinite(self.root_translation)):
            raise RejectedInputError("pose parameters must be finite")

    @classmethod
    def rest(cls, body: SkinnedBody) -> "PoseParams":
        return cls(np.zeros((body.joint_count, 3)))


@dataclass
class MotionSequence:
    fps: float
    frames: list  # of PoseParams

    def __len__(self):
        return len(self.frames)

    def time_of(self, frame: int) -> float:
        """Frame index normalized to [0, 1] over the clip."""
        n = len(self.frames)
        return 0.0 if n <= 1 else frame / (n - 1)


def _check_pose(body: SkinnedBody, pose: PoseParams):
    if pose.joint_rotations.shape != (body.joint_count, 3):
        raise RejectedInputError(
            f"pose has {pose.joint_rotations.shape[0]} joints, body has {body.joint_count}"
        )
    for name, coeffs, basis in [
        ("betas", pose.betas, body.shape_basis),
        ("expressions", pose.expressions, body.expression_basis),
    ]:
        if coeffs is not None:
            if basis is None:
                raise RejectedInputError(f"pose provides {name} but the body has no such basis")
            if np.asarray(coeffs).shape[0] != basis.shape[2]:
                raise RejectedInputError(
                    f"{name} length {np.asarray(coeffs).shape[0]} != basis dim {basis.shape[2]}"
                )


def forward_kinematics(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """Rest-relative joint transforms G_k = world_k @ inv(rest_world_k), (K,4,4).

    Each G_k rigidly maps canonical-space points into the posed space; the
    root translation is *not* folded in (callers add it to positions).
    """
    _check_pose(body, pose)
    k = body.joint_count
    rots = quat.axis_angle_matrix(pose.joint_rotations)
    rest = body.joint_rest_positions
    world_r = np.empty((k, 3, 3))
    world_t = np.empty((k, 3))
    for j in range(k):
        p = body.joint_parents[j]
        rel = rest[j] - (rest[p] if p >= 0 else 0.0)
        if p < 0:
            world_r[j] = rots[j]
            world_t[j] = rel
        else:
            world_r[j] = world_r[p] @ rots[j]
            world_t[j] = world_r[p] @ rel + world_t[p]
    g = np.zeros((k, 4, 4))
    g[:, :3, :3] = world_r
    g[:, :3, 3] = world_t - np.einsum("kab,kb->ka", world_r, rest)
    g[:, 3, 3] = 1.0
    return g


def blend_shape_offsets(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """B_s(beta) + B_e(phi) + B_p(theta) per vertex, (V, 3)."""
    out = np.zeros((body.vertex_count, 3))
    if body.shape_basis is not None and pose.betas is not None:
        out += body.shape_basis @ np.asarray(pose.betas, dtype=float)
    if body.expression_basis is not None and pose.expressions is not None:
        out += body.expression_basis @ np.asarray(pose.expressions, dtype=float)
    if body.pose_basis is not None:
        # linear in the flattened (R(theta_k) - I) features over non-root joints
        feats = (quat.axis_angle_matrix(pose.joint_rotations[1:]) - np.eye(3)).ravel()
        if body.pose_basis.shape[2] != feats.size:
            raise RejectedInputError(
                f"pose basis dim {body.pose_basis.shape[2]} != 9*(K-1) = {feats.size}"
            )
        out += body.pose_basis @ feats
    return out


def lbs_deform(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """Posed vertices: sum_k w_k G_k (T_bar + blend offsets) + root translation."""
    g = forward_kinematics(body, pose)
    rest_pts = body.template_vertices + blend_shape_offsets(body, pose)
    m_rot = np.einsum("vk,kab->vab", body.skin_weights, g[:, :3, :3])
    m_t = body.skin_weights @ g[:, :3, 3]
    return np.einsum("vab,vb->va", m_rot, rest_pts) + m_t + pose.root_translation


def vertex_lbs_matrix(body: SkinnedBody, pose: PoseParams, vertex_index: int) -> np.ndarray:
    """The 4x4 affine sum_k w_k G_k for one vertex; last row exactly (0,0,0,1)."""
    if not 0 <= vertex_index < body.vertex_count:
        raise RejectedInputError(f"vertex index {vertex_index} out of range")
    g = forward_kinematics(body, pose)
    return weights_to_matrices(body.skin_weights[vertex_index][None, :], g)[0]


def weights_to_matrices(weight_rows: np.ndarray, joint_transforms: np.ndarray) -> np.ndarray:
    """Blend (N, K) weight rows against (K, 4, 4) transforms; exact affine rows.

    Computed as I + sum_k w_k (G_k - I), which is algebraically identical for
    row-stochastic weights but keeps the rest pose (all G_k = I) exactly the
    identity instead of identity-within-rounding.
    """
    g = np.asarray(joint_transforms, dtype=float)
    m = np.eye(4) + np.einsum(
        "nk,kij->nij", np.asarray(weight_rows, dtype=float), g - np.eye(4)
    )
    m[:, 3, :] = (0.0, 0.0, 0.0, 1.0)
    return m


def nearest_vertices(query_points, vertices, k: int = 1, method: str = "auto"):
    """Exact k nearest vertices by Euclidean distance, ties to the smaller index.

    Returns (indices (N, k), distances (N, k)). Backed by a kd-tree with a
    brute-force fallback; both are exact.
    """
    q = np.atleast_2d(np.asarray(query_points, dtype=float))
    v = np.atleast_2d(np.asarray(vertices, dtype=float))
    if v.shape[0] == 0:
        raise RejectedInputError("empty vertex set")
    if k > v.shape[0]:
        raise RejectedInputError(f"k={k} exceeds vertex count {v.shape[0]}")
    if method == "auto":
        method = "tree" if v.shape[0] >= 64 and q.shape[0] * v.shape[0] > 200_000 else "brute"
    if method == "brute":
        d2 = np.sum((q[:, None, :] - v[None, :, :]) ** 2, axis=2)
        idx = np.argsort(d2, axis=1, kind="stable")[:, :k]  # stable: ties keep index order
        dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
        return idx, dist
    tree = cKDTree(v)
    d, _ = tree.query(q, k=k)
    d = np.atleast_2d(d.reshape(q.shape[0], k))
    idx = np.empty((q.shape[0], k), dtype=int)
    dist = np.empty((q.shape[0], k))
    for i in range(q.shape[0]):
        # re-rank all candidates within the kth radius so exact ties resolve
        # to the smaller index, matching the brute-force arithmetic
        r = d[i, -1] + 1e-9 * (1.0 + d[i, -1])
        cand = np.asarray(tree.query_ball_point(q[i], r), dtype=int)
        d2 = np.sum((v[cand] - q[i]) ** 2, axis=1)
        order = np.lexsort((cand, d2))[:k]
        idx[i] = cand[order]
        dist[i] = np.sqrt(d2[order])
    return idx, dist


# --- skeleton / motion assets (UTF-8 JSON) ---------------------------------

def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def save_skeleton(body: SkinnedBody, path):
    vv, jj = np.nonzero(body.skin_weights)
    doc = {
        "template_vertices": body.template_vertices.tolist(),
        "faces": body.faces.tolist(),
        "joint_parents": body.joint_parents.tolist(),
        "joint_rest_positions": body.joint_rest_positions.tolist(),
        "skin_weights": [[int(a), int(b), float(w)] for a, b, w in zip(vv, jj, body.skin_weights[vv, jj])],
    }
    bases = {}
    for name, arr in [("shape", body.shape_basis), ("expression", body.expression_basis),
                      ("pose", body.pose_basis)]:
        if arr is not None:
            bases[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    if bases:
        doc["bases"] = bases
    _dump_json(doc, path)


def load_skeleton(path) -> SkinnedBody:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    for key in ("template_vertices", "faces", "joint_parents", "joint_rest_positions", "skin_weights"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    verts = np.asarray(doc["template_vertices"], dtype=float)
    parents = np.asarray(doc["joint_parents"], dtype=int)
    weights = np.zeros((verts.shape[0], parents.shape[0]))
    for vi, ji, w in doc["skin_weights"]:
        weights[int(vi), int(ji)] = float(w)
    bases = {"shape": None, "expression": None, "pose": None}
    for name, spec in (doc.get("bases") or {}).items():
        if name not in bases:
            raise FormatError(f"{path}: unknown basis {name!r}")
        bases[name] = np.asarray(spec["data"], dtype=float).reshape(spec["shape"])
    faces = np.asarray(doc["faces"], dtype=int)
    return SkinnedBody(
        template_vertices=verts,
        faces=faces.reshape(-1, 3) if faces.size else np.zeros((0, 3), dtype=int),
        joint_parents=parents,
        joint_rest_positions=np.asarray(doc["joint_rest_positions"], dtype=float),
        skin_weights=weights,
        shape_basis=bases["shape"],
        expression_basis=bases["expression"],
        pose_basis=bases["pose"],
    )


def save_motion(motion: MotionSequence, path):
    doc = {
        "fps": float(motion.fps),
        "frames": [
            {"pose": f.joint_rotations.tolist(), "root_translation": f.root_translation.tolist()}
            for f in motion.frames
        ],
    }
    _dump_json(doc, path)


def load_motion(path) -> MotionSequence:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    if "fps" not in doc or "frames" not in doc:
        raise FormatError(f"{path}: motion file needs 'fps' and 'frames'")
    frames = [
        PoseParams(np.asarray(f["pose"], dtype=float),
                   np.asarray(f.get("root_translation", (0.0, 0.0, 0.0)), dtype=float))
        for f in doc["frames"]
    ]
    return MotionSequence(fps=float(doc["fps"]), frames=frames)
