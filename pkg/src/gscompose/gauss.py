"""Core 3D Gaussian data model.

Holds the attribute arrays of a splat cloud, builds covariances from
(quaternion, scale) pairs, evaluates the Gaussian kernel and real spherical
harmonics, applies the trainable global similarity placement
x' = S * (R x + T) with analytic Jacobians, and reads/writes the de-facto
3DGS binary PLY layout.

Conventions (documented here once, used everywhere):
  * column vectors; the placement is x' = S * (R x + T)
  * quaternions scalar-first (w, x, y, z)
  * SH color = 0.5 + sum_b coeff_b * basis_b with the community 3DGS
    constants, so band 0 is 0.28209479 * c0 + 0.5
  * scales live in linear units in memory; the log/pre-activation form
    exists only inside PLY files
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from gscompose import quat
from gscompose.errors import FormatError, NumericError, RejectedInputError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

QUAT_NORM_TOL = 1e-6


@dataclass
class GaussianCloud:
    """Attribute arrays of N Gaussians; the unit of rendering and optimization.

    means (N,3), rotations (N,4) unit quaternions, scales (N,3) positive,
    opacities (N,) in [0,1], sh_coeffs (N,3,B) with B = (degree+1)^2.
    """

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=float))
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=float))
        self.opacities = np.atleast_1d(np.asarray(self.opacities, dtype=float))
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=float)
        if self.sh_coeffs.ndim == 2:  # (N, 3) dc-only shorthand
            self.sh_coeffs = self.sh_coeffs[:, :, None]
        self.validate()

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[2]))) - 1

    def validate(self):
        n = self.means.shape[0]
        shapes = {
            "means": (self.means, (n, 3)),
            "rotations": (self.rotations, (n, 4)),
            "scales": (self.scales, (n, 3)),
            "opacities": (self.opacities, (n,)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise RejectedInputError(f"{name} has shape {arr.shape}, expected {want}")
        if self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[1] != 3:
            raise RejectedInputError(f"sh_coeffs has shape {self.sh_coeffs.shape}, expected ({n}, 3, B)")
        b = self.sh_coeffs.shape[2]
        deg = int(round(np.sqrt(b))) - 1
        if (deg + 1) ** 2 != b or not 0 <= deg <= 3:
            raise RejectedInputError(f"sh_coeffs band count {b} is not (d+1)^2 for d in 0..3")
        if n == 0:
            return
        norms = np.linalg.norm(self.rotations, axis=1)
        off = np.abs(norms - 1.0) > QUAT_NORM_TOL
        if off.any():
            # only renormalize when actually off: already-unit quaternions
            # keep their exact bits (identity placement stays a noop)
            warnings.warn("non-unit quaternions normalized on validate", stacklevel=2)
            self.rotations = self.rotations.copy()
            self.rotations[off] = self.rotations[off] / norms[off, None]
        if np.any(self.scales <= 0):
            raise RejectedInputError("scales must be strictly positive")
        self.opacities = np.clip(self.opacities, 0.0, 1.0)

    def colors(self, view_dir=None) -> np.ndarray:
        """Per-Gaussian RGB from SH; view-independent unless degree > 0."""
        if view_dir is None:
            return SH_C0 * self.sh_coeffs[:, :, 0] + 0.5
        basis = sh_basis(view_dir, self.sh_degree)
        return self.sh_coeffs @ basis + 0.5

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(), self.rotations.copy(), self.scales.copy(),
            self.opacities.copy(), self.sh_coeffs.copy(),
        )


def concat_clouds(*clouds: GaussianCloud) -> GaussianCloud:
    degs = {c.sh_degree for c in clouds}
    if len(degs) != 1:
        raise RejectedInputError(f"cannot concat clouds with mixed SH degrees {sorted(degs)}")
    return GaussianCloud(
        np.concatenate([c.means for c in clouds]),
        np.concatenate([c.rotations for c in clouds]),
        np.concatenate([c.scales for c in clouds]),
        np.concatenate([c.opacities for c in clouds]),
        np.concatenate([c.sh_coeffs for c in clouds]),
    )


@dataclass(frozen=True)
class Camera:
    """Pinhole look-at camera; x right, y down, z forward in camera space."""

    position: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    vertical_fov_degrees: float = 49.1
    width: int = 512
    height: int = 512
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.vertical_fov_degrees < 180.0:
            raise RejectedInputError(f"fov {self.vertical_fov_degrees} outside (0, 180)")
        if self.width < 1 or self.height < 1:
            raise RejectedInputError("image dimensions must be >= 1")
        if not self.near < self.far:
            raise RejectedInputError("near must be < far")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.vertical_fov_degrees) / 2)

    @property
    def principal(self):
        return 0.5 * self.width, 0.5 * self.height

    def world_to_camera(self):
        """(R, t) with x_cam = R @ x_world + t."""
        eye = np.asarray(self.position, dtype=float)
        fwd = np.asarray(self.look_at, dtype=float) - eye
        fn = np.linalg.norm(fwd)
        if fn < 1e-12:
            raise RejectedInputError("camera position coincides with look_at")
        fwd = fwd / fn
        s = np.cross(fwd, np.asarray(self.up, dtype=float))
        sn = np.linalg.norm(s)
        if sn < 1e-12:
            raise RejectedInputError("camera up is parallel to the view direction")
        s = s / sn
        u = np.cross(s, fwd)
        rot = np.stack([s, -u, fwd])  # y points down in camera space
        return rot, -rot @ eye

    def resized(self, width: int, height: int) -> "Camera":
        return replace(self, width=width, height=height)


def orbit_camera(center, radius: float, azimuth_degrees: float, elevation_degrees: float,
                 fov_degrees: float = 49.1, width: int = 512, height: int = 512,
                 near: float = 0.01, far: float = 100.0) -> Camera:
    """Camera on a sphere around `center`; azimuth 0 is the frontal +z view."""
    c = np.asarray(center, dtype=float)
    az = np.radians(azimuth_degrees)
    el = np.radians(elevation_degrees)
    offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return Camera(position=tuple(c + offset), look_at=tuple(c), up=(0.0, 1.0, 0.0),
                  vertical_fov_degrees=fov_degrees, width=width, height=height,
                  near=near, far=far)


def covariance_from(q, s) -> np.ndarray:
    """Sigma = R diag(s) diag(s) R^T from a unit quaternion and positive scales."""
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise RejectedInputError(f"scales must be > 0, got {s}")
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > QUAT_NORM_TOL):
        warnings.warn("quaternion normalized before covariance build", stacklevel=2)
    r = quat.to_matrix(q)
    return (r * (s * s)[..., None, :]) @ np.swapaxes(r, -1, -2)


def eval_kernel(x, mu, cov) -> float:
    """exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1]."""
    cov = np.asarray(cov, dtype=float)
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond > 1e12:
        eps = 1e-8 * np.trace(cov)
        raise NumericError(
            f"covariance is singular or ill-conditioned (cond={cond:.3g}); "
            f"consider regularizing with +{eps:.3g}*I"
        )
    d = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


def sh_basis(view_dir, degree: int) -> np.ndarray:
    """Real SH basis row of length (degree+1)^2 with 3DGS constants folded in."""
    if not 0 <= degree <= 3:
        raise RejectedInputError(f"SH degree {degree} outside 0..3")
    d = np.asarray(view_dir, dtype=float)
    d = d / np.linalg.norm(d)
    x, y, z = d
    out = np.empty((degree + 1) ** 2)
    out[0] = SH_C0
    if degree >= 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[4] = SH_C2[0] * x * y
        out[5] = SH_C2[1] * y * z
        out[6] = SH_C2[2] * (2 * zz - xx - yy)
        out[7] = SH_C2[3] * x * z
        out[8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[9] = SH_C3[0] * y * (3 * xx - yy)
        out[10] = SH_C3[1] * x * y * z
        out[11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[14] = SH_C3[5] * z * (xx - yy)
        out[15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def eval_sh(sh, view_dir, degree: int) -> np.ndarray:
    """RGB from per-channel SH coefficient rows of length 3*(degree+1)^2."""
    sh = np.asarray(sh, dtype=float)
    want = 3 * (degree + 1) ** 2
    if sh.size != want:
        raise RejectedInputError(f"SH coefficient vector has {sh.size} values, expected {want}")
    return sh.reshape(3, -1) @ sh_basis(view_dir, degree) + 0.5


@dataclass(frozen=True)
class Placement:
    """Trainable global similarity of the composition stage: x' = S (R x + T)."""

    scale: float = 1.0
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def as_arrays(self):
        return (
            float(self.scale),
            np.asarray(self.rotation, dtype=float),
            np.asarray(self.translation, dtype=float),
        )


def apply_placement(cloud: GaussianCloud, scale, rotation, translation) -> GaussianCloud:
    """Rigid+scale placement of a whole cloud.

    Means follow x' = S (R x + T); per-Gaussian rotations are left-composed
    with R and scales multiplied by S so covariances track the similarity;
    opacities and SH are untouched.
    """
    s = float(scale)
    if s <= 0:
        raise RejectedInputError(f"global scale must be > 0, got {s}")
    r = quat.normalize(np.asarray(rotation, dtype=float))
    t = np.asarray(translation, dtype=float)
    means = s * (cloud.means @ quat.to_matrix(r).T + t)
    rotations = quat.compose(r, cloud.rotations)
    return GaussianCloud(means, rotations, s * cloud.scales, cloud.opacities.copy(), cloud.sh_coeffs.copy())


def placement_mean_jacobians(means, scale, rotation, translation):
    """Analytic d(mean')/d(S, R_raw, T) for every input mean.

    Returns (dS, dR, dT): dS (N,3), dR (N,3,4) wrt the raw quaternion, and
    dT the shared (3,3) matrix S*I.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    s = float(scale)
    r = np.asarray(rotation, dtype=float)
    t = np.asarray(translation, dtype=float)
    rot = quat.to_matrix(r)
    d_s = means @ rot.T + t
    dm = quat.dmatrix_draw(r)  # (4,3,3)
    d_r = s * np.einsum("aij,nj->nia", dm, means)
    d_t = s * np.eye(3)
    return d_s, d_r, d_t


def placement_vjp(cloud: GaussianCloud, scale, rotation, translation, grads: dict):
    """Pull per-Gaussian attribute gradients back onto (S, R_raw, T).

    grads may contain 'means' (N,3), 'rotations' (N,4) on the composed
    quaternions, and 'scales' (N,3) on the scaled scales.
    """
    s = float(scale)
    r = np.asarray(rotation, dtype=float)
    g_s = 0.0
    g_r = np.zeros(4)
    g_t = np.zeros(3)
    gm = grads.get("means")
    if gm is not None:
        d_s, d_r, d_t = placement_mean_jacobians(cloud.means, s, r, translation)
        g_s += float(np.sum(gm * d_s))
        g_r += np.einsum("ni,nia->a", gm, d_r)
        g_t += s * gm.sum(axis=0)
    gq = grads.get("rotations")
    if gq is not None:
        # q' = r_hat (x) q_i is linear in r_hat; chain through normalization.
        jl = quat.compose_left_jacobian(cloud.rotations)  # (N,4,4) wrt r_hat
        g_rhat = np.einsum("na,nab->b", gq, jl)
        n = np.linalg.norm(r)
        rhat = r / n
        g_r += (np.eye(4) - np.outer(rhat, rhat)) / n @ g_rhat
    gs = grads.get("scales")
    if gs is not None:
        g_s += float(np.sum(gs * cloud.scales))
    return g_s, g_r, g_t


# --- 3DGS binary PLY ------------------------------------------------------

_REQUIRED = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2",
             "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3")


def _sigmoid(v):
    return expit(v)


def _logit(v):
    v = np.clip(v, 1e-7, 1.0 - 1e-7)
    return np.log(v / (1.0 - v))


def save_ply(cloud: GaussianCloud, path):
    """Write the de-facto 3DGS little-endian binary layout (float32)."""
    n = cloud.count
    n_rest = 3 * (cloud.sh_coeffs.shape[2] - 1)
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in names]
    header.append("end_header")

    cols = np.empty((n, len(names)), dtype="<f4")
    cols[:, 0:3] = cloud.means
    cols[:, 3:6] = cloud.sh_coeffs[:, :, 0]
    # f_rest is channel-major: all R coeffs 1..B-1, then G, then B
    if n_rest:
        cols[:, 6:6 + n_rest] = cloud.sh_coeffs[:, :, 1:].reshape(n, n_rest)
    o = 6 + n_rest
    cols[:, o] = _logit(cloud.opacities)
    cols[:, o + 1:o + 4] = np.log(cloud.scales)
    cols[:, o + 4:o + 8] = cloud.rotations
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(cols.tobytes())


def load_ply(path) -> GaussianCloud:
    """Read a 3DGS-layout PLY; sigmoid/exp activations applied on load.

    Unknown properties (e.g. nx/ny/nz normals) are skipped; rows must be
    float32. Zero vertices yield a valid empty cloud.
    """
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    n = None
    names = []
    fmt_ok = False
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise FormatError(f"{path}: unsupported element {parts[1]!r}")
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in ("float", "float32"):
                raise FormatError(f"{path}: property {parts[2]!r} is {parts[1]}, expected float32")
            names.append(parts[2])
    if not fmt_ok:
        raise FormatError(f"{path}: expected binary_little_endian format")
    if n is None:
        raise FormatError(f"{path}: missing vertex element")
    for req in _REQUIRED:
        if req not in names:
            raise FormatError(f"{path}: missing required property {req!r}")

    rest = sorted(
        (int(p.split("_")[-1]) for p in names if p.startswith("f_rest_")),
    )
    if rest and (rest != list(range(len(rest))) or len(rest) % 3):
        raise FormatError(f"{path}: f_rest_* properties are not a contiguous multiple of 3")
    n_rest = len(rest)
    bands = 1 + n_rest // 3
    deg = int(round(np.sqrt(bands))) - 1
    if (deg + 1) ** 2 != bands or deg > 3:
        raise FormatError(f"{path}: f_rest count {n_rest} does not match an SH degree in 0..3")

    want = n * len(names) * 4
    if len(body) < want:
        raise FormatError(f"{path}: truncated body ({len(body)} bytes, expected {want})")
    cols = np.frombuffer(body[:want], dtype="<f4").reshape(n, len(names)).astype(float)
    col = {name: cols[:, i] for i, name in enumerate(names)}

    means = np.stack([col["x"], col["y"], col["z"]], axis=1) if n else np.zeros((0, 3))
    sh = np.zeros((n, 3, bands))
    if n:
        sh[:, :, 0] = np.stack([col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]], axis=1)
        if n_rest:
            rest_cols = np.stack([col[f"f_rest_{i}"] for i in range(n_rest)], axis=1)
            sh[:, :, 1:] = rest_cols.reshape(n, 3, bands - 1)
    opac = _sigmoid(col["opacity"]) if n else np.zeros(0)
    scales = np.exp(np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=1)) if n else np.zeros((0, 3))
    rots = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1) if n else np.zeros((0, 4))
    if n:
        rots = rots / np.linalg.norm(rots, axis=1, keepdims=True)
    return GaussianCloud(means.reshape(n, 3), rots.reshape(n, 4), scales.reshape(n, 3),
                         opac, sh)
