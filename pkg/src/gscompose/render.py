"""Software splat rasterizer: fast forward path and a gradient-capable
reference path whose pullback reaches every cloud attribute and, when a
placement is attached, the global (S, R, T).

Both paths share one compositing contract: Gaussians are depth-sorted
front-to-back (stable by index on ties) and blended as
C(u) = sum_i c_i g_i prod_{j<i}(1 - g_j) with g_i = alpha_i exp(-0.5 m^2),
skipping contributions with g < 1/255. The fast path only touches a
per-Gaussian bounding box sized so that everything outside is below the
skip cutoff, which makes it pixel-identical to exhaustive evaluation.

Depth is the contribution-weighted mean camera-space z, normalized by
accumulated alpha where alpha > 1e-4. SH view-direction gradients are
treated as locally constant in the pullback, like the depth sort.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from gscompose import quat
from gscompose.errors import RejectedInputError
from gscompose.gauss import Camera, GaussianCloud, placement_vjp

COV2D_BLUR = 0.3          # pixels^2 added to every projected covariance
CONTRIB_CUTOFF = 1.0 / 255.0
ALPHA_DEPTH_FLOOR = 1e-4  # below this, depth is reported as 0
REFERENCE_MAX_AREA = 128 * 128


@dataclass
class RenderOutput:
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) camera-space z, 0 where nothing rendered
    alpha: np.ndarray  # (H, W) accumulated opacity in [0, 1]


@dataclass
class AttachedPlacement:
    """Marks a slice of a composite cloud as placed from a base cloud.

    The pullback then also reports gradients on (scale, rotation,
    translation). `start:stop` indexes the composite cloud.
    """

    base: GaussianCloud
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    start: int
    stop: int


def project(mu, cov, camera: Camera):
    """Perspective-project one Gaussian; None when behind the near plane.

    Returns (mean2d, cov2d, depth) with cov2d already regularized by the
    +0.3 px^2 floor.
    """
    rot, trans = camera.world_to_camera()
    p = rot @ np.asarray(mu, dtype=float) + trans
    if p[2] <= camera.near:
        return None
    f = camera.focal
    cx, cy = camera.principal
    x, y, z = p
    mean2d = np.array([f * x / z + cx, f * y / z + cy])
    j = np.array([[f / z, 0.0, -f * x / z**2], [0.0, f / z, -f * y / z**2]])
    cov_cam = rot @ np.asarray(cov, dtype=float) @ rot.T
    cov2d = j @ cov_cam @ j.T + COV2D_BLUR * np.eye(2)
    return mean2d, cov2d, float(z)


class _Projected:
    """Per-cloud projection scratch shared by forward and backward passes."""

    def __init__(self, cloud: GaussianCloud, camera: Camera):
        self.cloud = cloud
        self.camera = camera
        self.rot, self.trans = camera.world_to_camera()
        n = cloud.count
        self.cam_pts = cloud.means @ self.rot.T + self.trans
        z = self.cam_pts[:, 2]
        f = camera.focal
        cx, cy = camera.principal
        visible = z > camera.near
        with np.errstate(divide="ignore", invalid="ignore"):
            self.mean2d = np.stack(
                [f * self.cam_pts[:, 0] / z + cx, f * self.cam_pts[:, 1] / z + cy], axis=1
            )
        # world covariance rotated into camera space
        rmats = quat.to_matrix(cloud.rotations)
        s2 = cloud.scales**2
        self.cov_world = (rmats * s2[:, None, :]) @ np.swapaxes(rmats, 1, 2)
        self.cov_cam = np.einsum("ab,nbc,dc->nad", self.rot, self.cov_world, self.rot)
        self.jac = np.zeros((n, 2, 3))
        zs = np.where(visible, z, 1.0)
        self.jac[:, 0, 0] = f / zs
        self.jac[:, 1, 1] = f / zs
        self.jac[:, 0, 2] = -f * self.cam_pts[:, 0] / zs**2
        self.jac[:, 1, 2] = -f * self.cam_pts[:, 1] / zs**2
        self.cov2d = np.einsum("nab,nbc,ndc->nad", self.jac, self.cov_cam, self.jac)
        self.cov2d[:, 0, 0] += COV2D_BLUR
        self.cov2d[:, 1, 1] += COV2D_BLUR
        det = self.cov2d[:, 0, 0] * self.cov2d[:, 1, 1] - self.cov2d[:, 0, 1] ** 2
        self.inv2d = np.empty_like(self.cov2d)
        self.inv2d[:, 0, 0] = self.cov2d[:, 1, 1] / det
        self.inv2d[:, 1, 1] = self.cov2d[:, 0, 0] / det
        self.inv2d[:, 0, 1] = self.inv2d[:, 1, 0] = -self.cov2d[:, 0, 1] / det
        self.depth = z

        alive = visible & (cloud.opacities > CONTRIB_CUTOFF)
        # bbox half-width guaranteeing g < 1/255 outside: m^2 <= 2 ln(255 a)
        msq = np.zeros(n)
        msq[alive] = 2.0 * np.log(255.0 * cloud.opacities[alive])
        lam_max = 0.5 * (self.cov2d[:, 0, 0] + self.cov2d[:, 1, 1]) + np.sqrt(
            0.25 * (self.cov2d[:, 0, 0] - self.cov2d[:, 1, 1]) ** 2 + self.cov2d[:, 0, 1] ** 2
        )
        radius = np.sqrt(np.maximum(msq, 0.0) * lam_max)

        h, w = camera.height, camera.width
        self.c0 = np.clip(np.floor(self.mean2d[:, 0] - radius).astype(int), 0, w)
        self.c1 = np.clip(np.ceil(self.mean2d[:, 0] + radius).astype(int) + 1, 0, w)
        self.r0 = np.clip(np.floor(self.mean2d[:, 1] - radius).astype(int), 0, h)
        self.r1 = np.clip(np.ceil(self.mean2d[:, 1] + radius).astype(int) + 1, 0, h)
        alive &= (self.c1 > self.c0) & (self.r1 > self.r0)
        self.alive = alive

        view_dirs = cloud.means - np.asarray(camera.position, dtype=float)
        norms = np.linalg.norm(view_dirs, axis=1, keepdims=True)
        view_dirs = np.divide(view_dirs, norms, out=np.zeros_like(view_dirs), where=norms > 0)
        if cloud.sh_degree == 0:
            self.colors_raw = cloud.colors()
        else:
            from gscompose.gauss import sh_basis

            basis = np.stack([sh_basis(v, cloud.sh_degree) for v in view_dirs])
            self.colors_raw = np.einsum("ncb,nb->nc", cloud.sh_coeffs, basis) + 0.5
        self.colors = np.clip(self.colors_raw, 0.0, 1.0)
        # front-to-back order, stable by original index on depth ties
        idx = np.nonzero(alive)[0]
        self.order = idx[np.argsort(self.depth[idx], kind="stable")]

    def splat(self, i, row_lo=0, row_hi=None):
        """g-values of Gaussian i over its bbox clipped to [row_lo, row_hi)."""
        r0, r1 = max(self.r0[i], row_lo), self.r1[i] if row_hi is None else min(self.r1[i], row_hi)
        c0, c1 = self.c0[i], self.c1[i]
        if r0 >= r1 or c0 >= c1:
            return None
        dx = (np.arange(c0, c1) + 0.5) - self.mean2d[i, 0]
        dy = (np.arange(r0, r1) + 0.5) - self.mean2d[i, 1]
        a, b, c = self.inv2d[i, 0, 0], self.inv2d[i, 0, 1], self.inv2d[i, 1, 1]
        msq = a * dx[None, :] ** 2 + 2 * b * dy[:, None] * dx[None, :] + c * dy[:, None] ** 2
        g = self.cloud.opacities[i] * np.exp(-0.5 * msq)
        return (slice(r0, r1), slice(c0, c1)), g, dx, dy


def _composite_band(proj: _Projected, bg, row_lo, row_hi, record=None):
    h = row_hi - row_lo
    w = proj.camera.width
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    transmit = np.ones((h, w))
    for i in proj.order:
        sp = proj.splat(i, row_lo, row_hi)
        if sp is None:
            continue
        (rs, cs), g, _, _ = sp
        rs = slice(rs.start - row_lo, rs.stop - row_lo)
        live = g >= CONTRIB_CUTOFF
        if not live.any():
            if record is not None:
                record.append((i, None, None, None))
            continue
        g = np.where(live, g, 0.0)
        t_before = transmit[rs, cs]
        wgt = g * t_before
        rgb[rs, cs] += wgt[:, :, None] * proj.colors[i]
        depth[rs, cs] += wgt * proj.depth[i]
        if record is not None:
            record.append((i, (rs, cs), g, t_before.copy()))
        transmit[rs, cs] = t_before * (1.0 - g)
    alpha = 1.0 - transmit
    rgb += transmit[:, :, None] * np.asarray(bg, dtype=float)
    depth_raw = depth.copy()
    norm = alpha > ALPHA_DEPTH_FLOOR
    depth = np.divide(depth, alpha, out=np.zeros_like(depth), where=norm)
    return RenderOutput(rgb, depth, alpha), depth_raw


def rasterize(cloud: GaussianCloud, camera: Camera, background=(1.0, 1.0, 1.0), threads: int = 1) -> RenderOutput:
    """Forward render. `threads > 1` splits the image into row bands that are
    composited independently (disjoint pixels), so results are identical."""
    proj = _Projected(cloud, camera)
    h = camera.height
    if threads <= 1 or h < 2 * threads:
        out, _ = _composite_band(proj, background, 0, h)
        return out
    bounds = np.linspace(0, h, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(lambda k: _composite_band(proj, background, bounds[k], bounds[k + 1])[0], range(threads))
        )
    return RenderOutput(
        np.concatenate([p.rgb for p in parts]),
        np.concatenate([p.depth for p in parts]),
        np.concatenate([p.alpha for p in parts]),
    )


def rasterize_reference(cloud: GaussianCloud, camera: Camera, background=(1.0, 1.0, 1.0),
                        placement: AttachedPlacement | None = None):
    """Gradient-capable render; returns (RenderOutput, pullback).

    pullback(grad_rgb, grad_depth=None, grad_alpha=None, wants=None) maps
    image-space gradients to a dict of per-Gaussian attribute gradients
    ('means', 'rotations', 'scales', 'opacities', 'sh') plus 'placement'
    -> (dS, dR, dT) when a placement is attached. `wants` is an iterable
    of attribute names limiting the (costly) chains that are evaluated;
    None means everything.
    """
    if camera.width * camera.height > REFERENCE_MAX_AREA:
        raise RejectedInputError(
            f"reference render is {camera.width}x{camera.height}; the gradient path "
            f"is capped at {REFERENCE_MAX_AREA} pixels (128x128). Render smaller."
        )
    proj = _Projected(cloud, camera)
    record = []
    out, depth_raw = _composite_band(proj, background, 0, camera.height, record=record)
    bg = np.asarray(background, dtype=float)

    def pullback(grad_rgb=None, grad_depth=None, grad_alpha=None, wants=None):
        return _pullback(proj, record, out, depth_raw, bg, grad_rgb, grad_depth,
                         grad_alpha, wants, placement)

    return out, pullback


def _pullback(proj, record, out, depth_raw, bg, grad_rgb, grad_depth, grad_alpha,
              wants, placement):
    cloud = proj.cloud
    n = cloud.count
    h, w = out.alpha.shape
    explicit = set(wants) if wants is not None else {"means", "rotations", "scales", "opacities", "sh"}
    want = set(explicit) - {"placement"}
    limit = None
    if placement is not None:
        want |= {"means", "rotations", "scales"}
        if not ({"means", "rotations", "scales", "opacities", "sh"} & explicit):
            # placement-only: parameter chains are needed just for the placed slice
            limit = (placement.start, placement.stop)
    d_rgb = np.zeros((h, w, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=float)
    # depth = depth_raw / alpha (where alpha > floor): fold normalization into
    # gradients on depth_raw and alpha
    d_draw = np.zeros((h, w))
    d_alpha = np.zeros((h, w)) if grad_alpha is None else np.asarray(grad_alpha, dtype=float).copy()
    if grad_depth is not None:
        gd = np.asarray(grad_depth, dtype=float)
        norm = out.alpha > ALPHA_DEPTH_FLOOR
        inv_a = np.divide(1.0, out.alpha, out=np.zeros_like(out.alpha), where=norm)
        d_draw = gd * inv_a
        d_alpha = d_alpha - gd * depth_raw * inv_a**2

    grads = {
        "means": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "scales": np.zeros((n, 3)),
        "opacities": np.zeros(n),
        "sh": np.zeros_like(cloud.sh_coeffs),
    }
    need_cov = bool({"rotations", "scales"} & want)
    need_mean = "means" in want

    # suffix accumulators: color/depth/alpha composited behind the current
    # Gaussian under unit transmittance
    rho_rgb = np.tile(bg, (h, w, 1))
    rho_z = np.zeros((h, w))
    rho_a = np.zeros((h, w))
    f = proj.camera.focal
    for i, slices, g, t_before in reversed(record):
        if slices is None:
            continue
        rs, cs = slices
        live = g > 0
        color = proj.colors[i]
        dg = (
            np.einsum("rwc,c->rw", d_rgb[rs, cs], color)
            - np.einsum("rwc,rwc->rw", d_rgb[rs, cs], rho_rgb[rs, cs])
            + d_draw[rs, cs] * (proj.depth[i] - rho_z[rs, cs])
            + d_alpha[rs, cs] * (1.0 - rho_a[rs, cs])
        ) * t_before
        dg = np.where(live, dg, 0.0)
        wgt = g * t_before
        # update suffix state for the next (nearer) Gaussian
        rho_rgb[rs, cs] = np.where(live[:, :, None], g[:, :, None] * color + (1 - g[:, :, None]) * rho_rgb[rs, cs], rho_rgb[rs, cs])
        rho_z[rs, cs] = np.where(live, g * proj.depth[i] + (1 - g) * rho_z[rs, cs], rho_z[rs, cs])
        rho_a[rs, cs] = np.where(live, g + (1 - g) * rho_a[rs, cs], rho_a[rs, cs])

        if limit is not None and not limit[0] <= i < limit[1]:
            continue
        if "sh" in want:
            dcol = np.einsum("rwc,rw->c", d_rgb[rs, cs], wgt)
            inside = (proj.colors_raw[i] >= 0.0) & (proj.colors_raw[i] <= 1.0)
            dcol = np.where(inside, dcol, 0.0)
            if cloud.sh_degree == 0:
                from gscompose.gauss import SH_C0

                grads["sh"][i, :, 0] += SH_C0 * dcol
            else:
                from gscompose.gauss import sh_basis

                vd = cloud.means[i] - np.asarray(proj.camera.position, dtype=float)
                grads["sh"][i] += np.outer(dcol, sh_basis(vd, cloud.sh_degree))
        if "opacities" in want and cloud.opacities[i] > 0:
            grads["opacities"][i] += float(np.sum(dg * (g / cloud.opacities[i])))
        if not (need_mean or need_cov):
            continue

        # chain through m^2 to mean2d / cov2d
        dx = (np.arange(cs.start, cs.stop) + 0.5) - proj.mean2d[i, 0]
        dy = (np.arange(rs.start, rs.stop) + 0.5) - proj.mean2d[i, 1]
        dmsq = -0.5 * dg * g
        a, b, c = proj.inv2d[i, 0, 0], proj.inv2d[i, 0, 1], proj.inv2d[i, 1, 1]
        lx = a * dx[None, :] + b * dy[:, None]   # (Lambda Delta)_x
        ly = b * dx[None, :] + c * dy[:, None]
        dmean2d = -2.0 * np.array([np.sum(dmsq * lx), np.sum(dmsq * ly)])
        dlam = np.array(
            [
                [np.sum(dmsq * dx[None, :] ** 2), np.sum(dmsq * dx[None, :] * dy[:, None])],
                [0.0, np.sum(dmsq * dy[:, None] ** 2)],
            ]
        )
        dlam[1, 0] = dlam[0, 1]
        lam = proj.inv2d[i]
        dcov2d = -lam @ dlam @ lam
        dz_direct = float(np.sum(d_draw[rs, cs] * wgt))

        jac = proj.jac[i]
        dmu_cam = jac.T @ dmean2d
        dmu_cam[2] += dz_direct
        if need_cov or need_mean:
            djac = 2.0 * dcov2d @ jac @ proj.cov_cam[i]
            x, y, z = proj.cam_pts[i]
            dmu_cam[0] += djac[0, 2] * (-f / z**2)
            dmu_cam[1] += djac[1, 2] * (-f / z**2)
            dmu_cam[2] += (
                djac[0, 0] * (-f / z**2)
                + djac[1, 1] * (-f / z**2)
                + djac[0, 2] * (2 * f * x / z**3)
                + djac[1, 2] * (2 * f * y / z**3)
            )
        if need_mean:
            grads["means"][i] += proj.rot.T @ dmu_cam
        if need_cov:
            dcov_cam = jac.T @ dcov2d @ jac
            dcov_world = proj.rot.T @ dcov_cam @ proj.rot
            rmat = quat.to_matrix(cloud.rotations[i])
            s = cloud.scales[i]
            if "rotations" in want:
                drmat = 2.0 * dcov_world @ rmat @ np.diag(s * s)
                grads["rotations"][i] += np.einsum(
                    "aij,ij->a", quat.dmatrix_draw(cloud.rotations[i]), drmat
                )
            if "scales" in want:
                grads["scales"][i] += 2.0 * s * np.einsum(
                    "ia,ij,jb->ab", rmat, dcov_world, rmat
                ).diagonal()

    result = {k: v for k, v in grads.items() if k in want}
    if placement is not None:
        sl = slice(placement.start, placement.stop)
        result["placement"] = placement_vjp(
            placement.base,
            placement.scale,
            placement.rotation,
            placement.translation,
            {
                "means": grads["means"][sl],
                "rotations": grads["rotations"][sl],
                "scales": grads["scales"][sl],
            },
        )
    return result


def accumulate_masked_weights(cloud: GaussianCloud, camera: Camera, pixel_mask) -> np.ndarray:
    """Per-Gaussian sum of compositing contributions over masked pixels.

    Reuses the rasterizer's contribution lists: weight_i = sum over pixels u
    with mask(u) true of g_i(u) * prod_{j<i}(1 - g_j(u)).
    """
    pixel_mask = np.asarray(pixel_mask)
    if pixel_mask.shape != (camera.height, camera.width):
        raise RejectedInputError(
            f"mask shape {pixel_mask.shape} does not match render {camera.height}x{camera.width}"
        )
    proj = _Projected(cloud, camera)
    record = []
    _composite_band(proj, (0.0, 0.0, 0.0), 0, camera.height, record=record)
    weights = np.zeros(cloud.count)
    m = pixel_mask.astype(float)
    for i, slices, g, t_before in record:
        if slices is None:
            continue
        rs, cs = slices
        weights[i] = float(np.sum(g * t_before * m[rs, cs]))
    return weights


# --- image export ----------------------------------------------------------

def save_png(rgb, path):
    """8-bit RGB PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_depth_png(depth, path, d_max=None):
    """16-bit grayscale PNG; depth scaled into the uint16 range."""
    from PIL import Image

    d = np.asarray(depth, dtype=float)
    scale = float(d_max) if d_max else max(float(d.max()), 1e-9)
    arr = np.clip(d / scale * 65535.0 + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)  # uint16 -> 16-bit grayscale


def save_raw(img, path):
    """Raw float dump: little-endian int32 header (H, W, C) + float32 data."""
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<iii", *arr.shape))
        fh.write(arr.tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w, c = struct.unpack("<iii", fh.read(12))
        arr = np.frombuffer(fh.read(), dtype="<f4").reshape(h, w, c)
    return arr.astype(float)
