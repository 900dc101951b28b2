"""Text-guided contact retargeting.

A segmentation provider turns (frontal render, body-part prompt) into a 2D
mask; the mask is back-projected onto the Gaussians through the renderer's
compositing weights; Gaussians above a threshold are labeled as the contact
region whose centroid initializes the object translation.
"""

import time
from dataclasses import dataclass

import numpy as np

from gscompose.errors import ContactNotFoundError, RejectedInputError, TransportError
from gscompose.gauss import Camera, GaussianCloud
from gscompose.render import accumulate_masked_weights, rasterize
from gscompose import wire

CONTACT_THRESHOLD = 1e-7  # weight threshold `a` for labeling
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.25


def frontal_camera(center=(0.0, 0.0, 0.0), radius: float = 2.0, resolution: int = 512) -> Camera:
    """Frontal segmentation viewpoint: radius 2, elevation 0, FoV 49.1."""
    c = np.asarray(center, dtype=float)
    return Camera(position=tuple(c + [0.0, 0.0, radius]), look_at=tuple(c),
                  vertical_fov_degrees=49.1, width=resolution, height=resolution,
                  near=0.01, far=100.0)


@dataclass
class SegmentationMask:
    values: np.ndarray      # (H, W) binary floats, binarized at 0.5 on ingest
    prompt: str
    camera: Camera | None = None

    def __post_init__(self):
        self.values = (np.asarray(self.values, dtype=float) >= 0.5).astype(float)

    @property
    def empty(self) -> bool:
        return not bool(self.values.any())


@dataclass
class ContactLabels:
    weights: np.ndarray   # per-Gaussian accumulated contribution, >= 0
    labels: np.ndarray    # weights > threshold
    threshold: float
    translation_init: np.ndarray


# --- providers ---------------------------------------------------------------

class DiskMask:
    """Analytic disk mask; center/radius as fractions of the image size."""

    def __init__(self, cx=0.5, cy=0.5, r=0.15):
        self.cx, self.cy, self.r = float(cx), float(cy), float(r)

    def segment(self, image, prompt):
        h, w = np.asarray(image).shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        d2 = (xx + 0.5 - self.cx * w) ** 2 + (yy + 0.5 - self.cy * h) ** 2
        return (d2 <= (self.r * min(h, w)) ** 2).astype(float)


class HalfPlaneMask:
    def __init__(self, axis="x", frac=0.5, side="ge"):
        if axis not in ("x", "y") or side not in ("ge", "lt"):
            raise RejectedInputError(f"bad half-plane spec axis={axis} side={side}")
        self.axis, self.frac, self.side = axis, float(frac), side

    def segment(self, image, prompt):
        h, w = np.asarray(image).shape[:2]
        coord = np.mgrid[0:h, 0:w][1 if self.axis == "x" else 0]
        lim = self.frac * (w if self.axis == "x" else h)
        return (coord >= lim).astype(float) if self.side == "ge" else (coord < lim).astype(float)


class ZeroMask:
    def segment(self, image, prompt):
        h, w = np.asarray(image).shape[:2]
        return np.zeros((h, w))


class FileMask:
    def __init__(self, path):
        self.path = str(path)

    def segment(self, image, prompt):
        with open(self.path, "rb") as fh:
            mask = wire.mask_from_png(fh.read())
        h, w = np.asarray(image).shape[:2]
        if mask.shape != (h, w):
            raise RejectedInputError(
                f"fixture mask {self.path} is {mask.shape}, render is {(h, w)}"
            )
        return mask


class SidecarSegmentation:
    """HTTP client for the sidecar /v1/segment endpoint."""

    def __init__(self, base_url, timeout=30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def segment(self, image, prompt):
        import requests

        body = {"image": wire.b64(wire.png_from_image(image)), "prompt": str(prompt)}
        try:
            resp = requests.post(f"{self.base_url}/v1/segment", json=body, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransportError(f"segmentation provider unreachable: {e}") from e
        if resp.status_code != 200:
            raise TransportError(f"segmentation provider returned {resp.status_code}: {resp.text[:200]}")
        return wire.mask_from_png(wire.unb64(resp.json()["mask"]))


def make_segmentation_provider(spec: str):
    """Provider from a manifest string: mock:<kind>[:k=v,...] or an http URL."""
    if spec.startswith(("http://", "https://")):
        return SidecarSegmentation(spec)
    if not spec.startswith("mock:"):
        raise RejectedInputError(f"unknown segmentation provider {spec!r}")
    parts = spec.split(":", 2)
    kind = parts[1]
    kwargs = {}
    if len(parts) > 2 and kind != "file":
        for item in parts[2].split(","):
            k, v = item.split("=")
            kwargs[k] = float(v)
    if kind == "disk":
        return DiskMask(**kwargs)
    if kind == "halfplane":
        return HalfPlaneMask(**{k: (v if k == "frac" else v) for k, v in kwargs.items()})
    if kind == "zero":
        return ZeroMask()
    if kind == "file":
        return FileMask(parts[2])
    raise RejectedInputError(f"unknown mock segmentation kind {kind!r}")


# --- operations ---------------------------------------------------------------

def segment(image, prompt: str, provider, camera: Camera | None = None) -> SegmentationMask:
    """Query the provider with retries (3 attempts, exponential backoff)."""
    last = None
    for attempt in range(RETRY_ATTEMPTS):
        try:
            values = provider.segment(image, prompt)
            return SegmentationMask(values, prompt, camera)
        except TransportError as e:
            last = e
            if attempt + 1 < RETRY_ATTEMPTS:
                time.sleep(RETRY_BASE_DELAY * 2**attempt)
    raise TransportError(f"segmentation failed after {RETRY_ATTEMPTS} attempts: {last}") from last


def backproject_mask(cloud: GaussianCloud, camera: Camera, mask: SegmentationMask) -> np.ndarray:
    """Per-Gaussian weights: each masked pixel adds the Gaussian's compositing
    contribution g_i * prod_{j<i}(1 - g_j) at that pixel."""
    if mask.values.shape != (camera.height, camera.width):
        raise RejectedInputError(
            f"mask {mask.values.shape} does not match render {(camera.height, camera.width)}"
        )
    return accumulate_masked_weights(cloud, camera, mask.values > 0.5)


def classify_and_init(weights, means, threshold: float = CONTACT_THRESHOLD) -> ContactLabels:
    """Label Gaussians above the threshold; translation init is their centroid
    (binary weights, matching the 0/1 convention)."""
    weights = np.asarray(weights, dtype=float)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    labels = weights > threshold
    if not labels.any():
        raise ContactNotFoundError(prompt="<unlabeled>", threshold=threshold)
    t_init = means[labels].mean(axis=0)
    return ContactLabels(weights, labels, threshold, t_init)


def retarget(human: GaussianCloud, body_part_prompt: str, provider,
             camera: Camera | None = None, threshold: float = CONTACT_THRESHOLD,
             soft_centroid: bool = False, extra_cameras=()):
    """Full pipeline: frontal render -> mask -> back-projection -> labels.

    Returns (ContactLabels, SegmentationMask, RenderOutput) for the frontal
    view. soft_centroid switches the centroid to contribution-weighted
    instead of binary; extra_cameras accumulates back-projected weights from
    additional views (multi-view union, for parts occluded frontally).
    """
    if camera is None:
        camera = frontal_camera(center=human.means.mean(axis=0))
    render = rasterize(human, camera)
    mask = segment(render.rgb, body_part_prompt, provider, camera)
    weights = backproject_mask(human, camera, mask)
    for cam in extra_cameras:
        extra_render = rasterize(human, cam)
        extra_mask = segment(extra_render.rgb, body_part_prompt, provider, cam)
        weights = weights + backproject_mask(human, cam, extra_mask)
    if not (weights > threshold).any():
        raise ContactNotFoundError(body_part_prompt, threshold)
    result = classify_and_init(weights, human.means, threshold)
    if soft_centroid:
        w = np.where(result.labels, weights, 0.0)
        result.translation_init = (w @ human.means) / w.sum()
    return result, mask, render
