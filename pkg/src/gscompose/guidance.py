"""Score-distillation gradient assembly against a provider abstraction.

The engine's latent space is the render itself (identity encoder): a noised
copy of the image goes to the provider, and w(t) * (predicted - injected
noise) comes back as an image-space gradient for the rasterizer pullback.
Deterministic in-process mocks make the whole chain analytic; the HTTP
provider speaks the sidecar wire protocol.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from gscompose import wire
from gscompose.errors import PoisonedResponseError, RejectedInputError, TransportError


@dataclass
class NoiseSchedule:
    """Linear beta schedule with cumulative alpha-bar products."""

    beta_start: float = 0.00085
    beta_end: float = 0.012
    steps: int = 1000

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        if not (np.all(self.betas > 0) and np.all(self.betas < 1) and np.all(np.diff(self.betas) > 0)):
            raise RejectedInputError("beta schedule must be increasing within (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def weight(self, t: int) -> float:
        """w(t) = sqrt(alpha_bar_t) * (1 - alpha_bar_t)."""
        ab = self.alpha_bars[t]
        return float(np.sqrt(ab) * (1.0 - ab))

    def index_for(self, fraction: float) -> int:
        return int(round(float(fraction) * (self.steps - 1)))

    def sample_index(self, rng, t_range) -> int:
        lo, hi = t_range
        return self.index_for(rng.uniform(lo, hi))

    def noisy(self, latent, t: int, noise):
        ab = self.alpha_bars[t]
        return np.sqrt(ab) * latent + np.sqrt(1.0 - ab) * noise

    def recover_clean(self, latent_t, t: int, noise):
        ab = self.alpha_bars[t]
        return (latent_t - np.sqrt(1.0 - ab) * noise) / np.sqrt(ab)


@dataclass
class GuidanceRequest:
    latent: np.ndarray
    timestep: int
    noise: np.ndarray
    prompt: str
    token_scales: dict = field(default_factory=dict)
    branch: str = "rgb"
    guidance_scale: float = 7.5
    seed: int = 0


@dataclass
class GuidanceResponse:
    noise_pred: np.ndarray
    diagnostics: dict | None = None


def noise_for(shape, *seed_material) -> np.ndarray:
    """Deterministic unit normal noise derived from arbitrary seed material.

    Stable across processes (unlike hash(), which is salted per run), and
    quantized to float32-representable values so the provider wire protocol
    (float32 payloads) round-trips the noise exactly: the echo provider then
    yields a bitwise-zero residual whether in-process or over HTTP.
    """
    digest = hashlib.sha256("|".join(map(repr, seed_material)).encode()).digest()
    ss = np.random.SeedSequence(int.from_bytes(digest[:16], "little"))
    return np.random.default_rng(ss).standard_normal(shape).astype("<f4").astype(float)


# --- providers ----------------------------------------------------------------

class EchoGuidance:
    """noise_pred = noise, bit-exact; the provider contract's fixed point."""

    def denoise(self, req: GuidanceRequest) -> GuidanceResponse:
        return GuidanceResponse(req.noise.copy())


class AttractorGuidance:
    """noise_pred = noise + (clean latent - target): SDS then descends
    0.5 * ||latent - target||^2."""

    def __init__(self, schedule: NoiseSchedule, target=0.5):
        self.schedule = schedule
        self.target = target

    def _target(self, shape):
        t = np.asarray(self.target, dtype=float)
        return np.broadcast_to(t, shape)

    def denoise(self, req: GuidanceRequest) -> GuidanceResponse:
        clean = self.schedule.recover_clean(req.latent, req.timestep, req.noise)
        return GuidanceResponse(req.noise + (clean - self._target(req.latent.shape)))


class RenderTargetGuidance:
    """Attractor whose target is (re)computed per view through a callback.

    The optimization loop announces the upcoming view via observe_view
    before each request; the wire protocol itself never carries a camera.
    """

    def __init__(self, schedule: NoiseSchedule, target_fn):
        self.schedule = schedule
        self.target_fn = target_fn
        self._targets = {}

    def observe_view(self, camera, branch="rgb"):
        self._targets[branch] = self.target_fn(camera, branch)

    def denoise(self, req: GuidanceRequest) -> GuidanceResponse:
        if req.branch not in self._targets:
            raise TransportError("RenderTargetGuidance got no observe_view for this branch")
        clean = self.schedule.recover_clean(req.latent, req.timestep, req.noise)
        return GuidanceResponse(req.noise + (clean - self._targets[req.branch]))


class TokenFieldGuidance:
    """noise_pred = noise + sum_token scale * pattern_token, the scale of an
    absent token defaulting to 1 so plain SDS and all-ones SSDS coincide."""

    def __init__(self, tokens=("holding",), amplitude=0.3):
        self.tokens = tuple(tokens)
        self.amplitude = amplitude

    def pattern(self, token: str, shape) -> np.ndarray:
        digest = hashlib.sha256(token.encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return self.amplitude * rng.standard_normal(shape)

    def denoise(self, req: GuidanceRequest) -> GuidanceResponse:
        pred = req.noise.copy()
        energy = {}
        for tok in self.tokens:
            scale = float(req.token_scales.get(tok, 1.0))
            comp = scale * self.pattern(tok, req.latent.shape)
            pred += comp
            energy[tok] = float(np.sum(comp * comp))
        return GuidanceResponse(pred, {"token_energy": energy})


class SidecarGuidance:
    """HTTP client for the sidecar /v1/denoise endpoint."""

    def __init__(self, base_url, timeout=60.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def denoise(self, req: GuidanceRequest) -> GuidanceResponse:
        import requests

        latent = wire.encode_f32(req.latent)
        noise = wire.encode_f32(req.noise)
        body = {
            "latent": latent["b64"],
            "latent_nbytes": latent["nbytes"],
            "shape": list(req.latent.shape),
            "timestep": int(req.timestep),
            "noise": noise["b64"],
            "noise_nbytes": noise["nbytes"],
            "prompt": req.prompt,
            "token_scales": {k: float(v) for k, v in req.token_scales.items()},
            "branch": req.branch,
            "guidance_scale": float(req.guidance_scale),
            "seed": int(req.seed),
        }
        try:
            resp = requests.post(f"{self.base_url}/v1/denoise", json=body, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransportError(f"guidance provider unreachable: {e}") from e
        if resp.status_code != 200:
            raise TransportError(f"guidance provider returned {resp.status_code}: {resp.text[:200]}")
        doc = resp.json()
        pred = wire.decode_f32({"b64": doc["noise_pred"], "nbytes": doc.get("nbytes")},
                               tuple(doc["shape"]))
        return GuidanceResponse(pred)


def make_guidance_provider(spec: str, schedule: NoiseSchedule):
    if spec.startswith(("http://", "https://")):
        return SidecarGuidance(spec)
    if not spec.startswith("mock:"):
        raise RejectedInputError(f"unknown guidance provider {spec!r}")
    parts = spec.split(":")
    kind = parts[1]
    if kind == "echo":
        return EchoGuidance()
    if kind == "attractor":
        gray = float(parts[2]) if len(parts) > 2 else 0.5
        return AttractorGuidance(schedule, gray)
    if kind == "tokens":
        toks = parts[2].split(",") if len(parts) > 2 else ("holding",)
        return TokenFieldGuidance(toks)
    raise RejectedInputError(f"unknown mock guidance kind {kind!r}")


# --- gradient assembly ----------------------------------------------------------

def _query(provider, latent, prompt, t, schedule, noise, token_scales, branch,
           guidance_scale, seed):
    z_t = schedule.noisy(latent, t, noise)
    req = GuidanceRequest(z_t, t, noise, prompt, dict(token_scales or {}), branch,
                          guidance_scale, seed)
    resp = provider.denoise(req)
    if resp.noise_pred.shape != latent.shape:
        raise TransportError(
            f"provider returned shape {resp.noise_pred.shape}, expected {latent.shape}"
        )
    if not np.all(np.isfinite(resp.noise_pred)):
        raise PoisonedResponseError("provider response contains non-finite values")
    return resp


def sds_grad(render, prompt: str, t: int, provider, schedule: NoiseSchedule, noise,
             token_scales=None, branch: str = "rgb", guidance_scale: float = 7.5,
             seed: int = 0):
    """Image-space SDS gradient w(t) * (noise_pred - noise) plus diagnostics.

    The identity latent map means the gradient lands directly on the render;
    feed it to the rasterizer pullback to reach parameters.
    """
    latent = np.asarray(render, dtype=float)
    resp = _query(provider, latent, prompt, t, schedule, noise, token_scales, branch,
                  guidance_scale, seed)
    residual = resp.noise_pred - noise
    w = schedule.weight(t)
    grad = w * residual
    surrogate = w * float(np.mean(residual * latent))
    return grad, {"surrogate": surrogate, "residual_norm": float(np.linalg.norm(residual)),
                  "weight": w, "provider": resp.diagnostics}


def ssds_grad(render, prompt: str, token_scales: dict, t: int, provider,
              schedule: NoiseSchedule, noise, guidance_scale: float = 7.5, seed: int = 0):
    """SDS with per-token attention scales forwarded to the provider.

    All factors must be >= 1; with every scale at 1 the result is
    bit-identical to sds_grad for the same noise.
    """
    if any(v < 1.0 for v in (token_scales or {}).values()):
        raise RejectedInputError("attention scale factors must be >= 1")
    return sds_grad(render, prompt, t, provider, schedule, noise,
                    token_scales=token_scales, guidance_scale=guidance_scale, seed=seed)


def clip_pixel_gradient(grad, threshold: float = 1.0):
    """Per-pixel norm clip: magnitude capped at threshold, direction kept."""
    g = np.asarray(grad, dtype=float)
    flat = g.reshape(g.shape[0], g.shape[1], -1)
    norms = np.linalg.norm(flat, axis=2, keepdims=True)
    scale = np.minimum(1.0, threshold / np.maximum(norms, 1e-30))
    return (flat * scale).reshape(g.shape)


def joint_sds_grad(rgb_render, depth_render, prompt: str, lambda_rgb: float,
                   lambda_depth: float, t: int, provider, schedule: NoiseSchedule,
                   noise_rgb, noise_depth=None, depth_range=(0.0, 1.0),
                   clip_threshold: float = 1.0, guidance_scale: float = 7.5,
                   seed: int = 0):
    """Texture-structure joint SDS: rgb branch plus a normalized-depth branch.

    Depth is mapped to [0,1] over [near, far] before the latent map; both
    emitted gradients are per-pixel norm-clipped at the threshold. Returns
    (rgb gradient, depth gradient, diagnostics).
    """
    near, far = depth_range
    diag = {}
    if lambda_rgb != 0.0:
        g_rgb, d1 = sds_grad(rgb_render, prompt, t, provider, schedule, noise_rgb,
                             branch="rgb", guidance_scale=guidance_scale, seed=seed)
        g_rgb = lambda_rgb * clip_pixel_gradient(g_rgb, clip_threshold)
        diag["rgb"] = d1
    else:
        g_rgb = np.zeros_like(np.asarray(rgb_render, dtype=float))
        diag["rgb"] = {"surrogate": 0.0}
    if lambda_depth != 0.0:
        depth = np.asarray(depth_render, dtype=float)
        span = max(far - near, 1e-12)
        d_norm = np.clip((depth - near) / span, 0.0, 1.0)[:, :, None]
        if noise_depth is None:
            raise RejectedInputError("depth branch enabled but no depth noise given")
        g_lat, d2 = sds_grad(d_norm, prompt, t, provider, schedule, noise_depth,
                             branch="depth", guidance_scale=guidance_scale, seed=seed)
        g_lat = lambda_depth * clip_pixel_gradient(g_lat, clip_threshold)
        inside = (depth > near) & (depth < far)
        g_depth = (g_lat[:, :, 0] / span) * inside
        diag["depth"] = d2
    else:
        g_depth = np.zeros(np.asarray(rgb_render).shape[:2])
        diag["depth"] = {"surrogate": 0.0}
    return g_rgb, g_depth, diag
