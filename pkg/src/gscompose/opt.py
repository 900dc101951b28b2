"""Optimization engine: Adam, stage configuration, and the two training
loops (composition placement, joint animation).

Everything that randomizes is driven by seeds derived from
(global seed, stage, step), so logs are bit-reproducible and an interrupted
run resumed from a checkpoint replays the exact trajectory.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gscompose import quat
from gscompose.body import MotionSequence, SkinnedBody
from gscompose.errors import NumericError, RejectedInputError
from gscompose.gauss import GaussianCloud, apply_placement, concat_clouds, orbit_camera
from gscompose.guidance import NoiseSchedule, joint_sds_grad, noise_for, ssds_grad
from gscompose.hexplane import HexPlaneField, load_field, save_field
from gscompose.motion import (
    ObjectBinding,
    PosedFrame,
    ResidualTransform,
    apply_residual,
    bind_points,
    correspondence_loss,
    object_base_transform,
    polar_rotation,
    residual_vjp,
    rigidity_deviation,
)
from gscompose.render import AttachedPlacement, rasterize, rasterize_reference, save_png


class Adam:
    """Standard bias-corrected Adam over a dict of live parameter arrays.

    Quaternion-valued parameters (named in `quaternion_keys`) are
    renormalized to unit length after every step. NaN gradients skip the
    affected parameter and bump `nan_incidents`.
    """

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 quaternion_keys=()):
        self.params = params
        self.lr = dict(lr) if isinstance(lr, dict) else {k: lr for k in params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.quaternion_keys = set(quaternion_keys)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0
        self.nan_incidents = 0

    def step(self, grads: dict):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        touched = set()
        for key, g in grads.items():
            if key not in self.params:
                raise RejectedInputError(f"gradient for unknown parameter {key!r}")
            p = self.params[key]
            g = np.asarray(g, dtype=float)
            if g.shape != p.shape:
                raise RejectedInputError(f"{key}: gradient shape {g.shape} != {p.shape}")
            if not np.all(np.isfinite(g)):
                self.nan_incidents += 1
                continue
            if not np.any(g) and not np.any(self.m[key]):
                continue  # untouched parameters stay bitwise identical
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * (g * g)
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            p -= self.lr[key] * m_hat / (np.sqrt(v_hat) + self.eps)
            touched.add(key)
        for key in self.quaternion_keys & touched:
            p = self.params[key]
            p /= np.linalg.norm(p, axis=-1, keepdims=True)

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "nan_incidents": self.nan_incidents,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.nan_incidents = int(state["nan_incidents"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=float).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=float).reshape(self.v[k].shape)


@dataclass
class StageConfig:
    """Hyper-parameters of one optimization stage; defaults follow the
    published tables (3D composition / 4D animation)."""

    stage: str = "compose"                       # compose | animate
    epochs: int = 400
    batch_size: int = 16                         # 10 for animate
    lr: float = 0.005                            # R/T/S (0.001 for animate R/T)
    hexplane_lr: float = 0.002
    attribute_lr: float = 0.0005
    lambda_ca: float = 1e3
    lambda_sds: float = 1.0
    lambda_ssds: float = 1.0
    camera_radius: float = 2.0
    elevation_range: tuple = (-30.0, 30.0)
    fov_degrees: float = 49.1
    resolution_schedule: tuple = ((0, 128), (120, 256), (240, 512))
    train_resolution: int | None = None          # overrides the schedule when set
    t_range: tuple = (0.01, 0.97)                # SSDS / stage-1 diffusion
    sds_t_range: tuple = (0.02, 0.98)            # stage-2 texture-structure branch
    guidance_scale: float = 7.5
    attention_scale: float = 2.0                 # c, applied to interaction tokens
    grad_clip_threshold: float = 1.0
    sds_grad_clip_schedule: tuple = (0.0, 1.5, 2.0, 1000.0)  # forwarded verbatim
    rotation_init_mean: tuple = (0.5, 0.5, 0.5, 0.5)
    rotation_init_std: float = 0.1
    scale_init_mean: float = 1.0
    scale_init_std: float = 0.3
    animate_rotation_init: tuple = (-0.16, -0.16, -0.16, 0.5)
    identity_residual_init: bool = False
    residual_per_frame: bool = False
    smoothness_weight: float = 0.0
    optimize_gaussian_attributes: bool = False
    ca_temperature: float = 0.01
    ca_neighbors: int = 8
    ablation: str = "full"                       # full | no_ca | no_residual_no_ca
    checkpoint_every: int = 50
    preview_every: int = 50
    preview_resolution: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0:
            raise RejectedInputError("epochs must be > 0")
        resos = [r for _, r in self.resolution_schedule]
        if any(b < a for a, b in zip(resos, resos[1:])):
            raise RejectedInputError("resolution schedule must be monotone")
        if self.ablation not in ("full", "no_ca", "no_residual_no_ca"):
            raise RejectedInputError(f"unknown ablation {self.ablation!r}")

    @classmethod
    def animate_defaults(cls, **overrides) -> "StageConfig":
        base = dict(stage="animate", batch_size=10, lr=0.001)
        base.update(overrides)
        return cls(**base)

    def resolution_at(self, step: int) -> int:
        if self.train_resolution is not None:
            return int(self.train_resolution)
        out = self.resolution_schedule[0][1]
        for start, res in self.resolution_schedule:
            if step >= start:
                out = res
        return int(out)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("elevation_range", "t_range", "sds_t_range", "rotation_init_mean",
                    "animate_rotation_init", "sds_grad_clip_schedule"):
            doc[key] = list(doc[key])
        doc["resolution_schedule"] = [list(x) for x in doc["resolution_schedule"]]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "StageConfig":
        doc = dict(doc)
        for key in ("elevation_range", "t_range", "sds_t_range", "rotation_init_mean",
                    "animate_rotation_init", "sds_grad_clip_schedule"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "resolution_schedule" in doc:
            doc["resolution_schedule"] = tuple(tuple(x) for x in doc["resolution_schedule"])
        return cls(**doc)

    def with_overrides(self, overrides: dict) -> "StageConfig":
        doc = self.to_dict()
        for key, value in overrides.items():
            if key not in doc:
                raise RejectedInputError(f"unknown config key {key!r}")
            doc[key] = value
        return StageConfig.from_dict(doc)


def parse_set_override(text: str):
    """--set key=value with JSON-style literals falling back to strings."""
    if "=" not in text:
        raise RejectedInputError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass
class ComposedScene:
    """Stage-1 output: the canonical clouds plus the final placement."""

    human: GaussianCloud
    obj: GaussianCloud
    scale: float
    rotation: np.ndarray
    translation: np.ndarray  # total translation (contact init + trained residual)

    def placed_object(self) -> GaussianCloud:
        return apply_placement(self.obj, self.scale, self.rotation, self.translation)

    def composite(self) -> GaussianCloud:
        return concat_clouds(self.human, self.placed_object())

    def center(self) -> np.ndarray:
        return self.human.means.mean(axis=0)


def _rng_for(seed: int, stage: str, step: int):
    return np.random.default_rng(np.random.SeedSequence([seed, {"compose": 1, "animate": 2}[stage], step]))


def _metrics_path(workdir):
    return Path(workdir) / "metrics.ndjson"


def _truncate_log(workdir, stage: str, resume_step: int):
    """Drop this stage's records at or past the resume point; other stages'
    records in the shared metrics file are left alone."""
    path = _metrics_path(workdir)
    if not path.exists():
        return
    lines = [l for l in path.read_text().splitlines() if l]
    kept = []
    for line in lines:
        rec = json.loads(line)
        if rec.get("stage") != stage or rec["step"] < resume_step:
            kept.append(line)
    path.write_text("".join(line + "\n" for line in kept))


def _append_log(workdir, record: dict):
    bad = [k for k, v in _flatten(record) if isinstance(v, float) and not np.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite metrics at step {record.get('step')}: {bad}")
    with open(_metrics_path(workdir), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _flatten(doc, prefix=""):
    for k, v in doc.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        elif isinstance(v, list):
            for i, x in enumerate(v):
                yield f"{prefix}{k}[{i}]", x
        else:
            yield prefix + k, v


# --- stage 1: composition -----------------------------------------------------


def init_compose_params(config: StageConfig, t_init):
    """Placement initialization per the published defaults: R ~ N(mean, 0.1),
    S ~ N(1, 0.3) redrawn until comfortably positive, trainable T = 0 on top
    of the fixed contact-derived offset."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 99]))
    rotation = np.asarray(config.rotation_init_mean, dtype=float) + \
        rng.normal(0.0, config.rotation_init_std, size=4)
    rotation = rotation / np.linalg.norm(rotation)
    scale = 0.0
    while scale < 0.1:
        scale = rng.normal(config.scale_init_mean, config.scale_init_std)
    return {
        "scale": np.array([scale]),
        "rotation": rotation,
        "translation": np.zeros(3),
        "t_init": np.asarray(t_init, dtype=float),
    }


def run_compose_stage(human: GaussianCloud, obj: GaussianCloud, config: StageConfig,
                      guidance_provider, schedule: NoiseSchedule, t_init,
                      interaction_token: str = "holding", prompt: str = "",
                      workdir=None, start_step: int = 0, params=None, optimizer=None,
                      on_step=None):
    """Optimize the global placement (S, R, T) by spatial-aware SDS.

    Returns (ComposedScene, params dict, log records). The trainable T is a
    residual on top of the contact-derived t_init.
    """
    if config.optimize_gaussian_attributes:
        human = human.copy()
        obj = obj.copy()
    if params is None:
        params = init_compose_params(config, t_init)
    attr_params = {}
    if config.optimize_gaussian_attributes:
        attr_params = {
            "human_means": human.means, "human_rotations": human.rotations,
            "human_scales": human.scales, "human_opacities": human.opacities,
            "human_sh": human.sh_coeffs,
            "object_means": obj.means, "object_rotations": obj.rotations,
            "object_scales": obj.scales, "object_opacities": obj.opacities,
            "object_sh": obj.sh_coeffs,
        }
    if optimizer is None:
        popt = {k: params[k] for k in ("scale", "rotation", "translation")}
        lrs = {k: config.lr for k in popt}
        popt.update(attr_params)
        lrs.update({k: config.attribute_lr for k in attr_params})
        qkeys = ("rotation", "human_rotations", "object_rotations") if attr_params else ("rotation",)
        optimizer = Adam(popt, lr=lrs, quaternion_keys=qkeys)
    elif attr_params and not set(attr_params) <= set(optimizer.params):
        raise RejectedInputError(
            "cannot resume with optimize_gaussian_attributes: cloud state is not "
            "part of the checkpoint")
    center = human.means.mean(axis=0)
    cam_far = config.camera_radius * 2.5
    token_scales = {interaction_token: config.attention_scale} if interaction_token else {}
    logs = []
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
        _truncate_log(workdir, "compose", start_step)

    for step in range(start_step, config.epochs):
        rng = _rng_for(config.seed, "compose", step)
        res = config.resolution_at(step)
        grad_acc = {"scale": 0.0, "rotation": np.zeros(4), "translation": np.zeros(3)}
        attr_acc = {k: np.zeros_like(v) for k, v in attr_params.items()}
        ssds_sum = 0.0
        for item in range(config.batch_size):
            cam = orbit_camera(center, config.camera_radius, rng.uniform(0, 360),
                               rng.uniform(*config.elevation_range), config.fov_degrees,
                               res, res, far=cam_far)
            t_idx = schedule.sample_index(rng, config.t_range)
            t_total = params["t_init"] + params["translation"]
            placed = apply_placement(obj, params["scale"][0], params["rotation"], t_total)
            composite = concat_clouds(human, placed)
            attach = AttachedPlacement(obj, params["scale"][0], params["rotation"],
                                       t_total, human.count, composite.count)
            if hasattr(guidance_provider, "observe_view"):
                guidance_provider.observe_view(cam, "rgb")
            out, pull = rasterize_reference(composite, cam, placement=attach)
            noise = noise_for(out.rgb.shape, config.seed, "compose", step, item, "rgb")
            grad_img, diag = ssds_grad(out.rgb, prompt, token_scales, t_idx,
                                       guidance_provider, schedule, noise,
                                       guidance_scale=config.guidance_scale,
                                       seed=config.seed)
            ssds_sum += diag["surrogate"]
            if np.any(grad_img):
                wants = {"placement"}
                if attr_params:
                    wants |= {"means", "rotations", "scales", "opacities", "sh"}
                g = pull(grad_rgb=grad_img, wants=wants)
                ds, dr, dt = g["placement"]
                grad_acc["scale"] += ds
                grad_acc["rotation"] += dr
                grad_acc["translation"] += dt
                if attr_params:
                    _accumulate_attr_grads(attr_acc, g, human.count,
                                           params["scale"][0], params["rotation"])
        n = config.batch_size
        grads = {
            "scale": np.array([grad_acc["scale"] / n]),
            "rotation": grad_acc["rotation"] / n,
            "translation": grad_acc["translation"] / n,
        }
        grads.update({k: v / n for k, v in attr_acc.items()})
        optimizer.step(grads)
        params["scale"][0] = max(params["scale"][0], 1e-3)
        if attr_params:
            np.clip(human.opacities, 0.0, 1.0, out=human.opacities)
            np.clip(obj.opacities, 0.0, 1.0, out=obj.opacities)
            np.clip(human.scales, 1e-5, None, out=human.scales)
            np.clip(obj.scales, 1e-5, None, out=obj.scales)
        t_res = params["translation"]
        if np.linalg.norm(t_res) > 10.0:
            raise NumericError(
                f"composition diverged at step {step}: |T| = {np.linalg.norm(t_res):.3g} "
                f"(scale {params['scale'][0]:.3g}) - check guidance configuration"
            )
        ssds_avg = ssds_sum / n
        record = {
            "step": step,
            "stage": "compose",
            "seed": config.seed,
            "losses": {"ssds": ssds_avg, "total": config.lambda_ssds * ssds_avg},
            "params": {
                "scale": float(params["scale"][0]),
                "rotation": params["rotation"].tolist(),
                "translation_residual": t_res.tolist(),
                "translation_total": (params["t_init"] + t_res).tolist(),
            },
            "grad_norms": {k: float(np.linalg.norm(np.asarray(v))) for k, v in grads.items()},
        }
        logs.append(record)
        if workdir is not None:
            _append_log(workdir, record)
            _maybe_checkpoint(workdir, "compose", step, config, params, optimizer)
            _maybe_preview(workdir, "compose", step, config,
                           lambda: concat_clouds(human, apply_placement(
                               obj, params["scale"][0], params["rotation"],
                               params["t_init"] + params["translation"])), center)
        if on_step:
            on_step(step, record)
    scene = ComposedScene(human, obj, float(params["scale"][0]),
                          params["rotation"].copy(),
                          params["t_init"] + params["translation"])
    return scene, params, logs


def _accumulate_attr_grads(acc, g, n_human, scale, rotation):
    """Composite-cloud attribute gradients back onto the canonical clouds.

    The object half chains through the placement: means by S R^T, rotations
    by the right-composition Jacobian, scales by S.
    """
    acc["human_means"] += g["means"][:n_human]
    acc["human_rotations"] += g["rotations"][:n_human]
    acc["human_scales"] += g["scales"][:n_human]
    acc["human_opacities"] += g["opacities"][:n_human]
    acc["human_sh"] += g["sh"][:n_human]
    rhat = quat.normalize(np.asarray(rotation, dtype=float))
    rot = quat.to_matrix(rhat)
    jr = quat.compose_right_jacobian(rhat)
    acc["object_means"] += scale * (g["means"][n_human:] @ rot)
    acc["object_rotations"] += g["rotations"][n_human:] @ jr
    acc["object_scales"] += scale * g["scales"][n_human:]
    acc["object_opacities"] += g["opacities"][n_human:]
    acc["object_sh"] += g["sh"][n_human:]


# --- stage 2: animation ---------------------------------------------------------


@dataclass
class AnimationSetup:
    """Prebuilt per-frame quantities for the animation loop."""

    scene: ComposedScene
    body: SkinnedBody
    motion: MotionSequence
    human_binding: ObjectBinding
    object_binding: ObjectBinding
    frames: list            # PosedFrame per motion frame
    human_matrices: list    # (N, 4, 4) per frame
    base_transforms: list   # averaged object transform per frame
    object_base: np.ndarray  # placed object points in canonical composition space

    @classmethod
    def build(cls, scene: ComposedScene, body: SkinnedBody, motion: MotionSequence):
        if motion.frames and motion.frames[0].joint_rotations.shape[0] != body.joint_count:
            raise RejectedInputError(
                f"motion has {motion.frames[0].joint_rotations.shape[0]} joints, "
                f"body has {body.joint_count}"
            )
        human_binding = bind_points(scene.human.means, body)
        placed = scene.placed_object()
        object_binding = bind_points(placed.means, body)
        frames = [PosedFrame.build(body, pose) for pose in motion.frames]
        human_matrices = [human_binding.matrices(f.joint_transforms) for f in frames]
        base_transforms = [
            object_base_transform(object_binding, body, f.pose, f.joint_transforms)
            for f in frames
        ]
        return cls(scene, body, motion, human_binding, object_binding, frames,
                   human_matrices, base_transforms, placed.means)

    def human_posed(self, frame: int, field: HexPlaneField | None = None):
        m = self.human_matrices[frame]
        pts = np.einsum("nab,nb->na", m[:, :3, :3], self.scene.human.means) + m[:, :3, 3]
        pts = pts + self.frames[frame].pose.root_translation
        cache = None
        if field is not None:
            t = self.motion.time_of(frame)
            offsets, cache = field.offsets_with_cache(self.scene.human.means, t)
            pts = pts + offsets[:, :3]
        return pts, cache

    def object_pre_residual(self, frame: int) -> np.ndarray:
        g = self.base_transforms[frame]
        pts = self.object_base @ g[:3, :3].T + g[:3, 3]
        return pts + self.frames[frame].pose.root_translation

    def field_bounds(self):
        lo = self.scene.human.means.min(axis=0) - 0.2
        hi = self.scene.human.means.max(axis=0) + 0.2
        return np.stack([lo, hi])


def init_residual(config: StageConfig, frames: int) -> ResidualTransform:
    if config.identity_residual_init:
        rot = quat.IDENTITY.copy()
    else:
        rot = np.asarray(config.animate_rotation_init, dtype=float)
        rot = rot / np.linalg.norm(rot)
    if config.residual_per_frame:
        return ResidualTransform(np.tile(rot, (frames, 1)), np.zeros((frames, 3)),
                                 per_frame=True)
    return ResidualTransform(rot.copy(), np.zeros(3))


def animated_composite(setup: AnimationSetup, frame: int, residual, field):
    """Composite cloud at one frame (means moved; object covariances rotated
    by the polar factor of the combined linear map, rendering only)."""
    human_pts, cache = setup.human_posed(frame, field)
    pre = setup.object_pre_residual(frame)
    obj_pts = apply_residual(pre, residual, frame)
    human = setup.scene.human
    placed = setup.scene.placed_object()
    q_res, _ = residual.at(frame)
    lin = quat.to_matrix(q_res) @ setup.base_transforms[frame][:3, :3]
    rot_q = _quat_from_matrix(polar_rotation(lin))
    cloud = GaussianCloud(
        means=np.concatenate([human_pts, obj_pts]),
        rotations=np.concatenate([human.rotations, quat.compose(rot_q, placed.rotations)]),
        scales=np.concatenate([human.scales, placed.scales]),
        opacities=np.concatenate([human.opacities, placed.opacities]),
        sh_coeffs=np.concatenate([human.sh_coeffs, placed.sh_coeffs]),
    )
    return cloud, pre, cache


def _quat_from_matrix(m) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z)."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(m, dtype=float)).as_quat()
    return np.array([w, x, y, z])


def run_animate_stage(setup: AnimationSetup, config: StageConfig, guidance_provider,
                      schedule: NoiseSchedule, prompt: str = "",
                      interaction_token: str = "holding", field: HexPlaneField | None = None,
                      residual: ResidualTransform | None = None, workdir=None,
                      start_step: int = 0, optimizer=None, on_step=None):
    """Joint animation optimization: residual (R, T) and the offset field
    against lambda_CA * L_CA + lambda_SDS * L_SDS + lambda_SSDS * L_SSDS."""
    n_frames = len(setup.motion)
    freeze_residual = config.ablation == "no_residual_no_ca"
    use_ca = config.ablation == "full"
    if residual is None:
        residual = (ResidualTransform.identity(n_frames if config.residual_per_frame else None)
                    if freeze_residual else init_residual(config, n_frames))
    if field is None:
        field = HexPlaneField.create(setup.field_bounds(),
                                     rng=np.random.default_rng(
                                         np.random.SeedSequence([config.seed, 7])))
    params = {"residual_rotation": residual.rotation, "residual_translation": residual.translation}
    lrs = {"residual_rotation": config.lr, "residual_translation": config.lr}
    fparams = field.params()
    params.update(fparams)
    lrs.update({k: config.hexplane_lr for k in fparams})
    if optimizer is None:
        optimizer = Adam(params, lr=lrs, quaternion_keys=("residual_rotation",))
    center = setup.scene.center()
    cam_far = config.camera_radius * 2.5
    token_scales = {interaction_token: config.attention_scale} if interaction_token else {}
    logs = []
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
        _truncate_log(workdir, "animate", start_step)

    for step in range(start_step, config.epochs):
        rng = _rng_for(config.seed, "animate", step)
        res = config.resolution_at(step)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        ca_sum = sds_sum = ssds_sum = 0.0
        use_guidance = (config.lambda_sds != 0.0 or config.lambda_ssds != 0.0)
        for item in range(config.batch_size):
            frame = int(rng.integers(0, n_frames))
            cam = orbit_camera(center, config.camera_radius, rng.uniform(0, 360),
                               rng.uniform(*config.elevation_range), config.fov_degrees,
                               res, res, far=cam_far)
            pre = setup.object_pre_residual(frame)
            obj_pts = apply_residual(pre, residual, frame)
            if use_ca:
                ca, dpts = correspondence_loss(setup.object_binding, setup.frames[frame],
                                               obj_pts, tau=config.ca_temperature,
                                               k=config.ca_neighbors)
                ca_sum += ca
                if not freeze_residual and config.lambda_ca != 0.0:
                    dq, dt = residual_vjp(pre, residual, config.lambda_ca * dpts, frame)
                    _residual_grad(grads, residual, frame, dq, dt)
            if use_guidance:
                cloud, pre2, fcache = animated_composite(setup, frame, residual, field)
                if hasattr(guidance_provider, "observe_view"):
                    guidance_provider.observe_view(cam, "rgb")
                    guidance_provider.observe_view(cam, "depth")
                out, pull = rasterize_reference(cloud, cam)
                t_sds = schedule.sample_index(rng, config.sds_t_range)
                noise_rgb = noise_for(out.rgb.shape, config.seed, "animate", step, item, "rgb")
                noise_depth = noise_for(out.depth.shape + (1,), config.seed, "animate",
                                        step, item, "depth")
                g_rgb, g_depth, diag = joint_sds_grad(
                    out.rgb, out.depth, prompt, config.lambda_sds, config.lambda_sds,
                    t_sds, guidance_provider, schedule, noise_rgb, noise_depth,
                    depth_range=(cam.near, cam.far),
                    clip_threshold=config.grad_clip_threshold,
                    guidance_scale=config.guidance_scale, seed=config.seed)
                sds_sum += diag["rgb"]["surrogate"] + diag["depth"]["surrogate"]
                t_ssds = schedule.sample_index(rng, config.t_range)
                noise_s = noise_for(out.rgb.shape, config.seed, "animate", step, item, "ssds")
                g_ssds, diag_s = ssds_grad(out.rgb, prompt, token_scales, t_ssds,
                                           guidance_provider, schedule, noise_s,
                                           guidance_scale=config.guidance_scale,
                                           seed=config.seed)
                ssds_sum += diag_s["surrogate"]
                grad_rgb = g_rgb + config.lambda_ssds * g_ssds
                if np.any(grad_rgb) or np.any(g_depth):
                    g = pull(grad_rgb=grad_rgb, grad_depth=g_depth, wants={"means"})
                    dmeans = g["means"]
                    nh = setup.scene.human.count
                    if field is not None and fcache is not None:
                        fgrads, _ = field.offsets_vjp(fcache, _pad_out(dmeans[:nh], field.out_dim))
                        for k, v in fgrads.items():
                            grads[k] += v
                    if not freeze_residual:
                        dq, dt = residual_vjp(pre2, residual, dmeans[nh:], frame)
                        _residual_grad(grads, residual, frame, dq, dt)
        n = config.batch_size
        for k in grads:
            grads[k] /= n
        if config.residual_per_frame and config.smoothness_weight > 0.0:
            _add_smoothness_grads(grads, residual, config.smoothness_weight)
        if freeze_residual:
            grads["residual_rotation"][:] = 0.0
            grads["residual_translation"][:] = 0.0
        optimizer.step(grads)

        ca_avg, sds_avg, ssds_avg = ca_sum / n, sds_sum / n, ssds_sum / n
        total = config.lambda_ca * ca_avg + config.lambda_sds * sds_avg \
            + config.lambda_ssds * ssds_avg
        record = {
            "step": step,
            "stage": "animate",
            "seed": config.seed,
            "losses": {"ca": ca_avg, "sds": sds_avg, "ssds": ssds_avg, "total": total},
            "params": {
                "residual_rotation": np.asarray(residual.rotation).ravel()[:4].tolist(),
                "residual_translation": np.asarray(residual.translation).ravel()[:3].tolist(),
            },
            "rigidity_deviation": rigidity_deviation(
                setup.base_transforms[min(n_frames - 1, n_frames // 2)]),
        }
        logs.append(record)
        if workdir is not None:
            _append_log(workdir, record)
            _maybe_checkpoint(workdir, "animate", step, config, params, optimizer, field)
            _maybe_preview(workdir, "animate", step, config,
                           lambda: animated_composite(setup, n_frames - 1, residual, field)[0],
                           center)
        if on_step:
            on_step(step, record)
    return residual, field, logs


def evaluate_ca(setup: AnimationSetup, residual: ResidualTransform,
                tau: float = 0.01, k: int = 8, frames=None, hard: bool = False):
    """Mean correspondence loss over whole frames (not a sampled batch)."""
    idx = range(len(setup.motion)) if frames is None else frames
    vals = []
    for f in idx:
        pts = apply_residual(setup.object_pre_residual(f), residual, f)
        loss, _ = correspondence_loss(setup.object_binding, setup.frames[f], pts,
                                      tau=tau, k=k, hard=hard)
        vals.append(loss)
    return float(np.mean(vals)), vals


def _pad_out(grad3, out_dim):
    if out_dim == 3:
        return grad3
    out = np.zeros((grad3.shape[0], out_dim))
    out[:, :3] = grad3
    return out


def _residual_grad(grads, residual: ResidualTransform, frame: int, dq, dt):
    if residual.per_frame:
        grads["residual_rotation"][frame] += dq
        grads["residual_translation"][frame] += dt
    else:
        grads["residual_rotation"] += dq
        grads["residual_translation"] += dt


def _add_smoothness_grads(grads, residual: ResidualTransform, weight: float):
    """lambda * sum_t ||p_{t+1} - p_t||^2 over per-frame parameter tracks."""
    for key, track in [("residual_rotation", residual.rotation),
                       ("residual_translation", residual.translation)]:
        diff = track[1:] - track[:-1]
        g = np.zeros_like(track)
        g[1:] += 2.0 * weight * diff
        g[:-1] -= 2.0 * weight * diff
        grads[key] += g


# --- checkpoints ---------------------------------------------------------------

def _maybe_checkpoint(workdir, stage, step, config, params, optimizer, field=None):
    if (step + 1) % config.checkpoint_every and step + 1 != config.epochs:
        return
    save_checkpoint(Path(workdir) / stage / f"{step + 1:06d}", config, params,
                    optimizer, field)


def save_checkpoint(path, config, params, optimizer, field=None):
    """state.json (config + small params + step) plus optstate.npz carrying
    the Adam moments and, for animate, the exact float64 field parameters.

    field.bin keeps the interchange checkpoint format (float32 blob + JSON
    sidecar); the npz exists so a resumed run replays bit-identically.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": config.to_dict(),
        "params": {k: np.asarray(v).tolist() for k, v in params.items()
                   if not k.startswith(("plane_", "mlp_"))},
        "step": optimizer.step_count,
        "nan_incidents": optimizer.nan_incidents,
    }
    with open(path / "state.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    arrays = {}
    for key in optimizer.params:
        arrays[f"m::{key}"] = optimizer.m[key]
        arrays[f"v::{key}"] = optimizer.v[key]
    if field is not None:
        save_field(field, path / "field.bin")
        for key, value in field.params().items():
            arrays[f"field::{key}"] = value
    np.savez(path / "optstate.npz", **arrays)


def load_checkpoint(path):
    """Returns (state doc, field or None, adam moments dict).

    Field parameters are restored from the exact-precision npz when present,
    falling back to the float32 interchange blob.
    """
    path = Path(path)
    with open(path / "state.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    field = load_field(path / "field.bin") if (path / "field.bin").exists() else None
    moments = {"m": {}, "v": {}}
    npz_path = path / "optstate.npz"
    if npz_path.exists():
        with np.load(npz_path) as blob:
            for name in blob.files:
                kind, _, key = name.partition("::")
                if kind in moments:
                    moments[kind][key] = blob[name]
                elif kind == "field" and field is not None:
                    field.params()[key][:] = blob[name]
    return doc, field, moments


def restore_optimizer(optimizer: Adam, doc: dict, moments: dict):
    optimizer.step_count = int(doc["step"])
    optimizer.nan_incidents = int(doc.get("nan_incidents", 0))
    for key in optimizer.params:
        if key in moments["m"]:
            optimizer.m[key] = np.asarray(moments["m"][key], dtype=float)
            optimizer.v[key] = np.asarray(moments["v"][key], dtype=float)


def latest_checkpoint(workdir, stage):
    root = Path(workdir) / stage
    if not root.exists():
        return None
    steps = sorted(int(p.name) for p in root.iterdir() if p.name.isdigit())
    return root / f"{steps[-1]:06d}" if steps else None


def _maybe_preview(workdir, stage, step, config, cloud_fn, center):
    if (step + 1) % config.preview_every and step + 1 != config.epochs:
        return
    cam = orbit_camera(center, config.camera_radius, 30.0, 10.0, config.fov_degrees,
                       config.preview_resolution, config.preview_resolution)
    out = rasterize(cloud_fn(), cam)
    path = Path(workdir) / stage / "previews"
    path.mkdir(parents=True, exist_ok=True)
    save_png(out.rgb, path / f"{step + 1:06d}.png")
