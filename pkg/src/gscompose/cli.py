"""Pipeline orchestration CLI.

Subcommands run the stages over a scene manifest (JSON): contact -> compose
-> animate -> render/eval. Every failure mode maps to a distinct exit code
so harnesses can assert on them:

    0  success
    2  contact region not found for the prompt
    3  validation / format error (bad manifest, missing file, bad config)
    4  provider transport error
    5  numeric error (divergence, NaN in logs)
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from gscompose.body import load_motion, load_skeleton
from gscompose.contact import frontal_camera, make_segmentation_provider, retarget
from gscompose.errors import (
    ContactNotFoundError,
    FormatError,
    NumericError,
    RejectedInputError,
    TransportError,
)
from gscompose.gauss import load_ply, orbit_camera, save_ply
from gscompose.guidance import NoiseSchedule, make_guidance_provider
from gscompose.hexplane import load_field
from gscompose.motion import (
    ResidualTransform,
    apply_residual,
    penetration_fraction,
    rigidity_deviation,
)
from gscompose.opt import (
    Adam,
    AnimationSetup,
    ComposedScene,
    StageConfig,
    evaluate_ca,
    latest_checkpoint,
    load_checkpoint,
    parse_set_override,
    restore_optimizer,
    run_animate_stage,
    run_compose_stage,
)
from gscompose.render import rasterize, save_png

EXIT_OK = 0
EXIT_CONTACT_NOT_FOUND = 2
EXIT_VALIDATION = 3
EXIT_TRANSPORT = 4
EXIT_NUMERIC = 5

SIDECAR_ENV = "GSCOMPOSE_SIDECAR_URL"

MANIFEST_KEYS = ("human_ply", "object_ply", "skeleton", "motion")


class Manifest:
    """Validated scene manifest; all referenced assets are parsed eagerly."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                self.doc = json.load(fh)
        except OSError as e:
            raise RejectedInputError(f"cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON ({e})") from e
        self.base = self.path.parent
        for key in MANIFEST_KEYS:
            if key not in self.doc:
                raise RejectedInputError(f"manifest is missing {key!r}")
            if not self.resolve(self.doc[key]).exists():
                raise RejectedInputError(f"manifest {key}: no such file {self.doc[key]!r}")
        # fail-fast: parse every asset before any stage runs
        self.human = load_ply(self.resolve(self.doc["human_ply"]))
        self.obj = load_ply(self.resolve(self.doc["object_ply"]))
        self.body = load_skeleton(self.resolve(self.doc["skeleton"]))
        self.motion = load_motion(self.resolve(self.doc["motion"]))
        if self.human.count == 0 or self.obj.count == 0:
            raise RejectedInputError("human/object clouds must be non-empty")
        self.prompt = self.doc.get("prompt", "")
        self.interaction_token = self.doc.get("interaction_token", "holding")
        self.body_part_prompt = self.doc.get("body_part_prompt", "hand")
        self.out_dir = self.resolve(self.doc.get("output_dir", "out"))

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base / p

    def provider_spec(self, key: str) -> str:
        spec = self.doc.get(key, "mock:echo" if "guidance" in key else "mock:disk")
        env = os.environ.get(SIDECAR_ENV)
        if env and (spec.startswith(("http://", "https://")) or spec == "sidecar"):
            return env
        if spec == "sidecar":
            raise RejectedInputError(
                f"manifest wants the sidecar but {SIDECAR_ENV} is not set")
        return spec

    def stage_overrides(self, stage: str) -> dict:
        out = {}
        for key, value in (self.doc.get("overrides") or {}).items():
            if key.startswith(("compose_", "animate_")):
                pfx = key.split("_", 1)[0]
                if pfx == stage:
                    out[key.split("_", 1)[1]] = value
            else:
                out[key] = value
        return out


def build_config(manifest: Manifest, stage: str, args) -> StageConfig:
    base = StageConfig() if stage == "compose" else StageConfig.animate_defaults()
    overrides = manifest.stage_overrides(stage)
    if args.seed is not None:
        overrides["seed"] = args.seed
    for item in args.set or []:
        key, value = parse_set_override(item)
        overrides[key] = value
    return base.with_overrides(overrides)


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_contact(manifest: Manifest, args) -> int:
    provider = make_segmentation_provider(manifest.provider_spec("segmentation_provider"))
    camera = frontal_camera(center=manifest.human.means.mean(axis=0))
    labels, mask, render = retarget(manifest.human, manifest.body_part_prompt,
                                    provider, camera=camera)
    out = manifest.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "contact.json", {
        "prompt": manifest.body_part_prompt,
        "threshold": labels.threshold,
        "label_count": int(labels.labels.sum()),
        "translation_init": labels.translation_init.tolist(),
    })
    overlay = render.rgb.copy()
    overlay[mask.values > 0.5] = 0.6 * overlay[mask.values > 0.5] + 0.4 * np.array([1.0, 0, 0])
    save_png(overlay, out / "contact_overlay.png")
    print(f"contact: {int(labels.labels.sum())} Gaussians above {labels.threshold:g}, "
          f"T_init = {np.round(labels.translation_init, 4).tolist()}")
    return EXIT_OK


def cmd_compose(manifest: Manifest, args) -> int:
    config = build_config(manifest, "compose", args)
    schedule = NoiseSchedule()
    provider = make_guidance_provider(manifest.provider_spec("guidance_provider"), schedule)
    out = manifest.out_dir
    contact_file = out / "contact.json"
    if args.skip_contact:
        t_init = manifest.human.means.mean(axis=0)
    elif contact_file.exists():
        with open(contact_file, "r", encoding="utf-8") as fh:
            t_init = np.asarray(json.load(fh)["translation_init"], dtype=float)
    else:
        raise RejectedInputError(
            f"{contact_file} not found; run `gscompose contact` first or pass --skip-contact")

    params = optimizer = None
    start_step = 0
    if args.resume:
        ck = latest_checkpoint(out, "compose")
        if ck is not None:
            doc, _, moments = load_checkpoint(ck)
            params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
            optimizer = Adam({k: params[k] for k in ("scale", "rotation", "translation")},
                             lr=config.lr, quaternion_keys=("rotation",))
            restore_optimizer(optimizer, doc, moments)
            start_step = doc["step"]
            print(f"resuming compose from step {start_step}")
    scene, params, logs = run_compose_stage(
        manifest.human, manifest.obj, config, provider, schedule, t_init,
        interaction_token=manifest.interaction_token, prompt=manifest.prompt,
        workdir=out, start_step=start_step, params=params, optimizer=optimizer)
    _write_json(out / "compose_result.json", {
        "scale": scene.scale,
        "rotation": scene.rotation.tolist(),
        "translation": scene.translation.tolist(),
        "t_init": params["t_init"].tolist(),
        "config": config.to_dict(),
    })
    print(f"compose: {config.epochs} steps done; final scale {scene.scale:.4f}")
    return EXIT_OK


def _load_scene(manifest: Manifest) -> ComposedScene:
    path = manifest.out_dir / "compose_result.json"
    if not path.exists():
        raise RejectedInputError(f"{path} not found; run `gscompose compose` first")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return ComposedScene(manifest.human, manifest.obj, float(doc["scale"]),
                         np.asarray(doc["rotation"], dtype=float),
                         np.asarray(doc["translation"], dtype=float))


def _load_residual(doc) -> ResidualTransform:
    return ResidualTransform(np.asarray(doc["rotation"], dtype=float),
                             np.asarray(doc["translation"], dtype=float),
                             per_frame=bool(doc.get("per_frame", False)))


def cmd_animate(manifest: Manifest, args) -> int:
    config = build_config(manifest, "animate", args)
    schedule = NoiseSchedule()
    provider = make_guidance_provider(manifest.provider_spec("guidance_provider"), schedule)
    scene = _load_scene(manifest)
    setup = AnimationSetup.build(scene, manifest.body, manifest.motion)
    out = manifest.out_dir
    field = residual = optimizer = None
    start_step = 0
    if args.resume:
        ck = latest_checkpoint(out, "animate")
        if ck is not None:
            doc, field, moments = load_checkpoint(ck)
            residual = ResidualTransform(
                np.asarray(doc["params"]["residual_rotation"], dtype=float),
                np.asarray(doc["params"]["residual_translation"], dtype=float),
                per_frame=config.residual_per_frame)
            params = {"residual_rotation": residual.rotation,
                      "residual_translation": residual.translation}
            lrs = {k: config.lr for k in params}
            fparams = field.params()
            params.update(fparams)
            lrs.update({k: config.hexplane_lr for k in fparams})
            optimizer = Adam(params, lr=lrs, quaternion_keys=("residual_rotation",))
            restore_optimizer(optimizer, doc, moments)
            start_step = doc["step"]
            print(f"resuming animate from step {start_step}")
    residual, field, logs = run_animate_stage(
        setup, config, provider, schedule, prompt=manifest.prompt,
        interaction_token=manifest.interaction_token, field=field, residual=residual,
        workdir=out, start_step=start_step, optimizer=optimizer)
    from gscompose.hexplane import save_field

    save_field(field, out / "field.bin")
    _write_json(out / "animate_result.json", {
        "rotation": np.asarray(residual.rotation).tolist(),
        "translation": np.asarray(residual.translation).tolist(),
        "per_frame": residual.per_frame,
        "config": config.to_dict(),
    })
    print(f"animate: {config.epochs} steps done")
    return EXIT_OK


def _animated_clouds(manifest: Manifest, scene, setup, residual, field):
    from gscompose.opt import animated_composite

    for f in range(len(manifest.motion)):
        cloud, _, _ = animated_composite(setup, f, residual, field)
        yield f, cloud


def cmd_render(manifest: Manifest, args) -> int:
    scene = _load_scene(manifest)
    out = manifest.out_dir / "renders"
    out.mkdir(parents=True, exist_ok=True)
    center = scene.center()
    anim_file = manifest.out_dir / "animate_result.json"
    if args.what == "animation" and not anim_file.exists():
        raise RejectedInputError(f"{anim_file} not found; run `gscompose animate` first")
    if args.what == "animation":
        with open(anim_file, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        residual = _load_residual(doc)
        field_path = manifest.out_dir / "field.bin"
        field = load_field(field_path) if field_path.exists() else None
        setup = AnimationSetup.build(scene, manifest.body, manifest.motion)
        frame_manifest = {"fps": manifest.motion.fps, "frames": [], "residual": []}
        for f, cloud in _animated_clouds(manifest, scene, setup, residual, field):
            cam = orbit_camera(center, 2.0, args.azimuth, args.elevation,
                               width=args.resolution, height=args.resolution)
            save_png(rasterize(cloud, cam, threads=args.threads).rgb,
                     out / f"frame_{f:04d}.png")
            if args.export_ply:
                save_ply(cloud, out / f"frame_{f:04d}.ply")
            q, t = residual.at(f)
            frame_manifest["frames"].append(f"frame_{f:04d}.png")
            frame_manifest["residual"].append({"rotation": q.tolist(), "translation": t.tolist()})
        _write_json(out / "animation.json", frame_manifest)
        print(f"render: {len(manifest.motion)} animation frames in {out}")
    else:
        cloud = scene.composite()
        n = args.frames
        for i in range(n):
            cam = orbit_camera(center, 2.0, 360.0 * i / n, args.elevation,
                               width=args.resolution, height=args.resolution)
            save_png(rasterize(cloud, cam, threads=args.threads).rgb,
                     out / f"turntable_{i:03d}.png")
        print(f"render: {n} turntable frames in {out}")
    return EXIT_OK


def cmd_eval(manifest: Manifest, args) -> int:
    scene = _load_scene(manifest)
    setup = AnimationSetup.build(scene, manifest.body, manifest.motion)
    anim_file = manifest.out_dir / "animate_result.json"
    if anim_file.exists():
        with open(anim_file, "r", encoding="utf-8") as fh:
            residual = _load_residual(json.load(fh))
    else:
        residual = ResidualTransform.identity()
    ca_mean, ca_per_frame = evaluate_ca(setup, residual)
    records = []
    for f in range(len(manifest.motion)):
        pts = apply_residual(setup.object_pre_residual(f), residual, f)
        pen = penetration_fraction(pts, setup.frames[f].posed_vertices, manifest.body.faces)
        records.append({
            "frame": f,
            "penetration_fraction": pen,
            "correspondence_loss": ca_per_frame[f],
            "rigidity_deviation": rigidity_deviation(setup.base_transforms[f]),
        })
    doc = {"mean_correspondence_loss": ca_mean, "frames": records}
    if any(not np.isfinite(r["correspondence_loss"]) for r in records):
        raise NumericError("non-finite correspondence loss in evaluation")
    _write_json(manifest.out_dir / "eval.json", doc)
    print(f"eval: mean L_CA {ca_mean:.6g}, final-frame penetration "
          f"{records[-1]['penetration_fraction']:.3f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors (exit 3)
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gscompose",
        description="Compose and animate 3D-Gaussian human/object scenes.",
        epilog="Exit codes: 0 ok, 2 contact-not-found, 3 validation, 4 provider "
               "transport, 5 numeric.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", required=True, help="scene manifest JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a StageConfig field (repeatable)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--deterministic", action="store_true",
                        help="force single-threaded rendering")

    sub.add_parser("contact", parents=[common], help="text-guided contact retargeting")
    p_compose = sub.add_parser("compose", parents=[common], help="stage-1 placement optimization")
    p_compose.add_argument("--skip-contact", action="store_true",
                           help="initialize translation at the human centroid")
    p_compose.add_argument("--resume", action="store_true")
    p_animate = sub.add_parser("animate", parents=[common], help="stage-2 joint animation")
    p_animate.add_argument("--resume", action="store_true")
    p_render = sub.add_parser("render", parents=[common], help="render turntable or animation")
    p_render.add_argument("--what", choices=("static", "animation"), default="static")
    p_render.add_argument("--frames", type=int, default=8)
    p_render.add_argument("--resolution", type=int, default=256)
    p_render.add_argument("--azimuth", type=float, default=0.0)
    p_render.add_argument("--elevation", type=float, default=10.0)
    p_render.add_argument("--export-ply", action="store_true")
    sub.add_parser("eval", parents=[common], help="penetration / correspondence metrics")
    return parser


COMMANDS = {
    "contact": cmd_contact,
    "compose": cmd_compose,
    "animate": cmd_animate,
    "render": cmd_render,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        args.threads = 1
    try:
        manifest = Manifest(args.manifest)
        return COMMANDS[args.command](manifest, args)
    except ContactNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTACT_NOT_FOUND
    except (FormatError, RejectedInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TransportError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (NumericError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
