"""Procedural desk-scale assets: a watertight 2-link capsule arm with four
joints, Gaussian clouds for the arm surface and simple objects, and a
60-frame arm-raise motion. Everything is generated deterministically at
build/test time; no binary blobs ship with the repository.

Run `python -m gscompose.assets OUTDIR` to write the bundled scene used by
the CLI smoke tests (skeleton, human/object PLYs, motion, manifest).
"""

import json
import sys
from pathlib import Path

import numpy as np

from gscompose import quat
from gscompose.body import MotionSequence, PoseParams, SkinnedBody, save_motion, save_skeleton
from gscompose.gauss import GaussianCloud, save_ply

ARM_JOINT_X = (0.0, 0.5, 1.0, 1.2)  # shoulder, elbow, wrist, hand tip
ARM_RADIUS = 0.12
COLOR_DC = {  # solid colors expressed as band-0 SH coefficients
    "skin": (0.9, 0.7, 0.55),
    "red": (0.85, 0.2, 0.15),
    "blue": (0.2, 0.35, 0.85),
}


def _dc(color):
    rgb = np.asarray(COLOR_DC.get(color, color), dtype=float)
    return (rgb - 0.5) / 0.28209479177387814


def _chain_weights(xs, joint_xs):
    """Piecewise-linear blend between adjacent joints along the arm axis."""
    k = len(joint_xs)
    w = np.zeros((len(xs), k))
    for i, x in enumerate(xs):
        if x <= joint_xs[0]:
            w[i, 0] = 1.0
        elif x >= joint_xs[-1]:
            w[i, -1] = 1.0
        else:
            j = int(np.searchsorted(joint_xs, x) - 1)
            u = (x - joint_xs[j]) / (joint_xs[j + 1] - joint_xs[j])
            w[i, j] = 1.0 - u
            w[i, j + 1] = u
    return w


def capsule_arm_body(segments: int = 16, cap_rings: int = 4, shaft_rings: int = 24) -> SkinnedBody:
    """Watertight capsule along +x with a 4-joint chain (~500 vertices)."""
    length = ARM_JOINT_X[-1]
    r = ARM_RADIUS
    ring_x = []
    ring_r = []
    for i in range(1, cap_rings + 1):  # shoulder cap, pole excluded
        a = np.pi / 2 * (1 - i / cap_rings)
        ring_x.append(-r * np.sin(a))
        ring_r.append(r * np.cos(a))
    for i in range(1, shaft_rings):
        ring_x.append(length * i / shaft_rings)
        ring_r.append(r)
    for i in range(cap_rings, 0, -1):  # hand cap
        a = np.pi / 2 * (1 - i / cap_rings)
        ring_x.append(length + r * np.sin(a))
        ring_r.append(r * np.cos(a))

    verts = [np.array([-r, 0.0, 0.0])]
    for x, rr in zip(ring_x, ring_r):
        for s in range(segments):
            ang = 2 * np.pi * s / segments
            verts.append(np.array([x, rr * np.cos(ang), rr * np.sin(ang)]))
    verts.append(np.array([length + r, 0.0, 0.0]))
    verts = np.stack(verts)

    faces = []
    n_rings = len(ring_x)
    first = lambda ring: 1 + ring * segments
    for s in range(segments):
        faces.append([0, first(0) + (s + 1) % segments, first(0) + s])
    for ring in range(n_rings - 1):
        for s in range(segments):
            a = first(ring) + s
            b = first(ring) + (s + 1) % segments
            c = first(ring + 1) + s
            d = first(ring + 1) + (s + 1) % segments
            faces.append([a, b, d])
            faces.append([a, d, c])
    tip = len(verts) - 1
    for s in range(segments):
        faces.append([tip, first(n_rings - 1) + s, first(n_rings - 1) + (s + 1) % segments])

    joint_rest = np.array([[x, 0.0, 0.0] for x in ARM_JOINT_X])
    weights = _chain_weights(verts[:, 0], ARM_JOINT_X)
    return SkinnedBody(
        template_vertices=verts,
        faces=np.asarray(faces, dtype=int),
        joint_parents=np.array([-1, 0, 1, 2]),
        joint_rest_positions=joint_rest,
        skin_weights=weights,
    )


def arm_raise_motion(frames: int = 60, elbow_degrees: float = 60.0, fps: float = 30.0,
                     wrist_degrees: float = 15.0, hand_degrees: float = 30.0) -> MotionSequence:
    """Arm raise about +z, ramping linearly over the clip.

    The wrist and hand joints bend too: a chain whose tip never rotates has
    identical rest-relative transforms below the last bent joint, which
    would make every wrist-region blend exactly rigid and the whole
    penetration story trivial.
    """
    seq = []
    for f in range(frames):
        u = f / max(frames - 1, 1)
        pose = np.zeros((4, 3))
        pose[1, 2] = np.radians(elbow_degrees) * u
        pose[2, 2] = np.radians(wrist_degrees) * u
        pose[3, 2] = np.radians(hand_degrees) * u
        seq.append(PoseParams(pose))
    return MotionSequence(fps=fps, frames=seq)


def arm_cloud(body: SkinnedBody, stride: int = 3, scale: float = 0.035,
              opacity: float = 0.92, color="skin", seed: int = 7) -> GaussianCloud:
    """Gaussians on the arm surface: every `stride`-th mesh vertex."""
    rng = np.random.default_rng(seed)
    centers = body.template_vertices[::stride]
    n = centers.shape[0]
    sh = np.tile(_dc(color), (n, 1))[:, :, None]
    sh += rng.normal(0, 0.02, size=sh.shape)
    return GaussianCloud(
        means=centers,
        rotations=np.tile(quat.IDENTITY, (n, 1)),
        scales=np.full((n, 3), scale),
        opacities=np.full(n, opacity),
        sh_coeffs=sh,
    )


def cube_cloud(edge: float = 0.12, per_edge: int = 4, scale: float | None = None,
               opacity: float = 0.92, color="red", seed: int = 11) -> GaussianCloud:
    """Solid cube of Gaussians centered at the origin."""
    rng = np.random.default_rng(seed)
    ticks = np.linspace(-edge / 2, edge / 2, per_edge)
    centers = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    n = centers.shape[0]
    if scale is None:
        scale = edge / (2 * per_edge)
    sh = np.tile(_dc(color), (n, 1))[:, :, None] + rng.normal(0, 0.02, size=(n, 3, 1))
    return GaussianCloud(
        means=centers,
        rotations=np.tile(quat.IDENTITY, (n, 1)),
        scales=np.full((n, 3), scale),
        opacities=np.full(n, opacity),
        sh_coeffs=sh,
    )


def sphere_cloud(radius: float = 0.1, count: int = 80, opacity: float = 0.9,
                 color="blue", seed: int = 13) -> GaussianCloud:
    """Fibonacci-spiral shell of Gaussians centered at the origin."""
    rng = np.random.default_rng(seed)
    i = np.arange(count)
    phi = np.arccos(1 - 2 * (i + 0.5) / count)
    theta = np.pi * (1 + 5**0.5) * i
    centers = radius * np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
    )
    sh = np.tile(_dc(color), (count, 1))[:, :, None] + rng.normal(0, 0.02, size=(count, 3, 1))
    return GaussianCloud(
        means=centers,
        rotations=np.tile(quat.IDENTITY, (count, 1)),
        scales=np.full((count, 3), radius / 3),
        opacities=np.full(count, opacity),
        sh_coeffs=sh,
    )


def write_bundle(out_dir, frames: int = 60) -> dict:
    """Write the bundled arm + cube scene and its manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = capsule_arm_body()
    save_skeleton(body, out / "arm_skeleton.json")
    save_ply(arm_cloud(body), out / "human.ply")
    save_ply(cube_cloud(), out / "object.ply")
    save_motion(arm_raise_motion(frames=frames), out / "arm_raise.json")
    manifest = {
        "human_ply": "human.ply",
        "object_ply": "object.ply",
        "skeleton": "arm_skeleton.json",
        "motion": "arm_raise.json",
        "prompt": "an arm holding a cube",
        "interaction_token": "holding",
        "body_part_prompt": "hand",
        "guidance_provider": "mock:echo",
        "segmentation_provider": "mock:disk:cx=0.88,cy=0.5,r=0.1",
        "output_dir": "out",
        "overrides": {
            "train_resolution": 64,
            "compose_epochs": 400,
            "animate_epochs": 400,
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "assets_bundle"
    write_bundle(target)
    print(f"bundle written to {target}")
