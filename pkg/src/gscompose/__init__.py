"""Desk-scale engine for composing and animating 3D-Gaussian human/object scenes.

The pipeline runs in two optimization stages over Gaussian-splat assets: a
composition stage that places an object against a human under text-derived
contact constraints, and an animation stage that drives both with a
skinning-based motion field plus a trainable rigid residual and a
correspondence loss. Guidance (denoising) and segmentation are pluggable
providers; deterministic in-process mocks cover the full engine without any
network or model weights.
"""

from gscompose.gauss import Camera, GaussianCloud, load_ply, save_ply

__all__ = ["Camera", "GaussianCloud", "load_ply", "save_ply"]
__version__ = "0.1.0"
