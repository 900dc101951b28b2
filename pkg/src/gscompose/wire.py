"""Wire-format helpers for the provider protocol.

JSON bodies with base64 payloads: float32 little-endian blobs for latents
and noise, PNG bytes for images and masks. Float payloads round-trip
byte-exactly; every payload declares its byte length so servers can verify.
"""

import base64
import io

import numpy as np

from gscompose.errors import FormatError


def encode_f32(arr) -> dict:
    """{'b64': ..., 'nbytes': ...} for a float32 little-endian blob."""
    raw = np.ascontiguousarray(np.asarray(arr), dtype="<f4").tobytes()
    return {"b64": base64.b64encode(raw).decode("ascii"), "nbytes": len(raw)}


def decode_f32(payload, shape) -> np.ndarray:
    raw = base64.b64decode(payload["b64"])
    if payload.get("nbytes") is not None and payload["nbytes"] != len(raw):
        raise FormatError(f"payload declares {payload['nbytes']} bytes, got {len(raw)}")
    want = int(np.prod(shape)) * 4
    if len(raw) != want:
        raise FormatError(f"float payload holds {len(raw)} bytes, shape {shape} needs {want}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(float)


def png_from_image(rgb) -> bytes:
    """8-bit RGB PNG bytes from a float image in [0, 1]."""
    from PIL import Image

    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png(data: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def png_from_mask(mask) -> bytes:
    """8-bit grayscale PNG with values 0/255."""
    from PIL import Image

    arr = (np.asarray(mask) >= 0.5).astype(np.uint8) * 255
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_png(data: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        return (np.asarray(im.convert("L"), dtype=float) / 255.0 >= 0.5).astype(float)


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text)
