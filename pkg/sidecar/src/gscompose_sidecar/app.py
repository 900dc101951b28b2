"""HTTP server speaking the engine's provider wire protocol.

Endpoints:
    POST /v1/denoise   latent/noise as base64 float32 little-endian blobs
    POST /v1/segment   image/mask as base64 PNG bytes
    GET  /v1/health    {"ok": true, "model_ids": [...]}

Echo mode answers without any model weights: denoise returns the injected
noise bit-exactly (the provider contract's fixed point) and segment applies
a deterministic luminance threshold (mask = luma <= 247), so golden fixtures
recorded against one server replay byte-identically against any other.

Real mode delegates to pluggable backends loaded by dotted path; a denoise
backend is expected to wrap a pretrained latent-diffusion model and apply
`token_scales` by multiplying the cross-attention maps of matching prompt
tokens. Without a configured backend, real mode answers 503 with Retry-After.
"""

import argparse
import base64
import importlib
import io

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

LUMA_THRESHOLD = 247  # echo-mode segmentation: everything darker than near-white


def _field(body: dict, name: str, kind=None):
    if name not in body:
        raise HTTPException(status_code=400, detail=f"missing field {name!r}")
    value = body[name]
    if kind is not None and not isinstance(value, kind):
        raise HTTPException(status_code=400, detail=f"field {name!r} has wrong type")
    return value


def _decode_blob(body: dict, name: str, shape):
    raw = base64.b64decode(_field(body, name, str))
    declared = body.get(f"{name}_nbytes")
    if declared is not None and declared != len(raw):
        raise HTTPException(status_code=400,
                            detail=f"field {name!r} declares {declared} bytes, got {len(raw)}")
    want = int(np.prod(shape)) * 4
    if len(raw) != want:
        raise HTTPException(status_code=400,
                            detail=f"field {name!r} holds {len(raw)} bytes, shape needs {want}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


def load_backend(path: str):
    module, _, attr = path.rpartition(".")
    obj = getattr(importlib.import_module(module), attr)
    return obj() if isinstance(obj, type) else obj


def create_app(mode: str = "echo", denoise_backend=None, segment_backend=None) -> FastAPI:
    app = FastAPI(title="gscompose-sidecar")
    state = {"mode": mode, "denoise": denoise_backend, "segment": segment_backend}

    def _unavailable(which: str):
        return JSONResponse(
            status_code=503,
            content={"detail": f"real-mode {which} backend not configured or failed"},
            headers={"Retry-After": "30"},
        )

    @app.get("/v1/health")
    def health():
        ids = ["echo"] if state["mode"] == "echo" else [
            type(b).__name__ for b in (state["denoise"], state["segment"]) if b is not None
        ]
        return {"ok": True, "model_ids": ids}

    @app.post("/v1/denoise")
    async def denoise(request: Request):
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(status_code=400, detail="body is not valid JSON")
        shape = tuple(_field(body, "shape", list))
        _field(body, "timestep", int)
        _field(body, "prompt", str)
        latent = _decode_blob(body, "latent", shape)
        noise = _decode_blob(body, "noise", shape)
        scales = body.get("token_scales") or {}
        if not isinstance(scales, dict):
            raise HTTPException(status_code=400, detail="field 'token_scales' must be a map")
        branch = body.get("branch", "rgb")
        if branch not in ("rgb", "depth"):
            raise HTTPException(status_code=400, detail="field 'branch' must be rgb|depth")

        if state["mode"] == "echo":
            # bit-exact echo: re-emit the noise payload unchanged
            return {"noise_pred": body["noise"], "nbytes": noise.nbytes,
                    "shape": list(shape)}
        if state["denoise"] is None:
            return _unavailable("denoise")
        try:
            pred = state["denoise"].denoise(
                latent=latent.astype(np.float32), timestep=body["timestep"],
                noise=noise.astype(np.float32), prompt=body["prompt"],
                token_scales={k: float(v) for k, v in scales.items()},
                branch=branch, guidance_scale=float(body.get("guidance_scale", 7.5)),
                seed=int(body.get("seed", 0)))
        except Exception:
            return _unavailable("denoise")
        pred = np.asarray(pred)
        if pred.shape != shape:  # protocol invariant: response shape == request shape
            return _unavailable("denoise")
        blob = np.ascontiguousarray(pred, dtype="<f4").tobytes()
        return {"noise_pred": base64.b64encode(blob).decode("ascii"),
                "nbytes": len(blob), "shape": list(shape)}

    @app.post("/v1/segment")
    async def segment(request: Request):
        from PIL import Image

        try:
            body = await request.json()
        except Exception:
            raise HTTPException(status_code=400, detail="body is not valid JSON")
        prompt = _field(body, "prompt", str)
        raw = base64.b64decode(_field(body, "image", str))
        try:
            with Image.open(io.BytesIO(raw)) as im:
                rgb = np.asarray(im.convert("RGB"))
        except Exception:
            raise HTTPException(status_code=400, detail="field 'image' is not decodable PNG")

        if state["mode"] == "echo":
            luma = rgb.astype(float) @ np.array([0.299, 0.587, 0.114])
            mask = (luma <= LUMA_THRESHOLD).astype(np.uint8) * 255
        else:
            if state["segment"] is None:
                return _unavailable("segment")
            try:
                result = state["segment"].segment(image=rgb.astype(float) / 255.0,
                                                  prompt=prompt)
                mask = (np.asarray(result) >= 0.5).astype(np.uint8) * 255
            except Exception:
                return _unavailable("segment")
        if mask.shape != rgb.shape[:2]:
            return _unavailable("segment")
        buf = io.BytesIO()
        Image.fromarray(mask, mode="L").save(buf, format="PNG")
        return {"mask": base64.b64encode(buf.getvalue()).decode("ascii")}

    return app


def serve_cli(argv=None):
    import uvicorn

    parser = argparse.ArgumentParser(prog="gscompose-sidecar")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8137)
    parser.add_argument("--mode", choices=("echo", "real"), default="echo")
    parser.add_argument("--denoise-backend", help="dotted path to a denoise backend")
    parser.add_argument("--segment-backend", help="dotted path to a segment backend")
    args = parser.parse_args(argv)
    denoise = load_backend(args.denoise_backend) if args.denoise_backend else None
    segment = load_backend(args.segment_backend) if args.segment_backend else None
    app = create_app(args.mode, denoise, segment)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


if __name__ == "__main__":
    serve_cli()
