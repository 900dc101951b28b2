"""Golden-fixture conformance: record deterministic request/response pairs
from a running server, then replay them against any server and demand
byte-identical responses.

    python -m gscompose_sidecar.conformance --base-url http://host:port \
        --fixtures DIR record
    python -m gscompose_sidecar.conformance --base-url http://host:port \
        --fixtures DIR replay
"""

import argparse
import base64
import io
import json
import sys
from pathlib import Path

import numpy as np


def _png(rgb_uint8) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb_uint8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def build_requests():
    """Deterministic fixture requests covering both endpoints."""
    rng = np.random.default_rng(424242)
    fixtures = []
    for i, shape in enumerate([(8, 8, 3), (4, 6, 1)]):
        latent = rng.standard_normal(shape).astype("<f4")
        noise = rng.standard_normal(shape).astype("<f4")
        fixtures.append(("denoise", {
            "latent": base64.b64encode(latent.tobytes()).decode(),
            "latent_nbytes": latent.nbytes,
            "shape": list(shape),
            "timestep": 123 + i,
            "noise": base64.b64encode(noise.tobytes()).decode(),
            "noise_nbytes": noise.nbytes,
            "prompt": "an arm holding a cube",
            "token_scales": {"holding": 2.0},
            "branch": "rgb" if shape[-1] == 3 else "depth",
            "guidance_scale": 7.5,
            "seed": 99,
        }))
    img = (rng.random((16, 16, 3)) * 255).astype(np.uint8)
    img[4:9, 6:11] = 30  # a dark block the luminance rule must pick up
    fixtures.append(("segment", {
        "image": base64.b64encode(_png(img)).decode(),
        "prompt": "hand",
    }))
    return fixtures


def _default_post(base_url):
    import requests

    def post(endpoint, body):
        resp = requests.post(f"{base_url}/v1/{endpoint}", json=body, timeout=30)
        resp.raise_for_status()
        return resp.content

    return post


def record(fixtures_dir, post):
    out = Path(fixtures_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (endpoint, body) in enumerate(build_requests()):
        raw = post(endpoint, body)
        (out / f"{i:02d}_{endpoint}.request.json").write_text(
            json.dumps(body, sort_keys=True))
        (out / f"{i:02d}_{endpoint}.response.bin").write_bytes(raw)
    return len(build_requests())


def replay(fixtures_dir, post):
    root = Path(fixtures_dir)
    pairs = sorted(root.glob("*.request.json"))
    if not pairs:
        raise FileNotFoundError(f"no fixtures under {root}; run record first")
    failures = []
    for req_path in pairs:
        endpoint = req_path.stem.split("_", 1)[1].split(".")[0]
        body = json.loads(req_path.read_text())
        expected = req_path.with_name(req_path.name.replace(".request.json", ".response.bin")).read_bytes()
        got = post(endpoint, body)
        if got != expected:
            failures.append(req_path.name)
    return failures


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gscompose-sidecar-conformance")
    parser.add_argument("--base-url", required=True)
    parser.add_argument("--fixtures", required=True)
    parser.add_argument("action", choices=("record", "replay"))
    args = parser.parse_args(argv)
    post = _default_post(args.base_url.rstrip("/"))
    if args.action == "record":
        n = record(args.fixtures, post)
        print(f"recorded {n} fixtures")
        return 0
    failures = replay(args.fixtures, post)
    if failures:
        print(f"conformance FAILED: {failures}")
        return 1
    print("conformance: all responses byte-identical")
    return 0


if __name__ == "__main__":
    sys.exit(main())
