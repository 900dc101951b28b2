"""Sidecar acceptance: the echo-mode server passes the engine's
golden-fixture replay byte-identically, and the engine's guidance contracts
run green against it over local HTTP. Requires the engine package
(gscompose) installed in the same environment; the server itself imports
nothing from it."""

import socket
import threading
import time

import numpy as np
import pytest
import requests
import uvicorn

from gscompose_sidecar.app import create_app
from gscompose_sidecar.conformance import record, replay


@pytest.fixture(scope="module")
def base_url():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    config = uvicorn.Config(create_app("echo"), host="127.0.0.1", port=port,
                            log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    url = f"http://127.0.0.1:{port}"
    while time.time() < deadline:
        try:
            if requests.get(f"{url}/v1/health", timeout=1).ok:
                break
        except requests.RequestException:
            time.sleep(0.05)
    else:
        raise RuntimeError("sidecar did not start")
    yield url
    server.should_exit = True
    thread.join(timeout=5)


def test_criterion_9_sidecar_conformance(base_url, tmp_path):
    t0 = time.perf_counter()

    def post(endpoint, body):
        resp = requests.post(f"{base_url}/v1/{endpoint}", json=body, timeout=30)
        resp.raise_for_status()
        return resp.content

    # golden-fixture replay over real HTTP: byte-identical
    record(tmp_path, post)
    assert replay(tmp_path, post) == []

    # the engine's guidance contracts against the live server
    from gscompose.guidance import NoiseSchedule, SidecarGuidance, noise_for, sds_grad, ssds_grad

    schedule = NoiseSchedule()
    provider = SidecarGuidance(base_url)
    rng = np.random.default_rng(9)
    render = rng.random((8, 8, 3))
    noise = noise_for(render.shape, 9001)
    grad, diag = sds_grad(render, "p", 321, provider, schedule, noise)
    assert np.all(grad == 0.0)  # echo => exactly zero SDS gradient
    assert diag["surrogate"] == 0.0

    a, _ = sds_grad(render, "p", 77, provider, schedule, noise)
    b, _ = ssds_grad(render, "p", {"holding": 1.0}, 77, provider, schedule, noise)
    assert np.array_equal(a, b)

    # engine-side segmentation client against the live server
    from gscompose.contact import SidecarSegmentation, segment

    img = np.ones((16, 16, 3))
    img[5:9, 5:9] = 0.1
    mask = segment(img, "hand", SidecarSegmentation(base_url))
    assert mask.values.shape == (16, 16)
    assert mask.values[6, 6] == 1.0 and mask.values[0, 0] == 0.0

    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(f"\nACCEPTANCE 9: PASS (golden replay byte-identical, engine guidance "
          f"suite green over HTTP, {elapsed:.1f}s)")
