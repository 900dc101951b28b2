import base64
import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from gscompose_sidecar.app import create_app
from gscompose_sidecar.conformance import build_requests, record, replay


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app("echo"))


def denoise_body(shape=(4, 4, 3), seed=0, **extra):
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal(shape).astype("<f4")
    noise = rng.standard_normal(shape).astype("<f4")
    body = {
        "latent": base64.b64encode(latent.tobytes()).decode(),
        "latent_nbytes": latent.nbytes,
        "shape": list(shape),
        "timestep": 100,
        "noise": base64.b64encode(noise.tobytes()).decode(),
        "noise_nbytes": noise.nbytes,
        "prompt": "p",
        "token_scales": {},
        "branch": "rgb",
        "guidance_scale": 7.5,
        "seed": 1,
    }
    body.update(extra)
    return body, noise


def png_bytes(rgb_uint8):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb_uint8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class TestEchoDenoise:
    def test_noise_pred_is_bit_exact_echo(self, client):
        body, noise = denoise_body()
        resp = client.post("/v1/denoise", json=body)
        assert resp.status_code == 200
        doc = resp.json()
        assert doc["noise_pred"] == body["noise"]
        assert doc["shape"] == body["shape"]
        assert doc["nbytes"] == noise.nbytes
        back = np.frombuffer(base64.b64decode(doc["noise_pred"]), dtype="<f4")
        assert back.tobytes() == noise.tobytes()

    def test_shape_follows_request(self, client):
        body, _ = denoise_body(shape=(3, 5, 1))
        doc = client.post("/v1/denoise", json=body).json()
        assert doc["shape"] == [3, 5, 1]

    def test_missing_field_is_400_naming_it(self, client):
        body, _ = denoise_body()
        del body["noise"]
        resp = client.post("/v1/denoise", json=body)
        assert resp.status_code == 400
        assert "noise" in resp.json()["detail"]

    def test_byte_count_mismatch_is_400(self, client):
        body, _ = denoise_body()
        body["noise_nbytes"] = 7
        resp = client.post("/v1/denoise", json=body)
        assert resp.status_code == 400
        assert "noise" in resp.json()["detail"]

    def test_invalid_json_is_400(self, client):
        resp = client.post("/v1/denoise", content=b"{nope",
                           headers={"content-type": "application/json"})
        assert resp.status_code == 400

    def test_bad_branch_rejected(self, client):
        body, _ = denoise_body(branch="sideways")
        assert client.post("/v1/denoise", json=body).status_code == 400


class TestEchoSegment:
    def test_mask_dimensions_match_image(self, client):
        img = np.full((12, 20, 3), 255, dtype=np.uint8)
        resp = client.post("/v1/segment", json={"image": base64.b64encode(png_bytes(img)).decode(),
                                                "prompt": "hand"})
        assert resp.status_code == 200
        from PIL import Image

        mask = np.asarray(Image.open(io.BytesIO(base64.b64decode(resp.json()["mask"]))))
        assert mask.shape == (12, 20)
        assert mask.sum() == 0  # pure white image: nothing below the threshold

    def test_luminance_rule(self, client):
        img = np.full((8, 8, 3), 255, dtype=np.uint8)
        img[2:5, 3:6] = 10
        resp = client.post("/v1/segment", json={"image": base64.b64encode(png_bytes(img)).decode(),
                                                "prompt": "hand"})
        from PIL import Image

        mask = np.asarray(Image.open(io.BytesIO(base64.b64decode(resp.json()["mask"]))))
        assert np.array_equal(mask[2:5, 3:6], np.full((3, 3), 255))
        assert mask.sum() == 9 * 255

    def test_broken_png_is_400(self, client):
        resp = client.post("/v1/segment", json={"image": base64.b64encode(b"junk").decode(),
                                                "prompt": "x"})
        assert resp.status_code == 400


class TestHealthAndRealMode:
    def test_health_lists_echo(self, client):
        doc = client.get("/v1/health").json()
        assert doc["ok"] is True and "echo" in doc["model_ids"]

    def test_real_mode_without_backend_is_503_with_retry_after(self):
        real = TestClient(create_app("real"))
        body, _ = denoise_body()
        resp = real.post("/v1/denoise", json=body)
        assert resp.status_code == 503
        assert "Retry-After" in resp.headers

    def test_real_mode_backend_roundtrip(self):
        class PlusOne:
            def denoise(self, latent, timestep, noise, prompt, token_scales, branch,
                        guidance_scale, seed):
                return noise + 1.0

        real = TestClient(create_app("real", denoise_backend=PlusOne()))
        body, noise = denoise_body()
        doc = real.post("/v1/denoise", json=body).json()
        back = np.frombuffer(base64.b64decode(doc["noise_pred"]), dtype="<f4").reshape(4, 4, 3)
        assert np.allclose(back, noise + 1.0)


class TestConformance:
    def test_record_then_replay_is_byte_identical(self, client, tmp_path):
        def post(endpoint, body):
            resp = client.post(f"/v1/{endpoint}", json=body)
            assert resp.status_code == 200
            return resp.content

        n = record(tmp_path, post)
        assert n == len(build_requests())
        assert replay(tmp_path, post) == []

    def test_replay_detects_mismatch(self, client, tmp_path):
        def post(endpoint, body):
            return client.post(f"/v1/{endpoint}", json=body).content

        record(tmp_path, post)
        victim = sorted(tmp_path.glob("*.response.bin"))[0]
        victim.write_bytes(b"corrupted")
        assert len(replay(tmp_path, post)) == 1
