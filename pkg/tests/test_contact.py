import numpy as np
import pytest

from gscompose import quat, wire
from gscompose.contact import (
    ContactLabels,
    DiskMask,
    FileMask,
    HalfPlaneMask,
    SegmentationMask,
    ZeroMask,
    backproject_mask,
    classify_and_init,
    frontal_camera,
    make_segmentation_provider,
    retarget,
    segment,
)
from gscompose.errors import ContactNotFoundError, RejectedInputError, TransportError
from gscompose.gauss import Camera, GaussianCloud
from test_render import lookat_oracle, scene_camera, splat_cloud


class TestProviders:
    def test_disk_mask_geometry(self):
        img = np.zeros((64, 64, 3))
        mask = DiskMask(cx=0.5, cy=0.5, r=0.25).segment(img, "hand")
        assert mask[32, 32] == 1.0
        assert mask[32, 50] == 0.0
        # radius 16 px: point at dx=15 inside, dx=17 outside
        assert mask[32, 32 + 15] == 1.0 and mask[32, 32 + 17] == 0.0

    def test_zero_mask_flags_empty(self):
        mask = segment(np.zeros((8, 8, 3)), "hand", ZeroMask())
        assert mask.empty

    def test_halfplane(self):
        img = np.zeros((4, 8, 3))
        m = HalfPlaneMask(axis="x", frac=0.5).segment(img, "")
        assert m[:, :4].sum() == 0 and m[:, 4:].sum() == 16

    def test_file_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(70)
        mask = (rng.random((32, 32)) > 0.6).astype(float)
        p = tmp_path / "m.png"
        p.write_bytes(wire.png_from_mask(mask))
        back = FileMask(p).segment(np.zeros((32, 32, 3)), "x")
        assert np.array_equal(back, mask)

    def test_provider_factory(self):
        assert isinstance(make_segmentation_provider("mock:disk:cx=0.7,cy=0.4,r=0.1"), DiskMask)
        assert isinstance(make_segmentation_provider("mock:zero"), ZeroMask)
        with pytest.raises(RejectedInputError):
            make_segmentation_provider("carrier-pigeon")

    def test_retry_policy(self, monkeypatch):
        monkeypatch.setattr("gscompose.contact.time.sleep", lambda s: None)

        class Flaky:
            def __init__(self, failures):
                self.failures = failures
                self.calls = 0

            def segment(self, image, prompt):
                self.calls += 1
                if self.calls <= self.failures:
                    raise TransportError("down")
                return np.ones(np.asarray(image).shape[:2])

        ok = Flaky(2)
        mask = segment(np.zeros((4, 4, 3)), "hand", ok)
        assert ok.calls == 3 and not mask.empty

        dead = Flaky(99)
        with pytest.raises(TransportError, match="3 attempts"):
            segment(np.zeros((4, 4, 3)), "hand", dead)
        assert dead.calls == 3


def brute_force_weights(cloud, camera, mask):
    """Loop over (pixel, gaussian) pairs with independent compositing."""
    h, w = camera.height, camera.width
    rot, eye = lookat_oracle(camera)
    f = camera.focal
    cx, cy = camera.principal
    pts = (cloud.means - eye) @ rot.T
    per_g = []
    for i in range(cloud.count):
        x, y, z = pts[i]
        m2d = np.array([f * x / z + cx, f * y / z + cy])
        rm = quat.to_matrix(cloud.rotations[i])
        cov = rm @ np.diag(cloud.scales[i] ** 2) @ rm.T
        jac = np.array([[f / z, 0, -f * x / z**2], [0, f / z, -f * y / z**2]])
        cov2d = jac @ rot @ cov @ rot.T @ jac.T + 0.3 * np.eye(2)
        lam = np.linalg.inv(cov2d)
        per_g.append((z, i, m2d, lam))
    per_g.sort(key=lambda t: (t[0], t[1]))
    weights = np.zeros(cloud.count)
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            p = np.array([c + 0.5, r + 0.5])
            transmit = 1.0
            for z, i, m2d, lam in per_g:
                d = p - m2d
                g = cloud.opacities[i] * np.exp(-0.5 * d @ lam @ d)
                if g < 1 / 255:
                    continue
                weights[i] += g * transmit
                transmit *= 1 - g
    return weights


class TestBackproject:
    def test_single_opaque_gaussian_single_pixel(self):
        cloud = GaussianCloud([[0, 0, 0.0]], [quat.IDENTITY], [[2.0, 2.0, 2.0]], [0.8],
                              np.zeros((1, 3, 1)))
        cam = scene_camera(32, 32)
        mvals = np.zeros((32, 32))
        mvals[16, 16] = 1.0
        w = backproject_mask(cloud, cam, SegmentationMask(mvals, "p"))
        assert abs(w[0] - 0.8) < 1e-3

    def test_zero_mask_zero_weights(self):
        rng = np.random.default_rng(71)
        cloud = splat_cloud(rng, 8)
        cam = scene_camera(32, 32)
        w = backproject_mask(cloud, cam, SegmentationMask(np.zeros((32, 32)), "p"))
        assert np.all(w == 0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(72)
        cloud = splat_cloud(rng, 16)
        cam = scene_camera(32, 32)
        mask = DiskMask(cx=0.45, cy=0.55, r=0.3).segment(np.zeros((32, 32, 3)), "")
        w = backproject_mask(cloud, cam, SegmentationMask(mask, "p"))
        oracle = brute_force_weights(cloud, cam, mask)
        assert np.max(np.abs(w - oracle)) < 1e-6

    def test_resolution_mismatch_rejected(self):
        rng = np.random.default_rng(73)
        with pytest.raises(RejectedInputError):
            backproject_mask(splat_cloud(rng, 2), scene_camera(32, 32),
                             SegmentationMask(np.zeros((16, 16)), "p"))

    def test_mask_shrink_monotonicity(self):
        rng = np.random.default_rng(74)
        cloud = splat_cloud(rng, 10)
        cam = scene_camera(32, 32)
        big = DiskMask(r=0.4).segment(np.zeros((32, 32, 3)), "")
        small = DiskMask(r=0.2).segment(np.zeros((32, 32, 3)), "")
        assert np.all(small <= big)
        wb = backproject_mask(cloud, cam, SegmentationMask(big, "p"))
        ws = backproject_mask(cloud, cam, SegmentationMask(small, "p"))
        assert np.all(ws <= wb + 1e-15)

    def test_weights_bounded_by_masked_pixel_count(self):
        rng = np.random.default_rng(75)
        cloud = splat_cloud(rng, 6)
        cam = scene_camera(16, 16)
        mask = np.zeros((16, 16))
        mask[4:8, 4:8] = 1.0
        w = backproject_mask(cloud, cam, SegmentationMask(mask, "p"))
        assert np.all(w >= 0) and np.all(w <= mask.sum())


class TestClassify:
    def test_two_gaussian_centroid(self):
        means = np.array([[0.0, 0, 0], [1.0, 1, 1]])
        res = classify_and_init(np.array([1.0, 1.0]), means, threshold=1e-7)
        assert np.allclose(res.translation_init, [0.5, 0.5, 0.5])

    def test_single_label_is_its_mean(self):
        means = np.array([[0.3, -0.2, 0.9], [5, 5, 5.0]])
        res = classify_and_init(np.array([1.0, 0.0]), means)
        assert np.array_equal(res.translation_init, means[0])
        assert list(res.labels) == [True, False]

    def test_matches_direct_scan(self):
        rng = np.random.default_rng(76)
        weights = rng.random(100) * 1e-5
        means = rng.normal(size=(100, 3))
        res = classify_and_init(weights, means, threshold=1e-7)
        labels = [i for i in range(100) if weights[i] > 1e-7]
        assert np.array_equal(np.nonzero(res.labels)[0], labels)
        assert np.allclose(res.translation_init, means[labels].mean(axis=0))

    def test_centroid_inside_labeled_bbox(self):
        rng = np.random.default_rng(77)
        weights = rng.random(50)
        means = rng.normal(size=(50, 3))
        res = classify_and_init(weights, means, threshold=0.5)
        sel = means[res.labels]
        assert np.all(res.translation_init >= sel.min(axis=0) - 1e-12)
        assert np.all(res.translation_init <= sel.max(axis=0) + 1e-12)

    def test_no_labels_raises(self):
        with pytest.raises(ContactNotFoundError):
            classify_and_init(np.zeros(5), np.zeros((5, 3)))


class TestRetarget:
    def test_arm_hand_disk(self):
        from gscompose.assets import arm_cloud, capsule_arm_body

        body = capsule_arm_body()
        human = arm_cloud(body)
        center = human.means.mean(axis=0)
        cam = frontal_camera(center=center, resolution=128)
        # place the disk over the hand tip in screen space
        tip = np.array([1.26, 0.0, 0.0])
        f = cam.focal
        sx = (f * (tip[0] - center[0]) / 2.0 + cam.principal[0]) / cam.width
        provider = DiskMask(cx=sx, cy=0.5, r=0.12)
        res, mask, render = retarget(human, "hand", provider, camera=cam)
        assert not mask.empty
        known = human.means[human.means[:, 0] > 1.0].mean(axis=0)
        assert np.linalg.norm(res.translation_init - known) < 0.08

    def test_zero_mask_contact_not_found(self):
        from gscompose.assets import arm_cloud, capsule_arm_body

        human = arm_cloud(capsule_arm_body())
        with pytest.raises(ContactNotFoundError) as ei:
            retarget(human, "hand", ZeroMask(), camera=frontal_camera(resolution=64))
        assert "hand" in str(ei.value)


class TestVariants:
    def test_soft_centroid_flag(self):
        from gscompose.assets import arm_cloud, capsule_arm_body

        human = arm_cloud(capsule_arm_body())
        cam = frontal_camera(center=human.means.mean(axis=0), resolution=96)
        provider = DiskMask(cx=0.88, cy=0.5, r=0.12)
        hard, _, _ = retarget(human, "hand", provider, camera=cam)
        soft, _, _ = retarget(human, "hand", provider, camera=cam, soft_centroid=True)
        assert not np.array_equal(hard.translation_init, soft.translation_init)
        sel = human.means[soft.labels]
        assert np.all(soft.translation_init >= sel.min(axis=0) - 1e-12)
        assert np.all(soft.translation_init <= sel.max(axis=0) + 1e-12)

    def test_multiview_union_accumulates_weights(self):
        from gscompose.assets import arm_cloud, capsule_arm_body
        from gscompose.gauss import orbit_camera

        human = arm_cloud(capsule_arm_body())
        center = human.means.mean(axis=0)
        cam = frontal_camera(center=center, resolution=64)
        back = orbit_camera(center, 2.0, 180.0, 0.0, width=64, height=64)
        provider = DiskMask(cx=0.5, cy=0.5, r=0.35)
        single, _, _ = retarget(human, "arm", provider, camera=cam)
        multi, _, _ = retarget(human, "arm", provider, camera=cam, extra_cameras=[back])
        assert multi.labels.sum() >= single.labels.sum()
        assert np.all(multi.weights >= single.weights - 1e-12)
