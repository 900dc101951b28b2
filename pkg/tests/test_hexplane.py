import numpy as np
import pytest

from gscompose.hexplane import PLANE_AXES, HexPlaneField, load_field, save_field
from testutil import rel_err

BOUNDS = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]


def small_field(rng=None, resolution=5, channels=2, hidden=8, head="zero"):
    f = HexPlaneField.create(BOUNDS, resolution=resolution, channels=channels,
                             hidden=hidden, rng=rng or np.random.default_rng(0))
    if head == "random":
        r = np.random.default_rng(99)
        f.weights[4] = r.normal(0, 0.5, size=f.weights[4].shape)
        f.weights[5] = r.normal(0, 0.1, size=f.weights[5].shape)
    return f


def bilinear_oracle(grid, u, v):
    """Straightforward scalar bilinear interpolation, written independently."""
    ra, rb, c = grid.shape
    x = u * (ra - 1)
    y = v * (rb - 1)
    i = min(int(np.floor(x)), ra - 2)
    j = min(int(np.floor(y)), rb - 2)
    s = x - i
    t = y - j
    out = np.zeros(c)
    for di, dj, w in [(0, 0, (1 - s) * (1 - t)), (1, 0, s * (1 - t)),
                      (0, 1, (1 - s) * t), (1, 1, s * t)]:
        out += w * grid[i + di, j + dj]
    return out


class TestFeatures:
    def test_grid_node_returns_stored_features(self):
        field = small_field()
        # resolution 5: nodes at multiples of 0.25, exactly representable
        x = np.array([0.25, 0.5, 0.75])
        t = 0.25
        feats = field.features(x, t)
        vals = [0.25, 0.5, 0.75, 0.25]
        col = 0
        for pi, (a, b) in enumerate(PLANE_AXES):
            c = field.planes[pi].shape[2]
            node = field.planes[pi][int(vals[a] * 4), int(vals[b] * 4)]
            assert np.array_equal(feats[col:col + c], node)
            col += c

    def test_constant_grids_give_constant_features(self):
        field = small_field()
        for pi in range(6):
            field.planes[pi][:] = 0.7
        rng = np.random.default_rng(1)
        for _ in range(5):
            f = field.features(rng.random(3), rng.random())
            assert np.max(np.abs(f - 0.7)) < 1e-12

    def test_matches_scalar_bilinear_oracle(self):
        field = small_field(np.random.default_rng(2))
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.random(3)
            t = rng.random()
            feats = field.features(x, t)
            vals = np.append(x, t)
            col = 0
            for pi, (a, b) in enumerate(PLANE_AXES):
                c = field.planes[pi].shape[2]
                oracle = bilinear_oracle(field.planes[pi], vals[a], vals[b])
                assert np.max(np.abs(feats[col:col + c] - oracle)) < 1e-10
                col += c

    def test_continuity_across_cell_boundaries(self):
        field = small_field(np.random.default_rng(4))
        eps = 1e-7
        for boundary in (0.25, 0.5, 0.75):
            a = field.features(np.array([boundary - eps, 0.4, 0.4]), 0.3)
            b = field.features(np.array([boundary + eps, 0.4, 0.4]), 0.3)
            assert np.max(np.abs(a - b)) < 1e-5

    def test_out_of_bounds_clamped_and_flagged(self):
        field = small_field()
        before = field.clamp_count
        inside = field.features(np.array([1.0, 0.5, 0.5]), 0.5)
        outside = field.features(np.array([1.5, 0.5, 0.5]), 0.5)
        assert np.array_equal(inside, outside)
        assert field.clamp_count == before + 1


class TestOffsets:
    def test_fresh_field_returns_exact_zero(self):
        field = small_field(np.random.default_rng(5))
        rng = np.random.default_rng(6)
        for _ in range(10):
            assert np.array_equal(field.offset(rng.random(3), rng.random()), np.zeros(3))

    def test_single_layer_identity_stub_hand_computed(self):
        # constant grids c, MLP reduced to an affine map: out = tanh(c W1 + b1)
        # pushed through identity-ish layers chosen so it is hand-checkable
        field = small_field()
        for pi in range(6):
            field.planes[pi][:] = 0.5
        feat = 12
        field.weights[0] = np.zeros((feat, 8))
        field.weights[0][:3, :3] = np.eye(3) * 0.2
        field.weights[1] = np.full(8, 0.1)
        field.weights[2] = np.eye(8)
        field.weights[3] = np.zeros(8)
        field.weights[4] = np.zeros((8, 3))
        field.weights[4][:3, :3] = np.eye(3) * 2.0
        field.weights[5] = np.array([0.05, 0.0, -0.05])
        # hand computation: f = 0.5 everywhere; pre1 = 0.5*0.2*1(+...)+0.1
        pre1 = np.full(8, 0.1)
        pre1[:3] += 0.5 * 0.2
        h1 = np.tanh(pre1)
        h2 = np.tanh(h1)
        expect = 2.0 * h2[:3] + np.array([0.05, 0.0, -0.05])
        got = field.offset(np.array([0.3, 0.7, 0.2]), 0.9)
        assert np.max(np.abs(got - expect)) < 1e-12

    def test_parameter_gradients_finite_difference(self):
        field = small_field(np.random.default_rng(7), head="random")
        rng = np.random.default_rng(8)
        xs = rng.random((4, 3))
        t = 0.37

        def loss():
            out = field.offsets(xs, t)
            return float(np.sum(out * out))

        out, cache = field.offsets_with_cache(xs, t)
        grads, _ = field.offsets_vjp(cache, 2.0 * out)

        h = 1e-4
        worst = 0.0
        for name, arr in field.params().items():
            flat = arr.ravel()
            ga = grads[name].ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss()
                flat[i] = orig - h
                fm = loss()
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                if abs(fd) > 1e-12 or abs(ga[i]) > 1e-12:
                    worst = max(worst, abs(fd - ga[i]) / max(abs(fd), abs(ga[i]), 1e-6))
        assert worst < 1e-3

    def test_query_position_gradient_finite_difference(self):
        field = small_field(np.random.default_rng(9), head="random")
        rng = np.random.default_rng(10)
        xs = rng.uniform(0.1, 0.9, size=(3, 3))
        t = 0.42
        out, cache = field.offsets_with_cache(xs, t)
        _, dxs = field.offsets_vjp(cache, 2.0 * out)

        h = 1e-6
        fd = np.zeros_like(xs)
        for n in range(xs.shape[0]):
            for a in range(3):
                xp = xs.copy(); xp[n, a] += h
                xm = xs.copy(); xm[n, a] -= h
                fp = float(np.sum(field.offsets(xp, t) ** 2))
                fm = float(np.sum(field.offsets(xm, t) ** 2))
                fd[n, a] = (fp - fm) / (2 * h)
        assert rel_err(dxs, fd, floor=1e-6) < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        field = small_field(np.random.default_rng(11), head="random")
        p = tmp_path / "field.bin"
        save_field(field, p)
        back = load_field(p)
        assert back.out_dim == field.out_dim
        rng = np.random.default_rng(12)
        for _ in range(5):
            x, t = rng.random(3), rng.random()
            a = field.offset(x, t)
            b = back.offset(x, t)
            # float32 storage: agreement to storage precision only
            assert np.max(np.abs(a - b)) < 1e-6

    def test_extended_field_has_ten_outputs(self):
        f = HexPlaneField.create(BOUNDS, resolution=4, channels=2, hidden=8,
                                 extended=True, rng=np.random.default_rng(13))
        assert f.offset(np.array([0.5, 0.5, 0.5]), 0.5).shape == (10,)
