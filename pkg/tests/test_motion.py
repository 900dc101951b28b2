import numpy as np
import pytest

from gscompose import quat
from gscompose.assets import arm_raise_motion, capsule_arm_body, cube_cloud
from gscompose.body import PoseParams, SkinnedBody, forward_kinematics, vertex_lbs_matrix
from gscompose.errors import RejectedInputError
from gscompose.motion import (
    ObjectBinding,
    PosedFrame,
    ResidualTransform,
    apply_residual,
    bind_points,
    correspondence_loss,
    human_deform,
    object_base_transform,
    penetration_fraction,
    polar_rotation,
    residual_vjp,
    rigidity_deviation,
)
from testutil import central_diff, rel_err


@pytest.fixture(scope="module")
def arm():
    return capsule_arm_body()


def hand_cube_points(center=(1.05, 0.16, 0.0), edge=0.12, per_edge=3):
    ticks = np.linspace(-edge / 2, edge / 2, per_edge)
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid + np.asarray(center)


def raised_pose(degrees=60.0, wrist_degrees=15.0, hand_degrees=30.0):
    # every chain joint bends a little: blends below the last rotated joint
    # would otherwise be exactly rigid
    pose = np.zeros((4, 3))
    pose[1, 2] = np.radians(degrees)
    pose[2, 2] = np.radians(wrist_degrees)
    pose[3, 2] = np.radians(hand_degrees)
    return PoseParams(pose)


class TestHumanDeform:
    def test_identity_at_rest(self, arm):
        pts = hand_cube_points()
        binding = bind_points(pts, arm)
        out = human_deform(pts, binding, arm, PoseParams.rest(arm))
        assert np.max(np.abs(out - pts)) < 1e-12

    def test_rigid_follow_of_single_joint(self):
        body = SkinnedBody(
            template_vertices=[[1.0, 0.0, 0.0]],
            faces=np.zeros((0, 3), dtype=int),
            joint_parents=[-1],
            joint_rest_positions=[[0.0, 0.0, 0.0]],
            skin_weights=[[1.0]],
        )
        pts = np.array([[1.0, 0.0, 0.0]])  # coincides with the weight-1 vertex
        binding = bind_points(pts, body)
        out = human_deform(pts, binding, body, PoseParams([[0, 0, np.pi / 2]]))
        assert np.allclose(out[0], [0, 1, 0], atol=1e-12)

    def test_matches_per_point_matrix_oracle(self, arm):
        rng = np.random.default_rng(60)
        pts = rng.uniform([-0.1, -0.15, -0.15], [1.3, 0.15, 0.15], size=(20, 3))
        binding = bind_points(pts, arm)
        pose = PoseParams(rng.uniform(-0.6, 0.6, size=(4, 3)), rng.normal(size=3) * 0.2)
        out = human_deform(pts, binding, arm, pose)
        for i in range(20):
            m = vertex_lbs_matrix(arm, pose, int(binding.vertex_indices[i]))
            x = m[:3, :3] @ pts[i] + m[:3, 3] + pose.root_translation
            assert np.max(np.abs(out[i] - x)) < 1e-10

    def test_unbound_points_rejected(self, arm):
        pts = hand_cube_points()
        with pytest.raises(RejectedInputError, match="unbound"):
            human_deform(pts, None, arm, PoseParams.rest(arm))
        short = bind_points(pts[:5], arm)
        with pytest.raises(RejectedInputError):
            human_deform(pts, short, arm, PoseParams.rest(arm))


class TestObjectBaseTransform:
    def test_identity_at_rest(self, arm):
        binding = bind_points(hand_cube_points(), arm)
        g = object_base_transform(binding, arm, PoseParams.rest(arm))
        assert np.allclose(g, np.eye(4), atol=1e-12)

    def test_two_point_entrywise_mean(self, arm):
        pose = raised_pose(47.0)
        pts = np.array([[0.3, 0.14, 0.0], [1.1, 0.14, 0.0]])
        binding = bind_points(pts, arm)
        ga = vertex_lbs_matrix(arm, pose, int(binding.vertex_indices[0]))
        gb = vertex_lbs_matrix(arm, pose, int(binding.vertex_indices[1]))
        gbar = object_base_transform(binding, arm, pose)
        assert np.max(np.abs(gbar - 0.5 * (ga + gb))) < 1e-12

    def test_single_joint_rigid_average(self):
        # every binding fully weighted on one joint rotated by rigid Q
        body = SkinnedBody(
            template_vertices=np.array([[1.2 + 0.01 * i, 0.0, 0.0] for i in range(6)]),
            faces=np.zeros((0, 3), dtype=int),
            joint_parents=[-1],
            joint_rest_positions=[[0.0, 0.0, 0.0]],
            skin_weights=np.ones((6, 1)),
        )
        pts = np.array([[1.2, 0.0, 0.0], [1.21, 0.01, 0.0], [1.23, -0.01, 0.01]])
        binding = bind_points(pts, body)
        pose = PoseParams([[0.3, -0.4, 0.7]])
        q = forward_kinematics(body, pose)[0]
        gbar = object_base_transform(binding, body, pose)
        assert np.max(np.abs(gbar - q)) < 1e-12
        assert rigidity_deviation(gbar) < 1e-12
        moved = pts @ gbar[:3, :3].T + gbar[:3, 3]
        d0 = np.linalg.norm(pts[0] - pts[1])
        assert abs(np.linalg.norm(moved[0] - moved[1]) - d0) < 1e-12

    def test_blended_average_is_affine_not_rigid(self, arm):
        binding = bind_points(hand_cube_points(center=(1.0, 0.16, 0.0)), arm)
        gbar = object_base_transform(binding, arm, raised_pose())
        assert np.array_equal(gbar[3], [0, 0, 0, 1])
        assert rigidity_deviation(gbar) > 1e-6  # blend of two joints: not rigid
        r = polar_rotation(gbar[:3, :3])
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-12

    def test_empty_binding_rejected(self, arm):
        with pytest.raises(RejectedInputError):
            bind_points(np.zeros((0, 3)), arm)


class TestResidual:
    def test_identity_noop(self):
        pts = np.random.default_rng(61).normal(size=(9, 3))
        out = apply_residual(pts, ResidualTransform.identity())
        assert np.max(np.abs(out - pts)) < 1e-15

    def test_direct_evaluation(self):
        res = ResidualTransform(quat.from_axis_angle([0, 0, np.pi / 2]), np.array([0.0, 0, 1.0]))
        out = apply_residual(np.array([[1.0, 0, 0]]), res)
        assert np.allclose(out[0], [0, 1, 1], atol=1e-12)

    def test_jacobians_finite_diff(self):
        rng = np.random.default_rng(62)
        pts = rng.normal(size=(6, 3))
        w = rng.normal(size=(6, 3))
        q0 = rng.normal(size=4)
        t0 = rng.normal(size=3)

        res = ResidualTransform(q0.copy(), t0.copy())
        dq, dt = residual_vjp(pts, res, w)

        def loss(params):
            r = ResidualTransform(params[:4], params[4:])
            return float(np.sum(w * apply_residual(pts, r)))

        fd = central_diff(loss, np.concatenate([q0, t0]), 1e-5)
        assert rel_err(dq, fd[:4]) < 1e-4
        assert rel_err(dt, fd[4:]) < 1e-4

    def test_per_frame_scope(self):
        res = ResidualTransform.identity(frames=3)
        assert res.per_frame
        res.translation[2] = [0.1, 0, 0]
        a = apply_residual(np.zeros((1, 3)), res, frame=0)
        b = apply_residual(np.zeros((1, 3)), res, frame=2)
        assert np.allclose(a, 0) and np.allclose(b, [0.1, 0, 0])


def brute_force_ca_loss(binding, frame, pts, tau, k):
    """Loop-everything oracle for the soft correspondence loss."""
    total = 0.0
    for i in range(len(pts)):
        g_c = np.zeros((4, 4))
        for kk in range(frame.body.joint_count):
            g_c += binding.weight_rows[i, kk] * frame.joint_transforms[kk]
        d2 = np.sum((frame.posed_vertices - pts[i]) ** 2, axis=1)
        order = sorted(range(len(d2)), key=lambda j: (d2[j], j))[:k]
        ws = np.array([np.exp(-d2[j] / tau) for j in order])
        ws = ws / ws.sum()
        g_o = np.zeros((4, 4))
        for w, j in zip(ws, order):
            m = np.zeros((4, 4))
            for kk in range(frame.body.joint_count):
                m += frame.body.skin_weights[j, kk] * frame.joint_transforms[kk]
            g_o += w * m
        diff = (g_c - g_o)[:3, :]
        total += float(np.sum(diff * diff))
    return total / len(pts)


class TestCorrespondenceLoss:
    def test_zero_at_rest_with_identity_residual(self, arm):
        pts = hand_cube_points()
        binding = bind_points(pts, arm)
        frame = PosedFrame.build(arm, PoseParams.rest(arm))
        loss, grad = correspondence_loss(binding, frame, pts)
        assert loss == 0.0
        assert np.max(np.abs(grad)) < 1e-12

    def test_zero_under_constant_rigid_field(self):
        body = SkinnedBody(
            template_vertices=np.array([[0.1 * i, 0.0, 0.0] for i in range(10)]),
            faces=np.zeros((0, 3), dtype=int),
            joint_parents=[-1],
            joint_rest_positions=[[0.0, 0.0, 0.0]],
            skin_weights=np.ones((10, 1)),
        )
        pts = np.array([[0.35, 0.05, 0.0], [0.42, -0.03, 0.02]])
        binding = bind_points(pts, body)
        pose = PoseParams([[0.2, 0.5, -0.3]], [0.05, 0.0, 0.0])
        frame = PosedFrame.build(body, pose)
        moved = apply_residual(pts, ResidualTransform(quat.from_axis_angle([0.1, 0, 0]), np.array([0.02, 0, 0])))
        loss, _ = correspondence_loss(binding, frame, moved, k=4)
        assert loss < 1e-20

    def test_hand_cube_prefers_hand_motion(self, arm):
        # raising the arm while the cube stays put must score much worse
        # than welding the cube to the hand joint; the averaged motion
        # field scores best of all (it is the mean of the per-point targets)
        pts = hand_cube_points(center=(1.08, 0.16, 0.0))
        binding = bind_points(pts, arm)
        pose = raised_pose(60.0)
        frame = PosedFrame.build(arm, pose)

        static_pts = pts
        hand = forward_kinematics(arm, pose)[3]
        hand_pts = pts @ hand[:3, :3].T + hand[:3, 3]
        gbar = object_base_transform(binding, arm, pose)
        avg_pts = pts @ gbar[:3, :3].T + gbar[:3, 3]

        tau, k = 0.01, 8
        l_static, _ = correspondence_loss(binding, frame, static_pts, tau=tau, k=k)
        l_hand, _ = correspondence_loss(binding, frame, hand_pts, tau=tau, k=k)
        l_avg, _ = correspondence_loss(binding, frame, avg_pts, tau=tau, k=k)
        assert l_hand < l_static
        assert l_avg <= l_hand
        assert abs(l_static - brute_force_ca_loss(binding, frame, static_pts, tau, k)) < 1e-12
        assert abs(l_hand - brute_force_ca_loss(binding, frame, hand_pts, tau, k)) < 1e-12
        assert abs(l_avg - brute_force_ca_loss(binding, frame, avg_pts, tau, k)) < 1e-12

    def test_gradients_wrt_residual_finite_diff(self, arm):
        rng = np.random.default_rng(63)
        pts = hand_cube_points(center=(1.03, 0.17, 0.01))
        binding = bind_points(pts, arm)
        pose = raised_pose(45.0)
        frame = PosedFrame.build(arm, pose)
        base = pts @ object_base_transform(binding, arm, pose)[:3, :3].T \
            + object_base_transform(binding, arm, pose)[:3, 3]
        q0 = quat.IDENTITY + rng.normal(0, 0.05, size=4)
        t0 = rng.normal(0, 0.01, size=3)

        res = ResidualTransform(q0.copy(), t0.copy())
        moved = apply_residual(base, res)
        _, dpts = correspondence_loss(binding, frame, moved, tau=0.01)
        dq, dt = residual_vjp(base, res, dpts)

        def loss(params):
            r = ResidualTransform(params[:4], params[4:])
            return correspondence_loss(binding, frame, apply_residual(base, r), tau=0.01)[0]

        fd = central_diff(loss, np.concatenate([q0, t0]), 1e-6)
        assert rel_err(np.concatenate([dq, dt]), fd, floor=1e-7) < 1e-3

    def test_soft_converges_to_hard(self, arm):
        pts = hand_cube_points(center=(1.0, 0.2, 0.0))
        binding = bind_points(pts, arm)
        frame = PosedFrame.build(arm, raised_pose(30.0))
        moved = pts + np.array([0.0, 0.05, 0.0])
        hard, _ = correspondence_loss(binding, frame, moved, hard=True)
        gaps = []
        for tau in (1e-2, 1e-4, 1e-6):
            soft, _ = correspondence_loss(binding, frame, moved, tau=tau)
            gaps.append(abs(soft - hard))
        assert gaps[0] >= gaps[1] >= gaps[2]
        assert gaps[2] < 1e-9

    def test_nonpositive_tau_rejected(self, arm):
        pts = hand_cube_points()
        binding = bind_points(pts, arm)
        frame = PosedFrame.build(arm, PoseParams.rest(arm))
        with pytest.raises(RejectedInputError):
            correspondence_loss(binding, frame, pts, tau=0.0)

    def test_loss_nonnegative(self, arm):
        rng = np.random.default_rng(64)
        pts = hand_cube_points()
        binding = bind_points(pts, arm)
        for _ in range(5):
            frame = PosedFrame.build(arm, PoseParams(rng.uniform(-0.8, 0.8, size=(4, 3))))
            loss, _ = correspondence_loss(binding, frame, pts + rng.normal(0, 0.05, size=pts.shape))
            assert loss >= 0.0


def uv_sphere(radius=1.0, rings=12, segments=16):
    verts = [np.array([0.0, 0.0, radius])]
    for i in range(1, rings):
        phi = np.pi * i / rings
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append(radius * np.array(
                [np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)]))
    verts.append(np.array([0.0, 0.0, -radius]))
    verts = np.stack(verts)
    faces = []
    first = lambda ring: 1 + (ring - 1) * segments
    for j in range(segments):
        faces.append([0, first(1) + (j + 1) % segments, first(1) + j])
    for i in range(1, rings - 1):
        for j in range(segments):
            a = first(i) + j
            b = first(i) + (j + 1) % segments
            c = first(i + 1) + j
            d = first(i + 1) + (j + 1) % segments
            faces.append([a, d, b])
            faces.append([a, c, d])
    bottom = len(verts) - 1
    for j in range(segments):
        faces.append([bottom, first(rings - 1) + j, first(rings - 1) + (j + 1) % segments])
    faces = np.asarray(faces)
    # sanity: outward orientation (winding +1 at the centroid)
    assert penetration_fraction(np.zeros((1, 3)), verts, faces) == 1.0
    return verts, faces


def ray_parity_inside(point, verts, faces, rng):
    """Independent ray-casting oracle (Moller-Trumbore, odd crossing parity)."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    hits = 0
    for f in faces:
        v0, v1, v2 = verts[f]
        e1, e2 = v1 - v0, v2 - v0
        h = np.cross(direction, e2)
        a = e1 @ h
        if abs(a) < 1e-12:
            continue
        s = point - v0
        u = (s @ h) / a
        if u < 0 or u > 1:
            continue
        qv = np.cross(s, e1)
        v = (direction @ qv) / a
        if v < 0 or u + v > 1:
            continue
        t = (e2 @ qv) / a
        if t > 1e-12:
            hits += 1
    return hits % 2 == 1


class TestPenetration:
    def test_sphere_centroid_inside(self):
        verts, faces = uv_sphere()
        assert penetration_fraction(np.zeros((1, 3)), verts, faces) == 1.0

    def test_far_point_outside(self):
        verts, faces = uv_sphere()
        assert penetration_fraction(np.array([[10.0, 0, 0]]), verts, faces) == 0.0

    def test_matches_ray_parity_oracle(self):
        verts, faces = uv_sphere()
        rng = np.random.default_rng(65)
        pts = rng.uniform(-1.4, 1.4, size=(420, 3))
        # keep clear of the faceted surface band, where chord geometry makes
        # the inside/outside label by either method a coin flip
        r = np.linalg.norm(pts, axis=1)
        pts = pts[(r < 0.93) | (r > 1.03)][:200]
        assert len(pts) == 200
        ours = np.array(
            [penetration_fraction(p[None, :], verts, faces) > 0.5 for p in pts]
        )
        oracle = np.array([ray_parity_inside(p, verts, faces, rng) for p in pts])
        assert np.array_equal(ours, oracle)

    def test_degenerate_faces_skipped_with_warning(self):
        verts, faces = uv_sphere()
        bad = np.vstack([faces, [[0, 0, 0]]])
        with pytest.warns(UserWarning, match="degenerate"):
            frac = penetration_fraction(np.zeros((1, 3)), verts, bad)
        assert frac == 1.0

    def test_arm_capsule_is_watertight(self):
        body = capsule_arm_body()
        # edge-manifold check: each undirected edge appears in exactly 2 faces
        from collections import Counter

        edges = Counter()
        for f in body.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                edges[frozenset((int(a), int(b)))] += 1
        assert set(edges.values()) == {2}
        inner = np.array([[0.5, 0.0, 0.0], [1.1, 0.05, 0.0]])
        outer = np.array([[0.5, 0.5, 0.0], [-0.4, 0.0, 0.0]])
        assert penetration_fraction(inner, body.template_vertices, body.faces) == 1.0
        assert penetration_fraction(outer, body.template_vertices, body.faces) == 0.0


class TestBundledMotionAssets:
    def test_arm_raise_shape(self):
        motion = arm_raise_motion(frames=60)
        assert len(motion) == 60
        assert motion.frames[0].joint_rotations.max() == 0.0
        assert abs(motion.frames[-1].joint_rotations[1, 2] - np.radians(60)) < 1e-12

    def test_cube_cloud_sits_at_origin(self):
        cloud = cube_cloud()
        assert np.allclose(cloud.means.mean(axis=0), 0.0, atol=1e-12)
