"""Quaternion helpers with analytic derivatives.

Convention: scalar-first (w, x, y, z), Hamilton product, column vectors
(x' = R(q) @ x). All rotation Jacobians are taken with respect to the *raw*
4-vector, i.e. they include the chain through q_hat = q / ||q||, so central
finite differences on unnormalized parameters match them directly.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def to_matrix(q):
    """Rotation matrix of q (normalized internally). Works on (..., 4)."""
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _dmatrix_dunit(qu):
    """d(R)/d(q_hat) for a unit quaternion, shape (4, 3, 3)."""
    w, x, y, z = qu
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=float)
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=float)
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=float)
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=float)
    return np.stack([dw, dx, dy, dz])


def dmatrix_draw(q):
    """d(R)/d(q) for a raw quaternion, shape (4, 3, 3), normalization included."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    qu = q / n
    dm = _dmatrix_dunit(qu)  # wrt q_hat
    # dq_hat/dq = (I - q_hat q_hat^T) / n
    proj = (np.eye(4) - np.outer(qu, qu)) / n
    return np.einsum("ab,bij->aij", proj, dm)


def rotate(q, v):
    """R(q) @ v for v of shape (..., 3)."""
    return np.asarray(v, dtype=float) @ to_matrix(q).T


def rotate_vjp(q, v, grad_out):
    """Pullback of rotate: returns (dL/dq raw 4-vec, dL/dv).

    v: (N, 3) points, grad_out: (N, 3) upstream gradient on R(q) @ v.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    m = to_matrix(q)
    dm = dmatrix_draw(q)  # (4, 3, 3)
    # dL/dq_a = sum_n g_n . (dR/dq_a @ v_n)
    dq = np.einsum("ni,aij,nj->a", g, dm, v)
    dv = g @ m
    return dq, dv


def compose(a, b):
    """Hamilton product a * b (apply b's rotation first, then a's)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def compose_left_jacobian(b):
    """d(a*b)/da, a 4x4 matrix (per b if b is batched: (..., 4, 4))."""
    b = np.asarray(b, dtype=float)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    rows = [
        [bw, -bx, -by, -bz],
        [bx, bw, bz, -by],
        [by, -bz, bw, bx],
        [bz, by, -bx, bw],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def compose_right_jacobian(a):
    """d(a*b)/db, a 4x4 matrix (per a if a is batched: (..., 4, 4))."""
    a = np.asarray(a, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    rows = [
        [aw, -ax, -ay, -az],
        [ax, aw, -az, ay],
        [ay, az, aw, -ax],
        [az, -ay, ax, aw],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def from_axis_angle(axis_angle):
    """Axis-angle 3-vector(s) (..., 3) -> quaternion(s) (..., 4)."""
    aa = np.asarray(axis_angle, dtype=float)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        axis = np.where(small, 0.0, aa / np.where(small, 1.0, angle))
    w = np.cos(half)
    xyz = np.sin(half) * axis
    return np.concatenate([w, xyz], axis=-1)


def axis_angle_matrix(axis_angle):
    """Rodrigues rotation matrix for (..., 3) axis-angle vectors."""
    return to_matrix(from_axis_angle(axis_angle))
