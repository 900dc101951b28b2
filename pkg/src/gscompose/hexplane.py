"""Factored spatiotemporal feature field over six axis-pair planes.

Queries (x, t) are normalized into [0,1], bilinearly interpolated on the
(xy, xz, yz, xt, yt, zt) grids, fused by concatenation, and pushed through a
small tanh MLP whose final layer is zero-initialized so offsets start at
exactly zero. Forward and backward are handwritten; `offsets_vjp` returns
gradients for every grid value and MLP weight (and the query positions).
"""

import json
from dataclasses import dataclass

import numpy as np

from gscompose.errors import FormatError, RejectedInputError

PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")


@dataclass
class HexPlaneField:
    planes: list              # six arrays (R_a, R_b, C)
    bounds: np.ndarray        # (2, 3) [lo, hi]
    weights: list             # [W1, b1, W2, b2, W3, b3]
    out_dim: int

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(2, 3)
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise RejectedInputError("field bounds are degenerate")
        self.clamp_count = 0

    @classmethod
    def create(cls, bounds, resolution: int = 32, channels: int = 21, hidden: int = 64,
               out_dim: int = 3, extended: bool = False, rng=None, init_scale: float = 0.1):
        """Fresh field; `extended` adds rotation (4) and scale (3) offset slots."""
        rng = rng or np.random.default_rng(0)
        if extended:
            out_dim = 10
        planes = [rng.normal(0.0, init_scale, size=(resolution, resolution, channels))
                  for _ in PLANE_AXES]
        feat = 6 * channels
        weights = [
            rng.normal(0.0, 1.0 / np.sqrt(feat), size=(feat, hidden)), np.zeros(hidden),
            rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)), np.zeros(hidden),
            np.zeros((hidden, out_dim)), np.zeros(out_dim),  # zero-init head
        ]
        return cls(planes, np.asarray(bounds, dtype=float), weights, out_dim)

    @property
    def feature_length(self) -> int:
        return sum(p.shape[2] for p in self.planes)

    def params(self) -> dict:
        """Live parameter arrays keyed for the optimizer."""
        out = {f"plane_{name}": p for name, p in zip(PLANE_NAMES, self.planes)}
        out.update({f"mlp_{i}": w for i, w in enumerate(self.weights)})
        return out

    # -- interpolation -------------------------------------------------------

    def _norm_coords(self, xs, ts):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (xs.shape[0],))
        lo, hi = self.bounds
        xn = (xs - lo) / (hi - lo)
        clipped = np.clip(xn, 0.0, 1.0)
        tn = np.clip(ts, 0.0, 1.0)
        clamped = np.any(clipped != xn) or np.any(tn != ts)
        if clamped:
            self.clamp_count += 1
        # d(normalized)/d(world), zeroed where the clamp is active
        dnorm = np.where((xn >= 0.0) & (xn <= 1.0), 1.0 / (hi - lo), 0.0)
        return np.column_stack([clipped, tn]), dnorm, clamped

    def _interp_plane(self, pi, coords):
        """Bilinear sample of plane pi at (N, 4) normalized coords.

        Returns (values (N, C), cache for the backward pass).
        """
        a, b = PLANE_AXES[pi]
        grid = self.planes[pi]
        ra, rb, _ = grid.shape
        u = coords[:, a] * (ra - 1)
        v = coords[:, b] * (rb - 1)
        i0 = np.clip(np.floor(u).astype(int), 0, ra - 2)
        j0 = np.clip(np.floor(v).astype(int), 0, rb - 2)
        fu = u - i0
        fv = v - j0
        w00 = (1 - fu) * (1 - fv)
        w10 = fu * (1 - fv)
        w01 = (1 - fu) * fv
        w11 = fu * fv
        vals = (
            w00[:, None] * grid[i0, j0]
            + w10[:, None] * grid[i0 + 1, j0]
            + w01[:, None] * grid[i0, j0 + 1]
            + w11[:, None] * grid[i0 + 1, j0 + 1]
        )
        return vals, (i0, j0, fu, fv)

    def features(self, x, t):
        """Concatenated plane features at one (x, t); (feature_length,)."""
        coords, _, _ = self._norm_coords(np.asarray(x, dtype=float)[None, :], t)
        return np.concatenate([self._interp_plane(pi, coords)[0][0] for pi in range(6)])

    def features_batch(self, xs, ts):
        coords, dnorm, _ = self._norm_coords(xs, ts)
        parts = [self._interp_plane(pi, coords) for pi in range(6)]
        return np.concatenate([p[0] for p in parts], axis=1), (coords, dnorm, parts)

    # -- MLP head -------------------------------------------------------------

    def _mlp_forward(self, feats):
        w1, b1, w2, b2, w3, b3 = self.weights
        h1 = np.tanh(feats @ w1 + b1)
        h2 = np.tanh(h1 @ w2 + b2)
        return h2 @ w3 + b3, (h1, h2)

    def offset(self, x, t):
        """Offset at one query; exactly zero on a freshly created field."""
        return self.offsets(np.asarray(x, dtype=float)[None, :], t)[0]

    def offsets(self, xs, ts):
        feats, _ = self.features_batch(xs, ts)
        return self._mlp_forward(feats)[0]

    def offsets_with_cache(self, xs, ts):
        feats, fcache = self.features_batch(xs, ts)
        out, hcache = self._mlp_forward(feats)
        return out, (feats, fcache, hcache)

    def offsets_vjp(self, cache, grad_out):
        """Pull dL/d(offsets) back to every parameter and the query points.

        Returns (param_grads dict matching params(), dxs (N,3)).
        """
        feats, (coords, dnorm, parts), (h1, h2) = cache
        w1, b1, w2, b2, w3, b3 = self.weights
        g = np.asarray(grad_out, dtype=float)
        dw3 = h2.T @ g
        db3 = g.sum(axis=0)
        dh2 = (g @ w3.T) * (1 - h2 * h2)
        dw2 = h1.T @ dh2
        db2 = dh2.sum(axis=0)
        dh1 = (dh2 @ w2.T) * (1 - h1 * h1)
        dw1 = feats.T @ dh1
        db1 = dh1.sum(axis=0)
        dfeats = dh1 @ w1.T

        grads = {f"mlp_{i}": gw for i, gw in enumerate([dw1, db1, dw2, db2, dw3, db3])}
        dxs = np.zeros((coords.shape[0], 3))
        col = 0
        for pi in range(6):
            a, b = PLANE_AXES[pi]
            grid = self.planes[pi]
            ra, rb, c = grid.shape
            df = dfeats[:, col:col + c]
            col += c
            _, (i0, j0, fu, fv) = parts[pi]
            gp = np.zeros_like(grid)
            np.add.at(gp, (i0, j0), ((1 - fu) * (1 - fv))[:, None] * df)
            np.add.at(gp, (i0 + 1, j0), (fu * (1 - fv))[:, None] * df)
            np.add.at(gp, (i0, j0 + 1), ((1 - fu) * fv)[:, None] * df)
            np.add.at(gp, (i0 + 1, j0 + 1), (fu * fv)[:, None] * df)
            grads[f"plane_{PLANE_NAMES[pi]}"] = gp
            # query-point chain (time axis carries no gradient)
            p00, p10 = grid[i0, j0], grid[i0 + 1, j0]
            p01, p11 = grid[i0, j0 + 1], grid[i0 + 1, j0 + 1]
            dval_du = ((p10 - p00) * (1 - fv)[:, None] + (p11 - p01) * fv[:, None])
            dfu = np.sum(df * dval_du, axis=1)
            if a < 3:
                dxs[:, a] += dfu * (ra - 1) * dnorm[:, a]
            dval_dv = ((p01 - p00) * (1 - fu)[:, None] + (p11 - p10) * fu[:, None])
            dfv = np.sum(df * dval_dv, axis=1)
            if b < 3:
                dxs[:, b] += dfv * (rb - 1) * dnorm[:, b]
        return grads, dxs


# --- checkpoints ------------------------------------------------------------

def save_field(field: HexPlaneField, path):
    """Flat little-endian float32 blob + JSON sidecar with shapes and bounds."""
    path = str(path)
    arrays = list(field.planes) + list(field.weights)
    sidecar = {
        "bounds": field.bounds.tolist(),
        "out_dim": field.out_dim,
        "plane_shapes": [list(p.shape) for p in field.planes],
        "mlp_shapes": [list(np.asarray(w).shape) for w in field.weights],
    }
    with open(path, "wb") as fh:
        for arr in arrays:
            fh.write(np.asarray(arr, dtype="<f4").tobytes())
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_field(path) -> HexPlaneField:
    path = str(path)
    try:
        with open(path + ".json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}.json: unreadable field sidecar ({e})") from e
    blob = np.fromfile(path, dtype="<f4").astype(float)
    shapes = [tuple(s) for s in sidecar["plane_shapes"]] + [tuple(s) for s in sidecar["mlp_shapes"]]
    want = sum(int(np.prod(s)) for s in shapes)
    if blob.size != want:
        raise FormatError(f"{path}: blob holds {blob.size} floats, sidecar declares {want}")
    arrays = []
    ofs = 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(blob[ofs:ofs + size].reshape(s))
        ofs += size
    return HexPlaneField(arrays[:6], np.asarray(sidecar["bounds"]), arrays[6:],
                         int(sidecar["out_dim"]))
