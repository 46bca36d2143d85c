"""Ray generation, near-surface sampling and SDF-based volume rendering.

Rays carry unit-norm world directions; all depths along a ray (samples,
ground truth, rendered output) are therefore ray distances.  Depth images
store camera z-depth, so ray construction rescales by the back-projected
direction norm once and the rest of the pipeline never mixes the two units.

Rendering converts per-sample SDF values to bell-shaped weights
w = sigmoid(s/tr) * sigmoid(-s/tr) and accumulates normalized sums; rays
whose total weight underflows are flagged degenerate and excluded upstream.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dataio import Frame
from .errors import ConfigError
from .geometry import Intrinsics, PoseSE3

DEGENERATE_WEIGHT_SUM = 1e-8


@dataclass(frozen=True)
class RayBatch:
    """Rays of one frame; `dynamic` is all-false by construction (sampling
    already excluded motion-masked pixels) and kept for auditability."""

    origins: np.ndarray = field(repr=False)
    directions: np.ndarray = field(repr=False)  # unit norm
    pixels: np.ndarray = field(repr=False)
    gt_color: np.ndarray = field(repr=False)
    gt_depth: np.ndarray = field(repr=False)  # ray distance; 0 = no measurement
    dynamic: np.ndarray = field(repr=False)
    frame_id: int = -1

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("ray directions must be unit-norm")
        if self.dynamic.any():
            raise ValueError("masked pixels must not enter a ray batch")

    def __len__(self):
        return len(self.directions)


@dataclass(frozen=True)
class RaySamples:
    z: np.ndarray = field(repr=False)  # (N, M) strictly increasing ray distances
    points: np.ndarray = field(repr=False)  # (N, M, 3) world points
    truncation: float = 0.1


def pixel_ray_directions(K: Intrinsics, pixels: np.ndarray):
    """Unit camera-frame directions and the z-to-ray-distance factor per pixel."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.column_stack(
        [(px[:, 0] - K.cx) / K.fx, (px[:, 1] - K.cy) / K.fy, np.ones(len(px))]
    )
    norms = np.linalg.norm(d, axis=1)
    return d / norms[:, None], norms


def build_ray_batch(
    frame: Frame, K: Intrinsics, pose: PoseSE3, pixels: np.ndarray
) -> RayBatch:
    """Rays through integer pixel centers of `frame` posed at `pose`."""
    px = np.asarray(pixels)
    dirs_cam, norms = pixel_ray_directions(K, px.astype(np.float64))
    dirs_w = dirs_cam @ pose.rotation.T
    n = len(px)
    rows, cols = px[:, 1].astype(np.int64), px[:, 0].astype(np.int64)
    z = frame.depth[rows, cols]
    return RayBatch(
        origins=np.broadcast_to(pose.translation, (n, 3)).copy(),
        directions=dirs_w,
        pixels=px.astype(np.float64),
        gt_color=frame.color[rows, cols],
        gt_depth=z * norms,  # z-depth to ray distance
        dynamic=np.zeros(n, dtype=bool),
        frame_id=frame.id,
    )


def sample_pixels(
    frame: Frame,
    K: Intrinsics,
    pose: PoseSE3,
    n: int,
    rng: np.random.Generator,
    motion_mask: np.ndarray | None = None,
):
    """Uniform without-replacement pixel draw outside the motion mask.

    Returns (RayBatch, shortfall); shortfall > 0 when fewer than n pixels
    were eligible (all of them are then used).
    """
    h, w = frame.depth.shape
    if motion_mask is None:
        eligible = np.ones(h * w, dtype=bool)
    else:
        eligible = ~np.asarray(motion_mask, dtype=bool).ravel()
    flat = np.nonzero(eligible)[0]
    shortfall = max(0, n - len(flat))
    take = min(n, len(flat))
    chosen = np.sort(rng.choice(len(flat), size=take, replace=False))
    idx = flat[chosen]
    pixels = np.column_stack([idx % w, idx // w])
    return build_ray_batch(frame, K, pose, pixels), shortfall


def sample_along_rays(
    batch: RayBatch,
    n_points: int,
    tr: float,
    near: float,
    far: float,
    rng: np.random.Generator,
    surface_frac: float = 0.6,
) -> RaySamples:
    """Stratified [near, far] coverage plus uniform near-surface samples.

    Rays with ground-truth depth get `surface_frac` of their points uniform
    in [d - tr, d + tr] (clipped to the frustum range) and the rest
    stratified over [near, far]; rays without depth are fully stratified.
    """
    if far <= near:
        raise ConfigError(f"far ({far}) must exceed near ({near})")
    if n_points < 2:
        raise ConfigError("need at least 2 samples per ray")
    n = len(batch)
    m = n_points
    n_surf = int(round(m * surface_frac))
    n_strat = m - n_surf
    u = rng.uniform(size=(n, m))
    z = np.empty((n, m))

    valid = batch.gt_depth > 0
    # stratified part: one sample per equal-width bin
    for rows, k in ((valid, n_strat), (~valid, m)):
        if not rows.any() or k == 0:
            continue
        width = (far - near) / k
        edges = near + width * np.arange(k)
        z[np.ix_(rows, np.arange(k))] = edges + u[np.ix_(rows, np.arange(k))] * width
    if valid.any() and n_surf > 0:
        d = batch.gt_depth[valid][:, None]
        lo = np.clip(d - tr, near, far)
        hi = np.clip(d + tr, near, far)
        cols = np.arange(n_strat, m)
        z[np.ix_(valid, cols)] = lo + u[np.ix_(valid, cols)] * (hi - lo)

    z = np.sort(z, axis=1)
    for i in range(1, m):  # strictness against (measure-zero) collisions
        z[:, i] = np.maximum(z[:, i], np.nextafter(z[:, i - 1], np.inf))

    points = batch.origins[:, None, :] + z[..., None] * batch.directions[:, None, :]
    return RaySamples(z=z, points=points, truncation=tr)


# ---------------------------------------------------------------------------
# Weights and accumulation
# ---------------------------------------------------------------------------

def sdf_to_weights(s: np.ndarray, tr: float) -> np.ndarray:
    """Bell weight sigmoid(s/tr) * sigmoid(-s/tr); peak 0.25 at the surface.

    Computed as the literal two-sigmoid product: sigmoid(a)*(1 - sigmoid(a))
    cancels catastrophically for |a| >> 1 and would break the even symmetry.
    """
    if tr <= 0:
        raise ValueError("truncation distance must be positive")
    a = np.asarray(s, dtype=np.float64) / tr
    return expit(a) * expit(-a)


@dataclass(frozen=True)
class RenderResult:
    color: np.ndarray = field(repr=False)  # (N, 3)
    depth: np.ndarray = field(repr=False)  # (N,)
    depth_var: np.ndarray = field(repr=False)  # (N,)
    weight_sum: np.ndarray = field(repr=False)  # (N,)
    degenerate: np.ndarray = field(repr=False)  # (N,) bool


@dataclass(frozen=True)
class RenderCache:
    w: np.ndarray = field(repr=False)
    denom: np.ndarray = field(repr=False)
    result: RenderResult = field(repr=False)


def render_rays(z: np.ndarray, s: np.ndarray, c: np.ndarray | None, tr: float):
    """Normalized weighted sums over samples: color, depth, depth variance."""
    w = sdf_to_weights(s, tr)
    wsum = w.sum(axis=1)
    degenerate = wsum < DEGENERATE_WEIGHT_SUM
    denom = np.where(degenerate, 1.0, wsum)
    depth = (w * z).sum(axis=1) / denom
    var = (w * (depth[:, None] - z) ** 2).sum(axis=1) / denom
    if c is not None:
        color = np.einsum("nm,nmk->nk", w, c) / denom[:, None]
        color = np.where(degenerate[:, None], 0.0, color)
    else:
        color = np.zeros((z.shape[0], 3))
    depth = np.where(degenerate, 0.0, depth)
    var = np.where(degenerate, 0.0, var)
    res = RenderResult(color, depth, var, wsum, degenerate)
    return res, RenderCache(w=w, denom=denom, result=res)


def render_backward(
    z: np.ndarray,
    s: np.ndarray,
    c: np.ndarray | None,
    tr: float,
    cache: RenderCache,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_var: np.ndarray | None = None,
):
    """Gradients of the accumulated outputs w.r.t. per-sample (s, c, z).

    Uses the identity d(depth_var)/d(depth) = sum 2w(depth - z)/sum w = 0,
    so the variance contributes through its direct weight/sample terms only.
    Degenerate rays receive zero gradient everywhere.
    """
    w, denom, res = cache.w, cache.denom, cache.result
    n, m = z.shape
    live = ~res.degenerate
    dw = np.zeros((n, m))
    dz = np.zeros((n, m))
    dc = np.zeros((n, m, 3)) if c is not None else None

    inv = np.where(live, 1.0 / denom, 0.0)[:, None]
    if d_color is not None and c is not None:
        diff_c = c - res.color[:, None, :]
        dw += np.einsum("nk,nmk->nm", d_color, diff_c) * inv
        dc += d_color[:, None, :] * (w * inv)[..., None]
    if d_depth is not None:
        dw += d_depth[:, None] * (z - res.depth[:, None]) * inv
        dz += d_depth[:, None] * w * inv
    if d_var is not None:
        dev2 = (res.depth[:, None] - z) ** 2
        dw += d_var[:, None] * (dev2 - res.depth_var[:, None]) * inv
        dz += d_var[:, None] * 2.0 * w * (z - res.depth[:, None]) * inv

    sig = expit(s / tr)
    ds = dw * w * (1.0 - 2.0 * sig) / tr
    return ds, dc, dz
