"""Loss terms for tracking and mapping, with analytic gradients.

Every op returns its scalar value together with the exact upstream arrays a
caller feeds into ``render_backward`` / ``field_backward``, so the whole
objective differentiates without any autograd machinery.  Conventions shared
by all terms:

* per-ray quantities use *ray-distance* depth (metres along the unit ray),
  matching :mod:`dynslam.render`;
* region losses are a mean over rays of a mean over each ray's region
  samples; a ray whose region is empty contributes zero but still counts in
  the outer denominator (the number of valid-depth rays);
* masked / degenerate / invalid entries contribute exactly zero to both the
  value and every gradient.

``fused_render_loss`` is the computational core of the pipeline: it runs the
field and renderer over a ray batch in fixed-size chunks (see
:mod:`dynslam.parallel`), assembles the weighted objective, and returns
parameter and pose gradients in one pass.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import EmptyEdgeMapError
from .field import (FieldParams, GradientBundle, HashGridConfig,
                    field_backward, field_forward, zero_bundle)
from .geometry import PoseSE3
from .imageproc import DTMap, sample_dt_bilinear
from .parallel import CHUNK_RAYS, chunk_slices, ordered_map
from .render import RayBatch, RaySamples, render_backward, render_rays

VAR_EPS = 1e-6  # variance floor in the uncertainty-weighted depth loss

_SDF_TARGETS = ("standard_tsdf", "paper_literal")


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the rendering objective plus the edge-warp term."""

    rgb: float = 1.0
    depth: float = 0.1
    free_space: float = 10.0
    sdf_mid: float = 2000.0
    sdf_tail: float = 500.0
    edge: float = 1.0

    def __post_init__(self):
        for name in ("rgb", "depth", "free_space", "sdf_mid", "sdf_tail", "edge"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"loss weight {name!r} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class TruncationSpec:
    """Truncation band geometry and the per-stage SDF region emphasis.

    ``ratio`` splits the near-surface band at ``ratio * tr``: samples closer
    to the observed surface form the middle region, the rest the tail.
    Tracking de-emphasises the tail (its supervision is least reliable when
    the pose is still wrong); mapping weighs both regions equally.
    """

    tr: float = 0.1
    ratio: float = 0.4
    tracking_mid: float = 1.0
    tracking_tail: float = 0.5
    mapping_mid: float = 1.0
    mapping_tail: float = 1.0
    sdf_target: str = "standard_tsdf"

    def __post_init__(self):
        if self.tr <= 0.0:
            raise ValueError(f"truncation distance must be positive, got {self.tr}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"region split ratio must lie in (0, 1), got {self.ratio}")
        if self.sdf_target not in _SDF_TARGETS:
            raise ValueError(
                f"sdf_target must be one of {_SDF_TARGETS}, got {self.sdf_target!r}")

    def region_weights(self, stage: str) -> tuple[float, float]:
        if stage == "tracking":
            return self.tracking_mid, self.tracking_tail
        if stage == "mapping":
            return self.mapping_mid, self.mapping_tail
        raise ValueError(f"unknown stage {stage!r} (expected 'tracking' or 'mapping')")


@dataclass(frozen=True)
class EdgeLossCfg:
    huber_delta: float = 1.0    # px; quadratic-to-linear switch
    outlier_cutoff: float = 10.0  # px; warped edges beyond this are dropped

    def __post_init__(self):
        if self.huber_delta <= 0.0 or self.outlier_cutoff <= 0.0:
            raise ValueError("huber_delta and outlier_cutoff must be positive")


# ---------------------------------------------------------------------------
# per-ray photometric / depth terms


def rgb_loss(pred_color: np.ndarray, gt_color: np.ndarray,
             degenerate: np.ndarray, keep: np.ndarray | None = None):
    """Mean squared colour error over usable rays.

    Returns ``(value, d_pred (N,3), n_used)``.  Usable means not degenerate
    and, if ``keep`` is given, flagged True there.  With nothing usable the
    loss is 0 and the gradient all-zero.
    """
    pred_color = np.asarray(pred_color, dtype=np.float64)
    used = ~np.asarray(degenerate, dtype=bool)
    if keep is not None:
        used = used & np.asarray(keep, dtype=bool)
    d_pred = np.zeros_like(pred_color)
    n = int(used.sum())
    if n == 0:
        return 0.0, d_pred, 0
    resid = pred_color[used] - np.asarray(gt_color, dtype=np.float64)[used]
    d_pred[used] = 2.0 * resid / n
    return float(np.sum(resid * resid) / n), d_pred, n


def depth_loss(pred_depth: np.ndarray, pred_var: np.ndarray,
               gt_depth: np.ndarray, degenerate: np.ndarray,
               keep: np.ndarray | None = None):
    """Variance-weighted squared depth error, mean over usable rays.

    Each ray contributes ``(D_hat - D)^2 / (var + eps)``; rays the map is
    uncertain about are automatically down-weighted.  Returns
    ``(value, d_depth, d_var, n_used)`` — note the loss *does* differentiate
    through the predicted variance.
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    pred_var = np.asarray(pred_var, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    used = (gt_depth > 0.0) & ~np.asarray(degenerate, dtype=bool)
    if keep is not None:
        used = used & np.asarray(keep, dtype=bool)
    d_depth = np.zeros_like(pred_depth)
    d_var = np.zeros_like(pred_var)
    n = int(used.sum())
    if n == 0:
        return 0.0, d_depth, d_var, 0
    resid = pred_depth[used] - gt_depth[used]
    denom = pred_var[used] + VAR_EPS
    d_depth[used] = 2.0 * resid / denom / n
    d_var[used] = -(resid * resid) / (denom * denom) / n
    return float(np.sum(resid * resid / denom) / n), d_depth, d_var, n


# ---------------------------------------------------------------------------
# per-sample SDF supervision


def _region_mean_loss(sdf: np.ndarray, target: np.ndarray, region: np.ndarray,
                      ray_valid: np.ndarray):
    """Mean over valid rays of the mean squared (sdf - target) inside region.

    Shared kernel for the free-space and SDF terms.  Returns
    ``(value, d_sdf, n_rays)`` with gradients scattered back per sample.
    """
    d_sdf = np.zeros_like(sdf)
    n_rays = int(ray_valid.sum())
    if n_rays == 0:
        return 0.0, d_sdf, 0
    region = region & ray_valid[:, None]
    counts = region.sum(axis=1)  # per-ray samples in the region
    resid = np.where(region, sdf - target, 0.0)
    safe = np.maximum(counts, 1)
    per_ray = np.sum(resid * resid, axis=1) / safe
    d_sdf[:] = 2.0 * resid / safe[:, None] / n_rays
    return float(per_ray.sum() / n_rays), d_sdf, n_rays


def free_space_loss(samples: RaySamples, gt_depth: np.ndarray, sdf: np.ndarray,
                    trunc: TruncationSpec):
    """Push the SDF to +tr in observed free space (z < D - tr).

    Returns ``(value, d_sdf, n_rays)``; ``n_rays`` counts valid-depth rays,
    whether or not any of their samples land in front of the truncation band.
    """
    gt = np.asarray(gt_depth, dtype=np.float64)
    valid = gt > 0.0
    region = samples.z < (gt[:, None] - trunc.tr)
    target = np.full_like(sdf, trunc.tr)
    return _region_mean_loss(np.asarray(sdf, dtype=np.float64), target, region, valid)


def sdf_loss(samples: RaySamples, gt_depth: np.ndarray, sdf: np.ndarray,
             trunc: TruncationSpec):
    """Near-surface SDF supervision, split into middle and tail regions.

    Middle: ``|D - z| <= ratio*tr``; tail: the rest of the truncation band.
    The regression target is the signed distance along the ray ``D - z``
    (``standard_tsdf``), or the constant ``D - ratio*tr`` when configured
    for ``paper_literal``.  Returns
    ``(mid_value, tail_value, d_sdf_mid, d_sdf_tail, n_rays)``.
    """
    gt = np.asarray(gt_depth, dtype=np.float64)
    sdf = np.asarray(sdf, dtype=np.float64)
    valid = gt > 0.0
    dist = gt[:, None] - samples.z  # signed: positive in front of the surface
    band = np.abs(dist) <= trunc.tr
    middle = np.abs(dist) <= trunc.ratio * trunc.tr
    tail = band & ~middle
    if trunc.sdf_target == "standard_tsdf":
        target = dist
    else:  # paper_literal: a per-ray constant rather than a per-sample one
        target = np.broadcast_to((gt - trunc.ratio * trunc.tr)[:, None], sdf.shape)
    mid_v, d_mid, n = _region_mean_loss(sdf, target, middle, valid)
    tail_v, d_tail, _ = _region_mean_loss(sdf, target, tail, valid)
    return mid_v, tail_v, d_mid, d_tail, n


# ---------------------------------------------------------------------------
# edge-warp tracking term


def huber(r: np.ndarray, delta: float):
    """Classic Huber penalty and its derivative, for r >= 0."""
    r = np.asarray(r, dtype=np.float64)
    quad = r <= delta
    value = np.where(quad, 0.5 * r * r, delta * (r - 0.5 * delta))
    grad = np.where(quad, r, delta)
    return value, grad


def edge_warp_loss(edge_pixels: np.ndarray, edge_depths: np.ndarray,
                   pose_ji: PoseSE3, intr, dt_map: DTMap,
                   cfg: EdgeLossCfg, dynamic_mask: np.ndarray | None = None):
    """Sum of robust distance-transform penalties over warped edge pixels.

    Edges detected in frame *i* are lifted with their depths, transformed by
    ``pose_ji`` (camera *i* -> camera *j*), projected into *j*, and scored by
    the edge distance transform of *j*.  A pixel is skipped when its depth is
    invalid, it lands behind the camera or outside the image, the warped
    location is flagged dynamic, or the distance exceeds the outlier cutoff.

    Returns ``(value, d_xi (6,), n_used)`` where ``d_xi`` is the gradient
    with respect to a left-multiplicative increment of ``pose_ji`` in
    (translation, rotation) order.  Raises :class:`EmptyEdgeMapError` when no
    edge survives the skip chain — callers fall back to their pose prior.
    """
    px = np.asarray(edge_pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(edge_depths, dtype=np.float64).reshape(-1)
    if px.shape[0] != depths.shape[0]:
        raise ValueError("edge pixel and depth counts differ")

    alive = depths > 0.0
    # Lift to camera i, move to camera j.
    x_i = np.zeros((px.shape[0], 3))
    x_i[:, 0] = (px[:, 0] - intr.cx) / intr.fx * depths
    x_i[:, 1] = (px[:, 1] - intr.cy) / intr.fy * depths
    x_i[:, 2] = depths
    rot, t = pose_ji.rotation, pose_ji.translation
    x_j = x_i @ rot.T + t
    alive &= x_j[:, 2] > 1e-9

    z = np.where(alive, x_j[:, 2], 1.0)
    uv = np.stack([intr.fx * x_j[:, 0] / z + intr.cx,
                   intr.fy * x_j[:, 1] / z + intr.cy], axis=1)

    vals, grads, inb = sample_dt_bilinear(dt_map, uv)
    alive &= inb
    if dynamic_mask is not None:
        mask = np.asarray(dynamic_mask, dtype=bool)
        ui = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, mask.shape[1] - 1)
        vi = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, mask.shape[0] - 1)
        alive &= ~mask[vi, ui]
    alive &= vals <= cfg.outlier_cutoff
    n = int(alive.sum())
    if n == 0:
        raise EmptyEdgeMapError("no usable edge pixels after warp filtering")

    loss_terms, rho_grad = huber(vals[alive], cfg.huber_delta)
    value = float(loss_terms.sum())

    # Chain: Huber' -> DT bilinear gradient -> projection Jacobian -> pose.
    xa, za = x_j[alive], z[alive]
    d_uv = rho_grad[:, None] * grads[alive]
    d_x = np.empty_like(xa)
    d_x[:, 0] = d_uv[:, 0] * intr.fx / za
    d_x[:, 1] = d_uv[:, 1] * intr.fy / za
    d_x[:, 2] = -(d_uv[:, 0] * intr.fx * xa[:, 0]
                  + d_uv[:, 1] * intr.fy * xa[:, 1]) / (za * za)
    d_xi = np.zeros(6)
    d_xi[:3] = d_x.sum(axis=0)                      # translation part
    d_xi[3:] = np.cross(xa, d_x).sum(axis=0)        # rotation part: x cross g
    return value, d_xi, n


def total_loss(terms: dict, weights: LossWeights, trunc: TruncationSpec,
               stage: str = "mapping"):
    """Weighted sum of term values; returns (total, weighted breakdown).

    ``terms`` maps names (rgb, depth, free_space, sdf_mid, sdf_tail, edge)
    to unweighted scalars; missing terms count as zero.  The SDF regions are
    additionally scaled by the stage emphasis from ``trunc``.
    """
    mid_w, tail_w = trunc.region_weights(stage)
    scale = {"rgb": weights.rgb, "depth": weights.depth,
             "free_space": weights.free_space,
             "sdf_mid": weights.sdf_mid * mid_w,
             "sdf_tail": weights.sdf_tail * tail_w,
             "edge": weights.edge}
    unknown = set(terms) - set(scale)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    weighted = {k: scale[k] * v for k, v in terms.items()}
    return float(sum(weighted.values())), weighted


# ---------------------------------------------------------------------------
# fused objective over a ray batch


@dataclass
class FusedLoss:
    """Weighted objective with its per-term breakdown and gradients."""

    total: float
    terms: dict                      # unweighted scalars, keyed by term name
    counts: dict                     # rays used per term
    param_grads: GradientBundle | None = None
    pose_grad: np.ndarray | None = None
    aux: dict = dc_field(default_factory=dict)


def _chunk_forward(points, params, cfg, z, tr):
    s, _h, c, cache = field_forward(points.reshape(-1, 3), params, cfg)
    s = s.reshape(z.shape)
    c = c.reshape(z.shape + (3,))
    result, rcache = render_rays(z, s, c, tr)
    return s, c, cache, result, rcache


def fused_render_loss(params: FieldParams, cfg: HashGridConfig,
                      batch: RayBatch, samples: RaySamples,
                      weights: LossWeights, trunc: TruncationSpec,
                      stage: str = "mapping",
                      need_param_grads: bool = True,
                      need_pose_grad: bool = False,
                      pose_groups: np.ndarray | None = None,
                      threads: int = 1) -> FusedLoss:
    """Evaluate the rendering objective and all requested gradients.

    Contributions are accumulated over fixed-size ray chunks and merged in
    chunk order, so results are bitwise independent of ``threads``.  The
    normalizers (ray counts) span the whole batch; because every gradient is
    linear in its upstream, chunks accumulate unnormalized sums which the
    loss ops then scale globally.

    ``need_pose_grad`` additionally backpropagates to the sample points and
    folds them into a 6-vector for a left-multiplicative update of the
    camera-to-world pose that generated ``batch``.  When rays come from
    several cameras (bundle adjustment), ``pose_groups`` assigns each ray a
    group index and ``pose_grad`` becomes one 6-vector per group.
    """
    n_rays = samples.z.shape[0]
    mid_w, tail_w = trunc.region_weights(stage)

    slices = chunk_slices(n_rays, CHUNK_RAYS)
    fwd = ordered_map(
        lambda se: _chunk_forward(samples.points[se[0]:se[1]], params, cfg,
                                  samples.z[se[0]:se[1]], trunc.tr),
        slices, threads)

    s = np.concatenate([f[0] for f in fwd], axis=0)
    pred_color = np.concatenate([f[3].color for f in fwd], axis=0)
    pred_depth = np.concatenate([f[3].depth for f in fwd], axis=0)
    pred_var = np.concatenate([f[3].depth_var for f in fwd], axis=0)
    degenerate = np.concatenate([f[3].degenerate for f in fwd], axis=0)

    l_rgb, d_color, n_rgb = rgb_loss(pred_color, batch.gt_color, degenerate)
    l_dep, d_depth, d_var, n_dep = depth_loss(
        pred_depth, pred_var, batch.gt_depth, degenerate)
    l_fs, ds_fs, n_fs = free_space_loss(samples, batch.gt_depth, s, trunc)
    l_mid, l_tail, ds_mid, ds_tail, n_sdf = sdf_loss(
        samples, batch.gt_depth, s, trunc)

    terms = {"rgb": l_rgb, "depth": l_dep, "free_space": l_fs,
             "sdf_mid": l_mid, "sdf_tail": l_tail}
    total, _weighted = total_loss(terms, weights, trunc, stage)
    out = FusedLoss(
        total=total,
        terms=terms,
        counts={"rgb": n_rgb, "depth": n_dep, "free_space": n_fs,
                "sdf": n_sdf, "rays": n_rays},
        aux={"degenerate": degenerate},
    )
    if not (need_param_grads or need_pose_grad):
        return out

    ds_direct = (weights.free_space * ds_fs
                 + weights.sdf_mid * mid_w * ds_mid
                 + weights.sdf_tail * tail_w * ds_tail)
    d_color = weights.rgb * d_color
    d_depth = weights.depth * d_depth
    d_var = weights.depth * d_var

    n_groups = 0
    if pose_groups is not None:
        pose_groups = np.asarray(pose_groups, dtype=np.int64)
        if pose_groups.shape != (n_rays,):
            raise ValueError("pose_groups must assign one group per ray")
        n_groups = int(pose_groups.max()) + 1

    def backward_chunk(item):
        k, (a, b) = item
        s_k, c_k, cache, _res, rcache = fwd[k]
        ds_r, dc_r, _dz = render_backward(
            samples.z[a:b], s_k, c_k, trunc.tr, rcache,
            d_color[a:b], d_depth[a:b], d_var[a:b])
        up_s = (ds_r + ds_direct[a:b]).reshape(-1)
        up_c = dc_r.reshape(-1, 3)
        g = field_backward(cache, params, cfg, up_s=up_s, up_c=up_c,
                           need_x_grad=need_pose_grad,
                           need_param_grads=need_param_grads)
        pose_g = None
        if need_pose_grad:
            gx = g.x.reshape(b - a, -1, 3)
            pts = samples.points[a:b]
            per_ray = np.concatenate(
                [gx.sum(axis=1), np.cross(pts, gx).sum(axis=1)], axis=1)
            if pose_groups is None:
                pose_g = per_ray.sum(axis=0)
            else:
                pose_g = np.zeros((n_groups, 6))
                np.add.at(pose_g, pose_groups[a:b], per_ray)
        return g, pose_g

    parts = ordered_map(backward_chunk, list(enumerate(slices)), threads)
    if need_param_grads:
        bundle = zero_bundle(params)
        for g, _pg in parts:
            bundle.add_(g)
        out.param_grads = bundle
    if need_pose_grad:
        out.pose_grad = np.sum([pg for _g, pg in parts], axis=0)
    return out


def pose_grad_from_points(points: np.ndarray, d_points: np.ndarray) -> np.ndarray:
    """Fold per-point world gradients into a left-update pose 6-vector.

    A perturbation ``T <- exp(dxi) T`` moves every world point by
    ``dx = v - hat(x) w``, hence the translation part sums the gradients and
    the rotation part sums ``x cross g``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(d_points, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([g.sum(axis=0), np.cross(pts, g).sum(axis=0)])


__all__ = [
    "VAR_EPS", "LossWeights", "TruncationSpec", "EdgeLossCfg", "FusedLoss",
    "rgb_loss", "depth_loss", "free_space_loss", "sdf_loss", "huber",
    "edge_warp_loss", "total_loss", "fused_render_loss",
    "pose_grad_from_points",
]
