"""Dynamic-object masks from epipolar consistency of keyframe flow.

A truly static pixel's flow correspondence lies on the epipolar line induced
by the camera motion between two keyframes; independently moving objects
violate that constraint.  Per keyframe pair we threshold the point-to-line
distance into a warp mask, count dynamic votes over a window of recent
keyframe pairs, and unite the vote result with an optional semantic mask.

True always means *dynamic* here.  Pixels whose flow is unusable (non-finite,
target outside the image, degenerate epipolar line, invalid depth) are
*unknown*: recorded in a validity plane, never flagged dynamic, and absent
from the vote count.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import FlowField
from .geometry import FundamentalMatrix, estimate_fundamental, epipolar_distances
from .imageproc import dilate_mask
from .seeding import DOMAIN_RANSAC, rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MotionMaskCfg:
    e_th: float = 1.0        # px; epipolar distance at/above which a pixel is dynamic
    o_th: int = 2            # dynamic votes needed within the window
    window: int = 4          # how many prior keyframes each keyframe is compared to
    dilate_px: int = 1       # grow the flow-derived mask to absorb boundary bleed
    ransac_iters: int = 500
    ransac_thresh_px: float = 1.0
    max_correspondences: int = 4000  # subsample cap for F estimation

    def __post_init__(self):
        if self.e_th <= 0.0:
            raise ValueError(f"e_th must be positive, got {self.e_th}")
        if self.o_th < 1 or self.window < 1:
            raise ValueError("o_th and window must be >= 1")
        if self.dilate_px < 0:
            raise ValueError("dilate_px must be >= 0")


@dataclass(frozen=True)
class WarpMask:
    """Per-pair epipolar verdicts: dynamic where inconsistent, over valid only."""

    dynamic: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    src_id: int = -1
    dst_id: int = -1

    def __post_init__(self):
        if self.dynamic.shape != self.valid.shape:
            raise ValueError("dynamic and validity planes must have equal shape")
        if np.any(self.dynamic & ~self.valid):
            raise ValueError("dynamic pixels must be valid observations")


@dataclass(frozen=True)
class MotionMask:
    dynamic: np.ndarray = field(repr=False)
    votes: np.ndarray = field(repr=False)  # dynamic observations per pixel
    keyframe_id: int = -1

    def __post_init__(self):
        if self.dynamic.shape != self.votes.shape:
            raise ValueError("mask and vote planes must have equal shape")


def flow_correspondences(flow: FlowField):
    """Dense (src, dst) pixel matches of a flow field, with a validity plane.

    Valid requires finite flow and the target landing inside the image.
    Returns (src (H*W,2), dst (H*W,2), valid (H,W)).
    """
    h, w = flow.u.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    src = np.column_stack([uu.ravel(), vv.ravel()])
    du, dv = flow.u.ravel(), flow.v.ravel()
    dst = np.column_stack([src[:, 0] + du, src[:, 1] + dv])
    finite = np.isfinite(du) & np.isfinite(dv)
    dst_safe = np.where(finite[:, None], dst, 0.0)
    inb = ((dst_safe[:, 0] >= 0.0) & (dst_safe[:, 0] <= w - 1)
           & (dst_safe[:, 1] >= 0.0) & (dst_safe[:, 1] <= h - 1))
    return src, dst_safe, (finite & inb).reshape(h, w)


def estimate_pair_fundamental(flow: FlowField, cfg: MotionMaskCfg,
                              seed: int = 0,
                              valid_extra: np.ndarray | None = None) -> FundamentalMatrix:
    """Fit F to a flow field's correspondences by seeded RANSAC.

    The dominant (static) motion wins the consensus vote as long as moving
    objects stay a minority of the image.  Correspondences are subsampled to
    ``max_correspondences`` for speed, deterministically in ``seed``.
    """
    src, dst, valid = flow_correspondences(flow)
    if valid_extra is not None:
        valid = valid & valid_extra
    sel = valid.ravel()
    src, dst = src[sel], dst[sel]
    rng = np.random.default_rng(seed)
    if len(src) > cfg.max_correspondences:
        pick = rng.choice(len(src), cfg.max_correspondences, replace=False)
        pick.sort()
        src, dst = src[pick], dst[pick]
    F, _inliers = estimate_fundamental(src, dst, iters=cfg.ransac_iters,
                                       inlier_thresh_px=cfg.ransac_thresh_px,
                                       seed=seed)
    return F


def warp_mask(flow: FlowField, F: FundamentalMatrix, e_th: float,
              src_id: int = -1, dst_id: int = -1,
              valid_extra: np.ndarray | None = None) -> WarpMask:
    """Flag pixels whose flow match sits >= e_th px off its epipolar line."""
    src, dst, valid = flow_correspondences(flow)
    if valid_extra is not None:
        valid = valid & valid_extra
    dist, line_ok = epipolar_distances(F, src, dst)
    h, w = flow.u.shape
    valid = valid & line_ok.reshape(h, w)
    dynamic = valid & (dist.reshape(h, w) >= e_th)
    return WarpMask(dynamic=dynamic, valid=valid, src_id=src_id, dst_id=dst_id)


def fuse_window(warp_masks: list, seg: np.ndarray | None, o_th: int,
                keyframe_id: int = -1) -> MotionMask:
    """Count dynamic votes over the window; final = (votes >= o_th) | seg.

    An empty window leaves only the semantic mask.  Voting is count-based,
    hence insensitive to window order.
    """
    if not warp_masks and seg is None:
        raise ValueError("need at least one warp mask or a semantic mask")
    shape = warp_masks[0].dynamic.shape if warp_masks else seg.shape
    votes = np.zeros(shape, dtype=np.int32)
    for wm in warp_masks:
        if wm.dynamic.shape != shape:
            raise ValueError("warp mask dimensions disagree")
        votes += wm.dynamic
    flow_dynamic = votes >= o_th
    if seg is not None:
        if seg.shape != shape:
            raise ValueError("semantic mask dimensions disagree")
        final = flow_dynamic | seg.astype(bool)
    else:
        final = flow_dynamic
    return MotionMask(dynamic=final, votes=votes, keyframe_id=keyframe_id)


def build_masks_for_keyframes(keyframe_ids, flows, cfg: MotionMaskCfg,
                              segs: dict | None = None,
                              validity: dict | None = None,
                              seed: int = 0,
                              shape: tuple | None = None) -> dict:
    """Motion mask per keyframe from pairwise flow against recent keyframes.

    ``flows`` maps (current_kf, prior_kf) -> FlowField (``FlowStore.get``
    compatible); a missing pair shrinks that keyframe's window.  ``segs`` and
    ``validity`` optionally map keyframe id -> H x W planes (semantic dynamic
    mask; e.g. depth-validity).  The flow-derived component is dilated by
    ``cfg.dilate_px``; the semantic mask is united as-is, so with no priors
    the result equals the semantic mask exactly.
    """
    keyframe_ids = list(keyframe_ids)
    segs = segs or {}
    validity = validity or {}
    out = {}
    for idx, j in enumerate(keyframe_ids):
        priors = keyframe_ids[max(0, idx - cfg.window):idx]
        dims = shape
        if dims is None:
            dims = _any_shape(flows, keyframe_ids, segs)
        out[j] = build_mask_for_keyframe(
            j, priors, flows, cfg, seg=segs.get(j), validity=validity.get(j),
            seed=seed, shape=dims)
    return out


def build_mask_for_keyframe(kf_id: int, prior_ids, flows, cfg: MotionMaskCfg,
                            seg=None, validity=None, seed: int = 0,
                            shape: tuple | None = None) -> MotionMask:
    """Motion mask for one keyframe against its prior keyframes.

    ``prior_ids`` is ordered oldest first; votes are gathered from the most
    recent ``cfg.window`` of them.  The pair seed depends only on the frame
    ids, so incremental construction matches a batch rebuild bit for bit.
    """
    priors = list(prior_ids)[-cfg.window:]
    wms = []
    for k in reversed(priors):  # most recent first
        flow = flows.get(kf_id, k)
        if flow is None:
            log.info("flow (%d, %d) unavailable; window shrinks", kf_id, k)
            continue
        pair_seed = int(rng_for(seed, DOMAIN_RANSAC, kf_id, k).integers(2**63))
        try:
            F = estimate_pair_fundamental(flow, cfg, seed=pair_seed,
                                          valid_extra=validity)
        except Exception as exc:  # degenerate geometry: skip the pair
            log.warning("F estimation failed for pair (%d, %d): %s", kf_id, k, exc)
            continue
        wms.append(warp_mask(flow, F, cfg.e_th, src_id=kf_id, dst_id=k,
                             valid_extra=validity))
    if wms or seg is not None:
        mm = fuse_window(wms, seg, cfg.o_th, keyframe_id=kf_id)
    else:
        # no flow priors and no semantic mask: nothing is known dynamic
        if shape is None:
            raise ValueError(
                "cannot infer mask dimensions: no flows or masks given")
        mm = MotionMask(dynamic=np.zeros(shape, bool),
                        votes=np.zeros(shape, np.int32), keyframe_id=kf_id)
    if cfg.dilate_px > 0 and mm.votes.max() >= cfg.o_th:
        flow_part = dilate_mask(mm.votes >= cfg.o_th, cfg.dilate_px)
        final = flow_part | seg.astype(bool) if seg is not None else flow_part
        mm = MotionMask(dynamic=final, votes=mm.votes, keyframe_id=kf_id)
    return mm


def _any_shape(flows, keyframe_ids, segs):
    for s in segs.values():
        return s.shape
    for j in keyframe_ids:
        for k in keyframe_ids:
            f = flows.get(j, k)
            if f is not None:
                return f.u.shape
    raise ValueError("cannot infer mask dimensions: no flows or masks given")


def mask_for_frame(frame_id: int, kf_masks: dict) -> MotionMask:
    """Nearest keyframe's mask (by frame id; ties resolve to the earlier one)."""
    if not kf_masks:
        raise ValueError("no keyframe masks available")
    best = min(kf_masks, key=lambda k: (abs(k - frame_id), k))
    return kf_masks[best]


__all__ = [
    "MotionMaskCfg", "WarpMask", "MotionMask", "flow_correspondences",
    "estimate_pair_fundamental", "warp_mask", "fuse_window",
    "build_masks_for_keyframes", "build_mask_for_keyframe", "mask_for_frame",
]
