"""Camera tracking, keyframing, and global bundle adjustment.

Tracking is split by frame role.  Every frame is first aligned by warping
the reference keyframe's edge pixels into it and driving the edge distance
transform toward zero -- cheap, and insensitive to lighting.  Keyframes
additionally refine that edge-initialized pose against the frozen map with
the volume-rendering objective, then trigger a global adjustment that steps
the map and every non-anchor keyframe pose using rays replayed from
per-keyframe pixel reservoirs.  Frame 0 is the gauge anchor: its pose is the
identity and is never touched by any optimizer.

Dynamic content is excluded at the sampling stage -- reservoirs, ray
batches, and edge sets are all drawn outside the motion masks -- and an
audit counter re-checks every pixel that reaches a loss so a run can prove
that nothing flagged dynamic ever contributed.

The reference schedule is single-threaded and fully seeded; ``threads``
only fans out ray chunks inside the fused loss, which merges in a fixed
order, so outputs are bitwise identical for any thread count.
"""

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dataio import Frame, FlowStore, Sequence
from .errors import EmptyEdgeMapError, EmptySequenceError
from .field import (FieldParams, HashGridConfig, field_forward,
                    init_field_params)
from .geometry import Intrinsics, PoseSE3
from .imageproc import canny_edges, distance_transform, rgb_to_gray
from .losses import (EdgeLossCfg, LossWeights, TruncationSpec, edge_warp_loss,
                     fused_render_loss)
from .motionmask import MotionMask, MotionMaskCfg, build_mask_for_keyframe
from .optim import Adam
from .render import (RayBatch, build_ray_batch, render_rays, sample_along_rays,
                     sample_pixels)
from .seeding import (DOMAIN_GBA, DOMAIN_INIT_FIELD, DOMAIN_RAY_DEPTHS,
                      DOMAIN_RESERVOIR, DOMAIN_TRACK, rng_for)

TRACKING_MODES = ("edge", "render_only")


@dataclass(frozen=True)
class TrackerConfig:
    """Knobs for tracking, keyframing, and map optimization."""

    n_track_rays: int = 1024      # rays per rendering-refinement iteration
    n_samples: int = 85           # depth samples per ray
    track_iters: int = 20         # edge-alignment iterations per frame
    refine_iters: int = 20        # rendering refinement iterations (keyframes)
    map_iters: int = 40           # first-frame map bootstrap iterations
    gba_iters: int = 40           # global adjustment iterations per keyframe
    batch_rays: int = 1024        # rays per mapping/adjustment iteration
    kf_interval: int = 5
    reservoir_size: int = 2048    # stored mask-free pixels per keyframe
    lr_pose: float = 1e-3
    lr_pose_gba: float = 1e-4     # pose step inside global adjustment
    lr_field: float = 1e-3
    near: float = 0.05
    far: float = 8.0
    surface_frac: float = 0.6
    canny_low: float = 0.1
    canny_high: float = 0.2
    canny_sigma: float = 1.4
    use_motion_masks: bool = True
    tracking_mode: str = "edge"

    def __post_init__(self):
        for name in ("n_track_rays", "n_samples", "kf_interval",
                     "reservoir_size", "batch_rays"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("track_iters", "refine_iters", "map_iters", "gba_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.lr_pose > 0 and self.lr_pose_gba > 0 and self.lr_field > 0):
            raise ValueError("learning rates must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.tracking_mode not in TRACKING_MODES:
            raise ValueError(f"tracking_mode must be one of {TRACKING_MODES}")


@dataclass(frozen=True)
class SystemConfig:
    """Everything run_system needs beyond the data itself."""

    tracker: TrackerConfig = dc_field(default_factory=TrackerConfig)
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    truncation: TruncationSpec = dc_field(default_factory=TruncationSpec)
    edge: EdgeLossCfg = dc_field(default_factory=EdgeLossCfg)
    mask: MotionMaskCfg = dc_field(default_factory=MotionMaskCfg)
    mlp_hidden: int = 32
    mlp_h_dim: int = 15
    seed: int = 0
    threads: int = 1


@dataclass
class Keyframe:
    """A retained frame: pose estimate, mask, edges, and a pixel reservoir."""

    frame: Frame
    pose: PoseSE3                   # camera-to-world, updated by adjustment
    mask: MotionMask
    edge_pixels: np.ndarray         # (E, 2) static edge pixels, x/y
    edge_depths: np.ndarray         # (E,) z-depth at those pixels
    reservoir: np.ndarray           # (M, 2) mask-free pixels, x/y int

    @property
    def id(self) -> int:
        return self.frame.id


@dataclass(frozen=True)
class TrajectoryEntry:
    timestamp: float
    pose: PoseSE3
    is_keyframe: bool


class Trajectory:
    """Timestamp-ordered pose list; timestamps must strictly increase."""

    def __init__(self):
        self.entries: list[TrajectoryEntry] = []

    def append(self, timestamp: float, pose: PoseSE3, is_keyframe: bool):
        if self.entries and timestamp <= self.entries[-1].timestamp:
            raise ValueError(
                f"timestamps must strictly increase: {timestamp} after "
                f"{self.entries[-1].timestamp}")
        self.entries.append(TrajectoryEntry(timestamp, pose, is_keyframe))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def stamped_poses(self):
        return [(e.timestamp, e.pose) for e in self.entries]

    def positions(self) -> np.ndarray:
        return np.array([e.pose.translation for e in self.entries])


@dataclass
class TrackResult:
    pose: PoseSE3
    degraded: bool
    n_edges: int
    loss: float
    refined: bool = False           # rendering refinement actually applied


class DynamicPixelAudit:
    """Counts pixels flagged dynamic that reached a loss (must stay 0)."""

    def __init__(self):
        self.count = 0

    def check(self, dynamic_flags) -> int:
        bad = int(np.count_nonzero(dynamic_flags))
        self.count += bad
        return bad


class _PoseStepper:
    """Adam over a left-update 6-vector, re-centered at zero each step."""

    def __init__(self, lr: float):
        self._adam = Adam(lr=lr)

    def step(self, name: str, pose: PoseSE3, grad: np.ndarray) -> PoseSE3:
        xi = np.zeros(6)
        self._adam.step([(name, xi, grad)])
        return PoseSE3.exp(xi).compose(pose).orthonormalized()


# ---------------------------------------------------------------------------
# per-frame feature extraction


def frame_edge_data(frame: Frame, tracker: TrackerConfig):
    """Detected edges and the boolean edge map, at the tracker's thresholds."""
    gray = rgb_to_gray(frame.color)
    return canny_edges(gray, tracker.canny_low, tracker.canny_high,
                       tracker.canny_sigma, frame_id=frame.id)


def static_edge_pixels(edges, frame: Frame, mask_dyn: np.ndarray | None,
                       audit: DynamicPixelAudit | None = None):
    """Edge pixels with valid depth outside the motion mask."""
    px = np.asarray(edges.pixels, dtype=np.float64).reshape(-1, 2)
    if len(px) == 0:
        return px, np.zeros(0)
    cols = px[:, 0].astype(np.int64)
    rows = px[:, 1].astype(np.int64)
    depths = frame.depth[rows, cols]
    keep = depths > 0.0
    if mask_dyn is not None:
        keep &= ~mask_dyn[rows, cols]
    px, depths = px[keep], depths[keep]
    if audit is not None and mask_dyn is not None and len(px):
        audit.check(mask_dyn[px[:, 1].astype(np.int64),
                             px[:, 0].astype(np.int64)])
    return px, depths


# ---------------------------------------------------------------------------
# tracking


def track_nonkeyframe(ref: Keyframe, frame: Frame, init_pose: PoseSE3,
                      intr: Intrinsics, tracker: TrackerConfig,
                      edge_cfg: EdgeLossCfg,
                      audit: DynamicPixelAudit | None = None) -> TrackResult:
    """Edge-warp alignment of ``frame`` against its reference keyframe.

    The reference keyframe's static edge pixels are warped into the frame by
    the relative pose and scored against the frame's edge distance
    transform; the world pose is the keyframe pose composed with the
    optimized relative pose.  With no usable edges on either side the
    initial pose is kept and the frame is flagged degraded.
    """
    if len(ref.edge_pixels) == 0:
        return TrackResult(init_pose, degraded=True, n_edges=0, loss=float("nan"))
    _edges, edge_map = frame_edge_data(frame, tracker)
    if not edge_map.any():
        return TrackResult(init_pose, degraded=True, n_edges=0, loss=float("nan"))
    dt = distance_transform(edge_map)
    target_mask = ref.mask.dynamic if ref.mask.dynamic.any() else None
    if audit is not None and ref.mask.dynamic.any():
        cols = ref.edge_pixels[:, 0].astype(np.int64)
        rows = ref.edge_pixels[:, 1].astype(np.int64)
        audit.check(ref.mask.dynamic[rows, cols])

    pose_ji = init_pose.inverse().compose(ref.pose)  # ref cam -> frame cam
    stepper = _PoseStepper(tracker.lr_pose)
    loss, n_used, it_done = float("nan"), 0, 0
    for it in range(tracker.track_iters):
        try:
            loss, d_xi, n_used = edge_warp_loss(
                ref.edge_pixels, ref.edge_depths, pose_ji, intr, dt,
                edge_cfg, dynamic_mask=target_mask)
        except EmptyEdgeMapError:
            if it == 0:
                return TrackResult(init_pose, degraded=True,
                                   n_edges=0, loss=float("nan"))
            break  # alignment drifted out of coverage; keep the last pose
        pose_ji = stepper.step("xi", pose_ji, d_xi)
        it_done = it + 1
    world = ref.pose.compose(pose_ji.inverse())
    return TrackResult(world, degraded=it_done == 0, n_edges=n_used, loss=loss)


def _render_refine(frame: Frame, init_pose: PoseSE3, mask_dyn,
                   params: FieldParams, intr: Intrinsics, sysc: SystemConfig,
                   iters: int, audit: DynamicPixelAudit | None = None):
    """Pose-only descent of the rendering objective with the map frozen.

    Returns (pose, refined): a batch where no ray carries color or depth
    evidence on the first iteration aborts the refinement.
    """
    tracker = sysc.tracker
    rng = rng_for(sysc.seed, DOMAIN_TRACK, frame.id)
    probe, _short = sample_pixels(frame, intr, init_pose, tracker.n_track_rays,
                                  rng, motion_mask=mask_dyn)
    pixels = probe.pixels
    if len(pixels) == 0:
        return init_pose, False
    if audit is not None and mask_dyn is not None:
        audit.check(mask_dyn[pixels[:, 1].astype(np.int64),
                             pixels[:, 0].astype(np.int64)])
    pose = init_pose
    stepper = _PoseStepper(tracker.lr_pose)
    for it in range(iters):
        batch = build_ray_batch(frame, intr, pose, pixels)
        rng_z = rng_for(sysc.seed, DOMAIN_RAY_DEPTHS, frame.id, it)
        samples = sample_along_rays(batch, tracker.n_samples,
                                    sysc.truncation.tr, tracker.near,
                                    tracker.far, rng_z, tracker.surface_frac)
        fused = fused_render_loss(params, sysc.grid, batch, samples,
                                  sysc.weights, sysc.truncation,
                                  stage="tracking", need_param_grads=False,
                                  need_pose_grad=True, threads=sysc.threads)
        if fused.counts["rgb"] == 0 and fused.counts["depth"] == 0:
            if it == 0:
                return init_pose, False
            break
        pose = stepper.step("xi", pose, fused.pose_grad)
    return pose, True


def track_keyframe(ref: Keyframe, frame: Frame, init_pose: PoseSE3,
                   mask: MotionMask, params: FieldParams, intr: Intrinsics,
                   sysc: SystemConfig,
                   audit: DynamicPixelAudit | None = None) -> TrackResult:
    """Two-stage keyframe tracking: edge initialization, then rendering.

    Stage two only ever replaces the stage-one pose when its first ray batch
    carries usable evidence; a degenerate batch keeps the edge result.  A
    frame counts as degraded only when both stages failed to produce an
    update.
    """
    tracker = sysc.tracker
    if tracker.tracking_mode == "render_only":
        stage1 = TrackResult(init_pose, degraded=False, n_edges=0,
                             loss=float("nan"))
    else:
        stage1 = track_nonkeyframe(ref, frame, init_pose, intr, tracker,
                                   sysc.edge, audit)
    mask_dyn = mask.dynamic if mask.dynamic.any() else None
    pose, refined = _render_refine(frame, stage1.pose, mask_dyn, params, intr,
                                   sysc, tracker.refine_iters, audit)
    return TrackResult(pose, degraded=stage1.degraded and not refined,
                       n_edges=stage1.n_edges, loss=stage1.loss,
                       refined=refined)


# ---------------------------------------------------------------------------
# keyframe insertion


def insert_keyframe(frame: Frame, pose: PoseSE3, mask: MotionMask,
                    tracker: TrackerConfig, seed: int,
                    audit: DynamicPixelAudit | None = None) -> Keyframe:
    """Build a keyframe record: static edges and a pixel reservoir.

    The reservoir is a uniform without-replacement draw over mask-free
    pixels (all of them when fewer than the reservoir size exist), seeded by
    the frame id so insertion is reproducible in isolation.  A frame with no
    detectable edges still becomes a keyframe; frames tracked against it
    fall back to their pose prior.
    """
    edges, _edge_map = frame_edge_data(frame, tracker)
    mask_dyn = mask.dynamic if mask.dynamic.any() else None
    edge_px, edge_z = static_edge_pixels(edges, frame, mask_dyn, audit)

    h, w = frame.depth.shape
    eligible = np.flatnonzero(~mask.dynamic.ravel())
    rng = rng_for(seed, DOMAIN_RESERVOIR, frame.id)
    take = min(tracker.reservoir_size, len(eligible))
    chosen = eligible[np.sort(rng.choice(len(eligible), take, replace=False))]
    reservoir = np.column_stack([chosen % w, chosen // w]).astype(np.int64)
    if audit is not None:
        audit.check(mask.dynamic[reservoir[:, 1], reservoir[:, 0]])
    return Keyframe(frame=frame, pose=pose, mask=mask, edge_pixels=edge_px,
                    edge_depths=edge_z, reservoir=reservoir)


# ---------------------------------------------------------------------------
# mapping / global adjustment


def _gba_batch(keyframes, intr, rng, n_rays, n_samples, trunc_tr, near, far,
               surface_frac, rng_z, audit=None):
    """One fixed-size ray batch drawn from the union of reservoirs.

    Rays are grouped per keyframe (contiguously, in keyframe order) so the
    fused loss can hand back one pose gradient per camera.
    """
    sizes = [len(kf.reservoir) for kf in keyframes]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    take = min(n_rays, total)
    chosen = np.sort(rng.choice(total, take, replace=False))
    owner = np.searchsorted(offsets, chosen, side="right") - 1

    batches, groups = [], []
    for gi, kf in enumerate(keyframes):
        mine = chosen[owner == gi] - offsets[gi]
        if len(mine) == 0:
            continue
        pix = kf.reservoir[mine]
        if audit is not None:
            audit.check(kf.mask.dynamic[pix[:, 1], pix[:, 0]])
        batches.append(build_ray_batch(kf.frame, intr, kf.pose, pix))
        groups.append(np.full(len(pix), gi, dtype=np.int64))

    batch = RayBatch(
        origins=np.concatenate([b.origins for b in batches]),
        directions=np.concatenate([b.directions for b in batches]),
        pixels=np.concatenate([b.pixels for b in batches]),
        gt_color=np.concatenate([b.gt_color for b in batches]),
        gt_depth=np.concatenate([b.gt_depth for b in batches]),
        dynamic=np.concatenate([b.dynamic for b in batches]),
        frame_id=-1,
    )
    samples = sample_along_rays(batch, n_samples, trunc_tr, near, far, rng_z,
                                surface_frac)
    return batch, samples, np.concatenate(groups)


def _depth_mae(params, grid, keyframes, intr, eval_pixels, eval_z, trunc):
    """Mean |rendered - measured| ray distance over a fixed evaluation set."""
    errs = []
    for kf, pix, z in zip(keyframes, eval_pixels, eval_z):
        if len(pix) == 0:
            continue
        batch = build_ray_batch(kf.frame, intr, kf.pose, pix)
        pts = batch.origins[:, None, :] + z[..., None] * batch.directions[:, None, :]
        s, _h, c, _cache = field_forward(pts.reshape(-1, 3), params, grid)
        res, _rc = render_rays(z, s.reshape(z.shape),
                               c.reshape(z.shape + (3,)), trunc.tr)
        ok = (batch.gt_depth > 0) & ~res.degenerate
        if ok.any():
            errs.append(np.abs(res.depth[ok] - batch.gt_depth[ok]))
    return float(np.concatenate(errs).mean()) if errs else float("nan")


def global_ba(keyframes, params: FieldParams, intr: Intrinsics,
              sysc: SystemConfig, field_adam: Adam, iters: int | None = None,
              call_idx: int = 0, audit: DynamicPixelAudit | None = None,
              record_depth_mae: bool = False):
    """Joint map + keyframe-pose optimization over reservoir rays.

    The first keyframe is the gauge anchor and receives no update.  Poses
    use a fresh Adam per call (re-centered around the current estimates) at
    ``lr_pose_gba`` -- Adam's step size is scale-free, so polishing poses
    that tracking already placed well needs a much smaller step than
    tracking itself; the map optimizer persists across calls.  Returns the
    per-iteration depth-MAE series when ``record_depth_mae`` (evaluated on
    a fixed, seeded ray set, after each iteration).
    """
    tracker = sysc.tracker
    iters = tracker.gba_iters if iters is None else iters
    if not keyframes:
        return []
    pose_stepper = _PoseStepper(tracker.lr_pose_gba)

    eval_pixels, eval_z, series = [], [], []
    if record_depth_mae:
        rng_e = rng_for(sysc.seed, DOMAIN_GBA, call_idx, 1 << 20)
        for kf in keyframes:
            take = min(256, len(kf.reservoir))
            pix = kf.reservoir[np.sort(
                rng_e.choice(len(kf.reservoir), take, replace=False))]
            batch = build_ray_batch(kf.frame, intr, kf.pose, pix)
            smp = sample_along_rays(batch, tracker.n_samples,
                                    sysc.truncation.tr, tracker.near,
                                    tracker.far, rng_e, tracker.surface_frac)
            eval_pixels.append(pix)
            eval_z.append(smp.z)

    for it in range(iters):
        rng = rng_for(sysc.seed, DOMAIN_GBA, call_idx, it, 0)
        rng_z = rng_for(sysc.seed, DOMAIN_GBA, call_idx, it, 1)
        batch, samples, groups = _gba_batch(
            keyframes, intr, rng, tracker.batch_rays, tracker.n_samples,
            sysc.truncation.tr, tracker.near, tracker.far,
            tracker.surface_frac, rng_z, audit)
        fused = fused_render_loss(params, sysc.grid, batch, samples,
                                  sysc.weights, sysc.truncation,
                                  stage="mapping", need_param_grads=True,
                                  need_pose_grad=True, pose_groups=groups,
                                  threads=sysc.threads)
        steps = []
        for (name, arr), (gname, grad) in zip(params.items(),
                                              fused.param_grads.items()):
            assert name == gname
            steps.append((name, arr, grad))
        field_adam.step(steps)
        for gi, kf in enumerate(keyframes):
            if gi == 0 or gi >= len(fused.pose_grad):
                continue  # gauge anchor stays put
            kf.pose = pose_stepper.step(f"kf{kf.id}", kf.pose,
                                        fused.pose_grad[gi])
        if record_depth_mae:
            series.append(_depth_mae(params, sysc.grid, keyframes, intr,
                                     eval_pixels, eval_z, sysc.truncation))
    return series


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class RunResult:
    trajectory: Trajectory
    keyframes: list
    params: FieldParams
    masks: dict                  # keyframe id -> MotionMask
    report_lines: list
    degraded_frames: list
    audit_count: int


def _empty_mask(shape, kf_id) -> MotionMask:
    return MotionMask(dynamic=np.zeros(shape, bool),
                      votes=np.zeros(shape, np.int32), keyframe_id=kf_id)


def run_system(seq: Sequence, flows: FlowStore | None = None,
               segs: dict | None = None,
               sysc: SystemConfig | None = None) -> RunResult:
    """Track every frame, map at keyframes, and return the full run state.

    ``flows`` feeds the epipolar motion masks (keyframe -> prior keyframe
    pairs); ``segs`` optionally adds per-frame semantic dynamic masks.
    Degraded frames (no usable edges / no usable rays) keep their initial
    pose guess and are listed in the result rather than aborting the run.
    """
    sysc = sysc or SystemConfig()
    tracker = sysc.tracker
    if not seq.frames:
        raise EmptySequenceError("sequence has no frames")
    flows = flows or FlowStore()
    segs = segs or {}
    intr = seq.intrinsics
    shape = seq.frames[0].depth.shape

    params = init_field_params(
        sysc.grid, hidden=sysc.mlp_hidden, h_dim=sysc.mlp_h_dim,
        tr=sysc.truncation.tr,
        seed=int(rng_for(sysc.seed, DOMAIN_INIT_FIELD).integers(2**31)))
    field_adam = Adam(lr=tracker.lr_field)
    audit = DynamicPixelAudit()

    keyframes: list[Keyframe] = []
    masks: dict[int, MotionMask] = {}
    report: list[str] = []
    degraded: list[int] = []
    gba_calls = 0
    # per frame: (ref keyframe index, pose relative to that keyframe)
    anchors: list[tuple[int, PoseSE3, float, bool, bool]] = []

    def build_kf_mask(frame: Frame) -> MotionMask:
        if not tracker.use_motion_masks:
            return _empty_mask(shape, frame.id)
        return build_mask_for_keyframe(
            frame.id, [kf.id for kf in keyframes], flows, sysc.mask,
            seg=segs.get(frame.id), seed=sysc.seed, shape=shape)

    for i, frame in enumerate(seq.frames):
        t0 = time.perf_counter()
        is_kf = i % tracker.kf_interval == 0
        if i == 0:
            pose = PoseSE3.identity()
            mask = build_kf_mask(frame)
            kf = insert_keyframe(frame, pose, mask, tracker, sysc.seed, audit)
            keyframes.append(kf)
            masks[frame.id] = mask
            global_ba(keyframes, params, intr, sysc, field_adam,
                      iters=tracker.map_iters, call_idx=gba_calls, audit=audit)
            gba_calls += 1
            anchors.append((0, PoseSE3.identity(), frame.timestamp, True, False))
            report.append(
                f"frame {frame.id} t {frame.timestamp:.6f} kf 1 degraded 0 "
                f"n_edges {len(kf.edge_pixels)} loss nan "
                f"time_ms {(time.perf_counter() - t0) * 1e3:.1f}")
            continue

        ref_idx = len(keyframes) - 1
        ref = keyframes[ref_idx]
        prev_ref, prev_rel, *_ = anchors[-1]
        init_pose = keyframes[prev_ref].pose.compose(prev_rel)

        if is_kf:
            mask = build_kf_mask(frame)
            res = track_keyframe(ref, frame, init_pose, mask, params, intr,
                                 sysc, audit)
            pose = res.pose
            kf = insert_keyframe(frame, pose, mask, tracker, sysc.seed, audit)
            keyframes.append(kf)
            masks[frame.id] = mask
            anchors.append((len(keyframes) - 1, PoseSE3.identity(),
                            frame.timestamp, True, res.degraded))
            t_gba = time.perf_counter()
            global_ba(keyframes, params, intr, sysc, field_adam,
                      iters=tracker.gba_iters, call_idx=gba_calls, audit=audit)
            gba_calls += 1
            report.append(
                f"gba kfs {len(keyframes)} iters {tracker.gba_iters} "
                f"time_ms {(time.perf_counter() - t_gba) * 1e3:.1f}")
        else:
            if tracker.tracking_mode == "render_only":
                mask_dyn = (ref.mask.dynamic if tracker.use_motion_masks
                            and ref.mask.dynamic.any() else None)
                p, refined = _render_refine(frame, init_pose, mask_dyn, params,
                                            intr, sysc, tracker.track_iters,
                                            audit)
                res = TrackResult(p, degraded=not refined, n_edges=0,
                                  loss=float("nan"), refined=refined)
            else:
                res = track_nonkeyframe(ref, frame, init_pose, intr, tracker,
                                        sysc.edge, audit)
            pose = res.pose
            anchors.append((ref_idx, ref.pose.inverse().compose(pose),
                            frame.timestamp, False, res.degraded))

        if res.degraded:
            degraded.append(frame.id)
        report.append(
            f"frame {frame.id} t {frame.timestamp:.6f} kf {int(is_kf)} "
            f"degraded {int(res.degraded)} n_edges {res.n_edges} "
            f"loss {res.loss:.6e} "
            f"time_ms {(time.perf_counter() - t0) * 1e3:.1f}")

    trajectory = Trajectory()
    for ref_idx, rel, ts, is_kf, _deg in anchors:
        trajectory.append(ts, keyframes[ref_idx].pose.compose(rel), is_kf)

    report.append(
        f"final frames {len(seq.frames)} keyframes {len(keyframes)} "
        f"degraded {len(degraded)} dynamic_pixels_in_losses {audit.count}")
    return RunResult(trajectory=trajectory, keyframes=keyframes, params=params,
                     masks=masks, report_lines=report,
                     degraded_frames=degraded, audit_count=audit.count)


__all__ = [
    "TRACKING_MODES", "TrackerConfig", "SystemConfig", "Keyframe",
    "Trajectory", "TrajectoryEntry", "TrackResult", "DynamicPixelAudit",
    "frame_edge_data", "static_edge_pixels", "track_nonkeyframe",
    "track_keyframe", "insert_keyframe", "global_ba", "RunResult",
    "run_system",
]
