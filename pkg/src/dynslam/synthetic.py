"""Analytic RGB-D scene generator used as the verification oracle.

The scene is a closed axis-aligned box room with procedurally textured walls
and, optionally, one textured sphere translating through the room.  Every
quantity of interest — depth, color, camera trajectory, per-pixel dynamic
masks, and dense optical flow between any two frames — has a closed form, so
the generator doubles as ground truth for the tracking, masking and mapping
pipelines.

Depth images store camera z-depth (not ray length).  Flow for a frame pair
(a, b) is the dense displacement obtained by transporting frame-a surface
points (sphere points move with the sphere center) and reprojecting into b.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dataio import (
    FlowField,
    FlowStore,
    Frame,
    Sequence,
    write_color_png,
    write_depth_png,
    write_flow,
    write_mask_png,
    write_trajectory,
)
from .errors import SceneSpecError
from .geometry import Intrinsics, PoseSE3
from .seeding import DOMAIN_SYNTH_NOISE, rng_for

_WALL_CELL = 0.25  # checker cell edge on walls, meters
_SPHERE_CELL = 0.08
_MARGIN = 1e-3


@dataclass(frozen=True)
class SyntheticSceneSpec:
    camera_poses: tuple
    timestamps: tuple
    intrinsics: Intrinsics
    room_half_extents: tuple = (2.0, 1.5, 2.5)
    texture_seed: int = 0
    sphere_radius: float = 0.0
    sphere_path: tuple = ()  # ((time, (x, y, z)), ...) piecewise-linear waypoints
    depth_noise_std: float = 0.0
    color_noise_std: float = 0.0
    noise_seed: int = 0
    kf_interval: int = 5
    mask_window: int = 4

    def __post_init__(self):
        if len(self.camera_poses) != len(self.timestamps) or not self.camera_poses:
            raise SceneSpecError("camera_poses and timestamps must be non-empty and equal-length")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise SceneSpecError("timestamps must be strictly increasing")
        if self.sphere_radius < 0:
            raise SceneSpecError("sphere radius must be non-negative")
        hx, hy, hz = self.room_half_extents
        if min(hx, hy, hz) <= 0:
            raise SceneSpecError("room half-extents must be positive")
        for pose in self.camera_poses:
            t = pose.translation
            if np.any(np.abs(t) >= np.array([hx, hy, hz]) - _MARGIN):
                raise SceneSpecError(f"camera at {t} is outside the room")

    @property
    def has_sphere(self) -> bool:
        return self.sphere_radius > 0 and len(self.sphere_path) > 0

    def sphere_center(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation of the waypoint path, clamped ends."""
        times = np.array([w[0] for w in self.sphere_path])
        pts = np.array([w[1] for w in self.sphere_path], dtype=np.float64)
        return np.array(
            [np.interp(t, times, pts[:, k]) for k in range(3)]
        )


# ---------------------------------------------------------------------------
# Procedural texture
# ---------------------------------------------------------------------------

def _mix64(h: np.ndarray) -> np.ndarray:
    h = h.astype(np.uint64, copy=True)
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return h


def _checker_texture(points: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """Per-cell pseudo-random RGB for 3D points; constant inside each cell."""
    idx = np.floor(np.asarray(points, dtype=np.float64) / cell).astype(np.int64)
    base = (
        idx[..., 0].astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ idx[..., 1].astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ idx[..., 2].astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(np.uint64(seed) * np.uint64(0xD6E8FEB86659FD93))
    )
    rgb = np.empty(points.shape[:-1] + (3,), dtype=np.float64)
    for c in range(3):
        h = _mix64(base ^ np.uint64(c + 1))
        rgb[..., c] = 0.15 + 0.75 * ((h >> np.uint64(11)).astype(np.float64) / 2**53)
    return rgb


# ---------------------------------------------------------------------------
# Ray tracing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TracedFrame:
    color: np.ndarray = field(repr=False)
    depth: np.ndarray = field(repr=False)  # z-depth, noise-free
    points_w: np.ndarray = field(repr=False)  # (H, W, 3) world hit points
    sphere_mask: np.ndarray = field(repr=False)
    hit_axis: np.ndarray = field(repr=False)  # 0/1/2 wall axis, -1 sphere


def _pixel_dirs(K: Intrinsics) -> np.ndarray:
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)


def trace_frame(spec: SyntheticSceneSpec, pose: PoseSE3, time: float) -> TracedFrame:
    K = spec.intrinsics
    dirs_cam = _pixel_dirs(K)
    dirs_w = dirs_cam @ pose.rotation.T
    origin = pose.translation

    # exit distance through the box interior per axis; camera is inside
    half = np.array(spec.room_half_extents)
    t_wall = np.full(dirs_w.shape[:2], np.inf)
    axis_hit = np.zeros(dirs_w.shape[:2], dtype=np.int64)
    for a in range(3):
        d = dirs_w[..., a]
        with np.errstate(divide="ignore"):
            t_a = np.where(
                d > 0, (half[a] - origin[a]) / d,
                np.where(d < 0, (-half[a] - origin[a]) / d, np.inf),
            )
        closer = t_a < t_wall
        t_wall = np.where(closer, t_a, t_wall)
        axis_hit = np.where(closer, a, axis_hit)

    t_hit = t_wall
    sphere_mask = np.zeros(dirs_w.shape[:2], dtype=bool)
    if spec.has_sphere:
        c = spec.sphere_center(time)
        oc = origin - c
        dd = np.sum(dirs_w**2, axis=-1)
        b = dirs_w @ oc
        disc = b**2 - dd * (oc @ oc - spec.sphere_radius**2)
        safe = np.sqrt(np.maximum(disc, 0.0))
        t_s = (-b - safe) / dd
        sphere_mask = (disc >= 0) & (t_s > 1e-6) & (t_s < t_wall)
        t_hit = np.where(sphere_mask, t_s, t_wall)

    points_w = origin + t_hit[..., None] * dirs_w
    # z-depth equals the ray parameter because camera-frame directions have z = 1
    depth = t_hit.copy()

    color = _checker_texture(points_w, _WALL_CELL, spec.texture_seed)
    if spec.has_sphere and sphere_mask.any():
        local = points_w[sphere_mask] - spec.sphere_center(time)
        color[sphere_mask] = _checker_texture(local, _SPHERE_CELL, spec.texture_seed + 1)

    axis_hit = np.where(sphere_mask, -1, axis_hit)
    return TracedFrame(color, depth, points_w, sphere_mask, axis_hit)


def flow_between(
    spec: SyntheticSceneSpec, traced_a: TracedFrame, time_a: float,
    pose_b: PoseSE3, time_b: float,
) -> FlowField:
    """Dense ground-truth flow from frame a to frame b."""
    K = spec.intrinsics
    pts = traced_a.points_w.copy()
    if spec.has_sphere and traced_a.sphere_mask.any():
        delta = spec.sphere_center(time_b) - spec.sphere_center(time_a)
        pts[traced_a.sphere_mask] += delta
    R, t = pose_b.rotation, pose_b.translation
    cam = (pts.reshape(-1, 3) - t) @ R
    z = np.maximum(cam[:, 2], 1e-9)
    u_b = (K.fx * cam[:, 0] / z + K.cx).reshape(traced_a.depth.shape)
    v_b = (K.fy * cam[:, 1] / z + K.cy).reshape(traced_a.depth.shape)
    uu, vv = np.meshgrid(
        np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64)
    )
    return FlowField(u=u_b - uu, v=v_b - vv)


def _flow_pairs(n_frames: int, kf_interval: int, window: int) -> list:
    """Consecutive pairs plus keyframe -> earlier-keyframe pairs for the vote
    window (mask building gathers flow from the current keyframe backwards)."""
    pairs = [(i, i + 1) for i in range(n_frames - 1)]
    kfs = list(range(0, n_frames, kf_interval))
    for j_idx, j in enumerate(kfs):
        for back in range(1, window + 1):
            if j_idx - back < 0:
                break
            pairs.append((j, kfs[j_idx - back]))
    return pairs


def generate_synthetic_sequence(spec: SyntheticSceneSpec):
    """Trace all frames; returns (Sequence, gt_masks, FlowStore of gt flow)."""
    traced = [
        trace_frame(spec, pose, t)
        for pose, t in zip(spec.camera_poses, spec.timestamps)
    ]

    frames = []
    for i, tf in enumerate(traced):
        color, depth = tf.color, tf.depth
        if spec.color_noise_std > 0 or spec.depth_noise_std > 0:
            rng = rng_for(spec.noise_seed, DOMAIN_SYNTH_NOISE, i)
            if spec.color_noise_std > 0:
                color = np.clip(color + rng.normal(0, spec.color_noise_std, color.shape), 0, 1)
            if spec.depth_noise_std > 0:
                depth = np.maximum(depth + rng.normal(0, spec.depth_noise_std, depth.shape), 1e-3)
        frames.append(Frame(id=i, timestamp=spec.timestamps[i], color=color, depth=depth))

    flows = {}
    for a, b in _flow_pairs(len(traced), spec.kf_interval, spec.mask_window):
        flows[(a, b)] = flow_between(
            spec, traced[a], spec.timestamps[a], spec.camera_poses[b], spec.timestamps[b]
        )

    seq = Sequence(
        frames=tuple(frames),
        intrinsics=spec.intrinsics,
        gt_trajectory=tuple(zip(spec.timestamps, spec.camera_poses)),
    )
    masks = tuple(tf.sphere_mask for tf in traced)
    return seq, masks, FlowStore(fields=flows)


# ---------------------------------------------------------------------------
# Spec construction
# ---------------------------------------------------------------------------

def make_sweep_spec(
    n_frames: int = 50,
    width: int = 160,
    height: int = 120,
    focal: float = 120.0,
    camera_start=(-0.6, 0.0, -1.0),
    camera_end=(0.6, 0.0, -1.0),
    room_half_extents=(2.0, 1.5, 2.5),
    sphere_radius: float = 0.0,
    sphere_start=(0.0, -0.7, 1.2),
    sphere_end=(0.0, 0.7, 1.2),
    fps: float = 30.0,
    texture_seed: int = 0,
    depth_noise_std: float = 0.0,
    color_noise_std: float = 0.0,
    noise_seed: int = 0,
    kf_interval: int = 5,
    mask_window: int = 4,
    pitch_deg: float = 0.0,
    yaw_deg: float = 0.0,
) -> SyntheticSceneSpec:
    """Linear camera sweep with a fixed orientation; optional moving sphere.

    A nonzero pitch (positive = down) or yaw (positive = right) tilts the
    view so floor and side walls recede through a range of depths; the
    head-on default sees mostly the back wall at near-constant depth, which
    leaves two-view geometry ill-conditioned.
    """
    times = tuple(i / fps for i in range(n_frames))
    s, e = np.asarray(camera_start, float), np.asarray(camera_end, float)
    alphas = np.linspace(0.0, 1.0, n_frames)
    p, y = np.deg2rad(pitch_deg), np.deg2rad(yaw_deg)
    # +y is image-down, so a positive pitch turns the optical axis toward +y
    rot_pitch = np.array([[1.0, 0.0, 0.0],
                          [0.0, np.cos(p), np.sin(p)],
                          [0.0, -np.sin(p), np.cos(p)]])
    rot_yaw = np.array([[np.cos(y), 0.0, np.sin(y)],
                        [0.0, 1.0, 0.0],
                        [-np.sin(y), 0.0, np.cos(y)]])
    rot = rot_yaw @ rot_pitch
    poses = tuple(PoseSE3.from_rt(rot, s + a * (e - s)) for a in alphas)
    K = Intrinsics(
        fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )
    path = ()
    if sphere_radius > 0:
        path = ((times[0], tuple(sphere_start)), (times[-1], tuple(sphere_end)))
    return SyntheticSceneSpec(
        camera_poses=poses,
        timestamps=times,
        intrinsics=K,
        room_half_extents=tuple(room_half_extents),
        texture_seed=texture_seed,
        sphere_radius=sphere_radius,
        sphere_path=path,
        depth_noise_std=depth_noise_std,
        color_noise_std=color_noise_std,
        noise_seed=noise_seed,
        kf_interval=kf_interval,
        mask_window=mask_window,
    )


def scene_spec_from_dict(d: dict) -> SyntheticSceneSpec:
    """Build a spec from a plain mapping (the YAML schema of `synth` specs)."""
    try:
        img = d.get("image", {})
        sphere = d.get("sphere", {})
        noise = d.get("noise", {})
        kwargs = dict(
            n_frames=int(d.get("n_frames", 50)),
            width=int(img.get("width", 160)),
            height=int(img.get("height", 120)),
            focal=float(img.get("focal", 120.0)),
            room_half_extents=tuple(d.get("room_half_extents", (2.0, 1.5, 2.5))),
            fps=float(d.get("fps", 30.0)),
            texture_seed=int(d.get("texture_seed", 0)),
            depth_noise_std=float(noise.get("depth_std", 0.0)),
            color_noise_std=float(noise.get("color_std", 0.0)),
            noise_seed=int(noise.get("seed", 0)),
            kf_interval=int(d.get("kf_interval", 5)),
            mask_window=int(d.get("mask_window", 4)),
        )
        cam = d.get("camera", {})
        if "start" in cam:
            kwargs["camera_start"] = tuple(cam["start"])
        if "end" in cam:
            kwargs["camera_end"] = tuple(cam["end"])
        if "pitch_deg" in cam:
            kwargs["pitch_deg"] = float(cam["pitch_deg"])
        if "yaw_deg" in cam:
            kwargs["yaw_deg"] = float(cam["yaw_deg"])
        if sphere:
            kwargs["sphere_radius"] = float(sphere.get("radius", 0.3))
            if "start" in sphere:
                kwargs["sphere_start"] = tuple(sphere["start"])
            if "end" in sphere:
                kwargs["sphere_end"] = tuple(sphere["end"])
        return make_sweep_spec(**kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise SceneSpecError(f"invalid scene spec: {exc}") from exc


def scene_spec_from_yaml(path) -> SyntheticSceneSpec:
    path = Path(path)
    if not path.is_file():
        raise SceneSpecError(f"scene spec file not found: {path}")
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise SceneSpecError(f"scene spec must be a mapping: {path}")
    return scene_spec_from_dict(data)


# ---------------------------------------------------------------------------
# Dataset writer (TUM layout)
# ---------------------------------------------------------------------------

def write_synthetic_dataset(spec: SyntheticSceneSpec, out_dir) -> Path:
    """Materialize the generated sequence in the on-disk layout of `dataio`."""
    out = Path(out_dir)
    for sub in ("rgb", "depth", "gt_masks", "flows"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    seq, masks, flows = generate_synthetic_sequence(spec)
    K = spec.intrinsics

    rgb_lines, depth_lines, gt_lines = [], [], []
    for fr, mask in zip(seq.frames, masks):
        name = f"{fr.id:06d}.png"
        write_color_png(out / "rgb" / name, fr.color)
        write_depth_png(out / "depth" / name, fr.depth, K.depth_scale)
        write_mask_png(out / "gt_masks" / name, mask)
        rgb_lines.append(f"{fr.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{fr.timestamp:.6f} depth/{name}")
    (out / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("\n".join(depth_lines) + "\n")

    stamps = [t for t, _ in seq.gt_trajectory]
    poses = [p for _, p in seq.gt_trajectory]
    write_trajectory(out / "groundtruth.txt", stamps, poses)

    for (a, b) in sorted(flows.pairs):
        write_flow(out / "flows" / f"flow_{a}_{b}.flo", flows.get(a, b))

    intr = {
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "width": K.width, "height": K.height, "depth_scale": K.depth_scale,
    }
    with open(out / "intrinsics.yaml", "w") as f:
        yaml.safe_dump(intr, f, sort_keys=True)
    return out
