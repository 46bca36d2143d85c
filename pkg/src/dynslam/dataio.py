"""TUM-style RGB-D ingest plus optical-flow, mask and trajectory file IO.

Dataset layout (shared by real captures and the synthetic generator):

    root/
      rgb.txt  depth.txt  [groundtruth.txt]     TUM list files
      rgb/*.png    8-bit color
      depth/*.png  16-bit depth, raw / depth_scale = meters
      [flows/flow_<src>_<dst>.flo]              Middlebury flow, frame-id keyed
      [seg/<rgb stem>.png]                      8-bit masks, nonzero = dynamic
"""

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptySequenceError, FormatError, IngestError
from .geometry import Intrinsics, PoseSE3, quat_to_rotation, rotation_to_quat

_FLO_MAGIC = np.float32(202021.25)
_FLOW_NAME = re.compile(r"flow_(\d+)_(\d+)\.flo$")


@dataclass(frozen=True)
class Frame:
    """One associated RGB-D observation. Depth 0 means "no measurement"."""

    id: int
    timestamp: float
    color: np.ndarray = field(repr=False)
    depth: np.ndarray = field(repr=False)
    intrinsics_ref: int = 0

    def __post_init__(self):
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise ValueError("color must be HxWx3")
        if self.depth.shape != self.color.shape[:2]:
            raise ValueError("depth and color dimensions differ")
        if not np.isfinite(self.depth).all() or (self.depth < 0).any():
            raise ValueError("depth must be finite and non-negative")


@dataclass(frozen=True)
class FlowField:
    """Dense per-pixel displacement in pixels; u along columns, v along rows."""

    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be equal-shaped 2D arrays")

    @property
    def shape(self):
        return self.u.shape


@dataclass(frozen=True)
class Sequence:
    frames: tuple
    intrinsics: Intrinsics
    gt_trajectory: tuple | None = None  # ((timestamp, PoseSE3), ...)
    flow_paths: dict = field(default_factory=dict)  # (src_id, dst_id) -> Path
    seg_paths: dict = field(default_factory=dict)  # frame_id -> Path

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frames must be strictly ordered by timestamp")

    def __len__(self):
        return len(self.frames)


class FlowStore:
    """Flow lookup by (src, dst) frame ids, in-memory or lazily from disk."""

    def __init__(self, fields: dict | None = None, paths: dict | None = None):
        self._fields = dict(fields or {})
        self._paths = dict(paths or {})

    @property
    def pairs(self):
        return set(self._fields) | set(self._paths)

    def get(self, src: int, dst: int) -> FlowField | None:
        key = (src, dst)
        if key not in self._fields:
            if key not in self._paths:
                return None
            self._fields[key] = load_flow(self._paths[key])
        return self._fields[key]


# ---------------------------------------------------------------------------
# Image IO
# ---------------------------------------------------------------------------

def read_color_png(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_color_png(path, color: np.ndarray) -> None:
    raw = np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(raw, mode="RGB").save(path)


def read_depth_png(path, depth_scale: float) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise FormatError(f"depth image must be single-channel: {path}")
    return arr.astype(np.float64) / depth_scale


def write_depth_png(path, depth_m: np.ndarray, depth_scale: float) -> None:
    raw = np.round(np.clip(depth_m, 0.0, 65535.0 / depth_scale) * depth_scale)
    Image.fromarray(raw.astype(np.uint16)).save(path)  # uint16 maps to mode I;16


def load_seg_mask(path, expected_shape=None) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "1"):
        raise FormatError(f"segmentation mask must be single-channel 8-bit: {path} is {img.mode}")
    mask = np.asarray(img) > 0
    if expected_shape is not None and mask.shape != tuple(expected_shape):
        raise FormatError(
            f"mask {path} is {mask.shape}, expected {tuple(expected_shape)}"
        )
    return mask


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def load_flow(path) -> FlowField:
    with open(path, "rb") as f:
        magic = np.fromfile(f, dtype="<f4", count=1)
        if magic.size < 1 or magic[0] != _FLO_MAGIC:
            raise FormatError(f"not a .flo file (bad magic): {path}")
        dims = np.fromfile(f, dtype="<i4", count=2)
        payload = np.fromfile(f, dtype="<f4")
    if dims.size < 2:
        raise FormatError(f"truncated .flo header: {path}")
    w, h = int(dims[0]), int(dims[1])
    if w <= 0 or h <= 0 or payload.size != 2 * w * h:
        raise FormatError(f"truncated or inconsistent .flo payload: {path}")
    data = payload.reshape(h, w, 2).astype(np.float64)
    return FlowField(u=data[..., 0], v=data[..., 1])


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(_FLO_MAGIC.tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        interleaved = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
        f.write(interleaved.tobytes())


# ---------------------------------------------------------------------------
# TUM list files and trajectories
# ---------------------------------------------------------------------------

def parse_list_file(path) -> list:
    """`timestamp filename` lines; `#` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"missing index file: {path}")
    entries = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"bad line in {path}: {line!r}")
        entries.append((float(parts[0]), parts[1]))
    return entries


def read_trajectory(path) -> list:
    """TUM trajectory lines `t tx ty tz qx qy qz qw` -> [(t, PoseSE3), ...]."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"missing trajectory file: {path}")
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"bad trajectory line in {path}: {line!r}")
        t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
        R = quat_to_rotation(np.array([qx, qy, qz, qw]))
        out.append((t, PoseSE3.from_rt(R, np.array([tx, ty, tz]))))
    return out


def write_trajectory(path, stamps, poses) -> None:
    lines = []
    for t, pose in zip(stamps, poses):
        tx, ty, tz = pose.translation
        qx, qy, qz, qw = rotation_to_quat(pose.rotation)
        lines.append(
            f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def associate(times_a, times_b, max_dt: float) -> list:
    """Greedy nearest-timestamp pairing within max_dt, each entry used once.

    Candidates are taken in order of ascending |dt| (ties broken by the
    timestamps themselves) so the pairing is a pure function of the inputs.
    """
    cand = [
        (abs(ta - tb), ia, ib)
        for ia, ta in enumerate(times_a)
        for ib, tb in enumerate(times_b)
        if abs(ta - tb) <= max_dt
    ]
    cand.sort(key=lambda c: (c[0], times_a[c[1]], times_b[c[2]]))
    used_a, used_b, pairs = set(), set(), []
    for _, ia, ib in cand:
        if ia not in used_a and ib not in used_b:
            used_a.add(ia)
            used_b.add(ib)
            pairs.append((ia, ib))
    pairs.sort(key=lambda p: times_a[p[0]])
    return pairs


def discover_flow_paths(root) -> dict:
    flow_dir = Path(root) / "flows"
    out = {}
    if flow_dir.is_dir():
        for p in sorted(flow_dir.iterdir()):
            m = _FLOW_NAME.search(p.name)
            if m:
                out[(int(m.group(1)), int(m.group(2)))] = p
    return out


def load_tum_sequence(root, intrinsics: Intrinsics, max_dt: float = 0.02) -> Sequence:
    """Associate rgb/depth lists, load images, attach gt/flow/seg references."""
    root = Path(root)
    rgb_entries = parse_list_file(root / "rgb.txt")
    depth_entries = parse_list_file(root / "depth.txt")
    pairs = associate(
        [t for t, _ in rgb_entries], [t for t, _ in depth_entries], max_dt
    )
    if not pairs:
        raise EmptySequenceError(f"no rgb/depth pairs within {max_dt}s in {root}")

    seg_dir = root / "seg"
    frames, seg_paths = [], {}
    for fid, (ia, ib) in enumerate(pairs):
        t_rgb, rgb_name = rgb_entries[ia]
        _, depth_name = depth_entries[ib]
        color = read_color_png(root / rgb_name)
        depth = read_depth_png(root / depth_name, intrinsics.depth_scale)
        if depth.shape != color.shape[:2]:
            raise FormatError(f"size mismatch between {rgb_name} and {depth_name}")
        frames.append(Frame(id=fid, timestamp=t_rgb, color=color, depth=depth))
        seg_file = seg_dir / (Path(rgb_name).stem + ".png")
        if seg_file.is_file():
            seg_paths[fid] = seg_file

    gt_file = root / "groundtruth.txt"
    gt = tuple(read_trajectory(gt_file)) if gt_file.is_file() else None

    return Sequence(
        frames=tuple(frames),
        intrinsics=intrinsics,
        gt_trajectory=gt,
        flow_paths=discover_flow_paths(root),
        seg_paths=seg_paths,
    )


def gt_pose_for_frame(seq: Sequence, frame: Frame, max_dt: float = 0.02):
    """Nearest ground-truth pose within max_dt of the frame, else None."""
    if not seq.gt_trajectory:
        return None
    diffs = [(abs(t - frame.timestamp), i) for i, (t, _) in enumerate(seq.gt_trajectory)]
    d, i = min(diffs)
    return seq.gt_trajectory[i][1] if d <= max_dt else None
