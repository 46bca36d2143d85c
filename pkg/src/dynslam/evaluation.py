"""Trajectory and reconstruction evaluation.

Trajectory error is the classic aligned ATE: associate estimated and
reference poses by timestamp, rigidly align the estimate onto the reference
with Horn's closed-form quaternion method (no scale), then report RMSE and
population STD of the per-pose translation error magnitudes.

Reconstruction quality compares surface samples: a mesh extracted from the
SDF at the zero level set (marching cubes), culled to the observed frustum,
then accuracy / completion / completion-ratio against a reference point
cloud via nearest-neighbour queries.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .dataio import associate
from .errors import DataError, InsufficientDataError
from .geometry import Intrinsics, PoseSE3

DEFAULT_ASSOC_DT = 0.02  # s; timestamp association tolerance


# ---------------------------------------------------------------------------
# trajectory alignment and ATE


@dataclass(frozen=True)
class AlignedATE:
    rmse: float
    std: float
    errors: np.ndarray = dc_field(repr=False)       # per-pair magnitudes (m)
    rotation: np.ndarray = dc_field(repr=False)     # est -> gt alignment
    translation: np.ndarray = dc_field(repr=False)
    n_pairs: int = 0


def horn_alignment(src: np.ndarray, dst: np.ndarray):
    """Closed-form rigid fit dst ~ R src + t (Horn's quaternion method).

    The rotation is the eigenvector of the 4x4 quaternion form of the
    cross-covariance with the largest eigenvalue; translation follows from
    the centroids.  No scale is estimated.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (N, 3)")
    if len(src) < 3:
        raise InsufficientDataError(
            f"rigid alignment needs >= 3 pairs, got {len(src)}")
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    m = (src - sc).T @ (dst - dc)  # cross-covariance, src major
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    w, v = np.linalg.eigh(n)
    q = v[:, -1]  # (w, x, y, z), eigenvector of the largest eigenvalue
    qw, qx, qy, qz = q
    r = np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
        [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
        [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
    ])
    t = dc - r @ sc
    return r, t


def _positions(traj) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([t for t, _pose in traj], dtype=np.float64)
    pos = np.array([pose.translation for _t, pose in traj], dtype=np.float64)
    return times, pos


def ate(est, gt, max_dt: float = DEFAULT_ASSOC_DT) -> AlignedATE:
    """Aligned absolute trajectory error between (timestamp, pose) lists."""
    et, ep = _positions(est)
    gt_t, gp = _positions(gt)
    pairs = associate(et, gt_t, max_dt)
    if len(pairs) < 3:
        raise InsufficientDataError(
            f"only {len(pairs)} associated pose pairs within {max_dt}s")
    ia = np.array([a for a, _b in pairs])
    ib = np.array([b for _a, b in pairs])
    r, t = horn_alignment(ep[ia], gp[ib])
    err = np.linalg.norm(ep[ia] @ r.T + t - gp[ib], axis=1)
    rmse = float(np.sqrt(np.mean(err**2)))
    std = float(np.std(err))  # population convention over magnitudes
    return AlignedATE(rmse=rmse, std=std, errors=err, rotation=r,
                      translation=t, n_pairs=len(pairs))


# ---------------------------------------------------------------------------
# mesh extraction


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray = dc_field(repr=False)   # (V, 3) metres
    faces: np.ndarray = dc_field(repr=False)      # (F, 3) vertex indices
    colors: np.ndarray | None = dc_field(default=None, repr=False)  # (V, 3) in [0,1]

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face indices out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("need one color per vertex")
            object.__setattr__(self, "colors", c)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0


def _triangle_areas(vertices, faces):
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def drop_degenerate_faces(mesh: Mesh, min_area: float = 1e-14) -> Mesh:
    if mesh.is_empty:
        return mesh
    keep = _triangle_areas(mesh.vertices, mesh.faces) > min_area
    return Mesh(mesh.vertices, mesh.faces[keep], mesh.colors)


def extract_mesh(sdf_fn, bounds_min, bounds_max, voxel_size: float,
                 color_fn=None, chunk: int = 65536) -> Mesh:
    """Zero level set of an SDF as a triangle mesh (marching cubes).

    ``sdf_fn`` maps (N, 3) world points to (N,) signed distances; the grid
    spans the bounds at ``voxel_size`` spacing.  An SDF with no sign change
    inside the bounds yields an empty mesh.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("bounds_max must exceed bounds_min on every axis")
    axes = [np.arange(lo[k], hi[k] + 0.5 * voxel_size, voxel_size) for k in range(3)]
    shape = tuple(len(ax) for ax in axes)
    if min(shape) < 2:
        raise ValueError("bounds too small for the requested voxel size")
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    vals = np.empty(len(pts))
    for a in range(0, len(pts), chunk):
        vals[a:a + chunk] = sdf_fn(pts[a:a + chunk])
    vol = vals.reshape(shape)
    if vol.min() > 0.0 or vol.max() < 0.0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts, faces, _normals, _vals = measure.marching_cubes(
        vol, level=0.0, spacing=(voxel_size,) * 3)
    verts = verts + lo
    colors = None
    if color_fn is not None:
        colors = np.clip(np.asarray(color_fn(verts), dtype=np.float64), 0.0, 1.0)
    return drop_degenerate_faces(Mesh(verts, faces.astype(np.int64), colors))


def mesh_from_field(field, voxel_size: float, bounds_min=None, bounds_max=None,
                    with_color: bool = True) -> Mesh:
    """Mesh of a neural field's zero level set over its configured bounds."""
    lo = field.cfg.bounds_min if bounds_min is None else bounds_min
    hi = field.cfg.bounds_max if bounds_max is None else bounds_max

    def sdf_fn(p):
        s, _h, _c, _cache = field.forward(p, need_color=False)
        return s

    def color_fn(p):
        _s, _h, c, _cache = field.forward(p, need_color=True)
        return c

    return extract_mesh(sdf_fn, lo, hi, voxel_size,
                        color_fn=color_fn if with_color else None)


# ---------------------------------------------------------------------------
# frustum / visibility culling


def cull_mesh(mesh: Mesh, poses, intr: Intrinsics, depths,
              margin: float = 0.05) -> Mesh:
    """Keep triangles with at least one vertex observed by some frame.

    A vertex counts as observed when it projects inside a frame with
    positive camera depth not exceeding that pixel's recorded depth plus
    ``margin`` (so surfaces slightly behind the measured one survive, while
    hallucinated geometry far behind walls or outside every frustum is
    removed).  Pixels without a depth measurement confirm nothing.
    """
    if mesh.is_empty:
        return mesh
    visible = np.zeros(len(mesh.vertices), dtype=bool)
    for pose, depth in zip(poses, depths):
        rest = ~visible
        if not rest.any():
            break
        world = mesh.vertices[rest]
        cam = (world - pose.translation) @ pose.rotation
        z = cam[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = intr.fx * cam[:, 0] / zs + intr.cx
        v = intr.fy * cam[:, 1] / zs + intr.cy
        ui = np.clip(np.rint(u).astype(np.int64), 0, intr.width - 1)
        vi = np.clip(np.rint(v).astype(np.int64), 0, intr.height - 1)
        inb = (front & (u >= -0.5) & (u <= intr.width - 0.5)
               & (v >= -0.5) & (v <= intr.height - 0.5))
        d = depth[vi, ui]
        seen = inb & (d > 0.0) & (z <= d + margin)
        visible[np.flatnonzero(rest)[seen]] = True
    keep_face = visible[mesh.faces].any(axis=1)
    faces = mesh.faces[keep_face]
    used = np.unique(faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[faces],
                mesh.colors[used] if mesh.colors is not None else None)


# ---------------------------------------------------------------------------
# surface sampling and reconstruction metrics


@dataclass(frozen=True)
class ReconMetrics:
    accuracy_cm: float
    completion_cm: float
    completion_ratio_pct: float
    n_samples: int


def sample_mesh_surface(mesh: Mesh, n: int, rng) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, (n, 3)."""
    if mesh.is_empty:
        raise DataError("cannot sample an empty mesh")
    areas = _triangle_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if total <= 0.0:
        raise DataError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    return (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def recon_metrics(mesh: Mesh, gt_points: np.ndarray, n_samples: int = 200_000,
                  thresh: float = 0.05, seed: int = 0) -> ReconMetrics:
    """Accuracy / completion / completion-ratio between mesh and reference.

    Accuracy: mean nearest-neighbour distance from mesh-surface samples to
    the reference samples.  Completion: the reverse direction.  Ratio: the
    percentage of reference samples within ``thresh`` of a mesh sample.
    """
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if mesh.is_empty or len(gt_points) == 0:
        raise DataError("reconstruction metrics need a nonempty mesh and cloud")
    rng = np.random.default_rng(seed)
    mesh_pts = sample_mesh_surface(mesh, n_samples, rng)
    if len(gt_points) >= n_samples:
        gt_pts = gt_points[rng.choice(len(gt_points), n_samples, replace=False)]
    else:
        gt_pts = gt_points[rng.choice(len(gt_points), n_samples, replace=True)]
    acc = cKDTree(gt_pts).query(mesh_pts)[0].mean()
    d_comp = cKDTree(mesh_pts).query(gt_pts)[0]
    return ReconMetrics(
        accuracy_cm=float(acc * 100.0),
        completion_cm=float(d_comp.mean() * 100.0),
        completion_ratio_pct=float(100.0 * np.mean(d_comp < thresh)),
        n_samples=n_samples,
    )


# ---------------------------------------------------------------------------
# PLY io


def write_ply(path, mesh: Mesh) -> None:
    """ASCII PLY with optional uchar vertex colors."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if mesh.colors is not None:
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        if mesh.colors is not None:
            rgb = np.round(np.clip(mesh.colors, 0.0, 1.0) * 255.0).astype(int)
            for v, c in zip(mesh.vertices, rgb):
                fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
        else:
            for v in mesh.vertices:
                fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path) -> Mesh:
    """Minimal ASCII PLY reader for files produced by :func:`write_ply`."""
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise DataError(f"not a PLY file: {path}")
        n_vert = n_face = 0
        has_color = False
        for line in fh:
            tok = line.split()
            if tok[:2] == ["element", "vertex"]:
                n_vert = int(tok[2])
            elif tok[:2] == ["element", "face"]:
                n_face = int(tok[2])
            elif tok[:2] == ["property", "uchar"] and tok[2] in ("red", "green", "blue"):
                has_color = True
            elif tok[0] == "end_header":
                break
        verts = np.zeros((n_vert, 3))
        colors = np.zeros((n_vert, 3)) if has_color else None
        for i in range(n_vert):
            tok = fh.readline().split()
            verts[i] = [float(x) for x in tok[:3]]
            if has_color:
                colors[i] = [int(x) / 255.0 for x in tok[3:6]]
        faces = np.zeros((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            tok = fh.readline().split()
            if tok[0] != "3":
                raise DataError("only triangle faces are supported")
            faces[i] = [int(x) for x in tok[1:4]]
    return Mesh(verts, faces, colors)


__all__ = [
    "DEFAULT_ASSOC_DT", "AlignedATE", "Mesh", "ReconMetrics",
    "horn_alignment", "ate", "extract_mesh", "mesh_from_field", "cull_mesh",
    "sample_mesh_surface", "recon_metrics", "drop_degenerate_faces",
    "write_ply", "read_ply",
]
