"""SE(3) poses, pinhole projection, pixel warping and two-view epipolar geometry.

Conventions used throughout the package:
  - pixel coordinates are (u, v) = (column, row), floats;
  - a pose is camera-to-world; the rigid transform between camera i and
    camera j is T_ji = inv(T_wj) @ T_wi, mapping i-camera points to j-camera;
  - the 6-vector tangent parameterization is xi = (v, w) with the
    translational part first; pose increments are applied on the left,
    T <- exp(xi) @ T.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, DegenerateLineError, InsufficientDataError

_EPS = 1e-12


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters. depth_scale converts raw integer depth to meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------

def so3_hat(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a series branch for small angles."""
    theta = float(np.linalg.norm(w))
    S = so3_hat(w)
    if theta < 1e-8:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * S + b * (S @ S)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp for rotation angle < pi.

    Angles within ~1e-6 of pi are handled by the clamped symmetric branch:
    the axis is recovered from the diagonal of (R + I)/2.
    """
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < 1e-8:
        # w ~ vee(R - R^T)/2 to first order
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if theta > np.pi - 1e-6:
        # near pi: axis from the dominant diagonal of (R + I)/2 = aa^T + O(pi - theta)
        A = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(max(A[k, k], _EPS))
        axis = axis / np.linalg.norm(axis)
        # fix the sign using the skew part where it is nonzero
        skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(skew, axis) < 0:
            axis = -axis
        return theta * axis
    w_hat = (R - R.T) * theta / (2.0 * np.sin(theta))
    return np.array([w_hat[2, 1], w_hat[0, 2], w_hat[1, 0]])


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    S = so3_hat(w)
    if theta < 1e-8:
        b = 0.5 - theta**2 / 24.0
        c = 1.0 / 6.0 - theta**2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * S + c * (S @ S)


def se3_exp_matrix(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[:3], xi[3:]
    T = np.eye(4)
    T[:3, :3] = so3_exp(w)
    T[:3, 3] = so3_left_jacobian(w) @ v
    return T


def se3_log_matrix(T: np.ndarray) -> np.ndarray:
    w = so3_log(T[:3, :3])
    V = so3_left_jacobian(w)
    v = np.linalg.solve(V, T[:3, 3])
    return np.concatenate([v, w])


class PoseSE3:
    """Rigid camera-to-world transform backed by a 4x4 homogeneous matrix."""

    __slots__ = ("_m",)

    def __init__(self, matrix: np.ndarray):
        m = np.array(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        R = m[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation block is not orthonormal with det 1")
        m[3, :] = (0.0, 0.0, 0.0, 1.0)
        m.flags.writeable = False
        self._m = m

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(4))

    @classmethod
    def exp(cls, xi: np.ndarray) -> "PoseSE3":
        return cls(se3_exp_matrix(xi))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "PoseSE3":
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = t
        return cls(m)

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @property
    def rotation(self) -> np.ndarray:
        return self._m[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self._m[:3, 3]

    def log(self) -> np.ndarray:
        return se3_log_matrix(self._m)

    def inverse(self) -> "PoseSE3":
        R = self._m[:3, :3]
        return PoseSE3.from_rt(R.T, -R.T @ self._m[:3, 3])

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self._m @ other.matrix)

    def left_update(self, delta_xi: np.ndarray) -> "PoseSE3":
        return PoseSE3(se3_exp_matrix(delta_xi) @ self._m)

    def orthonormalized(self) -> "PoseSE3":
        """Project the rotation block onto the nearest rotation matrix.

        Long chains of composes accumulate round-off; optimizers that update
        a pose hundreds of times re-project to keep it on the manifold.
        """
        u, _s, vt = np.linalg.svd(self._m[:3, :3])
        r = u @ vt
        if np.linalg.det(r) < 0.0:
            r = (u * np.array([1.0, 1.0, -1.0])) @ vt
        return PoseSE3.from_rt(r, self._m[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self._m[:3, :3].T + self._m[:3, 3]

    def __repr__(self):
        t = self.translation
        return f"PoseSE3(t=[{t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}])"


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    m = np.asarray(R, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            x, y, z = 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s
            w = (m[2, 1] - m[1, 2]) / s
        elif i == 1:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            x, y, z = (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s
            w = (m[0, 2] - m[2, 0]) / s
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            x, y, z = (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s
            w = (m[1, 0] - m[0, 1]) / s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# Projection and warping
# ---------------------------------------------------------------------------

def project(K: Intrinsics, points_cam: np.ndarray) -> np.ndarray:
    """Camera-frame points (N,3) or (3,) to pixels. Requires z > 0."""
    pts = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
    z = pts[:, 2]
    if np.any(z <= 0):
        raise ValueError("project requires positive depth")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = K.fx * pts[:, 0] / z + K.cx
    uv[:, 1] = K.fy * pts[:, 1] / z + K.cy
    return uv[0] if np.asarray(points_cam).ndim == 1 else uv


def backproject(K: Intrinsics, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Pixels (N,2) with positive z-depth (N,) to camera-frame points (N,3)."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(d <= 0):
        raise ValueError("backproject requires positive depth")
    pts = np.empty((px.shape[0], 3))
    pts[:, 0] = (px[:, 0] - K.cx) / K.fx * d
    pts[:, 1] = (px[:, 1] - K.cy) / K.fy * d
    pts[:, 2] = d
    return pts[0] if np.asarray(pixels).ndim == 1 else pts


def warp_pixels(T_ji, pixels: np.ndarray, depth: np.ndarray, K: Intrinsics):
    """Reproject pixels of frame i into frame j through their depth.

    Returns (warped (N,2), z_j (N,), valid (N,)).  Entries are invalid when
    the transformed point lands behind camera j or outside the image; their
    warped coordinates are still filled where finite (callers drop them).
    """
    T = T_ji.matrix if isinstance(T_ji, PoseSE3) else np.asarray(T_ji, dtype=np.float64)
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    X = np.empty((px.shape[0], 3))
    X[:, 0] = (px[:, 0] - K.cx) / K.fx * d
    X[:, 1] = (px[:, 1] - K.cy) / K.fy * d
    X[:, 2] = d
    Xj = X @ T[:3, :3].T + T[:3, 3]
    z = Xj[:, 2]
    front = z > _EPS
    warped = np.full_like(px, np.nan)
    zs = np.where(front, z, 1.0)
    warped[:, 0] = K.fx * Xj[:, 0] / zs + K.cx
    warped[:, 1] = K.fy * Xj[:, 1] / zs + K.cy
    in_bounds = (
        (warped[:, 0] >= 0.0)
        & (warped[:, 0] <= K.width - 1.0)
        & (warped[:, 1] >= 0.0)
        & (warped[:, 1] <= K.height - 1.0)
    )
    valid = front & in_bounds & (d > 0)
    if np.asarray(pixels).ndim == 1:
        return warped[0], float(z[0]), bool(valid[0])
    return warped, z, valid


# ---------------------------------------------------------------------------
# Fundamental matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FundamentalMatrix:
    """Rank-2 fundamental matrix with dst^T F src = 0, unit Frobenius norm."""

    f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=np.float64))


def _normalize_f(F: np.ndarray) -> np.ndarray:
    F = F / np.linalg.norm(F)
    # canonical sign: largest-magnitude entry positive
    idx = np.unravel_index(np.argmax(np.abs(F)), F.shape)
    if F[idx] < 0:
        F = -F
    return F


def _hartley_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    s = np.sqrt(2.0) / max(rms, _EPS)
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def _eight_point(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized 8-point solve on >= 8 matches; None when degenerate."""
    Ts, Td = _hartley_transform(src), _hartley_transform(dst)
    sh = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    dh = np.column_stack([dst, np.ones(len(dst))]) @ Td.T
    A = np.column_stack(
        [
            dh[:, 0] * sh[:, 0], dh[:, 0] * sh[:, 1], dh[:, 0],
            dh[:, 1] * sh[:, 0], dh[:, 1] * sh[:, 1], dh[:, 1],
            sh[:, 0], sh[:, 1], np.ones(len(src)),
        ]
    )
    _, sv, Vt = np.linalg.svd(A)
    if sv.shape[0] >= 9 and sv[7] < 1e-10 * max(sv[0], _EPS):
        return None  # nullspace dimension > 1: configuration does not fix F
    Fn = Vt[-1].reshape(3, 3)
    U, S, Vt2 = np.linalg.svd(Fn)
    S[2] = 0.0
    Fn = U @ np.diag(S) @ Vt2
    return _normalize_f(Td.T @ Fn @ Ts)


def _points_collinear(pts: np.ndarray) -> bool:
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    return sv[1] < 1e-9 * max(sv[0], _EPS)


def epipolar_lines(F: FundamentalMatrix, src: np.ndarray) -> np.ndarray:
    """Epipolar lines (A, B, C) in the dst image for src pixels (N,2)."""
    sh = np.column_stack([np.atleast_2d(src), np.ones(len(np.atleast_2d(src)))])
    return sh @ F.f.T


def epipolar_distances(F: FundamentalMatrix, src: np.ndarray, dst: np.ndarray):
    """Point-to-epipolar-line distances |dst_h . l| / sqrt(A^2 + B^2).

    Returns (dist (N,), line_valid (N,)); invalid where (A, B) vanishes.
    """
    src2, dst2 = np.atleast_2d(src), np.atleast_2d(dst)
    lines = epipolar_lines(F, src2)
    dh = np.column_stack([dst2, np.ones(len(dst2))])
    num = np.abs(np.sum(dh * lines, axis=1))
    den = np.hypot(lines[:, 0], lines[:, 1])
    valid = den > _EPS
    dist = np.where(valid, num / np.where(valid, den, 1.0), np.inf)
    return dist, valid


def epipolar_distance(F: FundamentalMatrix, p_src, p_dst) -> float:
    dist, valid = epipolar_distances(F, np.atleast_2d(p_src), np.atleast_2d(p_dst))
    if not valid[0]:
        raise DegenerateLineError("epipolar line has A = B = 0")
    return float(dist[0])


def estimate_fundamental(
    src: np.ndarray,
    dst: np.ndarray,
    iters: int = 500,
    inlier_thresh_px: float = 1.0,
    seed: int = 0,
):
    """RANSAC + normalized 8-point fundamental matrix estimation.

    Best hypothesis by (inlier count, lowest mean inlier residual, lowest
    hypothesis index); the winner is refit on its full consensus set.
    Deterministic given (src, dst, seed).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 8 or len(dst) != n:
        raise InsufficientDataError(f"need >= 8 matches, got {n}")
    if _points_collinear(src) or _points_collinear(dst):
        raise DegenerateGeometryError("matches are collinear")

    rng = np.random.default_rng(seed)
    best = None  # (count, mean_resid, hyp_index, inlier_mask)
    for it in range(iters):
        idx = rng.choice(n, size=8, replace=False)
        F = _eight_point(src[idx], dst[idx])
        if F is None:
            continue
        dist, valid = epipolar_distances(FundamentalMatrix(F), src, dst)
        inl = valid & (dist < inlier_thresh_px)
        count = int(inl.sum())
        if count < 8:
            continue
        mean_res = float(dist[inl].mean())
        key = (-count, mean_res, it)
        if best is None or key < best[0]:
            best = (key, inl)
    if best is None:
        raise DegenerateGeometryError("no RANSAC hypothesis reached 8 inliers")
    inliers = best[1]
    F = _eight_point(src[inliers], dst[inliers])
    if F is None:
        raise DegenerateGeometryError("final refit is degenerate")
    return FundamentalMatrix(F), inliers


def fundamental_from_rt(K: Intrinsics, R: np.ndarray, t: np.ndarray) -> FundamentalMatrix:
    """F = K^-T [t]x R K^-1 for X_dst = R X_src + t; dst^T F src = 0."""
    Kinv = np.linalg.inv(K.matrix)
    F = Kinv.T @ so3_hat(t) @ R @ Kinv
    return FundamentalMatrix(_normalize_f(F))
