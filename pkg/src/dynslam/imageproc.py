"""Edge detection, distance-transform maps and subpixel map sampling.

Edges drive the warp loss during tracking: each frame gets a Canny edge map
computed once from the grayscale color image, and keyframes additionally get
a Euclidean distance-transform (DT) map so that warped edge pixels can be
scored against the nearest edge at continuous coordinates.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyEdgeMapError

# BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """H×W×3 (uint8 or float) to float64 grayscale in the input's value range."""
    img = np.asarray(rgb, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ _LUMA


@dataclass(frozen=True)
class EdgeSet:
    """Integer (u, v) edge pixels of one frame, row-major order, no duplicates."""

    pixels: np.ndarray
    frame_id: int = -1

    def __len__(self):
        return len(self.pixels)


@dataclass(frozen=True)
class DTMap:
    """Euclidean distance (pixels) to the nearest edge pixel; zero on edges."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def _gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def canny_edges(
    gray: np.ndarray,
    low: float = 0.1,
    high: float = 0.2,
    sigma: float = 1.4,
    frame_id: int = -1,
) -> tuple[EdgeSet, np.ndarray]:
    """Canny detector: blur, Sobel, non-max suppression, hysteresis.

    ``low`` and ``high`` are fractions of the maximum gradient magnitude.
    Returns the edge set and the boolean edge map.
    """
    if not 0 <= low < high:
        raise ValueError("thresholds must satisfy 0 <= low < high")
    img = np.asarray(gray, dtype=np.float64)
    k = _gaussian_kernel1d(sigma, radius=2)  # 5x5 separable window
    smooth = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    smooth = ndimage.correlate1d(smooth, k, axis=1, mode="reflect")

    gx = ndimage.correlate(smooth, _SOBEL_X, mode="reflect")
    gy = ndimage.correlate(smooth, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    max_mag = mag.max()
    # rounding noise on constant images leaves magnitudes ~1e-16; treat as flat
    if max_mag < 1e-12:
        empty = np.zeros(img.shape, dtype=bool)
        return EdgeSet(np.empty((0, 2), dtype=np.int64), frame_id), empty

    ridge = _nonmax_suppress(mag, gx, gy)
    strong = ridge & (mag >= high * max_mag)
    weak = ridge & (mag >= low * max_mag) & (mag > 0)

    # hysteresis: keep weak components (8-connected) touching a strong pixel
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        edge_map = np.zeros(img.shape, dtype=bool)
    else:
        keep = np.zeros(n + 1, dtype=bool)
        keep[np.unique(labels[strong])] = True
        keep[0] = False
        edge_map = keep[labels]

    rows, cols = np.nonzero(edge_map)
    pixels = np.column_stack([cols, rows]).astype(np.int64)
    return EdgeSet(pixels, frame_id), edge_map


def _nonmax_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin gradient ridges to 1 px along the gradient direction.

    Symmetric step edges produce two equal-magnitude columns; a plain >= test
    keeps both and a strict > drops both.  The asymmetric rule (strictly
    above the trailing neighbour, at least the leading one) keeps exactly one.
    """
    h, w = mag.shape
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = mag

    def shifted(dy, dx):
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = np.floor_divide(angle + np.pi / 8, np.pi / 4).astype(np.int64) % 4
    # (dx, dy) of the positive-direction neighbour per sector: 0°, 45°, 90°, 135°
    offs = [(1, 0), (1, 1), (0, 1), (-1, 1)]
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dx, dy) in enumerate(offs):
        sel = sector == s
        keep |= sel & (mag > shifted(-dy, -dx)) & (mag >= shifted(dy, dx))
    return keep


def distance_transform(edge_map: np.ndarray) -> DTMap:
    """Exact Euclidean distance to the nearest edge pixel."""
    edges = np.asarray(edge_map, dtype=bool)
    if not edges.any():
        raise EmptyEdgeMapError("distance transform needs at least one edge pixel")
    return DTMap(ndimage.distance_transform_edt(~edges))


def bilinear_sample(values: np.ndarray, pts: np.ndarray):
    """Bilinear interpolation of an H×W map at (u, v) points.

    Returns (samples (N,), gradients (N,2), in_bounds (N,)).  The gradient is
    the analytic derivative of the bilinear surface; at integer coordinates
    it equals the forward difference of the enclosing cell (backward at the
    far borders, where the cell is clamped).  Out-of-bounds points get value
    0 and in_bounds False.
    """
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape
    p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    u, vv = p[:, 0], p[:, 1]
    inb = (u >= 0) & (u <= w - 1) & (vv >= 0) & (vv <= h - 1)

    x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(vv), 0, h - 2).astype(np.int64)
    a = np.clip(u - x0, 0.0, 1.0)
    b = np.clip(vv - y0, 0.0, 1.0)
    f00 = v[y0, x0]
    f10 = v[y0, x0 + 1]
    f01 = v[y0 + 1, x0]
    f11 = v[y0 + 1, x0 + 1]
    val = (1 - a) * (1 - b) * f00 + a * (1 - b) * f10 + (1 - a) * b * f01 + a * b * f11
    du = (1 - b) * (f10 - f00) + b * (f11 - f01)
    dv = (1 - a) * (f01 - f00) + a * (f11 - f10)
    val = np.where(inb, val, 0.0)
    grad = np.column_stack([du, dv])
    grad[~inb] = 0.0
    return val, grad, inb


def sample_dt_bilinear(dt: DTMap, pts: np.ndarray):
    """DT value and spatial gradient at continuous pixel coordinates."""
    return bilinear_sample(dt.values, pts)


def dilate_mask(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Binary dilation by `radius` pixels with an 8-connected structuring element."""
    if radius <= 0:
        return np.asarray(mask, dtype=bool)
    return ndimage.binary_dilation(
        np.asarray(mask, dtype=bool), structure=np.ones((3, 3), dtype=bool), iterations=radius
    )
