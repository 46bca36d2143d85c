"""The implicit map: hash-grid + coordinate encodings and two shallow decoders.

A query point x is encoded twice — a multi-resolution trilinear hash-grid
lookup and a fixed one-blob coordinate encoding — and decoded by two small
ReLU MLPs: geometry (SDF value s plus a feature h) and color (RGB through a
logistic squash).  Everything runs in float64 numpy, and `field_backward`
provides exact reverse-mode gradients for all parameters, touched hash rows,
and optionally the input points (needed when poses are optimized through
rendered samples).

Gradient accumulation into hash tables uses `np.bincount` per feature
column: a fixed left-to-right summation order, so results are reproducible
bit-for-bit regardless of batching upstream.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .seeding import DOMAIN_INIT_FIELD, rng_for

_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))
_OB_BINS = 16  # one-blob bins per axis
_CKPT_MAGIC = b"DSLM"
_CKPT_VERSION = 1

# corner k of a cell has offset bit a of axis a
_CORNER_OFF = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class HashGridConfig:
    n_levels: int = 16
    r_min: int = 16
    r_max: int = 2048
    table_size: int = 2**14
    feat_dim: int = 2
    bounds_min: tuple = (-2.1, -1.6, -2.6)
    bounds_max: tuple = (2.1, 1.6, 2.6)

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("need at least 2 levels")
        if not 0 < self.r_min < self.r_max:
            raise ValueError("need 0 < r_min < r_max")
        if self.table_size < 8 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if any(a >= b for a, b in zip(self.bounds_min, self.bounds_max)):
            raise ValueError("bounds_min must be strictly below bounds_max")

    @property
    def growth(self) -> float:
        return float(np.exp((np.log(self.r_max) - np.log(self.r_min)) / (self.n_levels - 1)))

    @property
    def resolutions(self) -> tuple:
        b = self.growth
        # the epsilon keeps exact powers (e.g. r_min*b^(L-1) = r_max) from
        # flooring one short when exp/log round below the true integer
        return tuple(
            int(np.floor(self.r_min * b**l + 1e-9)) for l in range(self.n_levels)
        )

    def level_rows(self, level: int) -> int:
        """Rows in the level's table: dense when every cell corner fits."""
        r = self.resolutions[level]
        dense = (r + 1) ** 3
        return dense if dense <= self.table_size else self.table_size

    def is_dense(self, level: int) -> bool:
        return (self.resolutions[level] + 1) ** 3 <= self.table_size


@dataclass
class FieldParams:
    """All optimizable arrays. Mutated in place by the optimizer."""

    tables: list  # per level (rows, feat_dim)
    geo_w1: np.ndarray
    geo_b1: np.ndarray
    geo_w2: np.ndarray
    geo_b2: np.ndarray
    col_w1: np.ndarray
    col_b1: np.ndarray
    col_w2: np.ndarray
    col_b2: np.ndarray

    def items(self):
        for l, t in enumerate(self.tables):
            yield f"table_{l}", t
        for name in ("geo_w1", "geo_b1", "geo_w2", "geo_b2",
                     "col_w1", "col_b1", "col_w2", "col_b2"):
            yield name, getattr(self, name)

    @property
    def h_dim(self) -> int:
        return self.geo_w2.shape[1] - 1

    def copy(self) -> "FieldParams":
        return FieldParams(
            tables=[t.copy() for t in self.tables],
            **{n: getattr(self, n).copy()
               for n in ("geo_w1", "geo_b1", "geo_w2", "geo_b2",
                         "col_w1", "col_b1", "col_w2", "col_b2")},
        )


@dataclass
class GradientBundle:
    """Accumulators shaped exactly like FieldParams, plus optional d/dx."""

    tables: list
    geo_w1: np.ndarray
    geo_b1: np.ndarray
    geo_w2: np.ndarray
    geo_b2: np.ndarray
    col_w1: np.ndarray
    col_b1: np.ndarray
    col_w2: np.ndarray
    col_b2: np.ndarray
    x: np.ndarray | None = None

    def items(self):
        for l, t in enumerate(self.tables):
            yield f"table_{l}", t
        for name in ("geo_w1", "geo_b1", "geo_w2", "geo_b2",
                     "col_w1", "col_b1", "col_w2", "col_b2"):
            yield name, getattr(self, name)

    def add_(self, other: "GradientBundle") -> "GradientBundle":
        for (_, a), (_, b) in zip(self.items(), other.items()):
            a += b
        return self

    def scale_(self, k: float) -> "GradientBundle":
        for _, a in self.items():
            a *= k
        if self.x is not None:
            self.x *= k
        return self


def zero_bundle(params: FieldParams) -> GradientBundle:
    return GradientBundle(
        tables=[np.zeros_like(t) for t in params.tables],
        **{n: np.zeros_like(getattr(params, n))
           for n in ("geo_w1", "geo_b1", "geo_w2", "geo_b2",
                     "col_w1", "col_b1", "col_w2", "col_b2")},
    )


def init_field_params(
    cfg: HashGridConfig,
    hidden: int = 32,
    h_dim: int = 15,
    tr: float = 0.1,
    seed: int = 0,
) -> FieldParams:
    """Tables ~ U(-1e-4, 1e-4); fan-in-scaled uniform decoder weights.

    The SDF output bias starts at +tr so untrained space reads "outside",
    which keeps the free-space objective quiet at initialization.
    """
    rng = rng_for(seed, DOMAIN_INIT_FIELD)
    tables = [
        rng.uniform(-1e-4, 1e-4, (cfg.level_rows(l), cfg.feat_dim))
        for l in range(cfg.n_levels)
    ]
    gamma_dim = 3 * _OB_BINS
    geo_in = gamma_dim + cfg.n_levels * cfg.feat_dim
    col_in = gamma_dim + h_dim

    def layer(n_in, n_out):
        lim = 1.0 / np.sqrt(n_in)
        return rng.uniform(-lim, lim, (n_in, n_out)), np.zeros(n_out)

    geo_w1, geo_b1 = layer(geo_in, hidden)
    geo_w2, geo_b2 = layer(hidden, 1 + h_dim)
    geo_b2[0] = tr
    col_w1, col_b1 = layer(col_in, hidden)
    col_w2, col_b2 = layer(hidden, 3)
    return FieldParams(tables, geo_w1, geo_b1, geo_w2, geo_b2,
                       col_w1, col_b1, col_w2, col_b2)


# ---------------------------------------------------------------------------
# Encodings
# ---------------------------------------------------------------------------

def _normalize_points(cfg: HashGridConfig, x: np.ndarray):
    lo = np.asarray(cfg.bounds_min)
    hi = np.asarray(cfg.bounds_max)
    u_raw = (np.atleast_2d(x) - lo) / (hi - lo)
    clamped = (u_raw < 0.0) | (u_raw > 1.0)
    return np.clip(u_raw, 0.0, 1.0), clamped


def _corner_indices(cfg: HashGridConfig, level: int, i0: np.ndarray) -> np.ndarray:
    """Table rows of the 8 corners of each cell (N,8), _CORNER_OFF order.

    Both the dense row formula and the XOR hash are separable per axis, so
    the corner rows combine two candidate values per axis by broadcasting
    rather than materializing (N,8,3) corner coordinates.
    """
    r = cfg.resolutions[level]
    if cfg.is_dense(level):
        side = r + 1
        cx = np.stack([i0[:, 0], i0[:, 0] + 1], axis=1)
        cy = np.stack([i0[:, 1], i0[:, 1] + 1], axis=1) * side
        cz = np.stack([i0[:, 2], i0[:, 2] + 1], axis=1) * (side * side)
        rows = cz[:, :, None, None] + cy[:, None, :, None] + cx[:, None, None, :]
        return rows.reshape(-1, 8)
    u = i0.astype(np.uint64)
    hx = np.stack([u[:, 0], u[:, 0] + 1], axis=1) * _PRIMES[0]
    hy = np.stack([u[:, 1], u[:, 1] + 1], axis=1) * _PRIMES[1]
    hz = np.stack([u[:, 2], u[:, 2] + 1], axis=1) * _PRIMES[2]
    h = hz[:, :, None, None] ^ hy[:, None, :, None] ^ hx[:, None, None, :]
    return (h.reshape(-1, 8) & np.uint64(cfg.table_size - 1)).astype(np.int64)


def _axis_weights(f: np.ndarray):
    """Per-axis corner weight pairs [1-f, f], three (N,2) arrays."""
    return (
        np.stack([1.0 - f[:, 0], f[:, 0]], axis=1),
        np.stack([1.0 - f[:, 1], f[:, 1]], axis=1),
        np.stack([1.0 - f[:, 2], f[:, 2]], axis=1),
    )


def _corner_weights(f: np.ndarray) -> np.ndarray:
    """(N,8) trilinear weights in _CORNER_OFF order (axis 0 bit fastest)."""
    wx, wy, wz = _axis_weights(f)
    return np.einsum("ni,nj,nk->nijk", wz, wy, wx).reshape(f.shape[0], 8)


def hash_encode(x: np.ndarray, cfg: HashGridConfig, tables: list):
    """Concatenated trilinear features of all levels: (N, L*feat_dim).

    Also returns the interpolation cache reused by the backward pass:
    (u, clamped, [(i0, f, idx) per level]).
    """
    u, clamped = _normalize_points(cfg, x)
    n = u.shape[0]
    feats = np.empty((n, cfg.n_levels * cfg.feat_dim))
    cache = []
    for l, r in enumerate(cfg.resolutions):
        pos = u * r
        i0 = np.minimum(np.floor(pos), r - 1).astype(np.int64)
        f = pos - i0
        idx = _corner_indices(cfg, l, i0)
        w8 = _corner_weights(f)
        feats[:, l * cfg.feat_dim : (l + 1) * cfg.feat_dim] = np.einsum(
            "nk,nkf->nf", w8, tables[l][idx]
        )
        cache.append((i0, f, idx))
    return feats, (u, clamped, cache)


def coord_encode(u: np.ndarray):
    """One-blob encoding of normalized coordinates: 16 Gaussian bins per axis.

    sigma is one bin width; activations are the unnormalized kernel values,
    so each axis sums to ~sqrt(2*pi) for interior points.
    """
    centers = (np.arange(_OB_BINS) + 0.5) / _OB_BINS
    sigma = 1.0 / _OB_BINS
    d = (u[..., None] - centers) / sigma  # (N, 3, B)
    g = np.exp(-0.5 * d**2)
    n = u.shape[0]
    return g.reshape(n, 3 * _OB_BINS), (u, g)


def _coord_encode_backward(enc_cache, d_gamma: np.ndarray) -> np.ndarray:
    u, g = enc_cache
    centers = (np.arange(_OB_BINS) + 0.5) / _OB_BINS
    sigma = 1.0 / _OB_BINS
    dg = d_gamma.reshape(u.shape[0], 3, _OB_BINS)
    # d gamma_b / d u = gamma_b * (c_b - u) / sigma^2
    return np.sum(dg * g * (centers - u[..., None]), axis=2) / sigma**2


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    x_shape: tuple
    u: np.ndarray = field(repr=False)
    clamped: np.ndarray = field(repr=False)
    enc: list = field(repr=False)  # per level (i0, f, idx)
    ob: tuple = field(repr=False)  # one-blob cache
    gamma: np.ndarray = field(repr=False)
    geo_in: np.ndarray = field(repr=False)
    geo_z1: np.ndarray = field(repr=False)
    col_in: np.ndarray | None = field(repr=False)
    col_z1: np.ndarray | None = field(repr=False)
    c: np.ndarray | None = field(repr=False)


def field_forward(x: np.ndarray, params: FieldParams, cfg: HashGridConfig,
                  need_color: bool = True):
    """Evaluate (s, h, c) at points x (N,3); returns arrays plus the cache."""
    feats, (u, clamped, enc_cache) = hash_encode(x, cfg, params.tables)
    gamma, ob_cache = coord_encode(u)

    geo_in = np.concatenate([gamma, feats], axis=1)
    geo_z1 = geo_in @ params.geo_w1 + params.geo_b1
    geo_a1 = np.maximum(geo_z1, 0.0)
    geo_out = geo_a1 @ params.geo_w2 + params.geo_b2
    s, h = geo_out[:, 0], geo_out[:, 1:]

    col_in = col_z1 = c = None
    if need_color:
        col_in = np.concatenate([gamma, h], axis=1)
        col_z1 = col_in @ params.col_w1 + params.col_b1
        col_a1 = np.maximum(col_z1, 0.0)
        col_out = col_a1 @ params.col_w2 + params.col_b2
        c = 1.0 / (1.0 + np.exp(-col_out))

    cache = ForwardCache(
        x_shape=np.asarray(x).shape, u=u, clamped=clamped, enc=enc_cache,
        ob=ob_cache, gamma=gamma, geo_in=geo_in, geo_z1=geo_z1,
        col_in=col_in, col_z1=col_z1, c=c,
    )
    return s, h, c, cache


def _scatter_table(rows: int, idx8: np.ndarray, contrib: np.ndarray, feat_dim: int):
    """Sum (N,8,feat_dim) contributions into table rows, fixed order."""
    flat = idx8.ravel()
    out = np.empty((rows, feat_dim))
    for fd in range(feat_dim):
        out[:, fd] = np.bincount(flat, weights=contrib[..., fd].ravel(), minlength=rows)
    return out


def field_backward(
    cache: ForwardCache,
    params: FieldParams,
    cfg: HashGridConfig,
    up_s: np.ndarray | None = None,
    up_h: np.ndarray | None = None,
    up_c: np.ndarray | None = None,
    need_x_grad: bool = False,
    need_param_grads: bool = True,
) -> GradientBundle:
    """Reverse-mode gradients for a forward evaluation.

    `up_*` are d(loss)/d(s|h|c); omitted outputs contribute nothing.  Hash
    rows never touched by the batch keep exactly zero gradient.  Pose-only
    callers pass need_param_grads=False to skip the table/weight scatter.
    """
    n = cache.u.shape[0]
    h_dim = params.h_dim
    gamma_dim = cache.gamma.shape[1]
    g = zero_bundle(params)

    d_gamma = np.zeros((n, gamma_dim))
    d_h = np.zeros((n, h_dim)) if up_h is None else np.array(up_h, dtype=np.float64)

    if up_c is not None:
        if cache.c is None:
            raise ValueError("color upstream given but forward ran with need_color=False")
        d_colout = np.asarray(up_c) * cache.c * (1.0 - cache.c)  # logistic
        d_col_z1 = (d_colout @ params.col_w2.T) * (cache.col_z1 > 0.0)
        if need_param_grads:
            col_a1 = np.maximum(cache.col_z1, 0.0)
            g.col_w2 += col_a1.T @ d_colout
            g.col_b2 += d_colout.sum(axis=0)
            g.col_w1 += cache.col_in.T @ d_col_z1
            g.col_b1 += d_col_z1.sum(axis=0)
        d_col_in = d_col_z1 @ params.col_w1.T
        d_gamma += d_col_in[:, :gamma_dim]
        d_h += d_col_in[:, gamma_dim:]

    d_geoout = np.zeros((n, 1 + h_dim))
    if up_s is not None:
        d_geoout[:, 0] = up_s
    d_geoout[:, 1:] = d_h
    d_geo_z1 = (d_geoout @ params.geo_w2.T) * (cache.geo_z1 > 0.0)
    if need_param_grads:
        geo_a1 = np.maximum(cache.geo_z1, 0.0)
        g.geo_w2 += geo_a1.T @ d_geoout
        g.geo_b2 += d_geoout.sum(axis=0)
        g.geo_w1 += cache.geo_in.T @ d_geo_z1
        g.geo_b1 += d_geo_z1.sum(axis=0)
    d_geo_in = d_geo_z1 @ params.geo_w1.T
    d_gamma += d_geo_in[:, :gamma_dim]
    d_feat = d_geo_in[:, gamma_dim:]

    d_u = _coord_encode_backward(cache.ob, d_gamma) if need_x_grad else None

    for l, r in enumerate(cfg.resolutions):
        if not (need_param_grads or need_x_grad):
            break
        i0, f, idx = cache.enc[l]
        wx, wy, wz = _axis_weights(f)
        dfl = d_feat[:, l * cfg.feat_dim : (l + 1) * cfg.feat_dim]
        if need_param_grads:
            w8 = np.einsum("ni,nj,nk->nijk", wz, wy, wx).reshape(-1, 8)
            g.tables[l] += _scatter_table(
                params.tables[l].shape[0], idx, w8[..., None] * dfl[:, None, :], cfg.feat_dim
            )
        if need_x_grad:
            # d(feature)/d(u_axis) = R * sum over the 4 corner pairs that
            # differ only in that axis: weight(other axes) * (dot_hi - dot_lo)
            dot = np.einsum("nkf,nf->nk", params.tables[l][idx], dfl)
            d4 = dot.reshape(-1, 2, 2, 2)  # [n, bit2, bit1, bit0]
            d_u[:, 0] += r * np.einsum("nij,ni,nj->n", d4[..., 1] - d4[..., 0], wz, wy)
            d_u[:, 1] += r * np.einsum("nik,ni,nk->n", d4[:, :, 1] - d4[:, :, 0], wz, wx)
            d_u[:, 2] += r * np.einsum("njk,nj,nk->n", d4[:, 1] - d4[:, 0], wy, wx)

    if need_x_grad:
        extent = np.asarray(cfg.bounds_max) - np.asarray(cfg.bounds_min)
        d_x = d_u / extent
        d_x[cache.clamped] = 0.0  # clamped coordinates are locally constant
        g.x = d_x
    return g


class NeuralField:
    """Config + parameters bundled as the map object the pipeline optimizes."""

    def __init__(self, cfg: HashGridConfig, params: FieldParams):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: HashGridConfig, hidden: int = 32, h_dim: int = 15,
               tr: float = 0.1, seed: int = 0) -> "NeuralField":
        return cls(cfg, init_field_params(cfg, hidden, h_dim, tr, seed))

    def forward(self, x, need_color: bool = True):
        return field_forward(x, self.params, self.cfg, need_color)

    def backward(self, cache, up_s=None, up_h=None, up_c=None, need_x_grad=False):
        return field_backward(cache, self.params, self.cfg, up_s, up_h, up_c, need_x_grad)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        s, _, _, _ = field_forward(x, self.params, self.cfg, need_color=False)
        return s


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: dict, params: FieldParams, extra: dict | None = None):
    """Versioned binary blob: magic, JSON header, raw little-endian arrays."""
    arrays = dict(params.items())
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    manifest, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append(
            {"name": name, "dtype": str(a.dtype), "shape": list(a.shape), "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": config, "arrays": manifest}, sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (config dict, {name: array}, {extra name: array})."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise FormatError(f"not a checkpoint file: {path}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}: {path}")
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    arrays, extra = {}, {}
    for ent in header["arrays"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        a = np.frombuffer(
            payload, dtype=dt, count=count, offset=ent["offset"]
        ).reshape(ent["shape"]).astype(ent["dtype"])
        if ent["name"].startswith("extra/"):
            extra[ent["name"][6:]] = a
        else:
            arrays[ent["name"]] = a
    return header["config"], arrays, extra


def params_from_arrays(cfg: HashGridConfig, arrays: dict) -> FieldParams:
    tables = [arrays[f"table_{l}"] for l in range(cfg.n_levels)]
    return FieldParams(
        tables=tables,
        **{n: arrays[n] for n in ("geo_w1", "geo_b1", "geo_w2", "geo_b2",
                                  "col_w1", "col_b1", "col_w2", "col_b2")},
    )
