"""Geometry bridging 2D aerial feature grids and 2.5D point features.

An aerial feature grid covers a known geographic window, so a point's
horizontal coordinates map to fractional pixel coordinates by a parallel
(orthographic) projection.  On top of that projection this module builds
bilinear sampling, 4x upsampling, and the three fusion strategies that
reduce a (grid, point set) pair to one global embedding vector:

* pixel-to-point: sample upsampled grid features at each projected point,
  concatenate with MLP-transformed point features, max-pool over points;
* point-to-pixel: splat point features onto the pixel lattice by k-NN
  inverse-distance weighting, concatenate with grid features, average-pool
  over pixels;
* global: pool each modality to one vector first, then add or concatenate
  and pass through a fully-connected stage.

All feature tensors are row-major with channels last.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODE_PIXEL_TO_POINT = "pixel-to-point"
MODE_POINT_TO_PIXEL = "point-to-pixel"
MODE_GLOBAL_CONCAT = "global-concat"
MODE_GLOBAL_ADD = "global-add"
_MODES = (MODE_PIXEL_TO_POINT, MODE_POINT_TO_PIXEL, MODE_GLOBAL_CONCAT, MODE_GLOBAL_ADD)

# k-NN inverse-distance weighting used to splat point features onto pixels.
IDW_NEIGHBORS = 3
IDW_POWER = 2
IDW_EPS = 1e-8

PARAMS_MAGIC = b"FPRM"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class GridMeta:
    """Pixel size (W, H), geographic size in meters (W_g, H_g), and center."""

    W: int
    H: int
    W_g: float
    H_g: float
    C_x: float = 0.0
    C_y: float = 0.0

    def __post_init__(self):
        if self.W < 2 or self.H < 2:
            raise ValueError("grid must be at least 2x2 pixels")
        if self.W_g <= 0 or self.H_g <= 0:
            raise ValueError("geographic size must be positive")


@dataclass
class FeatureGrid:
    meta: GridMeta
    data: np.ndarray  # H x W x C, channels last

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("grid data must be H x W x C")
        if self.data.shape[:2] != (self.meta.H, self.meta.W):
            raise ValueError("grid data shape disagrees with meta")

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class PointFeatureSet:
    """Per-point feature rows plus the 2D coordinates they belong to."""

    data: np.ndarray  # N x C
    coords: np.ndarray  # N x 2

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.data.ndim != 2 or self.coords.shape != (len(self.data), 2):
            raise ValueError("point features must be N x C with N x 2 coords")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LinearStage:
    """Linear layer followed by per-channel affine normalization and ReLU.

    The normalization runs in inference form (fixed scale/shift); nothing
    here estimates batch statistics.
    """

    weight: np.ndarray  # in x out
    bias: np.ndarray  # out
    scale: np.ndarray  # out
    shift: np.ndarray  # out

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("stage weight must be 2-D")
        object.__setattr__(self, "weight", w)
        for name in ("bias", "scale", "shift"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.shape != (w.shape[1],):
                raise ValueError(f"stage {name} must have {w.shape[1]} entries")
            object.__setattr__(self, name, v)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight + self.bias
        return np.maximum(y * self.scale + self.shift, 0.0)


@dataclass(frozen=True)
class Dense:
    """Plain linear stage (weight, bias) without activation."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValueError("dense weight/bias shapes disagree")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias


@dataclass(frozen=True)
class FusionParams:
    """Weights for one fusion pipeline: three MLP stages plus a final stage."""

    mlp: tuple[LinearStage, LinearStage, LinearStage]
    final: Dense
    mode: str = MODE_PIXEL_TO_POINT
    global_channels: int = 0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if len(self.mlp) != 3:
            raise ValueError("expected exactly three MLP stages")
        for a, b in zip(self.mlp, self.mlp[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("consecutive MLP stage dimensions do not compose")

    def run_mlp(self, x: np.ndarray) -> np.ndarray:
        for stage in self.mlp:
            x = stage(x)
        return x


def identity_stage(dim: int) -> LinearStage:
    """Stage that acts as ReLU-only: identity weight, zero bias, unit norm."""
    return LinearStage(np.eye(dim), np.zeros(dim), np.ones(dim), np.zeros(dim))


def make_fusion_params(
    point_channels: int,
    tile_channels: int,
    embed_dim: int,
    mode: str = MODE_PIXEL_TO_POINT,
    widths: tuple[int, int, int] = (256, 256, 128),
    seed: int = 0,
) -> FusionParams:
    """Randomly initialized parameters with the documented default widths."""
    rng = np.random.default_rng(seed)
    dims = (point_channels, *widths)
    stages = []
    for din, dout in zip(dims, dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(din), size=(din, dout))
        stages.append(LinearStage(w, np.zeros(dout), np.ones(dout), np.zeros(dout)))
    fin = widths[-1] + tile_channels
    final = Dense(rng.normal(0.0, 1.0 / np.sqrt(fin), size=(fin, embed_dim)), np.zeros(embed_dim))
    return FusionParams(tuple(stages), final, mode=mode, global_channels=embed_dim)


def project_point_to_pixel(coords, meta: GridMeta) -> np.ndarray:
    """Parallel projection from map coordinates to fractional pixel coordinates.

    x = (x_map + 0.5 * W_g - C_x) * (W - 1) / (W_g - 1), and analogously
    for y.  Results may fall outside [0, W-1] x [0, H-1]; sampling clamps.
    """
    pts = np.asarray(coords, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x = (pts[:, 0] + 0.5 * meta.W_g - meta.C_x) * (meta.W - 1) / (meta.W_g - 1)
    y = (pts[:, 1] + 0.5 * meta.H_g - meta.C_y) * (meta.H - 1) / (meta.H_g - 1)
    out = np.column_stack([x, y])
    return out[0] if squeeze else out


def grid_sample_bilinear(grid: FeatureGrid, coords) -> PointFeatureSet:
    """Bilinearly interpolate grid features at fractional pixel coordinates.

    Out-of-range coordinates are clamped to the border cell, so sampling is
    defined everywhere.  Integer coordinates reproduce stored values
    exactly.
    """
    pts = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    h, w = grid.meta.H, grid.meta.W
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    d = grid.data
    val = (
        (1.0 - fx) * (1.0 - fy) * d[y0, x0]
        + fx * (1.0 - fy) * d[y0, x0 + 1]
        + (1.0 - fx) * fy * d[y0 + 1, x0]
        + fx * fy * d[y0 + 1, x0 + 1]
    )
    return PointFeatureSet(val, pts)


def upsample_bilinear_4x(grid: FeatureGrid) -> FeatureGrid:
    """Quadruple the pixel resolution with corner-aligned bilinear resampling.

    Output pixel j maps to input coordinate j * (W - 1) / (4W - 1), the same
    corner-aligned convention the parallel projection uses, so projecting
    into the upsampled grid stays consistent.
    """
    h, w = grid.meta.H, grid.meta.W
    nh, nw = 4 * h, 4 * w
    xs = np.arange(nw, dtype=np.float64) * (w - 1) / (nw - 1)
    ys = np.arange(nh, dtype=np.float64) * (h - 1) / (nh - 1)
    gx, gy = np.meshgrid(xs, ys)
    flat = grid_sample_bilinear(grid, np.column_stack([gx.ravel(), gy.ravel()]))
    meta = GridMeta(nw, nh, grid.meta.W_g, grid.meta.H_g, grid.meta.C_x, grid.meta.C_y)
    return FeatureGrid(meta, flat.data.reshape(nh, nw, grid.channels))


def pixel_to_point_fuse(
    tile: FeatureGrid, pts: PointFeatureSet, params: FusionParams
) -> np.ndarray:
    """Fuse by pulling grid features onto the points, then max-pooling.

    The tile is upsampled 4x, each point is projected into the upsampled
    grid and sampled bilinearly, point features pass through the MLP, the
    sampled and transformed features are concatenated per point, the final
    stage mixes them, and a channelwise max over points yields the global
    embedding.  Max pooling is symmetric, so point order cannot matter.
    """
    if params.mode != MODE_PIXEL_TO_POINT:
        raise ValueError(f"params.mode is {params.mode!r}, expected pixel-to-point")
    if pts.count == 0:
        raise ValueError("empty point set")
    if params.mlp[0].weight.shape[0] != pts.channels:
        raise ValueError("MLP input width does not match point channels")
    up = upsample_bilinear_4x(tile)
    pixel_coords = project_point_to_pixel(pts.coords, up.meta)
    sampled = grid_sample_bilinear(up, pixel_coords).data  # N x C_2D
    transformed = params.run_mlp(pts.data)
    fused = np.concatenate([sampled, transformed], axis=1)
    if params.final.weight.shape[0] != fused.shape[1]:
        raise ValueError("final stage input width does not match fused channels")
    return params.final(fused).max(axis=0)


def _idw_interpolate(pixel_xy: np.ndarray, point_xy: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Inverse-distance weighting over the k nearest projected points."""
    k = min(IDW_NEIGHBORS, len(point_xy))
    d2 = (
        (pixel_xy[:, None, 0] - point_xy[None, :, 0]) ** 2
        + (pixel_xy[:, None, 1] - point_xy[None, :, 1]) ** 2
    )
    near = np.argpartition(d2, k - 1, axis=1)[:, :k] if k < len(point_xy) else (
        np.broadcast_to(np.arange(len(point_xy)), (len(pixel_xy), len(point_xy))).copy()
    )
    nd2 = np.take_along_axis(d2, near, axis=1)
    wts = 1.0 / (nd2 ** (IDW_POWER / 2) + IDW_EPS)
    wts /= wts.sum(axis=1, keepdims=True)
    return np.einsum("pk,pkc->pc", wts, values[near])


def point_to_pixel_fuse(
    tile: FeatureGrid, pts: PointFeatureSet, params: FusionParams
) -> np.ndarray:
    """Fuse by splatting point features onto pixels, then average-pooling.

    Points are projected into the tile's pixel frame; every pixel collects
    its 3 nearest projected points with inverse-square-distance weights.
    The interpolated lattice passes through the MLP, is concatenated with
    the tile features, mixed by the final stage, and averaged over pixels
    (a learned spatial aggregator is out of scope here).
    """
    if params.mode != MODE_POINT_TO_PIXEL:
        raise ValueError(f"params.mode is {params.mode!r}, expected point-to-pixel")
    if pts.count == 0:
        raise ValueError("empty point set")
    h, w = tile.meta.H, tile.meta.W
    point_xy = np.atleast_2d(project_point_to_pixel(pts.coords, tile.meta))
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixel_xy = np.column_stack([gx.ravel(), gy.ravel()])
    lattice = _idw_interpolate(pixel_xy, point_xy, pts.data)  # (H*W) x C_3D
    if params.mlp[0].weight.shape[0] != lattice.shape[1]:
        raise ValueError("MLP input width does not match point channels")
    transformed = params.run_mlp(lattice)
    fused = np.concatenate([transformed, tile.data.reshape(h * w, -1)], axis=1)
    if params.final.weight.shape[0] != fused.shape[1]:
        raise ValueError("final stage input width does not match fused channels")
    return params.final(fused).mean(axis=0)


def aggregate_point_global(pts: PointFeatureSet) -> np.ndarray:
    """Concatenate channelwise max-pool and mean-pool halves."""
    if pts.count == 0:
        raise ValueError("empty point set")
    return np.concatenate([pts.data.max(axis=0), pts.data.mean(axis=0)])


def global_fuse(f_tile: np.ndarray, f_point: np.ndarray, mode: str, fc: Dense) -> np.ndarray:
    """Combine two modality vectors by addition or concatenation plus a dense stage."""
    f_tile = np.asarray(f_tile, dtype=np.float64).reshape(-1)
    f_point = np.asarray(f_point, dtype=np.float64).reshape(-1)
    if f_tile.shape != f_point.shape:
        raise ValueError("modality vectors must have equal length")
    if mode == MODE_GLOBAL_ADD:
        combined = f_tile + f_point
    elif mode == MODE_GLOBAL_CONCAT:
        combined = np.concatenate([f_tile, f_point])
    else:
        raise ValueError(f"unknown global fusion mode {mode!r}")
    if fc.weight.shape[0] != combined.shape[0]:
        raise ValueError("fc input width does not match combined vector")
    return fc(combined)


# ---------------------------------------------------------------------------
# Parameter file format
# ---------------------------------------------------------------------------

_MODE_CODES = {m: i for i, m in enumerate(_MODES)}


def _write_dense(fh, weight: np.ndarray, vectors: list[np.ndarray]) -> None:
    fh.write(struct.pack("<II", weight.shape[0], weight.shape[1]))
    fh.write(weight.astype("<f4").tobytes())
    for v in vectors:
        fh.write(v.astype("<f4").tobytes())


def save_fusion_params(path, params: FusionParams, manifest_path=None) -> None:
    """Write weights as a dims-header + f32-blob binary, plus a text manifest.

    Blob order per MLP stage: in u32, out u32, weight (in*out, row-major),
    bias, scale, shift; the final stage stores in, out, weight, bias.  The
    manifest simply lists stage shapes for human inspection.
    """
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(
            struct.pack(
                "<HBBI",
                PARAMS_VERSION,
                _MODE_CODES[params.mode],
                0,
                params.global_channels,
            )
        )
        for stage in params.mlp:
            _write_dense(fh, stage.weight, [stage.bias, stage.scale, stage.shift])
        _write_dense(fh, params.final.weight, [params.final.bias])
    manifest = Path(manifest_path) if manifest_path else Path(str(path) + ".manifest")
    lines = [f"mode {params.mode}", f"global_channels {params.global_channels}"]
    for i, stage in enumerate(params.mlp, start=1):
        din, dout = stage.weight.shape
        lines.append(f"stage{i} {din} -> {dout} (linear+norm+relu)")
    fdin, fdout = params.final.weight.shape
    lines.append(f"final {fdin} -> {fdout} (linear)")
    manifest.write_text("\n".join(lines) + "\n")


def _read_exact(blob: bytes, offset: int, count: int, path) -> tuple[bytes, int]:
    if offset + count > len(blob):
        raise ValueError(f"{path}: truncated at byte {len(blob)}, needed {offset + count}")
    return blob[offset : offset + count], offset + count


def load_fusion_params(path) -> FusionParams:
    blob = Path(path).read_bytes()
    if blob[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0 (expected {PARAMS_MAGIC!r})")
    header, off = _read_exact(blob, 4, struct.calcsize("<HBBI"), path)
    version, mode_code, _, global_channels = struct.unpack("<HBBI", header)
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at byte 4")
    if mode_code >= len(_MODES):
        raise ValueError(f"{path}: unknown mode code {mode_code} at byte 6")

    def read_block(off: int, extra_vectors: int):
        raw, off = _read_exact(blob, off, 8, path)
        din, dout = struct.unpack("<II", raw)
        raw, off = _read_exact(blob, off, 4 * din * dout, path)
        weight = np.frombuffer(raw, dtype="<f4").reshape(din, dout).astype(np.float64)
        vectors = []
        for _ in range(extra_vectors):
            raw, off = _read_exact(blob, off, 4 * dout, path)
            vectors.append(np.frombuffer(raw, dtype="<f4").astype(np.float64))
        return weight, vectors, off

    stages = []
    for _ in range(3):
        weight, (bias, scale, shift), off = read_block(off, 3)
        stages.append(LinearStage(weight, bias, scale, shift))
    weight, (bias,), off = read_block(off, 1)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes start at {off}")
    return FusionParams(
        tuple(stages), Dense(weight, bias), mode=_MODES[mode_code], global_channels=global_channels
    )
