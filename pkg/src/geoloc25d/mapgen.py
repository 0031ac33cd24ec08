"""2.5D semantic map construction from triangle meshes.

A 2.5D map is an untextured city model (footprints extruded to known
heights) represented here as a semantic point cloud: N points with 3D
coordinates plus a per-point category id in [0, 23].  This module turns
semantic triangle meshes into such clouds by uniform surface sampling,
crops heading-aligned square regions around a query location, and
rescales crops to the unit box expected by downstream encoders.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_CATEGORIES = 24

FRAME_WORLD = "world-meters"
FRAME_NORMALIZED = "normalized"

# Default crop side in meters; a map tile covers a 152 x 152 m neighborhood.
DEFAULT_CROP_SIDE = 152.0

CLOUD_MAGIC = b"P25D"
CLOUD_VERSION = 1


@dataclass(frozen=True)
class Triangle:
    """One semantic surface triangle with vertices in meters."""

    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    category: int

    def __post_init__(self):
        for name in ("v1", "v2", "v3"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"triangle vertex {name} is not finite")
            object.__setattr__(self, name, v)
        if not 0 <= int(self.category) < NUM_CATEGORIES:
            raise ValueError(f"category {self.category} outside [0, {NUM_CATEGORIES - 1}]")
        object.__setattr__(self, "category", int(self.category))


@dataclass
class SemanticMesh:
    triangles: list[Triangle] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triangles)

    def total_area(self) -> float:
        return float(sum(triangle_area(t) for t in self.triangles))


@dataclass
class SemanticPointCloud:
    """Point positions with parallel category labels.

    ``frame`` records the coordinate convention: ``world-meters`` for raw
    or crop-relative metric coordinates, ``normalized`` once coordinates
    have been scaled into [-1, 1].
    """

    positions: np.ndarray
    categories: np.ndarray
    frame: str = FRAME_WORLD

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.categories = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        if len(self.positions) != len(self.categories):
            raise ValueError("positions and categories length mismatch")
        if self.categories.size and (
            self.categories.min() < 0 or self.categories.max() >= NUM_CATEGORIES
        ):
            raise ValueError("category id outside [0, 23]")
        if self.frame not in (FRAME_WORLD, FRAME_NORMALIZED):
            raise ValueError(f"unknown frame {self.frame!r}")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class CropSpec:
    """Heading-aligned square crop: center in meters, heading in radians."""

    center: tuple[float, float]
    heading: float = 0.0
    side: float = DEFAULT_CROP_SIDE

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("crop side must be positive")


def triangle_area(t: Triangle) -> float:
    """Surface area in m^2; degenerate (collinear) triangles give 0."""
    cross = np.cross(t.v1 - t.v3, t.v2 - t.v3)
    return 0.5 * float(np.linalg.norm(cross))


def sample_count(area: float, density: float, rng: np.random.Generator) -> int:
    """Stochastically rounded point budget for a surface patch.

    The expected count equals ``density * area`` exactly: the fractional
    part is resolved by drawing u ~ U[0,1) and taking floor(density*area + u),
    which is unbiased and keeps integer products deterministic.
    """
    if area < 0 or density < 0:
        raise ValueError("area and density must be non-negative")
    target = density * area
    return int(np.floor(target + rng.uniform(0.0, 1.0)))


def sample_triangle(t: Triangle, r1, r2) -> np.ndarray:
    """Map unit-square samples (r1, r2) onto the triangle.

    The square-root warp of r1 makes the image uniform in area over the
    triangle.  Accepts scalars or equal-length arrays and returns points
    with matching leading shape.
    """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    s = np.sqrt(r1)
    w1 = (1.0 - s)[..., None]
    w2 = (s * (1.0 - r2))[..., None]
    w3 = (s * r2)[..., None]
    return w1 * t.v1 + w2 * t.v2 + w3 * t.v3


def _triangle_rng(seed, index: int) -> np.random.Generator:
    # Per-triangle substream so per-triangle work could run in parallel
    # without changing the result.
    return np.random.default_rng([int(seed), int(index)])


def sample_mesh(mesh: SemanticMesh, density: float, seed: int = 0) -> SemanticPointCloud:
    """Uniformly sample all mesh surfaces at ``density`` points per m^2.

    Each point inherits the category of its source triangle.  Deterministic
    for a fixed seed; per-triangle substreams are derived from
    (seed, triangle index).
    """
    if len(mesh) == 0:
        raise ValueError("empty mesh")
    if density < 0:
        raise ValueError("density must be non-negative")
    chunks = []
    cats = []
    for i, tri in enumerate(mesh.triangles):
        rng = _triangle_rng(seed, i)
        n = sample_count(triangle_area(tri), density, rng)
        if n == 0:
            continue
        pts = sample_triangle(tri, rng.uniform(size=n), rng.uniform(size=n))
        chunks.append(pts)
        cats.append(np.full(n, tri.category, dtype=np.int64))
    if not chunks:
        return SemanticPointCloud(np.empty((0, 3)), np.empty(0, dtype=np.int64))
    return SemanticPointCloud(np.vstack(chunks), np.concatenate(cats))


def crop_region(cloud: SemanticPointCloud, spec: CropSpec) -> SemanticPointCloud:
    """Cut a heading-aligned square around the crop center.

    Horizontal coordinates are rotated by -heading about the center so the
    crop's +y axis points along the heading; points with |x'| or |y'|
    beyond side/2 are discarded.  Output coordinates are center-relative
    and stay in meters; z is untouched.  May return an empty cloud.
    """
    if cloud.frame != FRAME_WORLD:
        raise ValueError("crop_region expects a world-meters cloud")
    cx, cy = spec.center
    dx = cloud.positions[:, 0] - cx
    dy = cloud.positions[:, 1] - cy
    c, s = np.cos(spec.heading), np.sin(spec.heading)
    xr = c * dx + s * dy
    yr = -s * dx + c * dy
    half = spec.side / 2.0
    keep = (np.abs(xr) <= half) & (np.abs(yr) <= half)
    pos = np.column_stack([xr[keep], yr[keep], cloud.positions[keep, 2]])
    return SemanticPointCloud(pos, cloud.categories[keep], frame=FRAME_WORLD)


def normalize_cloud(
    cloud: SemanticPointCloud, half_extent: float
) -> tuple[SemanticPointCloud, int]:
    """Scale a crop-relative cloud into the unit box.

    All three axes are divided by the same horizontal half-extent so the
    geometry keeps its aspect ratio and heights stay meaningful.  Returns
    the normalized cloud and the number of points whose z had to be
    clamped to [-1, 1] (structures taller than the half-extent).
    """
    if cloud.frame != FRAME_WORLD:
        raise ValueError("cloud is already normalized")
    if half_extent <= 0:
        raise ValueError("half_extent must be positive")
    pos = cloud.positions / half_extent
    if pos.size and np.max(np.abs(pos[:, :2])) > 1.0 + 1e-12:
        raise ValueError("horizontal coordinates exceed half_extent; crop first")
    z = pos[:, 2]
    clamped = int(np.count_nonzero((z < -1.0) | (z > 1.0)))
    pos[:, 2] = np.clip(z, -1.0, 1.0)
    return SemanticPointCloud(pos, cloud.categories.copy(), frame=FRAME_NORMALIZED), clamped


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_mesh_text(path, mesh: SemanticMesh) -> None:
    """Write the line-oriented mesh format.

    One triangle per line: ``cat v1x v1y v1z v2x v2y v2z v3x v3y v3z``,
    whitespace-separated; ``#`` starts a comment.
    """
    with open(path, "w") as fh:
        fh.write("# semantic triangle mesh: cat v1x v1y v1z v2x v2y v2z v3x v3y v3z\n")
        for t in mesh.triangles:
            coords = " ".join(repr(float(x)) for v in (t.v1, t.v2, t.v3) for x in v)
            fh.write(f"{t.category} {coords}\n")


def load_mesh_text(path) -> SemanticMesh:
    triangles = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ValueError(f"{path}: line {lineno}: expected 10 fields, got {len(parts)}")
        try:
            cat = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
        triangles.append(Triangle(vals[0:3], vals[3:6], vals[6:9], cat))
    return SemanticMesh(triangles)


_POINT_DTYPE = np.dtype([("pos", "<f4", 3), ("cat", "u1")])


def save_cloud(path, cloud: SemanticPointCloud) -> None:
    """Write the binary point-cloud format.

    Layout (little-endian): magic ``P25D``, version u16, count u64, then
    per point 3 x f32 position followed by a u8 category.
    """
    rec = np.empty(len(cloud), dtype=_POINT_DTYPE)
    rec["pos"] = cloud.positions.astype("<f4")
    rec["cat"] = cloud.categories.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<HQ", CLOUD_VERSION, len(cloud)))
        fh.write(rec.tobytes())


def load_cloud(path, frame: str = FRAME_WORLD) -> SemanticPointCloud:
    """Read the binary point-cloud format; malformed files report the byte offset.

    The format does not store the coordinate frame, so the caller states
    which convention the file uses (world-meters by default).
    """
    blob = Path(path).read_bytes()
    if blob[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0 (expected {CLOUD_MAGIC!r})")
    if len(blob) < 14:
        raise ValueError(f"{path}: truncated header at byte {len(blob)}")
    version, count = struct.unpack_from("<HQ", blob, 4)
    if version != CLOUD_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at byte 4")
    expected = 14 + count * _POINT_DTYPE.itemsize
    if len(blob) != expected:
        raise ValueError(
            f"{path}: payload ends at byte {len(blob)}, expected {expected} for {count} points"
        )
    rec = np.frombuffer(blob, dtype=_POINT_DTYPE, count=count, offset=14)
    return SemanticPointCloud(
        rec["pos"].astype(np.float64), rec["cat"].astype(np.int64), frame=frame
    )
