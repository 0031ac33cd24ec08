"""Point-set subsampling, augmentation, and semantic label encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mapgen import FRAME_NORMALIZED, NUM_CATEGORIES, SemanticPointCloud

STRATEGY_FPS = "FPS"
STRATEGY_RPS = "RPS"


@dataclass(frozen=True)
class SampleResult:
    indices: np.ndarray
    strategy: str

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("sample indices must be distinct")
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class AugmentParams:
    """Shuffle / jitter / removal settings, in normalized units."""

    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    remove_fraction: float = 0.0
    shuffle: bool = True

    def __post_init__(self):
        if self.jitter_clip < 0:
            raise ValueError("jitter_clip must be non-negative")
        if not 0.0 <= self.remove_fraction < 1.0:
            raise ValueError("remove_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class SemanticEncoding:
    """Either 24-way one-hot rows or a fixed 24x3 projection of them."""

    mode: str = "one-hot-24"
    projection: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("one-hot-24", "learned-3"):
            raise ValueError(f"unknown encoding mode {self.mode!r}")
        if self.mode == "learned-3":
            if self.projection is None:
                raise ValueError("learned-3 mode requires a projection matrix")
            proj = np.asarray(self.projection, dtype=np.float64)
            if proj.shape != (NUM_CATEGORIES, 3):
                raise ValueError("projection must be 24x3")
            object.__setattr__(self, "projection", proj)


def fps(cloud: SemanticPointCloud, k: int, start: int = 0) -> SampleResult:
    """Greedy farthest point sampling.

    Starting from ``start``, repeatedly picks the point with the largest
    distance to the already-selected set; ties go to the lowest index.
    The selection order is the visit order.
    """
    n = len(cloud)
    if not 1 <= k <= n:
        raise ValueError(f"insufficient points: k={k}, cloud has {n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    pos = cloud.positions
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pos - pos[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
    return SampleResult(chosen, STRATEGY_FPS)


def rps(cloud: SemanticPointCloud, k: int, seed: int = 0) -> SampleResult:
    """Uniform random subsampling without replacement, seed-deterministic."""
    n = len(cloud)
    if not 1 <= k <= n:
        raise ValueError(f"insufficient points: k={k}, cloud has {n}")
    rng = np.random.default_rng(seed)
    return SampleResult(rng.choice(n, size=k, replace=False), STRATEGY_RPS)


def take(cloud: SemanticPointCloud, result: SampleResult) -> SemanticPointCloud:
    """Materialize a subsample as a new cloud."""
    return SemanticPointCloud(
        cloud.positions[result.indices], cloud.categories[result.indices], frame=cloud.frame
    )


def augment_cloud(
    cloud: SemanticPointCloud, params: AugmentParams, seed: int = 0
) -> SemanticPointCloud:
    """Apply shuffle, clipped Gaussian jitter, then random point removal.

    The three stages run in that order on a normalized cloud; categories
    travel with their points.  Jitter moves positions only and each
    per-coordinate displacement is clipped to +-jitter_clip.  Removal
    drops floor(remove_fraction * N) points uniformly at random.
    """
    if cloud.frame != FRAME_NORMALIZED:
        raise ValueError("augment_cloud expects a normalized cloud")
    rng = np.random.default_rng(seed)
    pos = cloud.positions.copy()
    cat = cloud.categories.copy()
    if params.shuffle:
        perm = rng.permutation(len(pos))
        pos, cat = pos[perm], cat[perm]
    if params.jitter_sigma > 0:
        noise = rng.normal(0.0, params.jitter_sigma, size=pos.shape)
        pos = pos + np.clip(noise, -params.jitter_clip, params.jitter_clip)
    n_remove = int(np.floor(params.remove_fraction * len(pos)))
    if n_remove > 0:
        drop = rng.choice(len(pos), size=n_remove, replace=False)
        keep = np.setdiff1d(np.arange(len(pos)), drop, assume_unique=True)
        pos, cat = pos[keep], cat[keep]
    return SemanticPointCloud(pos, cat, frame=FRAME_NORMALIZED)


def encode_semantics(categories, enc: SemanticEncoding) -> np.ndarray:
    """Encode category ids as one-hot rows or their 3-D projections."""
    ids = np.asarray(categories, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= NUM_CATEGORIES):
        raise ValueError("category id outside [0, 23]")
    if enc.mode == "one-hot-24":
        return np.eye(NUM_CATEGORIES, dtype=np.float64)[ids]
    # Row lookup equals one-hot @ projection exactly.
    return enc.projection[ids]
