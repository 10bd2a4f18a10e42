"""Synthetic weak-supervision benchmark.

Each bag is a grid of patch embeddings drawn from Gaussian noise.  Positive
bags for class ``c`` contain one or more elliptical lesions inside which a
fixed, class-specific subset of embedding channels is shifted by
``signal_strength``.  Bag labels record only whether a lesion of each class
exists; the planted regions are kept as ground-truth masks for scoring.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from .bags import BagOfPatches
from .errors import ConfigError
from .metrics import Stratum, make_strata

SPLITS = ("train", "val", "test")
MAX_PLACEMENT_TRIES = 200


@dataclass
class SynthConfig:
    num_train: int = 80
    num_val: int = 30
    num_test: int = 60
    grid_rows: int = 8
    grid_cols: int = 8
    patch_size: int = 7
    embed_dim: int = 16
    num_labels: int = 1
    positive_fraction: float = 0.5
    # edges of the small / moderate / large lesion bins, as fractions of the full map area
    lesion_area_fractions: tuple = (0.004, 0.015, 0.05, 0.12)
    max_lesions_per_label: int = 2
    signal_strength: float = 1.0
    signal_channels: int = 4
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.lesion_area_fractions = tuple(float(f) for f in self.lesion_area_fractions)
        fr = self.lesion_area_fractions
        if len(fr) != 4 or any(not 0 < f < 1 for f in fr) or list(fr) != sorted(set(fr)):
            raise ConfigError("lesion_area_fractions must be 4 increasing values in (0, 1)")
        if min(self.num_train, self.num_val, self.num_test) < 1:
            raise ConfigError("every split needs at least one bag")
        if min(self.grid_rows, self.grid_cols, self.patch_size, self.embed_dim, self.num_labels) < 1:
            raise ConfigError("grid, patch, embedding and label extents must be positive")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError("positive_fraction must be in (0, 1)")
        if self.signal_strength < 0 or self.noise_std < 0:
            raise ConfigError("signal_strength and noise_std must be non-negative")
        if not 1 <= self.signal_channels <= self.embed_dim:
            raise ConfigError("signal_channels must be in [1, embed_dim]")
        if self.max_lesions_per_label < 1:
            raise ConfigError("max_lesions_per_label must be >= 1")
        h, w = self.map_shape
        largest = fr[-1] * h * w
        if 2 * math.sqrt(largest / math.pi) * math.exp(0.4) + 2 > min(h, w):
            raise ConfigError("the largest lesion bin does not fit inside the stitched grid")

    @property
    def map_shape(self) -> tuple[int, int]:
        return self.grid_rows * self.patch_size, self.grid_cols * self.patch_size

    @property
    def area_edges(self) -> list[float]:
        h, w = self.map_shape
        return [f * h * w for f in self.lesion_area_fractions]

    def strata(self) -> list[Stratum]:
        e = self.area_edges
        return make_strata(e[1], e[2])

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.num_train, "val": self.num_val, "test": self.num_test}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_area_fractions"] = list(self.lesion_area_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "single_label": {},
    "multi_label": {"num_labels": 3, "positive_fraction": 0.4, "num_train": 120},
    # large pretrained-encoder geometry: 14x14 tiles of 1024 channels
    "full_width": {"grid_rows": 2, "grid_cols": 2, "patch_size": 14, "embed_dim": 1024,
                   "num_train": 4, "num_val": 2, "num_test": 2, "signal_channels": 32,
                   "lesion_area_fractions": (0.01, 0.03, 0.06, 0.12)},
}


def preset(name: str, **overrides) -> SynthConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthConfig(**{**PRESETS[name], **overrides})


@dataclass
class SyntheticDataset:
    config: SynthConfig
    splits: dict[str, list[BagOfPatches]] = field(default_factory=dict)
    signal_channels: list[np.ndarray] = field(default_factory=list)

    def __getitem__(self, split: str) -> list[BagOfPatches]:
        return self.splits[split]

    def lesion_areas(self) -> list[int]:
        from .metrics import connected_components

        return [c.area for bags in self.splits.values() for b in bags
                for m in b.mask for c in connected_components(m)]


def _ellipse(shape, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _place_lesion(rng, cfg: SynthConfig, occupied: np.ndarray, anchor=None):
    """Sample an ellipse whose pixel area falls in a random size bin and that
    keeps a one-pixel gap to every existing lesion."""
    h, w = cfg.map_shape
    edges = cfg.area_edges
    size_bin = int(rng.integers(3))
    lo, hi = edges[size_bin], edges[size_bin + 1]
    blocked = ndimage.binary_dilation(occupied, iterations=1) if occupied.any() else occupied
    for _ in range(MAX_PLACEMENT_TRIES):
        area = rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(-0.4, 0.4))
        ry = math.sqrt(area / (math.pi * ratio))
        rx = ry * ratio
        if anchor is not None and rng.random() < 0.5:
            ay, ax, ar = anchor
            ang = rng.uniform(0, 2 * math.pi)
            dist = ar + max(ry, rx) + rng.uniform(1.5, 4.0)
            cy, cx = ay + dist * math.sin(ang), ax + dist * math.cos(ang)
        else:
            cy = rng.uniform(ry, h - 1 - ry)
            cx = rng.uniform(rx, w - 1 - rx)
        if not (ry <= cy <= h - 1 - ry and rx <= cx <= w - 1 - rx):
            continue
        region = _ellipse((h, w), cy, cx, ry, rx)
        n = int(region.sum())
        if not lo <= n < hi or (region & blocked).any():
            continue
        return region, (cy, cx, max(ry, rx))
    return None, None


def _make_bag(rng, cfg: SynthConfig, bag_id: str, labels: np.ndarray, channels) -> BagOfPatches:
    h, w = cfg.map_shape
    p = cfg.patch_size
    field_ = rng.normal(0.0, cfg.noise_std, size=(cfg.embed_dim, h, w)).astype(np.float32)
    mask = np.zeros((cfg.num_labels, h, w), dtype=bool)
    occupied = np.zeros((h, w), dtype=bool)
    anchor = None
    for c in np.flatnonzero(labels):
        for _ in range(int(rng.integers(1, cfg.max_lesions_per_label + 1))):
            region, anchor_new = _place_lesion(rng, cfg, occupied, anchor)
            if region is None:
                if mask[c].any():
                    break
                raise ConfigError("could not place a lesion; the grid is too crowded for the configured sizes")
            mask[c] |= region
            occupied |= region
            anchor = anchor_new
        field_[channels[c]] += np.float32(cfg.signal_strength) * mask[c]
    coords = np.array([(r, q) for r in range(cfg.grid_rows) for q in range(cfg.grid_cols)])
    patches = np.stack([field_[:, r * p:(r + 1) * p, q * p:(q + 1) * p] for r, q in coords])
    return BagOfPatches(bag_id, patches, coords, labels, mask)


def _split_labels(rng, n: int, cfg: SynthConfig) -> np.ndarray:
    if cfg.num_labels == 1:
        pos = int(round(n * cfg.positive_fraction))
        y = np.zeros((n, 1), dtype=np.int64)
        y[rng.permutation(n)[:pos], 0] = 1
        return y
    return (rng.random((n, cfg.num_labels)) < cfg.positive_fraction).astype(np.int64)


def generate_synthetic(cfg: SynthConfig) -> SyntheticDataset:
    """Deterministically generate train/val/test splits from ``cfg.seed``."""
    root = np.random.SeedSequence(cfg.seed)
    chan_seq, *split_seqs = root.spawn(1 + len(SPLITS))
    chan_rng = np.random.default_rng(chan_seq)
    perm = chan_rng.permutation(cfg.embed_dim)
    channels = []
    for c in range(cfg.num_labels):
        start = (c * cfg.signal_channels) % cfg.embed_dim
        idx = np.take(perm, range(start, start + cfg.signal_channels), mode="wrap")
        channels.append(np.sort(idx))

    ds = SyntheticDataset(cfg, {}, channels)
    for split, seq in zip(SPLITS, split_seqs):
        n = cfg.split_sizes()[split]
        label_seq, *bag_seqs = seq.spawn(1 + n)
        labels = _split_labels(np.random.default_rng(label_seq), n, cfg)
        ds.splits[split] = [
            _make_bag(np.random.default_rng(bs), cfg, f"{split}_{i:04d}", labels[i], channels)
            for i, bs in enumerate(bag_seqs)
        ]
    return ds
