"""Segmentation and classification metrics, lesion stratification and
paired permutation testing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError
from .otsu import otsu_mask

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
STRATUM_NAMES = ("small", "moderate", "large")
WINDOW_DILATION = 0.25


def binarize_heatmap(channel: np.ndarray, method="otsu", coverage: np.ndarray | None = None, bins: int = 256):
    """Binary foreground mask of one heatmap channel.

    ``method`` is ``"otsu"`` or a float used as a fixed threshold
    (``value > t``).  Positions outside ``coverage`` are always background.
    """
    channel = np.asarray(channel)
    cov = np.ones(channel.shape, dtype=bool) if coverage is None else np.asarray(coverage, dtype=bool)
    out = np.zeros(channel.shape, dtype=bool)
    if not cov.any():
        return out
    if isinstance(method, str):
        if method != "otsu":
            raise ValueError(f"unknown binarization method {method!r}")
        keep, _ = otsu_mask(channel[cov], bins)
        out[cov] = keep
    else:
        out[cov] = channel[cov] > float(method)
    return out


def dice(pred, gt) -> float:
    """Dice overlap; two empty masks count as perfect agreement (1.0)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney U statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise DimensionError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass
class Component:
    index: int
    area: int
    pixels: np.ndarray  # boolean mask of the component
    bbox: tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)


def connected_components(mask) -> list[Component]:
    """4-connected components in row-major order of their first pixel."""
    mask = np.asarray(mask, dtype=bool)
    labeled, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    comps = []
    for i, sl in enumerate(ndimage.find_objects(labeled), start=1):
        pix = labeled == i
        comps.append(Component(i - 1, int(pix.sum()), pix, (sl[0].start, sl[0].stop, sl[1].start, sl[1].stop)))
    return comps


@dataclass(frozen=True)
class Stratum:
    name: str
    lower: float
    upper: float

    def contains(self, area: float) -> bool:
        return self.lower <= area < self.upper


def make_strata(small_upper: float, large_lower: float) -> list[Stratum]:
    """Three strata partitioning ``(0, inf)`` at the two given pixel areas."""
    if not 0 < small_upper <= large_lower:
        raise ValueError("stratum bounds must satisfy 0 < small_upper <= large_lower")
    return [
        Stratum("small", 0.0, float(small_upper)),
        Stratum("moderate", float(small_upper), float(large_lower)),
        Stratum("large", float(large_lower), math.inf),
    ]


def assign_stratum(area: float, strata: list[Stratum]) -> str:
    for s in strata:
        if s.contains(area):
            return s.name
    raise ValueError(f"area {area} not covered by strata")


def lesion_window(bbox, shape, dilation: float = WINDOW_DILATION):
    r0, r1, c0, c1 = bbox
    dr = math.ceil(dilation * (r1 - r0))
    dc = math.ceil(dilation * (c1 - c0))
    return (slice(max(r0 - dr, 0), min(r1 + dr, shape[0])), slice(max(c0 - dc, 0), min(c1 + dc, shape[1])))


def lesion_dice(pred, gt) -> list[dict]:
    """Dice for every ground-truth component within its dilated bounding window."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    out = []
    for comp in connected_components(gt):
        win = lesion_window(comp.bbox, gt.shape)
        out.append({"index": comp.index, "area": comp.area, "dice": dice(pred[win], comp.pixels[win])})
    return out


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"count": int(v.size), "mean": float(v.mean()), "std": float(v.std())}


def stratified_dice(lesions: list[dict], strata: list[Stratum]) -> dict:
    """Group per-lesion Dice records (with ``area``) into strata.

    Empty strata are omitted from the result rather than reported as zero.
    """
    groups: dict[str, list[float]] = {s.name: [] for s in strata}
    for rec in lesions:
        groups[assign_stratum(rec["area"], strata)].append(rec["dice"])
    return {name: summarize(vals) for name, vals in groups.items() if vals}


def permutation_test(diffs, iterations: int = 10_000, seed: int = 0) -> float:
    """One-tailed paired sign-flip test that the mean difference is > 0.

    Returns ``(1 + #{permuted mean >= observed}) / (1 + iterations)``.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("permutation_test needs at least one pair")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    observed = d.sum()
    tol = 1e-12 * max(np.abs(d).sum(), 1e-300)
    hits = 0
    chunk = max(1, min(iterations, 4_000_000 // d.size))
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        signs = rng.integers(0, 2, size=(m, d.size), dtype=np.int8) * 2 - 1
        hits += int(np.count_nonzero(signs @ d >= observed - tol))
        done += m
    return (1 + hits) / (1 + iterations)
