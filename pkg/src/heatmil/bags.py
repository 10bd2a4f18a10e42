"""The bag-of-patches container used for weak supervision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LayoutError


@dataclass(eq=False)
class BagOfPatches:
    """Patch embeddings of one slide/volume sharing a single label vector.

    ``embeddings`` is ``(N, embed_dim, h, w)``, ``coords`` is ``(N, 2)`` with
    the (row, col) grid position of each patch, and ``labels`` is a 0/1
    vector of length C.  ``mask`` optionally holds per-label ground truth
    aligned to the stitched grid, shape ``(C, grid_rows * h, grid_cols * w)``.
    """

    bag_id: str
    embeddings: np.ndarray
    coords: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.embeddings.ndim != 4:
            raise DimensionError(f"embeddings must be (N, E, h, w), got {self.embeddings.shape}")
        if self.embeddings.shape[0] == 0:
            raise DimensionError("a bag needs at least one patch")
        if self.coords.shape[0] != self.embeddings.shape[0]:
            raise DimensionError("one (row, col) pair is required per patch")
        if np.any(self.coords < 0):
            raise LayoutError("patch coordinates must be non-negative")
        if np.unique(self.coords, axis=0).shape[0] != self.coords.shape[0]:
            raise LayoutError(f"bag {self.bag_id!r} has duplicate patch coordinates")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0/1")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.ndim == 2:
                self.mask = self.mask[None]
            expected = (self.num_labels,) + self.grid_extent
            if self.mask.shape != expected:
                raise DimensionError(f"mask shape {self.mask.shape} != stitched extent {expected}")

    @property
    def num_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def patch_shape(self) -> tuple[int, int]:
        return self.embeddings.shape[2], self.embeddings.shape[3]

    @property
    def num_labels(self) -> int:
        return self.labels.size

    @property
    def grid_extent(self) -> tuple[int, int]:
        h, w = self.patch_shape
        rows, cols = self.coords.max(axis=0) + 1
        return int(rows) * h, int(cols) * w

    @property
    def patches(self):
        """Iterate ``(embedding, row, col)`` triples."""
        for emb, (r, c) in zip(self.embeddings, self.coords):
            yield emb, int(r), int(c)

    def __eq__(self, other):
        if not isinstance(other, BagOfPatches):
            return NotImplemented
        if (self.mask is None) != (other.mask is None):
            return False
        return (
            self.bag_id == other.bag_id
            and self.embeddings.shape == other.embeddings.shape
            and np.array_equal(self.embeddings, other.embeddings)
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.labels, other.labels)
            and (self.mask is None or np.array_equal(self.mask, other.mask))
        )

    def permuted(self, order) -> "BagOfPatches":
        order = np.asarray(order)
        return BagOfPatches(self.bag_id, self.embeddings[order], self.coords[order], self.labels, self.mask)
