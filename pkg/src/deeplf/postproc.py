"""False-positive removal on predicted binary masks.

Connected-component labeling (two-pass union-find) plus area filtering that
keeps only the largest components — for chest masks, the two lung fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ComponentLabeling", "label_components", "keep_largest_k"]


@dataclass(frozen=True)
class ComponentLabeling:
    """Dense component labels (0 = background, 1..K) and per-label pixel areas.

    ``areas[i]`` is the area of label ``i + 1``; labels follow the raster
    order of each component's first-encountered pixel.
    """

    labels: np.ndarray
    areas: np.ndarray

    @property
    def count(self) -> int:
        return len(self.areas)


def _as_binary(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be strictly binary (0 or 1)")
    return mask.astype(np.uint8, copy=False)


def label_components(mask, connectivity: int = 8) -> ComponentLabeling:
    """Label maximal connected foreground regions under 4- or 8-adjacency.

    Classic two-pass scheme: a raster scan assigns provisional labels and
    records equivalences in a union-find forest, a second pass resolves them
    to dense ids ordered by first encounter.
    """
    mask = _as_binary(mask)
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    h, w = mask.shape
    provisional = np.zeros((h, w), dtype=np.int32)
    parent = [0]  # union-find forest over provisional labels; index 0 unused

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:  # path compression
            parent[a], a = root, parent[a]
        return root

    next_label = 1
    for r in range(h):
        row = mask[r]
        above = provisional[r - 1] if r > 0 else None
        cur = provisional[r]
        for c in range(w):
            if not row[c]:
                continue
            best = 0
            if c > 0 and cur[c - 1]:
                best = find(cur[c - 1])
            if above is not None:
                if above[c]:
                    lab = find(above[c])
                    best = lab if best == 0 else min(best, lab)
                if connectivity == 8:
                    if c > 0 and above[c - 1]:
                        lab = find(above[c - 1])
                        best = lab if best == 0 else min(best, lab)
                    if c + 1 < w and above[c + 1]:
                        lab = find(above[c + 1])
                        best = lab if best == 0 else min(best, lab)
            if best == 0:
                parent.append(next_label)
                cur[c] = next_label
                next_label += 1
            else:
                cur[c] = best
                # merge every adjacent label into the smallest root
                if c > 0 and cur[c - 1]:
                    parent[find(cur[c - 1])] = best
                if above is not None:
                    if above[c]:
                        parent[find(above[c])] = best
                    if connectivity == 8:
                        if c > 0 and above[c - 1]:
                            parent[find(above[c - 1])] = best
                        if c + 1 < w and above[c + 1]:
                            parent[find(above[c + 1])] = best

    # resolve provisional labels to dense ids in raster-first-encounter order
    dense = {}
    labels = np.zeros((h, w), dtype=np.int32)
    for r in range(h):
        for c in range(w):
            p = provisional[r, c]
            if p == 0:
                continue
            root = find(p)
            if root not in dense:
                dense[root] = len(dense) + 1
            labels[r, c] = dense[root]
    k = len(dense)
    areas = np.bincount(labels.ravel(), minlength=k + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels=labels, areas=areas)


def keep_largest_k(mask, k: int = 2, connectivity: int = 8) -> np.ndarray:
    """Restrict the foreground to the k largest components by area.

    Ties break toward the component first encountered in raster order.
    Masks with at most k components pass through unchanged.
    """
    mask = _as_binary(mask)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    labeling = label_components(mask, connectivity)
    if labeling.count <= k:
        return mask.copy()
    order = sorted(
        range(1, labeling.count + 1), key=lambda lab: (-labeling.areas[lab - 1], lab)
    )
    keep = np.zeros(labeling.count + 1, dtype=bool)
    for lab in order[:k]:
        keep[lab] = True
    return keep[labeling.labels].astype(np.uint8)
