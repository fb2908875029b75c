"""Spectral clustering of an affinity matrix with eigenvalue-ratio speaker counting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .affinity import AffinityMatrix
from .rttm import Turn
from .segmentation import Segment

# eigenvalue thresholds (percent of the largest eigenvalue) per dataset preset
PRESET_THRESHOLDS = {"dihard1": 48, "dihard2": 38, "dihard3": 48, "voxconverse": 80}


@dataclass
class ClusteringConfig:
    eigen_threshold: float = 48
    max_speakers: int = 10
    seed: int = 0
    max_iter: int = 100

    def __post_init__(self):
        if not (0 <= self.eigen_threshold <= 100):
            raise ValueError("eigen_threshold must be in [0, 100]")
        if self.max_speakers < 1:
            raise ValueError("max_speakers must be >= 1")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    num_speakers: int
    eigenvalues: np.ndarray | None = None


def estimate_num_speakers(eigenvalues: Sequence[float], threshold: float) -> int:
    """Count eigenvalues whose ratio to the largest exceeds ``threshold`` percent (at least 1)."""
    ev = np.asarray(eigenvalues, dtype=np.float64)
    if ev.size == 0:
        raise ValueError("no eigenvalues")
    top = ev.max()
    if top <= 0:
        return 1
    return max(1, int(np.count_nonzero(ev / top > threshold / 100)))


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd iterations from farthest-point seeding; the first seed is drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    centers_idx = [int(rng.integers(n))]
    dist = np.sum((points - points[centers_idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))
        centers_idx.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    centers = points[centers_idx].copy()
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        for c in range(k):
            if not np.any(new == c):
                # re-seed an empty cluster with the worst-fitting point
                worst = int(np.argmax(d2[np.arange(n), new]))
                new[worst] = c
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([points[labels == c].mean(axis=0) for c in range(k)])
    return labels


def _relabel_by_first_appearance(labels: np.ndarray) -> np.ndarray:
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels], dtype=np.int64)


def cluster(affinity: AffinityMatrix | np.ndarray, cfg: ClusteringConfig = ClusteringConfig()) -> ClusterAssignment:
    """Partition segments from their affinity.

    Negatives are clipped and the diagonal zeroed, the matrix is normalized
    as D^-1/2 A D^-1/2, the number of speakers is the count of eigenvalues
    above ``eigen_threshold`` percent of the largest, and the row-normalized
    leading eigenvectors are grouped with k-means.
    """
    m = affinity.values if isinstance(affinity, AffinityMatrix) else np.asarray(affinity, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"affinity must be square, got {m.shape}")
    n = m.shape[0]
    if n == 0:
        raise ValueError("empty affinity matrix")
    if not np.allclose(m, m.T, rtol=0, atol=1e-9):
        raise ValueError("affinity matrix is not symmetric")
    if n == 1:
        return ClusterAssignment(np.zeros(1, dtype=np.int64), 1, np.ones(1))

    a = np.clip(m, 0, None)
    np.fill_diagonal(a, 0.0)
    a = (a + a.T) / 2
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1 / np.sqrt(deg[nz])
    norm = a * inv_sqrt[:, None] * inv_sqrt[None, :]
    evals, evecs = np.linalg.eigh(norm)
    evals, evecs = evals[::-1], evecs[:, ::-1]

    k = min(estimate_num_speakers(evals, cfg.eigen_threshold), cfg.max_speakers, n)
    if k == 1:
        return ClusterAssignment(np.zeros(n, dtype=np.int64), 1, evals)
    emb = evecs[:, :k]
    rn = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, rn, out=np.zeros_like(emb), where=rn > 0)
    labels = _relabel_by_first_appearance(kmeans(emb, k, cfg.seed, cfg.max_iter))
    return ClusterAssignment(labels, int(labels.max()) + 1, evals)


def labels_to_turns(
    segments: Sequence[Segment], labels: Sequence[int], gap_tolerance: float = 0.25, prefix: str = "spk"
) -> list[Turn]:
    """Convert per-segment labels into speaker turns.

    Overlapping neighbours split their shared span at its middle, then
    consecutive pieces with the same label are merged when the gap between
    them is at most ``gap_tolerance`` seconds.
    """
    if len(segments) != len(labels):
        raise ValueError("one label per segment required")
    pieces = []
    for k, seg in enumerate(segments):
        start, end = seg.onset, seg.offset
        if k > 0 and segments[k - 1].region == seg.region and segments[k - 1].offset > seg.onset:
            start = (seg.onset + segments[k - 1].offset) / 2
        if k + 1 < len(segments) and segments[k + 1].region == seg.region and seg.offset > segments[k + 1].onset:
            end = (segments[k + 1].onset + seg.offset) / 2
        if end > start:
            pieces.append([start, end, int(labels[k])])
    merged: list[list] = []
    for start, end, lab in pieces:
        if merged and merged[-1][2] == lab and start - merged[-1][1] <= gap_tolerance + 1e-9:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end, lab])
    return [Turn(round(s, 6), round(e, 6), f"{prefix}{lab}") for s, e, lab in merged]
