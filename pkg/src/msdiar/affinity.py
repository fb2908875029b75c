"""Weighted cosine-fusion affinity over multi-scale embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import MultiScaleEmbeddingSet
from .matrix_io import AFFINITY_MAGIC, read_matrix, write_matrix

DEFAULT_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)


@dataclass
class AffinityMatrix:
    values: np.ndarray
    mode: str = "fusion"

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"affinity must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("affinity contains non-finite values")

    @property
    def size(self) -> int:
        return self.values.shape[0]


def check_weights(weights: Sequence[float], n_scales: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("fusion weights must be a flat sequence")
    if n_scales is not None and w.size != n_scales:
        raise ValueError(f"{w.size} fusion weights for {n_scales} scales")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError(f"fusion weights must be non-negative with one positive, got {w.tolist()}")
    return w


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for a zero vector")
    return float(a @ b / (na * nb))


def fusion_similarity(ms_i: np.ndarray, ms_j: np.ndarray, weights: Sequence[float] = DEFAULT_WEIGHTS) -> float:
    """Weighted sum over scales of the cosine between the two segments' embeddings."""
    ms_i, ms_j = np.asarray(ms_i, dtype=np.float64), np.asarray(ms_j, dtype=np.float64)
    if ms_i.shape != ms_j.shape:
        raise ValueError(f"tuple shapes differ: {ms_i.shape} vs {ms_j.shape}")
    w = check_weights(weights, ms_i.shape[0])
    return float(sum(w[s] * _cos(ms_i[s], ms_j[s]) for s in range(w.size)))


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """Row-pairwise cosine similarity; raises on zero rows."""
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"cosine undefined: row {int(zero[0])} is zero")
    u = x / norms[:, None]
    return u @ u.T


def _mirror_upper(m: np.ndarray, diag: float | np.ndarray) -> np.ndarray:
    upper = np.triu(m, 1)
    out = upper + upper.T
    np.fill_diagonal(out, diag)
    return out


def build_fusion_affinity(
    emb_set: MultiScaleEmbeddingSet, weights: Sequence[float] = DEFAULT_WEIGHTS
) -> AffinityMatrix:
    """L x L fusion affinity, symmetric by construction, diagonal set to sum(weights)."""
    w = check_weights(weights, len(emb_set.scales))
    tuples = emb_set.stacked()
    total = np.zeros((tuples.shape[0], tuples.shape[0]))
    for s in range(w.size):
        if w[s] == 0:
            continue
        try:
            total += w[s] * cosine_matrix(tuples[:, s])
        except ValueError as err:
            raise ValueError(f"scale {emb_set.scales[s].name}: {err}") from err
    return AffinityMatrix(_mirror_upper(total, float(w.sum())), mode="fusion")


def save_affinity(path: str | Path, affinity: AffinityMatrix) -> None:
    write_matrix(path, affinity.values, AFFINITY_MAGIC)


def load_affinity(path: str | Path, mode: str = "fusion") -> AffinityMatrix:
    return AffinityMatrix(read_matrix(path, AFFINITY_MAGIC), mode=mode)
