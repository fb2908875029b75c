"""Attention-based refinement of base-scale embeddings driven by a multi-scale affinity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affinity import AffinityMatrix
from .embeddings import MultiScaleEmbeddingSet

# repetitions per dataset preset
PRESET_ITERATIONS = {"dihard1": 10, "dihard2": 20, "dihard3": 10, "voxconverse": 15}


@dataclass
class AAConfig:
    iterations: int = 10
    temperature: float = 0.30

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def substitute_base_embeddings(emb_set: MultiScaleEmbeddingSet) -> np.ndarray:
    """Base-segment embeddings replaced by their closest-midpoint counterpart at the largest usable scale.

    A larger scale is usable for a base segment when its speech region is at
    least that scale's window long; otherwise the next smaller scale is
    tried, ending with the base embedding itself.
    """
    base = emb_set.base_segments
    spans: dict[int, list[float]] = {}
    for seg in base:
        lo_hi = spans.setdefault(seg.region, [seg.onset, seg.offset])
        lo_hi[0] = min(lo_hi[0], seg.onset)
        lo_hi[1] = max(lo_hi[1], seg.offset)
    region_len = {r: hi - lo for r, (lo, hi) in spans.items()}

    out = np.empty((emb_set.num_segments, emb_set.dim))
    for i, seg in enumerate(base):
        for s in range(len(emb_set.scales) - 1, -1, -1):
            if s == 0 or region_len[seg.region] >= emb_set.scales[s].window - 1e-9:
                out[i] = emb_set.embeddings[s][emb_set.mapping[i, s]]
                break
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _cosine(x: np.ndarray, iteration: int) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"iteration {iteration}: row {int(zero[0])} of X is zero, cosine undefined")
    u = x / norms[:, None]
    return u @ u.T


def enhance(x: np.ndarray, affinity: AffinityMatrix | np.ndarray, cfg: AAConfig = AAConfig(), trace=None) -> np.ndarray:
    """Refine embeddings with blended attention maps.

    For i = 0..N-1: C is the row cosine of the current X, A1 = softmax(M * tau)
    and A2 = softmax(C * tau) row-wise, A = ((N - i) A1 + i A2) / N, X <- A X.
    Rows of X are not renormalized between iterations.

    ``trace``, if given, is called as ``trace(i, A)`` at every iteration.
    """
    m = affinity.values if isinstance(affinity, AffinityMatrix) else np.asarray(affinity, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if m.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"affinity {m.shape} does not match {x.shape[0]} embeddings")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    n, tau = cfg.iterations, cfg.temperature
    a1 = softmax_rows(m * tau)
    for i in range(n):
        c = _cosine(x, i)
        a2 = softmax_rows(c * tau)
        a = ((n - i) * a1 + i * a2) / n
        if trace is not None:
            trace(i, a)
        x = a @ x
    return x
