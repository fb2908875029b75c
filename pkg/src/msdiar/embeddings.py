"""Multi-scale embedding sets: validation, on-disk format and synthetic sessions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .matrix_io import EMBEDDING_MAGIC, read_matrix, write_matrix
from .rttm import Turn
from .segmentation import (
    DEFAULT_SCALES,
    ScaleConfig,
    Segment,
    SpeechRegion,
    build_scale_mapping,
    regions_from_turns,
    segment_multiscale,
    validate_scale_set,
)

EMBED_DIM = 256


def normalize_rows(x: np.ndarray, what: str = "embedding") -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = np.flatnonzero(norms.ravel() == 0)
    if bad.size:
        raise ValueError(f"zero-norm {what} row {int(bad[0])}")
    return x / norms


@dataclass
class MultiScaleEmbeddingSet:
    """Per-scale embedding matrices aligned to per-scale segment lists.

    ``mapping[i, s]`` is the row of scale ``s`` whose midpoint is closest to
    base segment ``i``; column 0 is the identity.
    """

    scales: tuple[ScaleConfig, ...]
    segments: list[list[Segment]]
    embeddings: list[np.ndarray]
    mapping: np.ndarray
    session_id: str = "session"

    def __post_init__(self):
        validate_scale_set(self.scales)
        if not (len(self.scales) == len(self.segments) == len(self.embeddings)):
            raise ValueError("scales, segments and embeddings must have the same length")
        dims = set()
        for scale, segs, emb in zip(self.scales, self.segments, self.embeddings):
            if emb.ndim != 2 or emb.shape[0] != len(segs):
                raise ValueError(
                    f"scale {scale.name}: {emb.shape[0] if emb.ndim == 2 else '?'} embedding rows "
                    f"for {len(segs)} segments"
                )
            if not np.all(np.isfinite(emb)):
                raise ValueError(f"scale {scale.name}: non-finite embedding values")
            dims.add(emb.shape[1])
        if len(dims) > 1:
            raise ValueError(f"embedding dimension differs across scales: {sorted(dims)}")
        if self.mapping.shape != (len(self.segments[0]), len(self.scales)):
            raise ValueError("mapping shape does not match base segments x scales")

    @property
    def num_segments(self) -> int:
        return len(self.segments[0])

    @property
    def dim(self) -> int:
        return self.embeddings[0].shape[1]

    @property
    def base_segments(self) -> list[Segment]:
        return self.segments[0]

    def multiscale(self, i: int) -> np.ndarray:
        """The multi-scale tuple of base segment ``i`` as an (n_scales, d) array."""
        return np.stack([emb[self.mapping[i, s]] for s, emb in enumerate(self.embeddings)])

    def stacked(self) -> np.ndarray:
        """All multi-scale tuples, shape (L, n_scales, d)."""
        return np.stack([emb[self.mapping[:, s]] for s, emb in enumerate(self.embeddings)], axis=1)

    def subset_scales(self, keep: Sequence[int]) -> "MultiScaleEmbeddingSet":
        return MultiScaleEmbeddingSet(
            tuple(self.scales[k] for k in keep),
            [self.segments[k] for k in keep],
            [self.embeddings[k] for k in keep],
            self.mapping[:, list(keep)],
            self.session_id,
        )


def build_embedding_set(
    segments: list[list[Segment]],
    embeddings: list[np.ndarray],
    scales: Sequence[ScaleConfig] = DEFAULT_SCALES,
    session_id: str = "session",
    normalize: bool = True,
) -> MultiScaleEmbeddingSet:
    embs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if normalize:
        embs = [normalize_rows(e, f"scale {s.name} embedding") for e, s in zip(embs, scales)]
    mapping = build_scale_mapping(segments[0], segments[1:])
    return MultiScaleEmbeddingSet(tuple(scales), segments, embs, mapping, session_id)


def scale_filename(scale: ScaleConfig) -> str:
    return f"scale_{scale.name}"


def save_embeddings(directory: str | Path, emb_set: MultiScaleEmbeddingSet) -> None:
    """Write one ``.mseb`` matrix plus a JSON sidecar of segment times per scale."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scale, segs, emb in zip(emb_set.scales, emb_set.segments, emb_set.embeddings):
        stem = scale_filename(scale)
        write_matrix(directory / f"{stem}.mseb", emb, EMBEDDING_MAGIC)
        sidecar = {
            "session": emb_set.session_id,
            "window": scale.window,
            "shift": scale.shift,
            "segments": [[s.onset, s.offset] for s in segs],
        }
        (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=1) + "\n")


def _infer_regions(spans: list[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for on, off in sorted(spans):
        if merged and on <= merged[-1][1] + 1e-9:
            merged[-1][1] = max(merged[-1][1], off)
        else:
            merged.append([on, off])
    return [(a, b) for a, b in merged]


def load_embeddings(
    directory: str | Path,
    scales: Sequence[ScaleConfig] = DEFAULT_SCALES,
    dim: int = EMBED_DIM,
) -> MultiScaleEmbeddingSet:
    """Load and validate a session directory written by :func:`save_embeddings`.

    Rows are unit-normalized. Speech regions are recovered as the union of the
    base-scale segment spans.
    """
    directory = Path(directory)
    validate_scale_set(scales)
    spans_per_scale = []
    matrices = []
    session_id = directory.name
    for scale in scales:
        stem = scale_filename(scale)
        mat_path, side_path = directory / f"{stem}.mseb", directory / f"{stem}.json"
        if not mat_path.exists() or not side_path.exists():
            raise FileNotFoundError(f"embedding_store: scale {scale.name} missing in {directory}")
        matrix = read_matrix(mat_path, EMBEDDING_MAGIC)
        sidecar = json.loads(side_path.read_text())
        session_id = sidecar.get("session", session_id)
        spans = [(float(a), float(b)) for a, b in sidecar["segments"]]
        if matrix.shape[1] != dim:
            raise ValueError(f"embedding_store: scale {scale.name} has dimension {matrix.shape[1]}, expected {dim}")
        if matrix.shape[0] != len(spans):
            raise ValueError(
                f"embedding_store: scale {scale.name} has {matrix.shape[0]} rows "
                f"but {len(spans)} segments"
            )
        if not np.all(np.isfinite(matrix)):
            raise ValueError(f"embedding_store: scale {scale.name} contains non-finite values")
        spans_per_scale.append(spans)
        matrices.append(matrix)

    regions = _infer_regions(spans_per_scale[0])
    starts = np.array([r[0] for r in regions])

    def region_of(on: float) -> int:
        return max(0, int(np.searchsorted(starts, on + 1e-9, side="right")) - 1)

    segments = [
        [Segment(s_idx, on, off, region_of(on)) for on, off in spans]
        for s_idx, spans in enumerate(spans_per_scale)
    ]
    return build_embedding_set(segments, matrices, scales, session_id)


# ---------------------------------------------------------------------------
# Synthetic sessions
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSessionSpec:
    """Parameters of a synthetic conversation.

    ``separation`` is the pairwise angle in degrees between speaker
    centroids. ``noise`` holds one level per scale; a segment at level
    ``sigma`` receives isotropic gaussian noise of expected norm
    ``sigma * noise_norm`` on top of its unit-norm speaker mixture.
    """

    num_speakers: int = 3
    separation: float = 90.0
    noise: tuple[float, ...] = (0.8, 0.5, 0.3)
    noise_norm: float = 4.0
    duration: float = 60.0
    mean_turn: float = 3.0
    min_turn: float = 0.5
    pause_prob: float = 0.25
    pause_range: tuple[float, float] = (0.3, 1.2)
    overlap_fraction: float = 0.0
    dim: int = EMBED_DIM
    seed: int = 0
    session_id: str = "synth"
    scales: tuple[ScaleConfig, ...] = field(default=DEFAULT_SCALES)

    def validate(self) -> None:
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if len(self.noise) != len(self.scales):
            raise ValueError("one noise value per scale required")
        if any(n < 0 for n in self.noise) or self.noise_norm < 0:
            raise ValueError("noise must be non-negative")
        if any(b > a for a, b in zip(self.noise, self.noise[1:])):
            raise ValueError("noise must not increase with scale")
        if not (0 <= self.overlap_fraction < 1):
            raise ValueError("overlap_fraction must be in [0, 1)")
        if self.mean_turn < self.min_turn or self.min_turn <= 0:
            raise ValueError("need 0 < min_turn <= mean_turn")
        validate_scale_set(self.scales)


def equiangular_centroids(k: int, angle_deg: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` unit vectors in R^dim with every pairwise angle equal to ``angle_deg``.

    Feasible iff the pairwise cosine is at least -1/(k-1) and k <= dim.
    """
    if k == 1:
        v = rng.standard_normal(dim)
        return (v / np.linalg.norm(v))[None, :]
    if not (0 < angle_deg <= 180):
        raise ValueError(f"separation must be in (0, 180] degrees, got {angle_deg}")
    rho = math.cos(math.radians(angle_deg))
    if rho < -1 / (k - 1) - 1e-12:
        raise ValueError(
            f"separation {angle_deg} deg is infeasible for {k} speakers "
            f"(max {math.degrees(math.acos(-1 / (k - 1))):.2f} deg)"
        )
    if k > dim:
        raise ValueError(f"cannot place {k} speakers in {dim} dimensions")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, k)))
    basis = basis.T
    # u_i = q_i - t * mean(q); t chosen so that cos(u_i, u_j) = rho
    z = max(rho / (1 - rho), -1 / k)
    t = 1 - math.sqrt(1 + k * z)
    u = basis - t * basis.mean(axis=0, keepdims=True)
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _synth_turns(spec: SyntheticSessionSpec, rng: np.random.Generator) -> list[Turn]:
    k = spec.num_speakers
    order = list(rng.permutation(k))
    turns: list[Turn] = []
    t = 0.0
    prev = -1
    while t < spec.duration:
        if order:
            spk = order.pop(0)
        else:
            choices = [s for s in range(k) if s != prev] or [prev]
            spk = choices[int(rng.integers(len(choices)))]
        length = spec.min_turn + rng.exponential(spec.mean_turn - spec.min_turn)
        onset = t
        if turns and spec.overlap_fraction > 0 and rng.random() < spec.overlap_fraction:
            onset = max(turns[-1].onset + 0.01, t - rng.uniform(0.2, 1.0))
        offset = min(onset + length, spec.duration)
        onset, offset = round(onset, 2), round(offset, 2)
        if offset - onset >= 0.01:
            turns.append(Turn(onset, offset, f"spk{spk}"))
        t = offset
        if rng.random() < spec.pause_prob:
            t = round(t + rng.uniform(*spec.pause_range), 2)
        prev = spk
    return turns


def _speaker_weights(seg: Segment, turns: Sequence[Turn], k: int) -> np.ndarray:
    w = np.zeros(k)
    for turn in turns:
        ov = min(seg.offset, turn.offset) - max(seg.onset, turn.onset)
        if ov > 0:
            w[int(turn.speaker[3:])] += ov
    return w


def synthesize_session(
    spec: SyntheticSessionSpec,
) -> tuple[MultiScaleEmbeddingSet, list[Turn], list[SpeechRegion]]:
    """Generate embeddings, reference turns and speech regions for one session.

    Each segment embedding is the unit-normalized sum of its speaker mixture
    (centroids weighted by overlap time) and gaussian noise whose expected
    norm is the scale's noise level times ``noise_norm``. Segments straddling
    a speaker change therefore blend speakers, more so at larger scales.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centroids = equiangular_centroids(spec.num_speakers, spec.separation, spec.dim, rng)
    turns = _synth_turns(spec, rng)
    regions = regions_from_turns(turns)
    segments = segment_multiscale(regions, spec.scales)

    matrices = []
    for s_idx, segs in enumerate(segments):
        weights = np.stack([_speaker_weights(seg, turns, spec.num_speakers) for seg in segs])
        weights /= weights.sum(axis=1, keepdims=True)
        clean = weights @ centroids
        noise = rng.standard_normal(clean.shape) * (spec.noise[s_idx] * spec.noise_norm / math.sqrt(spec.dim))
        matrices.append(normalize_rows(clean + noise))

    emb_set = build_embedding_set(segments, matrices, spec.scales, spec.session_id, normalize=False)
    return emb_set, turns, regions
