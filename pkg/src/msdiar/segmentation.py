"""Speech-region smoothing and multi-scale uniform segmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Decimal places kept on segment boundaries (microseconds).
_TIME_DECIMALS = 6
_EPS = 1e-9


@dataclass(frozen=True)
class SpeechRegion:
    onset: float
    offset: float

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise ValueError(f"non-finite region bounds: {self.onset}, {self.offset}")
        if self.onset < 0:
            raise ValueError(f"region onset must be non-negative, got {self.onset}")
        if self.offset <= self.onset:
            raise ValueError(f"region offset {self.offset} must exceed onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class ScaleConfig:
    window: float
    shift: float
    is_base: bool = False

    def __post_init__(self):
        if not (0 < self.shift <= self.window):
            raise ValueError(f"need 0 < shift <= window, got shift={self.shift} window={self.window}")

    @property
    def name(self) -> str:
        return f"{self.window:g}"


DEFAULT_SCALES = (
    ScaleConfig(0.5, 0.25, is_base=True),
    ScaleConfig(1.0, 0.25),
    ScaleConfig(1.5, 0.16),
)


def validate_scale_set(scales: Sequence[ScaleConfig]) -> None:
    """Check that exactly one scale is the base and that it has the smallest window."""
    if not scales:
        raise ValueError("empty scale set")
    bases = [i for i, s in enumerate(scales) if s.is_base]
    if len(bases) != 1:
        raise ValueError(f"exactly one base scale required, found {len(bases)}")
    if bases[0] != 0:
        raise ValueError("the base scale must be listed first")
    smallest = min(s.window for s in scales)
    if scales[0].window != smallest:
        raise ValueError("the base scale must have the smallest window")


@dataclass(frozen=True)
class Segment:
    scale_index: int
    onset: float
    offset: float
    region: int = 0

    @property
    def midpoint(self) -> float:
        return (self.onset + self.offset) / 2

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def validate_regions(regions: Sequence[SpeechRegion]) -> None:
    for prev, cur in zip(regions, regions[1:]):
        if cur.onset < prev.offset:
            raise ValueError(
                f"regions must be sorted and non-overlapping: "
                f"[{prev.onset}, {prev.offset}] then [{cur.onset}, {cur.offset}]"
            )


def smooth_sad(
    frame_probs: Sequence[float],
    frame_rate: float = 100.0,
    window: float = 0.5,
    onset_ratio: float = 0.7,
    offset_ratio: float = 0.7,
) -> list[SpeechRegion]:
    """Turn framewise speech probabilities into speech regions.

    A frame counts as speech when its probability is at least 0.5. Scanning
    forward, a region opens once more than ``onset_ratio`` of the trailing
    window is speech and closes once more than ``offset_ratio`` of it is
    non-speech. The opening boundary is placed on the first speech frame of
    the triggering window and the closing boundary after the last speech
    frame preceding the closure, so clean step inputs are recovered exactly.

    Parameters
    ----------
    frame_probs : sequence of float
        Speech probabilities in [0, 1] at ``frame_rate`` frames per second.
    frame_rate : float
        Frames per second.
    window : float
        Trailing window length in seconds.
    onset_ratio, offset_ratio : float
        Fractions in (0, 1].

    Returns
    -------
    list of SpeechRegion
        Sorted, non-overlapping regions.
    """
    if frame_rate <= 0:
        raise ValueError("frame_rate must be positive")
    for name, r in (("onset_ratio", onset_ratio), ("offset_ratio", offset_ratio)):
        if not (0 < r <= 1):
            raise ValueError(f"{name} must be in (0, 1], got {r}")
    probs = np.asarray(frame_probs, dtype=np.float64).ravel()
    if probs.size == 0:
        return []
    if not np.all(np.isfinite(probs)):
        raise ValueError("frame probabilities must be finite")
    if probs.min() < 0 or probs.max() > 1:
        raise ValueError("frame probabilities must lie in [0, 1]")

    speech = probs >= 0.5
    n = speech.size
    w = min(max(1, int(round(window * frame_rate))), n)
    counts = np.concatenate(([0], np.cumsum(speech, dtype=np.int64)))

    # (onset_frame, offset_frame) with offset exclusive
    spans: list[list[int]] = []
    active = False
    for t in range(w - 1, n):
        start = t - w + 1
        n_speech = counts[t + 1] - counts[start]
        if not active:
            if n_speech / w > onset_ratio:
                first = start + int(np.argmax(speech[start : t + 1]))
                if spans and first <= spans[-1][1]:
                    # reopen: the new evidence overlaps the previous closure
                    active = True
                    continue
                spans.append([first, n])
                active = True
        else:
            if (w - n_speech) / w > offset_ratio:
                window_speech = np.flatnonzero(speech[start : t + 1])
                end = start + int(window_speech[-1]) + 1 if window_speech.size else start
                spans[-1][1] = max(end, spans[-1][0] + 1)
                active = False
    if active:
        spans[-1][1] = n

    return [SpeechRegion(round(a / frame_rate, _TIME_DECIMALS), round(b / frame_rate, _TIME_DECIMALS)) for a, b in spans]


def segment_uniform(
    regions: Sequence[SpeechRegion], scale: ScaleConfig, scale_index: int = 0
) -> list[Segment]:
    """Split each region into windows of ``scale.window`` every ``scale.shift`` seconds.

    A region shorter than the window yields a single segment covering it. If
    the last full window stops short of the region offset, a clipped segment
    from the next window onset to the offset is added, provided it is at
    least one shift long; shorter tails are dropped.
    """
    validate_regions(regions)
    out: list[Segment] = []
    win, shift = scale.window, scale.shift
    for r_idx, region in enumerate(regions):
        dur = region.duration
        if dur < win - _EPS:
            out.append(Segment(scale_index, region.onset, region.offset, r_idx))
            continue
        n_full = int(math.floor((dur - win) / shift + _EPS)) + 1
        for k in range(n_full):
            on = round(region.onset + k * shift, _TIME_DECIMALS)
            off = round(on + win, _TIME_DECIMALS)
            out.append(Segment(scale_index, on, min(off, region.offset), r_idx))
        last_end = region.onset + (n_full - 1) * shift + win
        on = round(region.onset + n_full * shift, _TIME_DECIMALS)
        if region.offset - last_end > _EPS and region.offset - on >= shift - _EPS:
            out.append(Segment(scale_index, on, region.offset, r_idx))
    return out


def segment_multiscale(
    regions: Sequence[SpeechRegion], scales: Sequence[ScaleConfig] = DEFAULT_SCALES
) -> list[list[Segment]]:
    validate_scale_set(scales)
    return [segment_uniform(regions, s, i) for i, s in enumerate(scales)]


def build_scale_mapping(base: Sequence[Segment], others: Sequence[Sequence[Segment]]) -> np.ndarray:
    """Map every base segment to the closest-midpoint segment of each other scale.

    Candidates are restricted to the base segment's own speech region; ties
    go to the earlier segment.

    Returns
    -------
    ndarray of int, shape (len(base), 1 + len(others))
        Column 0 is the identity over base segments; column ``s`` holds
        indices into ``others[s - 1]``.
    """
    mapping = np.empty((len(base), 1 + len(others)), dtype=np.int64)
    mapping[:, 0] = np.arange(len(base))
    if not base:
        return mapping
    base_mid = np.array([s.midpoint for s in base])
    base_reg = np.array([s.region for s in base])
    for col, segs in enumerate(others, start=1):
        if not segs:
            raise ValueError(f"scale {col} has no segments")
        mids = np.array([s.midpoint for s in segs])
        regs = np.array([s.region for s in segs])
        for region in np.unique(base_reg):
            rows = np.flatnonzero(base_reg == region)
            cand = np.flatnonzero(regs == region)
            if cand.size == 0:
                raise ValueError(f"scale {col} has no segment in region {region}")
            dist = np.abs(base_mid[rows, None] - mids[None, cand])
            # argmin returns the first minimum, i.e. the earlier segment
            mapping[rows, col] = cand[np.argmin(dist, axis=1)]
    return mapping


def read_regions(path: str | Path) -> list[SpeechRegion]:
    """Read the two-column ``onset offset`` text format."""
    regions = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        onset, offset = line.split()[:2]
        regions.append(SpeechRegion(float(onset), float(offset)))
    validate_regions(regions)
    return regions


def write_regions(path: str | Path, regions: Iterable[SpeechRegion]) -> None:
    lines = [f"{r.onset:.3f} {r.offset:.3f}\n" for r in regions]
    Path(path).write_text("".join(lines))


def regions_from_turns(turns) -> list[SpeechRegion]:
    """Union of reference speaker turns, used as oracle speech regions."""
    spans = sorted((t.onset, t.offset) for t in turns)
    merged: list[list[float]] = []
    for on, off in spans:
        if merged and on <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], off)
        else:
            merged.append([on, off])
    return [SpeechRegion(on, off) for on, off in merged]
