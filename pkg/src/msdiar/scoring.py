"""Diarization error rate with false alarm / miss / confusion breakdown.

Scoring is exact interval arithmetic: the timeline is cut at every
reference, hypothesis and collar boundary and each elementary interval is
scored from the number of active reference and hypothesis speakers.
Overlapping reference speech is scored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rttm import Turn


@dataclass(frozen=True)
class DERReport:
    der: float
    fa: float
    ms: float
    sc: float
    scored_time: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"der": self.der, "fa": self.fa, "ms": self.ms, "sc": self.sc, "scored_time": self.scored_time}


def _union(spans):
    merged: list[list[float]] = []
    for lo, hi in sorted(spans):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def _by_speaker(turns: Sequence[Turn]) -> dict[str, list[list[float]]]:
    spk: dict[str, list[tuple[float, float]]] = {}
    for t in turns:
        spk.setdefault(t.speaker, []).append((t.onset, t.offset))
    return {s: _union(v) for s, v in sorted(spk.items())}


def _collar_zones(ref: Sequence[Turn], collar: float) -> list[list[float]]:
    if collar <= 0:
        return []
    zones = []
    for t in ref:
        zones.append((t.onset - collar, t.onset + collar))
        zones.append((t.offset - collar, t.offset + collar))
    return _union(zones)


def _activity(intervals: list[list[float]], starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Boolean activity of one speaker over elementary intervals (starts[k], ends[k])."""
    active = np.zeros(starts.size, dtype=bool)
    mids = (starts + ends) / 2
    for lo, hi in intervals:
        active |= (mids > lo) & (mids < hi)
    return active


def _timeline(ref_spk, hyp_spk, zones):
    cuts = {0.0}
    for group in (ref_spk, hyp_spk):
        for spans in group.values():
            for lo, hi in spans:
                cuts.update((lo, hi))
    for lo, hi in zones:
        cuts.update((lo, hi))
    cuts = np.array(sorted(c for c in cuts if c >= 0))
    starts, ends = cuts[:-1], cuts[1:]
    keep = ends > starts
    starts, ends = starts[keep], ends[keep]
    scored = ~_activity(zones, starts, ends)
    return starts[scored], ends[scored]


def overlap_matrix(ref: Sequence[Turn], hyp: Sequence[Turn], collar: float = 0.0):
    """Scored co-activity time between each reference and hypothesis speaker."""
    ref_spk, hyp_spk = _by_speaker(ref), _by_speaker(hyp)
    starts, ends = _timeline(ref_spk, hyp_spk, _collar_zones(ref, collar))
    dur = ends - starts
    r_act = np.zeros((len(ref_spk), starts.size), dtype=bool)
    h_act = np.zeros((len(hyp_spk), starts.size), dtype=bool)
    for k, v in enumerate(ref_spk.values()):
        r_act[k] = _activity(v, starts, ends)
    for k, v in enumerate(hyp_spk.values()):
        h_act[k] = _activity(v, starts, ends)
    ov = (r_act[:, None, :] & h_act[None, :, :]) @ dur if dur.size else np.zeros((len(ref_spk), len(hyp_spk)))
    return list(ref_spk), list(hyp_spk), ov, (starts, ends, r_act, h_act)


def optimal_mapping(ref: Sequence[Turn], hyp: Sequence[Turn], collar: float = 0.0) -> dict[str, str]:
    """One-to-one hypothesis -> reference speaker mapping maximizing total overlap."""
    ref_ids, hyp_ids, ov, _ = overlap_matrix(ref, hyp, collar)
    return _assign(ref_ids, hyp_ids, ov)


def _assign(ref_ids, hyp_ids, ov) -> dict[str, str]:
    if not ref_ids or not hyp_ids:
        return {}
    rows, cols = linear_sum_assignment(ov, maximize=True)
    return {hyp_ids[c]: ref_ids[r] for r, c in zip(rows, cols) if ov[r, c] > 0}


def assign_max_overlap(ov: np.ndarray) -> list[tuple[int, int]]:
    """(row, col) pairs of a maximum-weight one-to-one assignment of ``ov``."""
    rows, cols = linear_sum_assignment(np.asarray(ov, dtype=np.float64), maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def score(ref: Sequence[Turn], hyp: Sequence[Turn], collar: float = 0.0) -> DERReport:
    """DER, FA, MS and SC as percentages of scored reference speech time.

    ``collar`` seconds on each side of every reference boundary are excluded.
    """
    if collar < 0:
        raise ValueError("collar must be non-negative")
    if not ref:
        raise ValueError("empty reference: DER is undefined")
    ref_ids, hyp_ids, ov, (starts, ends, r_act, h_act) = overlap_matrix(ref, hyp, collar)
    mapping = _assign(ref_ids, hyp_ids, ov)
    dur = ends - starts
    n_ref = r_act.sum(axis=0)
    n_hyp = h_act.sum(axis=0)
    correct = np.zeros_like(n_ref)
    r_index = {r: k for k, r in enumerate(ref_ids)}
    for h_k, h in enumerate(hyp_ids):
        if h in mapping:
            correct = correct + (h_act[h_k] & r_act[r_index[mapping[h]]])
    total = float(n_ref @ dur)
    if total <= 0:
        raise ValueError("no scored reference speech: DER is undefined")
    miss = float(np.maximum(n_ref - n_hyp, 0) @ dur)
    fa = float(np.maximum(n_hyp - n_ref, 0) @ dur)
    conf = float((np.minimum(n_ref, n_hyp) - correct) @ dur)
    fa_p, ms_p, sc_p = 100 * fa / total, 100 * miss / total, 100 * conf / total
    return DERReport(fa_p + ms_p + sc_p, fa_p, ms_p, sc_p, total)


def score_sessions(
    refs: Mapping[str, Sequence[Turn]], hyps: Mapping[str, Sequence[Turn]], collar: float = 0.0
) -> tuple[DERReport, dict[str, DERReport]]:
    """Per-session reports and a time-weighted aggregate, reduced in session-id order."""
    per = {}
    fa = ms = sc = total = 0.0
    for sid in sorted(refs):
        rep = score(refs[sid], hyps.get(sid, []), collar)
        per[sid] = rep
        fa += rep.fa * rep.scored_time
        ms += rep.ms * rep.scored_time
        sc += rep.sc * rep.scored_time
        total += rep.scored_time
    if total == 0:
        raise ValueError("no scored reference speech")
    agg = DERReport((fa + ms + sc) / total, fa / total, ms / total, sc / total, total)
    return agg, per
