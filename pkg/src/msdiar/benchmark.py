"""Synthetic DER benchmark comparing single-scale, fusion, GAT and enhanced configurations.

Training and test sessions come from disjoint seed ranges so the GAT is
always scored on speakers it never saw.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .affinity import AffinityMatrix, build_fusion_affinity
from .clustering import ClusteringConfig, cluster, labels_to_turns
from .embeddings import SyntheticSessionSpec, synthesize_session
from .enhancement import AAConfig
from .gat import GatModel, build_gat_affinity
from .pipeline import PipelineConfig, enhanced_affinity
from .scoring import score
from .training import PairSet, TrainConfig, build_pairs, train

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    n_sessions: int = 20
    min_speakers: int = 3
    max_speakers: int = 5
    duration: float = 120.0
    noise: tuple[float, float, float] = (0.8, 0.5, 0.3)
    test_seed: int = 1000
    train_sessions: int = 2000
    train_duration: float = 40.0
    train_pairs_cap: int = 2
    train_seed: int = 5000
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=1e-3))
    eigen_threshold: float = 48
    aa: AAConfig = field(default_factory=lambda: AAConfig(iterations=10, temperature=20.0))
    aa_handoff: str = "refined"


def _session_spec(seed: int, n_speakers: int, duration: float, noise, sid: str) -> SyntheticSessionSpec:
    return SyntheticSessionSpec(num_speakers=n_speakers, noise=tuple(noise), duration=duration, seed=seed, session_id=sid)


def benchmark_sessions(cfg: BenchmarkConfig):
    out = []
    for k in range(cfg.n_sessions):
        seed = cfg.test_seed + k
        n = int(np.random.default_rng(seed).integers(cfg.min_speakers, cfg.max_speakers + 1))
        out.append(synthesize_session(_session_spec(seed, n, cfg.duration, cfg.noise, f"test{k:03d}")))
    return out


def train_benchmark_model(cfg: BenchmarkConfig) -> GatModel:
    parts = []
    for k in range(cfg.train_sessions):
        seed = cfg.train_seed + k
        n = int(np.random.default_rng(seed).integers(2, cfg.max_speakers + 1))
        emb_set, turns, _ = synthesize_session(_session_spec(seed, n, cfg.train_duration, cfg.noise, f"train{k:04d}"))
        parts.append(build_pairs(turns, emb_set, cfg.train_pairs_cap, seed=k))
    pairs = PairSet.concat(parts)
    log.info("benchmark training on %d pairs", len(pairs))
    return train(pairs, cfg.train)


def toy_pairs(n_pairs: int = 500, seed: int = 0) -> PairSet:
    """Balanced pairs from a two-speaker session with orthogonal centroids."""
    emb_set, turns, _ = synthesize_session(
        SyntheticSessionSpec(num_speakers=2, separation=90.0, duration=120.0, seed=seed, session_id="toy")
    )
    pairs = build_pairs(turns, emb_set, seed=seed)
    rng = np.random.default_rng(seed)
    pos, neg = np.flatnonzero(pairs.labels == 1), np.flatnonzero(pairs.labels == 0)
    n_pos = -(-n_pairs // 2)
    rows = np.sort(np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_pairs - n_pos, replace=False)]))
    return PairSet(pairs.tuples, pairs.index[rows], pairs.labels[rows])


def _der(emb_set, turns, affinity: AffinityMatrix, ccfg: ClusteringConfig) -> tuple[float, int]:
    asg = cluster(affinity, ccfg)
    hyp = labels_to_turns(emb_set.base_segments, asg.labels, gap_tolerance=emb_set.scales[0].shift)
    return score(turns, hyp).der, asg.num_speakers


def run_benchmark(cfg: BenchmarkConfig | None = None, model: GatModel | None = None) -> dict:
    """Mean DER per configuration over the test sessions.

    Returns a dict with ``der`` (config -> mean DER), ``per_session``
    (config -> list), ``count_error`` (config -> mean |k_hat - k|) and
    ``seconds``.
    """
    cfg = cfg or BenchmarkConfig()
    start = time.perf_counter()
    if model is None:
        model = train_benchmark_model(cfg)
    ccfg = ClusteringConfig(eigen_threshold=cfg.eigen_threshold)
    pcfg = PipelineConfig(aa=True, aa_config=cfg.aa, aa_handoff=cfg.aa_handoff, clustering=ccfg)
    names = ("scale_0.5", "scale_1.5", "fusion", "fusion+AA", "gat", "gat+AA")
    per: dict[str, list[float]] = {n: [] for n in names}
    count: dict[str, list[int]] = {n: [] for n in names}
    for emb_set, turns, _ in benchmark_sessions(cfg):
        n_true = len({t.speaker for t in turns})
        fusion = build_fusion_affinity(emb_set, (1 / 3, 1 / 3, 1 / 3))
        gat = build_gat_affinity(emb_set, model)
        affs = {
            "scale_0.5": build_fusion_affinity(emb_set, (1.0, 0.0, 0.0)),
            "scale_1.5": build_fusion_affinity(emb_set, (0.0, 0.0, 1.0)),
            "fusion": fusion,
            "fusion+AA": enhanced_affinity(emb_set, fusion, replace(pcfg, mode="fusion"), None),
            "gat": gat,
            "gat+AA": enhanced_affinity(emb_set, gat, replace(pcfg, mode="gat"), model),
        }
        for name, aff in affs.items():
            der, k = _der(emb_set, turns, aff, ccfg)
            per[name].append(der)
            count[name].append(abs(k - n_true))
    return {
        "der": {n: float(np.mean(v)) for n, v in per.items()},
        "per_session": per,
        "count_error": {n: float(np.mean(v)) for n, v in count.items()},
        "seconds": time.perf_counter() - start,
    }


def ordering_checks(der: dict[str, float]) -> dict[str, bool]:
    return {
        "scale_1.5 < scale_0.5": der["scale_1.5"] < der["scale_0.5"],
        "gat < fusion": der["gat"] < der["fusion"],
        "gat+AA <= gat": der["gat+AA"] <= der["gat"],
    }
