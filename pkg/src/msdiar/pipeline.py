"""End-to-end diarization from multi-scale embeddings to speaker turns."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .affinity import DEFAULT_WEIGHTS, AffinityMatrix, build_fusion_affinity, check_weights, cosine_matrix
from .clustering import PRESET_THRESHOLDS, ClusteringConfig, cluster, labels_to_turns
from .embeddings import MultiScaleEmbeddingSet, normalize_rows
from .enhancement import PRESET_ITERATIONS, AAConfig, enhance, substitute_base_embeddings
from .gat import GatModel, build_gat_affinity, load_model
from .rttm import Turn
from .scoring import DERReport, score
from .segmentation import DEFAULT_SCALES, ScaleConfig

PRESET_COLLARS = {"dihard1": 0.0, "dihard2": 0.0, "dihard3": 0.0, "voxconverse": 0.25}
HANDOFFS = ("refined", "blend", "regat")


class StageError(RuntimeError):
    def __init__(self, stage: str, session: str, message: str):
        super().__init__(f"{stage}: {message} (session {session})")
        self.stage = stage
        self.session = session


@dataclass
class PipelineConfig:
    """Everything needed to reproduce a diarization run.

    ``aa_handoff`` selects what clustering sees after enhancement:
    ``refined`` uses the cosine affinity of the refined embeddings,
    ``blend`` averages it with the pre-enhancement affinity, and ``regat``
    (gat mode only) re-scores the refined embeddings with the GAT.
    """

    scales: tuple[ScaleConfig, ...] = DEFAULT_SCALES
    mode: str = "fusion"
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    model_path: str | None = None
    aa: bool = False
    aa_config: AAConfig = field(default_factory=AAConfig)
    aa_handoff: str = "refined"
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    collar: float = 0.0
    seed: int = 0
    workers: int | None = None

    def validate(self) -> None:
        if self.mode not in ("fusion", "gat"):
            raise ValueError(f"unknown affinity mode {self.mode!r}")
        if self.aa_handoff not in HANDOFFS:
            raise ValueError(f"unknown aa_handoff {self.aa_handoff!r}")
        if self.aa_handoff == "regat" and self.mode != "gat":
            raise ValueError("aa_handoff 'regat' requires gat mode")
        check_weights(self.weights, len(self.scales))
        if self.collar < 0:
            raise ValueError("collar must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = [asdict(s) for s in self.scales]
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "scales" in d:
            d["scales"] = tuple(ScaleConfig(**s) for s in d["scales"])
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        if "aa_config" in d:
            d["aa_config"] = AAConfig(**d["aa_config"])
        if "clustering" in d:
            d["clustering"] = ClusteringConfig(**d["clustering"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_preset(self, name: str) -> "PipelineConfig":
        if name not in PRESET_THRESHOLDS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_THRESHOLDS)}")
        return replace(
            self,
            aa_config=replace(self.aa_config, iterations=PRESET_ITERATIONS[name]),
            clustering=replace(self.clustering, eigen_threshold=PRESET_THRESHOLDS[name]),
            collar=PRESET_COLLARS[name],
        )


@dataclass
class DiarizationResult:
    session_id: str
    turns: list[Turn]
    labels: np.ndarray
    num_speakers: int
    affinity: AffinityMatrix
    report: DERReport | None = None


def _stage(name: str, session: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, FileNotFoundError, FloatingPointError) as err:
        raise StageError(name, session, str(err)) from err


def compute_affinity(emb_set: MultiScaleEmbeddingSet, config: PipelineConfig, model: GatModel | None = None) -> AffinityMatrix:
    sid = emb_set.session_id
    if config.mode == "fusion":
        return _stage("affinity_fusion", sid, build_fusion_affinity, emb_set, config.weights)
    if model is None:
        if config.model_path is None:
            raise StageError("gat", sid, "gat mode needs a model")
        model = _stage("gat", sid, load_model, config.model_path)
    return _stage("gat", sid, build_gat_affinity, emb_set, model, config.workers)


def enhanced_affinity(emb_set, affinity, config, model) -> AffinityMatrix:
    x = substitute_base_embeddings(emb_set)
    refined = enhance(x, affinity, config.aa_config)
    if config.aa_handoff == "regat":
        unit = normalize_rows(refined, "refined embedding")
        tuples = np.repeat(unit[:, None, :], len(emb_set.scales), axis=1)
        regat_set = MultiScaleEmbeddingSet(
            emb_set.scales,
            [emb_set.base_segments] * len(emb_set.scales),
            [tuples[:, s] for s in range(len(emb_set.scales))],
            np.repeat(np.arange(emb_set.num_segments)[:, None], len(emb_set.scales), axis=1),
            emb_set.session_id,
        )
        return build_gat_affinity(regat_set, model, config.workers)
    c = cosine_matrix(refined)
    c = (c + c.T) / 2
    if config.aa_handoff == "blend":
        c = (c + affinity.values) / 2
    return AffinityMatrix(c, mode=affinity.mode)


def run_diarize(
    emb_set: MultiScaleEmbeddingSet,
    config: PipelineConfig,
    reference: Sequence[Turn] | None = None,
    model: GatModel | None = None,
) -> DiarizationResult:
    """Affinity (fusion or GAT) -> optional enhancement -> spectral clustering -> turns -> optional scoring."""
    config.validate()
    sid = emb_set.session_id
    if len(emb_set.scales) != len(config.scales):
        raise StageError("embedding_store", sid, "scale count differs from the configuration")
    affinity = compute_affinity(emb_set, config, model)
    if config.aa:
        if config.aa_handoff == "regat" and model is None:
            model = _stage("gat", sid, load_model, config.model_path)
        affinity = _stage("enhancement", sid, enhanced_affinity, emb_set, affinity, config, model)
    assignment = _stage("spectral_clustering", sid, cluster, affinity, config.clustering)
    turns = labels_to_turns(emb_set.base_segments, assignment.labels, gap_tolerance=config.scales[0].shift)
    report = _stage("scoring", sid, score, reference, turns, config.collar) if reference else None
    return DiarizationResult(sid, turns, assignment.labels, assignment.num_speakers, affinity, report)


def run_manifest(config: PipelineConfig, sessions: Sequence[str]) -> dict:
    return {
        "config_sha256": config.digest(),
        "seed": config.seed,
        "sessions": list(sessions),
        "versions": {
            "msdiar": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "config": config.to_dict(),
    }
