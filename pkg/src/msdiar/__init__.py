"""Multi-scale speaker diarization back-end: affinity construction, refinement, clustering and scoring."""

__version__ = "0.1.0"
