"""Pair extraction from reference turns and GAT training with balanced batches."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterator, Sequence, TextIO

import numpy as np
from scipy.stats import rankdata

from .embeddings import MultiScaleEmbeddingSet
from .gat import DEFAULT_DIMS, GatModel, backward, bce_with_logits, forward, init_model, pair_nodes
from .rttm import Turn

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dims: tuple[int, ...] = DEFAULT_DIMS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class PairSet:
    """Training pairs stored as indices into a shared array of multi-scale tuples.

    ``tuples`` has shape (N, n_scales, d); ``index[k]`` names the two tuples of
    pair ``k`` and ``labels[k]`` is 1 for same-speaker, 0 otherwise.
    """

    tuples: np.ndarray
    index: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.size

    def batch(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ij = self.index[rows]
        return self.tuples[ij[:, 0]], self.tuples[ij[:, 1]], self.labels[rows]

    @staticmethod
    def concat(parts: Sequence["PairSet"]) -> "PairSet":
        offsets = np.cumsum([0] + [p.tuples.shape[0] for p in parts[:-1]])
        return PairSet(
            np.concatenate([p.tuples for p in parts]),
            np.concatenate([p.index + off for p, off in zip(parts, offsets)]),
            np.concatenate([p.labels for p in parts]),
        )


def segment_speaker(onset: float, offset: float, turns: Sequence[Turn]) -> tuple[str | None, float]:
    """Majority speaker of an interval and the fraction of it not covered by that speaker alone.

    Time where the majority speaker overlaps another speaker, time of other
    speakers and non-speech all count towards the ambiguity.
    """
    dur = offset - onset
    per_spk: dict[str, list[tuple[float, float]]] = {}
    for t in turns:
        lo, hi = max(onset, t.onset), min(offset, t.offset)
        if hi > lo:
            per_spk.setdefault(t.speaker, []).append((lo, hi))
    if not per_spk:
        return None, 1.0

    def covered(spans):
        total, end = 0.0, -math.inf
        for lo, hi in sorted(spans):
            lo = max(lo, end)
            if hi > lo:
                total += hi - lo
                end = hi
        return total

    best = max(sorted(per_spk), key=lambda s: covered(per_spk[s]))
    others = [span for s, spans in per_spk.items() if s != best for span in spans]
    # clean time: covered by best and not by any other speaker
    own = sorted(per_spk[best])
    clean = covered(own) - _intersection(own, others)
    return best, 1.0 - clean / dur


def _intersection(a: list[tuple[float, float]], b: list[tuple[float, float]]) -> float:
    total = 0.0
    for lo_a, hi_a in _union(a):
        for lo_b, hi_b in _union(b):
            total += max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))
    return total


def _union(spans):
    merged: list[list[float]] = []
    for lo, hi in sorted(spans):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def label_tuples(
    turns: Sequence[Turn], emb_set: MultiScaleEmbeddingSet, max_ambiguity: float = 0.2
) -> list[str | None]:
    """Speaker of each base segment's multi-scale tuple, or None if any scale is ambiguous."""
    labels: list[str | None] = []
    for i in range(emb_set.num_segments):
        speakers = set()
        ok = True
        for s, segs in enumerate(emb_set.segments):
            seg = segs[emb_set.mapping[i, s]]
            spk, amb = segment_speaker(seg.onset, seg.offset, turns)
            if spk is None or amb > max_ambiguity:
                ok = False
                break
            speakers.add(spk)
        labels.append(speakers.pop() if ok and len(speakers) == 1 else None)
    return labels


def build_pairs(
    turns: Sequence[Turn],
    emb_set: MultiScaleEmbeddingSet,
    max_pairs_per_combination: int | None = None,
    max_ambiguity: float = 0.2,
    seed: int = 0,
) -> PairSet:
    """All same-speaker pairs and all cross-speaker pairs over unambiguous tuples.

    ``max_pairs_per_combination`` caps the pairs drawn for each speaker
    combination (each speaker with itself, and each two-speaker
    combination); the kept subset is sampled with ``seed``.
    """
    rng = np.random.default_rng(seed)
    labels = label_tuples(turns, emb_set, max_ambiguity)
    keep = [i for i, lab in enumerate(labels) if lab is not None]
    by_spk: dict[str, list[int]] = {}
    for pos, i in enumerate(keep):
        by_spk.setdefault(labels[i], []).append(pos)
    speakers = sorted(by_spk)
    if len(speakers) < 2:
        log.warning("session %s: fewer than two labelled speakers, no negative pairs", emb_set.session_id)

    def capped(pairs: np.ndarray) -> np.ndarray:
        if max_pairs_per_combination is not None and len(pairs) > max_pairs_per_combination:
            pairs = pairs[np.sort(rng.choice(len(pairs), max_pairs_per_combination, replace=False))]
        return pairs

    chunks, labs = [], []
    for spk in speakers:
        members = np.array(by_spk[spk])
        if members.size >= 2:
            iu, ju = np.triu_indices(members.size, 1)
            pos = capped(np.stack([members[iu], members[ju]], axis=1))
            chunks.append(pos)
            labs.append(np.ones(len(pos)))
    for a, b in combinations(speakers, 2):
        ma, mb = np.array(by_spk[a]), np.array(by_spk[b])
        neg = capped(np.stack(np.meshgrid(ma, mb, indexing="ij"), axis=-1).reshape(-1, 2))
        chunks.append(neg)
        labs.append(np.zeros(len(neg)))

    tuples = emb_set.stacked()[keep] if keep else np.zeros((0,) + emb_set.stacked().shape[1:])
    if not chunks:
        return PairSet(tuples, np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    return PairSet(tuples, np.concatenate(chunks).astype(np.int64), np.concatenate(labs))


def _cycled(pool: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` draws from ``pool``: concatenated shuffles, so no item repeats
    more than ceil(count / len(pool)) times."""
    reps = -(-count // pool.size)
    return np.concatenate([rng.permutation(pool) for _ in range(reps)])[:count]


def balanced_batches(
    labels: np.ndarray,
    batch_size: int,
    rng: np.random.Generator | int,
    num_batches: int | None = None,
) -> Iterator[np.ndarray]:
    """Yield index batches of ceil(b/2) positives and floor(b/2) negatives.

    One call covers one epoch of ``num_batches`` batches (default: enough to
    visit as many pairs as the dataset holds). The scarcer class is
    oversampled by cycling through fresh shuffles of it.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    labels = np.asarray(labels)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    n_pos, n_neg = -(-batch_size // 2), batch_size // 2
    if pos.size == 0:
        raise ValueError("no positive pairs to sample from")
    if neg.size == 0 and n_neg > 0:
        raise ValueError("no negative pairs to sample from")
    if num_batches is None:
        num_batches = max(1, -(-labels.size // batch_size))
    pos_draw = _cycled(pos, n_pos * num_batches, rng)
    neg_draw = _cycled(neg, n_neg * num_batches, rng) if n_neg else np.zeros(0, dtype=np.int64)
    for k in range(num_batches):
        yield np.concatenate([pos_draw[k * n_pos : (k + 1) * n_pos], neg_draw[k * n_neg : (k + 1) * n_neg]])


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 towards 0 at ``total``, no restarts."""
    return 0.5 * lr0 * (1 + math.cos(math.pi * step / total))


class Adam:
    def __init__(self, params: list[tuple[str, np.ndarray]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p) for n, p in params}
        self.v = {n: np.zeros_like(p) for n, p in params}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in self.params:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_loss_and_grads(model: GatModel, a, b, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over the batch and its gradients."""
    logits, state = forward(model, pair_nodes(model, a, b), keep=True)
    loss = float(bce_with_logits(logits, labels).mean())
    probs = 1.0 / (1.0 + np.exp(-logits))
    grads = backward(model, state, (probs - labels) / labels.size)
    return loss, grads


def pair_scores(model: GatModel, pairs: PairSet, batch: int = 4096) -> np.ndarray:
    """Logits for every pair in ``pairs``."""
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch):
        rows = np.arange(start, min(start + batch, len(pairs)))
        a, b, _ = pairs.batch(rows)
        out[rows] = forward(model, pair_nodes(model, a, b))
    return out


def mean_bce(model: GatModel, pairs: PairSet) -> float:
    return float(bce_with_logits(pair_scores(model, pairs), pairs.labels).mean())


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    labels = np.asarray(labels)
    n_pos, n_neg = int((labels == 1).sum()), int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def train(
    pairs: PairSet,
    config: TrainConfig = TrainConfig(),
    model: GatModel | None = None,
    log_file: TextIO | None = None,
    callback: Callable[[int, float, float], None] | None = None,
) -> GatModel:
    """Fit the GAT with Adam, cosine-annealed step size and balanced batches.

    Each step's (step, lr, loss) is appended to ``log_file`` as one JSON line.
    """
    if len(pairs) == 0:
        raise ValueError("empty training set")
    n_scales = pairs.tuples.shape[1]
    model = model if model is not None else init_model(config.dims, n_scales, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    per_epoch = max(1, -(-len(pairs) // config.batch_size))
    total = config.epochs * per_epoch
    opt = Adam(model.named_parameters(), config.beta1, config.beta2, config.eps)
    step = 0
    for epoch in range(config.epochs):
        for k, rows in enumerate(balanced_batches(pairs.labels, config.batch_size, rng, per_epoch)):
            lr = cosine_lr(step, total, config.lr)
            loss, grads = batch_loss_and_grads(model, *pairs.batch(rows))
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step} (epoch {epoch}, batch {k})")
            opt.step(grads, lr)
            if log_file is not None:
                log_file.write(json.dumps({"step": step, "lr": lr, "loss": loss}) + "\n")
            if callback is not None:
                callback(step, lr, loss)
            step += 1
        log.debug("epoch %d done, last loss %.4f", epoch, loss)
    return model
