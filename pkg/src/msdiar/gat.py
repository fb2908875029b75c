"""Graph-attention similarity between two segments' multi-scale embeddings.

Each pair of segments forms a fully connected graph of ``2 * n_scales``
nodes (one per embedding) with self-loops. A learnable per-scale indicator
is added to every node; attention logits are ``(h_u * h_v) . w`` with one
weight vector for node pairs from the same segment and another for pairs
across segments. After the attention layers, the node vectors are averaged
and mapped through an affine readout and a logistic to a similarity in
(0, 1).
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .affinity import AffinityMatrix
from .embeddings import MultiScaleEmbeddingSet

DEFAULT_DIMS = (256, 128, 64)
GATM_MAGIC = b"GATM"
GATM_VERSION = 1
# |logit| cap when reporting a similarity, keeps it strictly inside (0, 1) in float64
_LOGIT_CAP = 30.0


@dataclass
class GatLayer:
    W: np.ndarray  # (d_in, d_out)
    w_same: np.ndarray  # (d_in,)
    w_cross: np.ndarray  # (d_in,)


@dataclass
class GatModel:
    indicators: np.ndarray  # (n_scales, d)
    layers: list[GatLayer]
    readout: np.ndarray  # (d_last,)
    bias: np.ndarray  # (1,)

    @property
    def n_scales(self) -> int:
        return self.indicators.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.indicators.shape[1],) + tuple(layer.W.shape[1] for layer in self.layers)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Parameter arrays in serialization order; the arrays are live references."""
        out = [("indicators", self.indicators)]
        for k, layer in enumerate(self.layers):
            out += [(f"layer{k}.W", layer.W), (f"layer{k}.w_same", layer.w_same), (f"layer{k}.w_cross", layer.w_cross)]
        out += [("readout", self.readout), ("bias", self.bias)]
        return out

    def copy(self) -> "GatModel":
        return GatModel(
            self.indicators.copy(),
            [GatLayer(l.W.copy(), l.w_same.copy(), l.w_cross.copy()) for l in self.layers],
            self.readout.copy(),
            self.bias.copy(),
        )

    def validate(self) -> None:
        for name, arr in self.named_parameters():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite values")
        d = self.indicators.shape[1]
        for k, layer in enumerate(self.layers):
            if layer.W.shape[0] != d or layer.w_same.shape != (d,) or layer.w_cross.shape != (d,):
                raise ValueError(f"layer {k} expects input width {d}")
            d = layer.W.shape[1]
        if self.readout.shape != (d,) or self.bias.shape != (1,):
            raise ValueError("readout shape mismatch")


def init_model(dims: Sequence[int] = DEFAULT_DIMS, n_scales: int = 3, seed: int = 0) -> GatModel:
    """Uniform(+-1/sqrt(fan_in)) weights; indicators, readout and bias start at zero.

    A zero readout makes every initial similarity exactly 0.5.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1 / np.sqrt(d_in)
        layers.append(
            GatLayer(
                rng.uniform(-bound, bound, (d_in, d_out)),
                rng.uniform(-bound, bound, d_in),
                rng.uniform(-bound, bound, d_in),
            )
        )
    return GatModel(np.zeros((n_scales, dims[0])), layers, np.zeros(dims[-1]), np.zeros(1))


# ---------------------------------------------------------------------------
# Single-pair building blocks
# ---------------------------------------------------------------------------


def same_segment_mask(n_scales: int = 3) -> np.ndarray:
    """Boolean (2S, 2S) relation: True where both nodes come from the same segment."""
    seg = np.repeat([0, 1], n_scales)
    return seg[:, None] == seg[None, :]


@dataclass
class PairGraph:
    nodes: np.ndarray  # (2S, d)
    same_segment: np.ndarray  # (2S, 2S) bool, includes self-loops
    scale_of: np.ndarray  # (2S,)


def build_pair_graph(ms_i: np.ndarray, ms_j: np.ndarray, model: GatModel) -> PairGraph:
    """Nodes are each embedding plus the indicator of its scale."""
    ms_i, ms_j = np.asarray(ms_i, dtype=np.float64), np.asarray(ms_j, dtype=np.float64)
    expected = model.indicators.shape
    if ms_i.shape != expected or ms_j.shape != expected:
        raise ValueError(
            f"embedding tuples {ms_i.shape}, {ms_j.shape} do not match scale indicators {expected}"
        )
    S = model.n_scales
    nodes = np.concatenate([ms_i + model.indicators, ms_j + model.indicators])
    return PairGraph(nodes, same_segment_mask(S), np.tile(np.arange(S), 2))


def _softmax_rows(g: np.ndarray) -> np.ndarray:
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_logits(h: np.ndarray, layer: GatLayer, same: np.ndarray) -> np.ndarray:
    """g[u, v] = (h_u * h_v) . w_same if u, v share a segment else . w_cross. Works batched."""
    ht = np.swapaxes(h, -1, -2)
    return np.where(same, (h * layer.w_same) @ ht, (h * layer.w_cross) @ ht)


def attention_coefficients(graph: PairGraph, layer: GatLayer, nodes: np.ndarray | None = None) -> np.ndarray:
    """Row-stochastic attention over all nodes, shape (2S, 2S)."""
    h = graph.nodes if nodes is None else nodes
    return _softmax_rows(attention_logits(h, layer, graph.same_segment))


def gat_layer(nodes: np.ndarray, alpha: np.ndarray, layer: GatLayer) -> np.ndarray:
    """h'_u = relu((sum_v alpha[u, v] h_v) W)."""
    return np.maximum((alpha @ nodes) @ layer.W, 0.0)


def _logit_to_similarity(logit):
    return 1.0 / (1.0 + np.exp(-np.clip(logit, -_LOGIT_CAP, _LOGIT_CAP)))


def gat_similarity(ms_i: np.ndarray, ms_j: np.ndarray, model: GatModel) -> float:
    """Similarity in (0, 1) between two (n_scales, d) embedding tuples.

    The architecture is symmetric in its two inputs; the pair is put in a
    canonical order first so the floating-point result is exactly symmetric
    as well.
    """
    ms_i, ms_j = np.asarray(ms_i, dtype=np.float64), np.asarray(ms_j, dtype=np.float64)
    if ms_i.tobytes() > ms_j.tobytes():
        ms_i, ms_j = ms_j, ms_i
    graph = build_pair_graph(ms_i, ms_j, model)
    h = graph.nodes
    for layer in model.layers:
        h = gat_layer(h, attention_coefficients(graph, layer, h), layer)
    logit = h.mean(axis=0) @ model.readout + model.bias[0]
    return float(_logit_to_similarity(logit))


# ---------------------------------------------------------------------------
# Batched forward / backward used for training
# ---------------------------------------------------------------------------


def pair_nodes(model: GatModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack layer-0 nodes for a batch of pairs: (B, S, d) x 2 -> (B, 2S, d)."""
    return np.concatenate([a + model.indicators, b + model.indicators], axis=1)


def forward(model: GatModel, nodes: np.ndarray, keep: bool = False):
    """Logits for a batch of layer-0 node sets (B, 2S, d).

    With ``keep=True`` also returns the activations needed by :func:`backward`.
    """
    same = same_segment_mask(model.n_scales)
    h = nodes
    cache = []
    for layer in model.layers:
        alpha = _softmax_rows(attention_logits(h, layer, same))
        z = alpha @ h
        B, n, d_in = z.shape
        p = (z.reshape(B * n, d_in) @ layer.W).reshape(B, n, -1)
        if keep:
            cache.append((h, alpha, z, p))
        h = np.maximum(p, 0.0)
    pooled = h.mean(axis=1)
    logits = pooled @ model.readout + model.bias[0]
    if keep:
        return logits, (cache, pooled)
    return logits


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example binary cross-entropy of logistic(logits) against {0, 1} labels."""
    return np.logaddexp(0.0, logits) - labels * logits


def backward(model: GatModel, state, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of sum(dlogits * logits) w.r.t. every parameter."""
    cache, pooled = state
    S = model.n_scales
    same = same_segment_mask(S)
    grads: dict[str, np.ndarray] = {
        "readout": pooled.T @ dlogits,
        "bias": np.array([dlogits.sum()]),
    }
    n_nodes = 2 * S
    dh = np.broadcast_to((dlogits[:, None] * model.readout[None, :])[:, None, :] / n_nodes,
                         (dlogits.shape[0], n_nodes, model.readout.shape[0]))
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        h, alpha, z, p = cache[k]
        B, n, d_in = z.shape
        dp = dh * (p > 0)
        grads[f"layer{k}.W"] = z.reshape(B * n, d_in).T @ dp.reshape(B * n, -1)
        dz = dp @ layer.W.T
        dalpha = dz @ np.swapaxes(h, 1, 2)
        dh_prev = np.swapaxes(alpha, 1, 2) @ dz
        dg = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
        for name, w, mask in (("w_same", layer.w_same, same), ("w_cross", layer.w_cross, ~same)):
            dgm = dg * mask
            # g[u, v] = sum_k h[u, k] h[v, k] w[k]
            grads[f"layer{k}.{name}"] = ((dgm @ h) * h).sum(axis=(0, 1))
            dh_prev = dh_prev + ((dgm + np.swapaxes(dgm, 1, 2)) @ h) * w
        dh = dh_prev
    grads["indicators"] = dh[:, :S].sum(axis=0) + dh[:, S:].sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Affinity construction
# ---------------------------------------------------------------------------


def default_workers() -> int:
    env = os.environ.get("MSDIAR_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n)


def _affinity_chunk(model, node_gram, node_proj, i_idx, j_idx, S):
    """Similarities for the pairs (i_idx[k], j_idx[k]) via precomputed layer-0 products."""
    same = same_segment_mask(S)
    offs = np.arange(S)
    idx = np.concatenate([i_idx[:, None] * S + offs, j_idx[:, None] * S + offs], axis=1)  # (B, 2S)
    rows, cols = idx[:, :, None], idx[:, None, :]
    g = np.where(same, node_gram[0][rows, cols], node_gram[1][rows, cols])
    alpha = _softmax_rows(g)
    h = np.maximum(alpha @ node_proj[idx], 0.0)
    for layer in model.layers[1:]:
        alpha = _softmax_rows(attention_logits(h, layer, same))
        h = np.maximum((alpha @ h) @ layer.W, 0.0)
    logits = h.mean(axis=1) @ model.readout + model.bias[0]
    return _logit_to_similarity(logits)


def build_gat_affinity(
    emb_set: MultiScaleEmbeddingSet,
    model: GatModel,
    workers: int | None = None,
    chunk_size: int = 2048,
) -> AffinityMatrix:
    """L x L GAT affinity, one forward pass per unordered pair (diagonal included).

    Layer-0 attention logits and projections are linear in the node vectors,
    so they are computed once per node and gathered per pair. Pairs are
    processed in fixed-size chunks; the chunking does not depend on
    ``workers``, so the result is bit-identical for any worker count.
    """
    model.validate()
    tuples = emb_set.stacked()
    L, S, d = tuples.shape
    if S != model.n_scales or d != model.indicators.shape[1]:
        raise ValueError(f"model expects {model.n_scales} scales of dim {model.indicators.shape[1]}")
    workers = workers or default_workers()

    base = (tuples + model.indicators).reshape(L * S, d)
    first = model.layers[0]
    node_gram = ((base * first.w_same) @ base.T, (base * first.w_cross) @ base.T)
    node_proj = base @ first.W

    iu, ju = _upper_pairs(L)
    starts = range(0, iu.size, chunk_size)
    sims = np.empty(iu.size)

    def run(start):
        stop = min(start + chunk_size, iu.size)
        sims[start:stop] = _affinity_chunk(model, node_gram, node_proj, iu[start:stop], ju[start:stop], S)

    with threadpool_limits(limits=1):
        if workers == 1:
            for s in starts:
                run(s)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run, starts))

    out = np.empty((L, L))
    out[iu, ju] = sims
    out[ju, iu] = sims
    return AffinityMatrix(out, mode="gat")


def build_gat_affinity_reference(emb_set: MultiScaleEmbeddingSet, model: GatModel) -> np.ndarray:
    """Unbatched pairwise loop over :func:`gat_similarity`; slow, for checking."""
    L = emb_set.num_segments
    out = np.empty((L, L))
    for i in range(L):
        for j in range(i, L):
            out[i, j] = out[j, i] = gat_similarity(emb_set.multiscale(i), emb_set.multiscale(j), model)
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(path: str | Path, model: GatModel) -> None:
    """Binary model file plus a ``.json`` manifest of parameter shapes beside it."""
    model.validate()
    dims = model.dims
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", GATM_MAGIC, GATM_VERSION, len(model.layers), model.n_scales))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for _, arr in model.named_parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {
        "format": "GATM",
        "version": GATM_VERSION,
        "n_scales": model.n_scales,
        "dims": list(dims),
        "parameters": [{"name": n, "shape": list(a.shape)} for n, a in model.named_parameters()],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(path: str | Path) -> GatModel:
    data = Path(path).read_bytes()
    magic, version, n_layers, n_scales = struct.unpack_from("<4sIII", data)
    if magic != GATM_MAGIC:
        raise ValueError(f"{path}: not a GATM model file")
    if version != GATM_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    offset = 16
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, offset)
    offset += 4 * (n_layers + 1)
    model = init_model(dims, n_scales)
    for name, arr in model.named_parameters():
        count = arr.size
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        arr[...] = values.reshape(arr.shape)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    model.validate()
    return model
