"""Gradient-weighted k-means over product-quantized weight blocks.

Weights are cut into d-length blocks (conv filters flattened filter-major,
dense row-major). Each block carries a scalar weight derived from the mean
|gradient| over its positions; the Lloyd update pulls centroids toward
blocks with large gradients:

    c_j = sum_i g_i w_i / sum_i g_i        over cluster members i

Assignment stays plain Euclidean. Clustering runs after every training
epoch (EWGS rules) and the reconstructed weights continue training.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import rng
from .container import F32, Model, TensorRecord
from .datasets import Dataset
from .harness import GradientStats, TrainConfig, TrainDivergedError, evaluate, train
from .qat import QatConfig

log = logging.getLogger("bqkit.gwk")


class GwkError(ValueError):
    pass


class GwkDivergedError(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class PQConfig:
    d_conv: int = 4
    d_pw: int = 2
    n_clusters: int = 16
    epochs_between_cluster: int = 1

    def __post_init__(self):
        if self.d_conv < 1 or self.d_pw < 1 or self.n_clusters < 1:
            raise GwkError("block sizes and cluster count must be positive")
        if self.epochs_between_cluster < 1:
            raise GwkError("epochs_between_cluster must be >= 1")

    def block_size(self, pointwise: bool) -> int:
        return self.d_pw if pointwise else self.d_conv


@dataclass(frozen=True)
class BlockMatrix:
    blocks: np.ndarray  # d x n_blocks
    origin: dict        # name, shape, kind, d, pad, layout

    @property
    def d(self) -> int:
        return self.blocks.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[1]


@dataclass(frozen=True)
class PQCodebook:
    centroids: np.ndarray  # d x b
    labels: np.ndarray     # n_blocks

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        l = np.asarray(self.labels, dtype=np.int64)
        if np.any(~np.isfinite(c)):
            raise GwkError("non-finite centroid")
        if l.size and (l.min() < 0 or l.max() >= c.shape[1]):
            raise GwkError("label indexes invalid centroid")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "labels", l)

    @property
    def b(self) -> int:
        return self.centroids.shape[1]


def _flatten_for_pq(w: np.ndarray, kind: str) -> np.ndarray:
    if kind == "Conv2D":
        # (O,C,k,k) -> (C*k*k, O) column-major flatten == filter-contiguous
        return w.reshape(w.shape[0], -1).reshape(-1)
    return w.reshape(-1)


def pq_reshape(w: np.ndarray, kind: str, d: int) -> BlockMatrix:
    """Cut a weight tensor into consecutive d-length blocks (zero padded)."""
    if d < 1:
        raise GwkError("d must be >= 1")
    flat = _flatten_for_pq(np.asarray(w, dtype=np.float64), kind)
    pad = (-flat.size) % d
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
    blocks = flat.reshape(-1, d).T
    origin = {"shape": tuple(w.shape), "kind": kind, "d": d, "pad": pad,
              "layout": "filter-major" if kind == "Conv2D" else "row-major"}
    return BlockMatrix(np.ascontiguousarray(blocks), origin)


def pq_restore(blocks: np.ndarray, origin: dict) -> np.ndarray:
    """Exact inverse of pq_reshape."""
    flat = np.asarray(blocks).T.reshape(-1)
    count = int(np.prod(origin["shape"]))
    return flat[:count].reshape(origin["shape"])


def reduce_gradients(grad: np.ndarray, kind: str, d: int) -> np.ndarray:
    """Mean |grad| per block (pad positions excluded), floored and normalized.

    Returns g with sum(g) == 1 and g > 0 everywhere; all-zero gradients fall
    back to uniform with a warning.
    """
    flat = _flatten_for_pq(np.abs(np.asarray(grad, dtype=np.float64)), kind)
    pad = (-flat.size) % d
    real = np.concatenate([np.ones(flat.size), np.zeros(pad)])
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
    per_block_sum = flat.reshape(-1, d).sum(axis=1)
    per_block_n = real.reshape(-1, d).sum(axis=1)
    g = per_block_sum / np.maximum(per_block_n, 1.0)
    gmax = g.max() if g.size else 0.0
    if gmax <= 0:
        log.warning("all-zero gradients; falling back to uniform block weights")
        g = np.ones_like(g)
    else:
        g = np.maximum(g, 1e-12 * gmax)
    return g / g.sum()


def _weighted_kmeanspp(points, g, b, gen):
    """Seed b centroids with probability proportional to g * dist^2."""
    n = points.shape[0]
    chosen = [int(gen.choice(n, p=g / g.sum()))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < b:
        w = g * d2
        total = w.sum()
        if total <= 0:
            # all remaining mass at chosen points (duplicates): lowest index unchosen
            mask = np.ones(n, bool)
            mask[chosen] = False
            nxt = int(np.flatnonzero(mask)[0])
        else:
            nxt = int(gen.choice(n, p=w / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def weighted_kmeans(blocks: BlockMatrix, g: np.ndarray, b: int, seed: int = 0,
                    max_iter: int = 100, tol: float = 1e-6,
                    init_centroids: np.ndarray | None = None):
    """Lloyd iterations with gradient-weighted centroid updates.

    Assignment uses unweighted Euclidean distance (ties to the lower index);
    the update is the weighted mean over members. Empty clusters reseed to
    the block with the largest weighted distance. Returns (PQCodebook,
    info dict with objective/iterations).
    """
    points = np.ascontiguousarray(blocks.blocks.T)
    n = points.shape[0]
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (n,):
        raise GwkError("block weights must have one entry per block")
    if b > n:
        raise GwkError(f"b={b} exceeds n_blocks={n}")
    if b == n:
        labels = np.arange(n, dtype=np.int64)
        cb = PQCodebook(np.ascontiguousarray(points.T), labels)
        return cb, {"objective": 0.0, "iterations": 0, "objective_trace": [0.0]}

    gen = rng.stream(seed, "kmeans-init")
    if init_centroids is not None:
        centroids = np.ascontiguousarray(np.asarray(init_centroids, dtype=np.float64).T)
        if centroids.shape != (b, points.shape[1]):
            raise GwkError("init centroid shape mismatch")
        centroids = centroids.copy()
    else:
        centroids = _weighted_kmeanspp(points, g, b, gen)

    trace = []
    for _ in range(max_iter):
        labels, sqd = K.kmeans_assign(points, centroids)
        # reseed empties before measuring the objective for this round
        empties = np.flatnonzero(np.bincount(labels, minlength=b) == 0)
        if empties.size:
            order = np.argsort(-(g * sqd), kind="stable")
            for taken, j in enumerate(empties):
                centroids[j] = points[order[taken]]
            labels, sqd = K.kmeans_assign(points, centroids)
        obj = float((g * sqd).sum())
        trace.append(obj)
        if len(trace) > 1 and trace[-2] - obj < tol:
            break
        for j in range(b):
            members = labels == j
            gm = g[members]
            if gm.size:
                centroids[j] = (gm[:, None] * points[members]).sum(axis=0) / gm.sum()
    # consistency pass: a no-op after a tol break, a free improvement otherwise
    labels, sqd = K.kmeans_assign(points, centroids)
    obj = float((g * sqd).sum())
    if obj != trace[-1]:
        trace.append(obj)
    cb = PQCodebook(np.ascontiguousarray(centroids.T), labels)
    return cb, {"objective": trace[-1], "iterations": len(trace), "objective_trace": trace}


def clustered_layers(model: Model, exempt_first_last: bool = False) -> list:
    """Weight layers subject to PQ clustering, in manifest order."""
    layers = model.weight_layers()
    if exempt_first_last and len(layers) > 2:
        layers = layers[1:-1]
    return layers


def gwk_train(model: Model, dataset: Dataset, pq: PQConfig, qat: QatConfig,
              cfg: TrainConfig, eval_dataset: Dataset | None = None,
              uniform_weights: bool = False, exempt_first_last: bool = False):
    """EWGS training with per-epoch gradient-weighted reclustering.

    Returns (compressed model, codebooks, trace). ``codebooks`` maps tensor
    name -> dict(codebook, origin, b); the final-model weights are exactly
    the float32-canonical centroid reconstructions. The trace has one row
    per epoch: loss, accuracy, per-layer weighted objective.
    """
    layers = clustered_layers(model, exempt_first_last)
    by_tensor = {l.weight_ref: l for l in layers}
    trace = []
    codebooks = {}
    warm = {}
    checkpoint = {"arrays": None}

    def hook(epoch, arrays, stats: GradientStats):
        do_cluster = (epoch + 1) % pq.epochs_between_cluster == 0 or epoch == cfg.epochs - 1
        row = {"epoch": epoch}
        if do_cluster:
            for name, layer in by_tensor.items():
                d = pq.block_size(layer.pointwise)
                bm = pq_reshape(arrays[name], layer.kind, d)
                if uniform_weights:
                    g = np.full(bm.n_blocks, 1.0 / bm.n_blocks)
                else:
                    g = reduce_gradients(stats.get(name), layer.kind, d)
                b = min(pq.n_clusters, bm.n_blocks)
                seed = int(rng.stream(cfg.seed, "gwk", name, epoch).integers(1 << 31))
                cb, info = weighted_kmeans(bm, g, b, seed=seed,
                                           init_centroids=warm.get(name))
                warm[name] = cb.centroids
                if epoch == cfg.epochs - 1:
                    # freeze: store f32 centroids; reconstruct from the frozen values
                    frozen = cb.centroids.astype(np.float32)
                    cb = PQCodebook(frozen.astype(np.float64), cb.labels)
                    codebooks[name] = {"codebook": cb, "origin": bm.origin, "b": b}
                recon = pq_restore(cb.centroids[:, cb.labels], bm.origin)
                arrays[name][...] = recon
                row[f"objective:{layer.name}"] = info["objective"]
        checkpoint["arrays"] = copy.deepcopy(arrays)
        trace.append(row)

    try:
        trained, stats, metrics = train(model, dataset, cfg, qat=qat, epoch_hook=hook)
    except TrainDivergedError as e:
        raise GwkDivergedError(str(e), checkpoint=checkpoint["arrays"]) from e

    for row, m in zip(trace, metrics):
        row["loss"] = m["loss"]
        row["accuracy"] = m["accuracy"]
    if eval_dataset is not None:
        final_acc = evaluate(trained, eval_dataset, qat=qat)
    else:
        final_acc = metrics[-1]["accuracy"] if metrics else evaluate(trained, dataset, qat=qat)
    return trained, codebooks, {"trace": trace, "final_accuracy": final_acc}


def bits_per_weight(layer_infos: list) -> dict:
    """Aggregate and per-layer storage accounting.

    Each entry: {layer, weight_count, mode, ...}; pq entries carry n_blocks,
    b, d; bq entries carry b, label_bits (actual payload bits) and
    codebook_bits; raw entries carry native_bits per weight. Returns
    {"per_layer": {...}, "aggregate": bpw, "aggregate_labels_only": bpw}.
    """
    per_layer = {}
    total_bits = 0.0
    total_label_bits = 0.0
    total_count = 0
    for info in layer_infos:
        count = int(info["weight_count"])
        mode = info["mode"]
        if mode == "pq":
            label_bits = info["n_blocks"] * max(1, math.ceil(math.log2(info["b"])))
            codebook_bits = info["d"] * info["b"] * 32
        elif mode == "bq":
            label_bits = info["label_bits"]
            codebook_bits = info["codebook_bits"]
        elif mode == "raw":
            label_bits = count * info.get("native_bits", 32)
            codebook_bits = 0
        else:
            raise GwkError(f"unknown mode {mode!r}")
        bits = label_bits + codebook_bits
        per_layer[info["layer"]] = {
            "mode": mode,
            "weight_count": count,
            "bits": bits,
            "bpw": bits / count,
            "label_bpw": label_bits / count,
        }
        total_bits += bits
        total_label_bits += label_bits
        total_count += count
    if total_count == 0:
        raise GwkError("no layers to account")
    return {
        "per_layer": per_layer,
        "aggregate": total_bits / total_count,
        "aggregate_labels_only": total_label_bits / total_count,
    }
