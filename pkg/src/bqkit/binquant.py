"""Bin & Quant: sensitivity-driven weight binning without retraining.

A layer's weights are partitioned into half-open bins, each represented by
the mean of its members. The most accuracy-sensitive bin (measured by a
+/-rel magnitude sweep) is split at its midpoint until the bin budget is
reached or no bin is sensitive. A per-layer accuracy gate decides whether
the compressed layer is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .container import F32, U8, Model, TensorRecord, round_half_away
from .datasets import Dataset
from .harness import evaluate
from .sensitivity import SensitivityReport, bin_magnitude_sweep, layers_by_param_count


class BinQuantError(ValueError):
    pass


# Rational approximation of the standard normal quantile (Acklam), refined
# with one Halley step via erfc; |error| < 1e-9 over (0, 1).
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def _ndtri_scalar(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise BinQuantError(f"quantile argument must lie in (0,1), got {p}")
    p_low, p_high = 0.02425, 1 - 0.02425
    if p < p_low:
        q = math.sqrt(-2 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1))
    elif p > p_high:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1))
    else:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1))
    # Halley refinement
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def inv_norm_cdf(p):
    """Standard normal quantile function."""
    if np.isscalar(p):
        return _ndtri_scalar(float(p))
    return np.array([_ndtri_scalar(float(v)) for v in np.asarray(p).reshape(-1)])


@dataclass(frozen=True)
class BinSpec:
    edges: np.ndarray           # b+1, strictly increasing, outer may be +/-inf
    representatives: np.ndarray  # b
    member_counts: np.ndarray    # b

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        reps = np.asarray(self.representatives, dtype=np.float64)
        counts = np.asarray(self.member_counts, dtype=np.int64)
        if np.any(np.diff(edges) <= 0):
            raise BinQuantError("edges must be strictly increasing")
        if len(reps) != len(edges) - 1 or len(counts) != len(reps):
            raise BinQuantError("representatives/counts must match edge count - 1")
        for a in (edges, reps, counts):
            a.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "representatives", reps)
        object.__setattr__(self, "member_counts", counts)

    @property
    def b(self) -> int:
        return len(self.representatives)


@dataclass(frozen=True)
class BqLayerResult:
    layer: str
    tensor_name: str
    bin_spec: BinSpec
    labels: np.ndarray
    baseline: float
    accuracy_after: float
    accepted: bool
    degenerate: bool = False
    trace: tuple = ()

    @property
    def drop(self) -> float:
        return self.baseline - self.accuracy_after


@dataclass(frozen=True)
class BqConfig:
    max_bins: int = 32
    per_bin_drop_limit: float = 0.02
    layer_drop_limit: float = 0.01
    eval_samples: int = 1000
    layers_to_try: int | None = None
    init_bins: int = 8
    init_mean: float | None = None   # None: use the layer's own statistics
    init_std: float | None = None
    rel_float: float = 0.5
    rel_u8: float = 0.03

    def __post_init__(self):
        if not 2 <= self.max_bins <= 1 << 16:
            raise BinQuantError("max_bins must lie in [2, 2^16]")
        if self.init_bins < 2:
            raise BinQuantError("init_bins must be >= 2")
        if self.eval_samples < 1:
            raise BinQuantError("eval_samples must be positive")


def initial_bins_invcdf(mean: float, std: float, b: int = 8) -> np.ndarray:
    """Equal-probability normal quantile edges: dense center, sparse tails."""
    if std <= 0:
        raise BinQuantError("std must be > 0")
    if b < 2:
        raise BinQuantError("need at least 2 bins")
    interior = mean + std * inv_norm_cdf(np.arange(1, b) / b)
    return np.concatenate(([-np.inf], interior, [np.inf]))


def initial_bins_u8(values: np.ndarray, b: int = 8) -> np.ndarray:
    """Mean/std quantile edges on uint8 values, clamped to [0,255], deduped.

    A constant buffer yields the single degenerate bin (-inf, inf); callers
    flag it rather than erroring.
    """
    values = np.asarray(values)
    if values.size == 0:
        raise BinQuantError("empty buffer")
    mu = float(values.mean())
    sd = float(values.std())
    if sd == 0:
        return np.array([-np.inf, np.inf])
    interior = np.clip(mu + sd * inv_norm_cdf(np.arange(1, b) / b), 0.0, 255.0)
    interior = np.unique(interior)
    return np.concatenate(([-np.inf], interior, [np.inf]))


def assign_labels(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Label i iff edges[i] <= v < edges[i+1]."""
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)


def assign_and_represent(values: np.ndarray, edges: np.ndarray, u8: bool = False):
    """Partition values into bins; representative = member mean.

    Empty bins take their midpoint (finite side for unbounded bins). Returns
    (BinSpec, labels). With u8=True representatives are rounded to integers.
    """
    values = np.asarray(values, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    labels = assign_labels(values, edges)
    b = len(edges) - 1
    counts = np.bincount(labels, minlength=b)
    sums = np.bincount(labels, weights=values, minlength=b)
    reps = np.empty(b)
    for i in range(b):
        if counts[i] > 0:
            reps[i] = sums[i] / counts[i]
        else:
            lo, hi = edges[i], edges[i + 1]
            if np.isfinite(lo) and np.isfinite(hi):
                reps[i] = (lo + hi) / 2
            elif np.isfinite(lo):
                reps[i] = lo
            elif np.isfinite(hi):
                reps[i] = hi
            else:
                reps[i] = 0.0
    if u8:
        reps = np.clip(round_half_away(reps), 0, 255)
    return BinSpec(edges, reps, counts), labels


def split_most_sensitive(spec: BinSpec, report: SensitivityReport,
                         values: np.ndarray, u8: bool = False):
    """Split the bin with the largest accuracy delta at its midpoint.

    Unbounded bins split at the midpoint of their observed member range.
    Ties break toward the lower bin index; unsplittable bins (single point,
    or empty with an infinite edge) fall through to the next candidate.
    Returns (new BinSpec, labels); the spec comes back unchanged when no bin
    can be split.
    """
    rows = sorted(report.rows, key=lambda r: r.bin)
    if len(rows) != spec.b or [r.bin for r in rows] != list(range(spec.b)):
        raise BinQuantError("report must carry one row per bin")
    values = np.asarray(values, dtype=np.float64)
    labels = assign_labels(values, spec.edges)
    deltas = np.array([r.delta for r in rows])
    for i in np.argsort(-deltas, kind="stable"):
        lo, hi = spec.edges[i], spec.edges[i + 1]
        members = values[labels == i]
        if np.isfinite(lo) and np.isfinite(hi):
            mid = (lo + hi) / 2
        elif members.size:
            mid = (members.min() + members.max()) / 2
        else:
            continue
        if not (lo < mid < hi):
            continue
        edges = np.insert(spec.edges, i + 1, mid)
        return assign_and_represent(values, edges, u8=u8)
    return spec, labels


def reconstruct_tensor(t: TensorRecord, spec: BinSpec, labels: np.ndarray) -> TensorRecord:
    """Substitute each weight by its bin representative (storage-canonical)."""
    if t.dtype == U8:
        reps = np.clip(round_half_away(spec.representatives), 0, 255).astype(np.uint8)
        return TensorRecord(t.name, U8, t.shape, reps[labels], t.quant)
    reps = spec.representatives.astype(np.float32)
    return TensorRecord(t.name, F32, t.shape, reps[labels])


def compress_layer(model: Model, dataset: Dataset, layer: str, cfg: BqConfig,
                   seed: int = 0, donor: BinSpec | None = None,
                   jobs: int = 1) -> BqLayerResult:
    """Run the split-until-insensitive loop on one layer and gate the result."""
    ldesc = next((l for l in model.manifest.layers if l.name == layer), None)
    if ldesc is None or ldesc.weight_ref is None:
        raise BinQuantError(f"unknown weight layer {layer!r}")
    t = model.tensor(ldesc.weight_ref)
    is_u8 = t.dtype == U8
    values = t.data.astype(np.float64)
    baseline = evaluate(model, dataset, limit=cfg.eval_samples)

    trace = []
    degenerate = False
    if donor is not None:
        spec, labels = assign_and_represent(values, donor.edges, u8=is_u8)
        # parameter sharing: reuse the donor's representative values outright
        spec = BinSpec(donor.edges, donor.representatives, spec.member_counts)
        labels = assign_labels(values, donor.edges)
    else:
        distinct = np.unique(values)
        if distinct.size <= cfg.max_bins:
            # small alphabet: exact codebook, lossless by construction
            degenerate = distinct.size == 1
            if distinct.size == 1:
                edges = np.array([-np.inf, np.inf])
            else:
                mids = (distinct[:-1] + distinct[1:]) / 2
                edges = np.concatenate(([-np.inf], mids, [np.inf]))
            labels = assign_labels(values, edges)
            spec = BinSpec(edges, distinct, np.bincount(labels, minlength=distinct.size))
        else:
            if is_u8:
                edges = initial_bins_u8(values, cfg.init_bins)
            else:
                mean = cfg.init_mean if cfg.init_mean is not None else float(values.mean())
                std = cfg.init_std if cfg.init_std is not None else float(values.std())
                if std <= 0:
                    std = 1e-6
                edges = initial_bins_invcdf(mean, std, cfg.init_bins)
            spec, labels = assign_and_represent(values, edges, u8=is_u8)
            rel = cfg.rel_u8 if is_u8 else cfg.rel_float
            iteration = 0
            while spec.b < cfg.max_bins:
                sweep_seed = int(rng.stream(seed, "bq-sweep", layer, iteration).integers(1 << 31))
                report = bin_magnitude_sweep(model, dataset, layer, spec.edges, rel,
                                             seed=sweep_seed,
                                             eval_samples=cfg.eval_samples, jobs=jobs)
                max_delta = max(r.delta for r in report.rows)
                trace.append({"bins": spec.b, "max_bin_delta": max_delta})
                if max_delta < cfg.per_bin_drop_limit:
                    break
                new_spec, new_labels = split_most_sensitive(spec, report, values, u8=is_u8)
                if new_spec.b == spec.b:
                    break
                spec, labels = new_spec, new_labels
                iteration += 1

    compressed = model.replace_tensor(reconstruct_tensor(t, spec, labels))
    accuracy_after = evaluate(compressed, dataset, limit=cfg.eval_samples)
    accepted = (baseline - accuracy_after) <= cfg.layer_drop_limit + 1e-12
    return BqLayerResult(layer, t.name, spec, labels, baseline, accuracy_after,
                         accepted, degenerate, tuple(trace))


def compress_model(model: Model, dataset: Dataset, cfg: BqConfig, seed: int = 0,
                   share: dict | None = None, jobs: int = 1):
    """Apply compress_layer to layers in descending parameter count.

    Rejected layers are skipped (their weights stay raw); accepted layers are
    substituted immediately so later gates measure the cumulative model.
    ``share`` maps recipient layer -> donor layer for bin reuse; the donor
    must have been accepted earlier in the ordering. Returns (results,
    compressed model).
    """
    names = layers_by_param_count(model)
    if cfg.layers_to_try is not None:
        names = names[: cfg.layers_to_try]
    share = share or {}
    current = model
    results = []
    accepted_specs = {}
    for name in names:
        donor = None
        if name in share:
            donor = accepted_specs.get(share[name])
            if donor is None:
                raise BinQuantError(
                    f"share donor {share[name]!r} for {name!r} not accepted yet")
        r = compress_layer(current, dataset, name, cfg, seed=seed, donor=donor, jobs=jobs)
        results.append(r)
        if r.accepted:
            t = current.tensor(r.tensor_name)
            current = current.replace_tensor(reconstruct_tensor(t, r.bin_spec, r.labels))
            accepted_specs[name] = r.bin_spec
    return results, current
