"""Perturbation sweeps ranking layers and weight bins by accuracy impact.

Every row evaluates a copy of the model with exactly one perturbation applied;
the baseline model is never mutated. Noise comes from named streams keyed by
(seed, sweep, layer[, bin]), so reports are deterministic and rows can be
evaluated in any order or in parallel.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng
from .container import F32, U8, Model, TensorRecord, round_half_away, write_atomic
from .datasets import Dataset
from .harness import evaluate

GAUSSIAN_LAYER = "GaussianLayer"
REL_MAGNITUDE_BIN = "RelMagnitudeBin"
REL_MAGNITUDE_LAYER_U8 = "RelMagnitudeLayerU8"
GRADIENT_TOP_K = "GradientTopK"
RANDOM_K = "RandomK"

CSV_COLUMNS = ("layer", "bin", "kind", "std", "rel", "fraction", "seed",
               "baseline", "perturbed", "delta")


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    std: float = 0.0
    rel: float = 0.0
    fraction: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class SensitivityRow:
    layer: str
    bin: int | None
    spec: PerturbSpec
    baseline: float
    perturbed: float

    @property
    def delta(self) -> float:
        return self.baseline - self.perturbed


@dataclass
class SensitivityReport:
    rows: list

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.layer, "" if r.bin is None else r.bin, r.spec.kind,
                        repr(r.spec.std), repr(r.spec.rel), repr(r.spec.fraction),
                        r.spec.seed, repr(r.baseline), repr(r.perturbed),
                        repr(r.delta)])
        write_atomic(path, buf.getvalue().encode("utf-8"))

    def extend(self, other: "SensitivityReport") -> None:
        self.rows.extend(other.rows)


def layers_by_param_count(model: Model) -> list:
    """Weight-bearing layer names, descending parameter count (stable)."""
    layers = model.weight_layers()
    return [l.name for l in sorted(layers, key=lambda l: -model.tensor(l.weight_ref).size)]


def _weight_layer(model: Model, name: str):
    for l in model.manifest.layers:
        if l.name == name and l.weight_ref is not None:
            return l
    raise SensitivityError(f"unknown weight layer {name!r}")


def _perturbed_model(model: Model, tensor_name: str, values: np.ndarray) -> Model:
    t = model.tensor(tensor_name)
    if t.dtype == U8:
        rec = TensorRecord(t.name, U8, t.shape, values.astype(np.uint8), t.quant)
    else:
        rec = TensorRecord(t.name, F32, t.shape, values.astype(np.float32))
    return model.replace_tensor(rec)


def _run_rows(tasks, jobs: int):
    if jobs <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(t) for t in tasks]
        return [f.result() for f in futures]


def gaussian_layer_sweep(model: Model, dataset: Dataset, layers, std: float,
                         seed: int = 0, eval_samples: int | None = None,
                         jobs: int = 1) -> SensitivityReport:
    """Additive Gaussian noise on one whole layer at a time."""
    if std < 0:
        raise SensitivityError("std must be >= 0")
    ds = dataset.take(eval_samples)
    baseline = evaluate(model, ds)
    spec = PerturbSpec(GAUSSIAN_LAYER, std=std, seed=seed)

    def make_task(layer_name):
        layer = _weight_layer(model, layer_name)

        def run():
            t = model.tensor(layer.weight_ref)
            if t.dtype != F32:
                raise SensitivityError("gaussian sweep expects f32 weights")
            noise = rng.stream(seed, "gauss", layer_name).normal(0.0, std, size=t.size)
            perturbed = evaluate(_perturbed_model(model, t.name, t.data + noise.astype(np.float32)), ds)
            return SensitivityRow(layer_name, None, spec, baseline, perturbed)

        return run

    rows = _run_rows([make_task(n) for n in layers], jobs)
    return SensitivityReport(rows)


def _apply_rel(values: np.ndarray, mask: np.ndarray, rel: float, signs: np.ndarray, u8: bool):
    out = values.astype(np.float64).copy()
    out[mask] = out[mask] * (1.0 + signs * rel)
    if u8:
        out = np.clip(round_half_away(out), 0, 255)
    return out


def bin_magnitude_sweep(model: Model, dataset: Dataset, layer: str,
                        bin_edges: np.ndarray, rel: float, seed: int = 0,
                        eval_samples: int | None = None, jobs: int = 1) -> SensitivityReport:
    """Multiply each bin's members by (1 +/- rel), sign random per element."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise SensitivityError("bin_edges must be strictly increasing")
    if rel <= 0:
        raise SensitivityError("rel must be > 0")
    ldesc = _weight_layer(model, layer)
    t = model.tensor(ldesc.weight_ref)
    if t.size == 0:
        raise SensitivityError(f"layer {layer!r} is empty")
    is_u8 = t.dtype == U8
    values = t.data.astype(np.float64)
    labels = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)

    ds = dataset.take(eval_samples)
    baseline = evaluate(model, ds)
    spec = PerturbSpec(REL_MAGNITUDE_BIN, rel=rel, seed=seed)

    def make_task(i):
        def run():
            mask = labels == i
            g = rng.stream(seed, "binmag", layer, i)
            signs = g.integers(0, 2, size=int(mask.sum())) * 2.0 - 1.0
            perturbed = evaluate(
                _perturbed_model(model, t.name, _apply_rel(values, mask, rel, signs, is_u8)), ds)
            return SensitivityRow(layer, i, spec, baseline, perturbed)

        return run

    rows = _run_rows([make_task(i) for i in range(len(edges) - 1)], jobs)
    return SensitivityReport(rows)


def rel_layer_sweep_u8(model: Model, dataset: Dataset, layers, rel: float = 0.03,
                       seed: int = 0, eval_samples: int | None = None,
                       jobs: int = 1) -> SensitivityReport:
    """Whole-layer +/-rel magnitude perturbation of u8 weight values."""
    if rel <= 0:
        raise SensitivityError("rel must be > 0")
    ds = dataset.take(eval_samples)
    baseline = evaluate(model, ds)
    spec = PerturbSpec(REL_MAGNITUDE_LAYER_U8, rel=rel, seed=seed)

    def make_task(layer_name):
        layer = _weight_layer(model, layer_name)

        def run():
            t = model.tensor(layer.weight_ref)
            if t.dtype != U8:
                raise SensitivityError(f"layer {layer_name!r} is not u8")
            g = rng.stream(seed, "relu8", layer_name)
            signs = g.integers(0, 2, size=t.size) * 2.0 - 1.0
            values = _apply_rel(t.data.astype(np.float64), np.ones(t.size, bool), rel, signs, True)
            perturbed = evaluate(_perturbed_model(model, t.name, values), ds)
            return SensitivityRow(layer_name, None, spec, baseline, perturbed)

        return run

    rows = _run_rows([make_task(n) for n in layers], jobs)
    return SensitivityReport(rows)


def gradient_vs_random(model: Model, dataset: Dataset, grad_stats, std: float = 0.05,
                       fraction: float = 0.5, seed: int = 0, layers=None,
                       eval_samples: int | None = None, jobs: int = 1) -> SensitivityReport:
    """Per layer: perturb a random fraction vs. the top fraction by |gradient|.

    Both rows draw fresh Gaussian noise of the same std from their own
    streams; selection is the only systematic difference.
    """
    if layers is None:
        layers = layers_by_param_count(model)
    for name in layers:
        ldesc = _weight_layer(model, name)
        if ldesc.weight_ref not in grad_stats.sums:
            raise SensitivityError(f"no gradients for layer {name!r}")
    ds = dataset.take(eval_samples)
    baseline = evaluate(model, ds)

    def make_task(layer_name, kind):
        layer = _weight_layer(model, layer_name)

        def run():
            t = model.tensor(layer.weight_ref)
            n = t.size
            k = int(round(fraction * n))
            if kind == RANDOM_K:
                idx = rng.stream(seed, "rand-sel", layer_name).choice(n, size=k, replace=False)
            else:
                g = grad_stats.get(layer.weight_ref).reshape(-1)
                # stable sort: all-zero gradients degrade to index order
                idx = np.argsort(-g, kind="stable")[:k]
            noise = rng.stream(seed, "noise", kind, layer_name).normal(0.0, std, size=k)
            values = t.data.astype(np.float64).copy()
            values[idx] += noise
            perturbed = evaluate(_perturbed_model(model, t.name, values), ds)
            spec = PerturbSpec(kind, std=std, fraction=fraction, seed=seed)
            return SensitivityRow(layer_name, None, spec, baseline, perturbed)

        return run

    tasks = []
    for name in layers:
        tasks.append(make_task(name, RANDOM_K))
        tasks.append(make_task(name, GRADIENT_TOP_K))
    rows = _run_rows(tasks, jobs)
    return SensitivityReport(rows)
