"""Reference forward/backward/training engine for small dense and conv nets.

Computation is float64 end to end; models at rest are float32-canonical, so
evaluation is a deterministic function of the stored tensors. Training with a
fixed seed is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import rng
from .container import F32, ContainerError, Model, TensorRecord
from .datasets import TRAIN, Dataset
from .qat import QatConfig, ewgs_scale_gradients, fake_quantize


class HarnessError(ValueError):
    pass


class TrainDivergedError(RuntimeError):
    """Raised when the loss turns non-finite; carries the last good weights."""

    def __init__(self, message: str, checkpoint: dict | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise HarnessError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise HarnessError("bad epochs/batch_size")
        if not 0 <= self.momentum < 1:
            raise HarnessError("momentum must lie in [0,1)")


@dataclass
class GradientStats:
    """Accumulated |gradient| sums per weight tensor over one epoch."""

    sums: dict
    batch_count: int

    def get(self, name: str) -> np.ndarray:
        return self.sums[name]


def model_arrays(model: Model) -> dict:
    """float64 working copies of every tensor (u8 tensors dequantized)."""
    return {name: t.as_float() for name, t in model.tensors.items()}


def arrays_to_model(model: Model, arrays: dict) -> Model:
    """Freeze float64 working arrays back into f32-canonical tensors."""
    tensors = {}
    for name, t in model.tensors.items():
        if t.dtype != F32:
            raise HarnessError(f"cannot freeze u8 tensor {name!r} from float arrays")
        tensors[name] = TensorRecord(name, F32, t.shape, arrays[name].astype(np.float32).reshape(-1))
    return Model(model.manifest, tensors)


def _bias(arrays, layer, width):
    if layer.bias_ref is None:
        return np.zeros(width)
    return arrays[layer.bias_ref]


def _pool_forward(a):
    b, c, h, w = a.shape
    v = a.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = np.ascontiguousarray(v).reshape(b, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(g, idx, in_shape):
    b, c, h, w = in_shape
    dv = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dv, idx[..., None], g[..., None], axis=-1)
    dv = dv.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dv).reshape(b, c, h, w)


def _forward_pass(manifest, arrays, x, qat: QatConfig | None, want_caches: bool,
                  act_tap: dict | None = None):
    a = np.ascontiguousarray(x, dtype=np.float64)
    caches = []
    probs = None
    for layer in manifest.layers:
        cache = {"layer": layer, "in_shape": a.shape}
        if layer.kind == "Dense":
            w = arrays[layer.weight_ref]
            w_use = w
            if qat is not None:
                w_use, _ = fake_quantize(w, qat.weight_bits, *qat.weight_clips[layer.weight_ref])
            cache["a_in"], cache["w_use"], cache["w_latent"] = a, w_use, w
            a = a @ w_use + _bias(arrays, layer, w.shape[1])
        elif layer.kind == "Conv2D":
            m = layer.conv_meta
            w = arrays[layer.weight_ref]
            w_use = w
            if qat is not None:
                w_use, _ = fake_quantize(w, qat.weight_bits, *qat.weight_clips[layer.weight_ref])
            cache["a_in"], cache["w_use"], cache["w_latent"] = a, w_use, w
            a = K.conv2d_forward(a, np.ascontiguousarray(w_use),
                                 np.ascontiguousarray(_bias(arrays, layer, m.c_out)),
                                 m.stride, m.padding)
        elif layer.kind == "ReLU":
            pre = a
            r = np.maximum(a, 0.0)
            cache["pre"] = pre
            if act_tap is not None:
                act_tap.setdefault(layer.name, []).append(r)
            if qat is not None:
                hi = qat.act_clips.get(layer.name, 1.0)
                a_q, _ = fake_quantize(r, qat.act_bits, 0.0, hi)
                cache["r"], cache["r_q"] = r, a_q
                a = a_q
            else:
                a = r
        elif layer.kind == "MaxPool2x2":
            a, idx = _pool_forward(a)
            cache["idx"] = idx
        elif layer.kind == "Flatten":
            a = a.reshape(a.shape[0], -1)
        elif layer.kind == "Softmax":
            z = a - a.max(axis=1, keepdims=True)
            ez = np.exp(z)
            denom = ez.sum(axis=1, keepdims=True)
            probs = ez / denom
            cache["logp"] = z - np.log(denom)
            cache["probs"] = probs
        caches.append(cache)
        if want_caches is False:
            cache.pop("a_in", None)
            cache.pop("pre", None)
    if probs is None:
        raise HarnessError("network must end with a Softmax layer")
    return probs, caches


def forward(model: Model, batch: np.ndarray, qat: QatConfig | None = None) -> np.ndarray:
    """Class probabilities [B, num_classes] for a batch [B, *input_shape]."""
    batch = np.asarray(batch, dtype=np.float64)
    if tuple(batch.shape[1:]) != tuple(model.manifest.input_shape):
        raise HarnessError(
            f"batch shape {batch.shape[1:]} != input shape {model.manifest.input_shape}"
        )
    probs, _ = _forward_pass(model.manifest, model_arrays(model), batch, qat, False)
    return probs


def _backward_pass(manifest, arrays, x, labels, qat: QatConfig | None):
    probs, caches = _forward_pass(manifest, arrays, x, qat, True)
    n = x.shape[0]
    logp = caches[-1]["logp"]
    loss = -float(logp[np.arange(n), labels].mean())

    if caches[-1]["layer"].kind != "Softmax":
        raise HarnessError("backward requires a Softmax output layer")
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g /= n

    grads = {}
    for cache in reversed(caches[:-1]):
        layer = cache["layer"]
        if layer.kind == "Dense":
            dw_q = cache["a_in"].T @ g
            if layer.bias_ref is not None:
                grads[layer.bias_ref] = g.sum(axis=0)
            g = g @ cache["w_use"].T
            if qat is not None:
                dw_q = ewgs_scale_gradients(dw_q, cache["w_latent"], cache["w_use"], qat.delta)
            grads[layer.weight_ref] = dw_q
        elif layer.kind == "Conv2D":
            m = layer.conv_meta
            dx, dw_q, db = K.conv2d_backward(
                np.ascontiguousarray(cache["a_in"]),
                np.ascontiguousarray(cache["w_use"]),
                np.ascontiguousarray(g), m.stride, m.padding)
            if layer.bias_ref is not None:
                grads[layer.bias_ref] = db
            g = dx
            if qat is not None:
                dw_q = ewgs_scale_gradients(dw_q, cache["w_latent"], cache["w_use"], qat.delta)
            grads[layer.weight_ref] = dw_q
        elif layer.kind == "ReLU":
            if qat is not None:
                g = ewgs_scale_gradients(g, cache["r"], cache["r_q"], qat.delta)
            g = g * (cache["pre"] > 0.0)
        elif layer.kind == "MaxPool2x2":
            g = _pool_backward(g, cache["idx"], cache["in_shape"])
        elif layer.kind == "Flatten":
            g = g.reshape(cache["in_shape"])
    return loss, grads


def backward(model: Model, batch: np.ndarray, labels: np.ndarray,
             qat: QatConfig | None = None):
    """Mean cross-entropy loss and gradients keyed by tensor name."""
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if tuple(batch.shape[1:]) != tuple(model.manifest.input_shape):
        raise HarnessError("batch shape mismatch")
    return _backward_pass(model.manifest, model_arrays(model), batch, labels, qat)


def _eval_arrays(manifest, arrays, ds: Dataset, qat, batch: int = 512) -> float:
    correct = 0
    for lo in range(0, ds.n, batch):
        x = ds.inputs[lo : lo + batch]
        probs, _ = _forward_pass(manifest, arrays, x, qat, False)
        correct += int((probs.argmax(axis=1) == ds.labels[lo : lo + batch]).sum())
    return correct / ds.n


def evaluate(model: Model, dataset: Dataset, qat: QatConfig | None = None,
             limit: int | None = None) -> float:
    """Top-1 accuracy; argmax ties resolve toward the lowest class index."""
    ds = dataset.take(limit)
    return _eval_arrays(model.manifest, model_arrays(model), ds, qat)


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          qat: QatConfig | None = None, epoch_hook=None):
    """SGD with momentum; EWGS fake-quant training when ``qat`` is given.

    Returns (trained model, GradientStats of the final epoch, per-epoch
    metrics). ``epoch_hook(epoch, arrays, stats)`` runs after each epoch and
    may mutate the weight arrays in place (used for k-means reclustering).
    """
    if dataset.split != TRAIN or dataset.n == 0:
        raise HarnessError("train needs a non-empty Train split")
    for t in model.tensors.values():
        if t.dtype != F32:
            raise HarnessError("training requires an all-f32 model")
    if cfg.epochs == 0:
        return model, GradientStats({}, 0), []

    manifest = model.manifest
    arrays = model_arrays(model)
    velocity = {name: np.zeros_like(a) for name, a in arrays.items()}
    weight_names = [l.weight_ref for l in model.weight_layers()]
    metrics = []
    stats = GradientStats({}, 0)

    for epoch in range(cfg.epochs):
        perm = rng.stream(cfg.seed, "shuffle", epoch).permutation(dataset.n)
        sums = {name: np.zeros_like(arrays[name]) for name in weight_names}
        n_batches = 0
        loss_sum = 0.0
        for lo in range(0, dataset.n, cfg.batch_size):
            sel = perm[lo : lo + cfg.batch_size]
            loss, grads = _backward_pass(manifest, arrays, dataset.inputs[sel],
                                         dataset.labels[sel], qat)
            if not np.isfinite(loss):
                raise TrainDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {n_batches}",
                    checkpoint=arrays)
            for name, g in grads.items():
                v = velocity[name]
                v *= cfg.momentum
                v += g
                arrays[name] -= cfg.learning_rate * v
            if qat is not None:
                for name in weight_names:
                    lo_c, hi_c = qat.weight_clips[name]
                    np.clip(arrays[name], lo_c, hi_c, out=arrays[name])
            for name in weight_names:
                np.add(sums[name], np.abs(grads[name]), out=sums[name])
            loss_sum += loss * len(sel)
            n_batches += 1
        stats = GradientStats(sums, n_batches)
        if epoch_hook is not None:
            epoch_hook(epoch, arrays, stats)
        metrics.append({
            "epoch": epoch,
            "loss": loss_sum / dataset.n,
            "accuracy": _eval_arrays(manifest, arrays, dataset, qat),
        })
    return arrays_to_model(model, arrays), stats, metrics


def accumulate_gradients(model: Model, dataset: Dataset, batch_size: int = 64,
                         qat: QatConfig | None = None) -> GradientStats:
    """Sum |grad| over one pass of the dataset without updating weights."""
    arrays = model_arrays(model)
    weight_names = [l.weight_ref for l in model.weight_layers()]
    sums = {name: np.zeros_like(arrays[name]) for name in weight_names}
    n_batches = 0
    for lo in range(0, dataset.n, batch_size):
        _, grads = _backward_pass(model.manifest, arrays,
                                  dataset.inputs[lo : lo + batch_size],
                                  dataset.labels[lo : lo + batch_size], qat)
        for name in weight_names:
            np.add(sums[name], np.abs(grads[name]), out=sums[name])
        n_batches += 1
    return GradientStats(sums, n_batches)


def collect_relu_outputs(model: Model, dataset: Dataset) -> dict:
    """Post-ReLU activation samples per ReLU layer (for clip calibration)."""
    tap = {}
    arrays = model_arrays(model)
    for lo in range(0, dataset.n, 512):
        _forward_pass(model.manifest, arrays, dataset.inputs[lo : lo + 512],
                      None, False, act_tap=tap)
    return {name: np.concatenate([v.reshape(-1) for v in vals])
            for name, vals in tap.items()}
