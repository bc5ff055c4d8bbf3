"""Uniform fake quantization with element-wise gradient scaling (EWGS).

The gradient rule is multiplicative: g_x = g_q * (1 + delta * sign(g_q) * (x - x_q)).
With delta = 0 it reduces to the straight-through estimator bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import round_half_away


class QatError(ValueError):
    pass


@dataclass(frozen=True)
class QatConfig:
    weight_bits: int
    act_bits: int
    delta: float = 0.2
    # per-weight-tensor (lo, hi); per-ReLU-layer hi (activations clip at [0, hi])
    weight_clips: dict = field(default_factory=dict)
    act_clips: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_bits < 1 or self.act_bits < 1:
            raise QatError("bit widths must be >= 1")
        if not np.isfinite(self.delta) or self.delta < 0:
            raise QatError(f"delta must be finite and >= 0, got {self.delta}")
        for lo, hi in self.weight_clips.values():
            if not lo < hi:
                raise QatError(f"invalid clip range ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "delta": self.delta,
            "weight_clips": {k: [float(a), float(b)] for k, (a, b) in self.weight_clips.items()},
            "act_clips": {k: float(v) for k, v in self.act_clips.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "QatConfig":
        return QatConfig(
            weight_bits=int(d["weight_bits"]),
            act_bits=int(d["act_bits"]),
            delta=float(d["delta"]),
            weight_clips={k: (v[0], v[1]) for k, v in d.get("weight_clips", {}).items()},
            act_clips={k: float(v) for k, v in d.get("act_clips", {}).items()},
        )


def fake_quantize(x: np.ndarray, bits: int, clip_low: float, clip_high: float):
    """Quantize-then-dequantize onto the uniform grid of 2**bits levels.

    Returns (values on the grid, integer levels). Values outside the clip
    range saturate. Idempotent: re-quantizing the output is a fixed point.
    """
    if bits < 1:
        raise QatError("bits must be >= 1")
    if not clip_low < clip_high:
        raise QatError(f"invalid clip range ({clip_low}, {clip_high})")
    x = np.asarray(x, dtype=np.float64)
    n_levels = (1 << bits) - 1
    step = (clip_high - clip_low) / n_levels
    q = round_half_away((x - clip_low) / step)
    np.clip(q, 0, n_levels, out=q)
    return clip_low + q * step, q.astype(np.int64)


def ewgs_scale_gradients(g_q: np.ndarray, x: np.ndarray, x_q: np.ndarray,
                         delta: float) -> np.ndarray:
    """Map gradients w.r.t. quantized values back to the latent values."""
    if g_q.shape != x.shape or x.shape != x_q.shape:
        raise QatError("gradient/value shape mismatch")
    if delta == 0.0:
        return g_q * 1.0
    return g_q * (1.0 + delta * np.sign(g_q) * (x - x_q))


def calibrate(model, dataset, weight_bits: int, act_bits: int, delta: float = 0.2,
              sample_limit: int = 512) -> QatConfig:
    """Freeze clip ranges from the pretrained float model.

    Weights clip at their [p1, p99] percentiles; activations clip at
    [0, p99 of the post-ReLU values] observed on a forward pass.
    """
    from . import harness  # deferred: harness imports this module

    weight_clips = {}
    for layer in model.weight_layers():
        w = model.tensor(layer.weight_ref).as_float()
        lo, hi = np.percentile(w, [1.0, 99.0])
        if not lo < hi:
            lo, hi = float(w.min()) - 1e-6, float(w.max()) + 1e-6
        weight_clips[layer.weight_ref] = (float(lo), float(hi))

    acts = harness.collect_relu_outputs(model, dataset.take(sample_limit))
    act_clips = {}
    for name, values in acts.items():
        hi = float(np.percentile(values, 99.0)) if values.size else 0.0
        act_clips[name] = hi if hi > 0 else 1.0
    return QatConfig(weight_bits, act_bits, delta, weight_clips, act_clips)
