"""Neutral model container: named tensors, layer metadata, bit-exact file I/O.

".nnmod" layout: magic ``NNM1``, little-endian u32 header length, UTF-8 JSON
header (manifest plus tensor table with name/dtype/shape/offset/length/quant),
then the raw tensor payloads, little-endian row-major, in table order.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

F32 = "f32"
U8 = "u8"

LAYER_KINDS = ("Dense", "Conv2D", "ReLU", "MaxPool2x2", "Flatten", "Softmax")

_NNMOD_MAGIC = b"NNM1"
_NNDS_MAGIC = b"NND1"

_NP_DTYPE = {F32: np.dtype("<f4"), U8: np.dtype("u1")}


class ContainerError(ValueError):
    pass


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ContainerError(f"scale must be positive, got {self.scale}")
        if not 0 <= int(self.zero_point) <= 255:
            raise ContainerError(f"zero_point out of [0,255]: {self.zero_point}")


@dataclass(frozen=True)
class TensorRecord:
    """A named flat tensor. ``data`` is 1-d, row-major, write-protected."""

    name: str
    dtype: str
    shape: tuple
    data: np.ndarray
    quant: QuantParams | None = None

    def __post_init__(self):
        if self.dtype not in _NP_DTYPE:
            raise ContainerError(f"unknown dtype {self.dtype!r}")
        shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in shape):
            raise ContainerError(f"non-positive dim in shape {shape}")
        object.__setattr__(self, "shape", shape)
        data = np.ascontiguousarray(self.data, dtype=_NP_DTYPE[self.dtype]).reshape(-1)
        if data.size != int(np.prod(shape)):
            raise ContainerError(
                f"tensor {self.name!r}: {data.size} values for shape {shape}"
            )
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.dtype == U8 and self.quant is None:
            raise ContainerError(f"u8 tensor {self.name!r} requires quant params")

    @property
    def size(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        """Values in their stored dtype, reshaped."""
        return self.data.reshape(self.shape)

    def as_float(self) -> np.ndarray:
        """float64 values, dequantized for u8 tensors."""
        if self.dtype == U8:
            q = self.quant
            return q.scale * (self.data.astype(np.float64) - q.zero_point).reshape(self.shape)
        return self.data.astype(np.float64).reshape(self.shape)


def tensor_f32(name: str, values) -> TensorRecord:
    arr = np.asarray(values, dtype=np.float32)
    return TensorRecord(name, F32, arr.shape or (1,), arr.reshape(-1))


def tensor_u8(name: str, values, quant: QuantParams) -> TensorRecord:
    arr = np.asarray(values, dtype=np.uint8)
    return TensorRecord(name, U8, arr.shape or (1,), arr.reshape(-1), quant)


@dataclass(frozen=True)
class ConvMeta:
    k: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class LayerDesc:
    name: str
    kind: str
    weight_ref: str | None = None
    bias_ref: str | None = None
    conv_meta: ConvMeta | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContainerError(f"unsupported layer kind {self.kind!r}")
        if self.kind in ("Dense", "Conv2D"):
            if self.weight_ref is None:
                raise ContainerError(f"{self.kind} layer {self.name!r} needs weight_ref")
            if self.kind == "Conv2D" and self.conv_meta is None:
                raise ContainerError(f"Conv2D layer {self.name!r} needs conv_meta")
        elif self.weight_ref is not None or self.bias_ref is not None:
            raise ContainerError(f"{self.kind} layer {self.name!r} cannot carry weights")

    @property
    def pointwise(self) -> bool:
        return self.kind == "Conv2D" and self.conv_meta.k == 1


@dataclass(frozen=True)
class ModelManifest:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 1:
            raise ContainerError("num_classes must be positive")


@dataclass(frozen=True)
class Model:
    manifest: ModelManifest
    tensors: dict = field(default_factory=dict)

    def tensor(self, name: str) -> TensorRecord:
        return self.tensors[name]

    def replace_tensor(self, record: TensorRecord) -> "Model":
        """Copy-on-write tensor substitution; the original model is untouched."""
        if record.name not in self.tensors:
            raise ContainerError(f"unknown tensor {record.name!r}")
        tensors = dict(self.tensors)
        tensors[record.name] = record
        return Model(self.manifest, tensors)

    def weight_layers(self) -> list:
        return [l for l in self.manifest.layers if l.weight_ref is not None]

    def save(self, path) -> int:
        return save_model(self.manifest, list(self.tensors.values()), path)


def _dense_shapes(layer: LayerDesc, in_dim: int, tensors: dict):
    w = tensors[layer.weight_ref]
    if len(w.shape) != 2 or w.shape[0] != in_dim:
        raise ContainerError(
            f"Dense {layer.name!r}: weight {w.shape} does not accept input dim {in_dim}"
        )
    return w.shape[1]


def validate_model(manifest: ModelManifest, tensors: dict) -> None:
    """Checks tensor references, shapes, and layer composition end to end."""
    seen = set()
    for layer in manifest.layers:
        for ref in (layer.weight_ref, layer.bias_ref):
            if ref is None:
                continue
            if ref not in tensors:
                raise ContainerError(f"layer {layer.name!r} references missing tensor {ref!r}")
            if ref in seen:
                raise ContainerError(f"tensor {ref!r} referenced by more than one layer")
            seen.add(ref)

    shape = tuple(manifest.input_shape)
    for layer in manifest.layers:
        if layer.kind == "Dense":
            if len(shape) != 1:
                raise ContainerError(f"Dense {layer.name!r} expects flat input, got {shape}")
            out = _dense_shapes(layer, shape[0], tensors)
            if layer.bias_ref and tensors[layer.bias_ref].shape != (out,):
                raise ContainerError(f"Dense {layer.name!r}: bias shape mismatch")
            shape = (out,)
        elif layer.kind == "Conv2D":
            m = layer.conv_meta
            w = tensors[layer.weight_ref]
            if w.shape != (m.c_out, m.c_in, m.k, m.k):
                raise ContainerError(
                    f"Conv2D {layer.name!r}: weight {w.shape} != "
                    f"({m.c_out},{m.c_in},{m.k},{m.k})"
                )
            if layer.bias_ref and tensors[layer.bias_ref].shape != (m.c_out,):
                raise ContainerError(f"Conv2D {layer.name!r}: bias shape mismatch")
            if len(shape) != 3 or shape[0] != m.c_in:
                raise ContainerError(f"Conv2D {layer.name!r} expects ({m.c_in},H,W), got {shape}")
            h = (shape[1] + 2 * m.padding - m.k) // m.stride + 1
            v = (shape[2] + 2 * m.padding - m.k) // m.stride + 1
            if h < 1 or v < 1:
                raise ContainerError(f"Conv2D {layer.name!r} output collapses from {shape}")
            shape = (m.c_out, h, v)
        elif layer.kind == "MaxPool2x2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ContainerError(f"MaxPool2x2 {layer.name!r} needs even HxW, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "Flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "ReLU":
            pass
        elif layer.kind == "Softmax":
            if shape != (manifest.num_classes,):
                raise ContainerError(
                    f"Softmax expects ({manifest.num_classes},), got {shape}"
                )
    if manifest.layers and shape != (manifest.num_classes,):
        raise ContainerError(f"network output {shape} != ({manifest.num_classes},)")


# --- affine quantization -----------------------------------------------------


def quantize_affine(t: TensorRecord, q: QuantParams) -> TensorRecord:
    """u = clamp(round_half_away(x / scale) + zero_point, 0, 255)."""
    if t.dtype != F32:
        raise ContainerError("quantize_affine expects an f32 tensor")
    x = t.data.astype(np.float64)
    u = round_half_away(x / q.scale) + q.zero_point
    u = np.clip(u, 0, 255).astype(np.uint8)
    return TensorRecord(t.name, U8, t.shape, u, q)


def dequantize_affine(t: TensorRecord) -> TensorRecord:
    """x = scale * (u - zero_point)."""
    if t.dtype != U8 or t.quant is None:
        raise ContainerError("dequantize_affine expects a u8 tensor with quant params")
    q = t.quant
    x = (q.scale * (t.data.astype(np.float64) - q.zero_point)).astype(np.float32)
    return TensorRecord(t.name, F32, t.shape, x)


def quantize_model_weights(model: Model) -> Model:
    """Affine-quantize every f32 weight tensor to u8 using min/max range.

    Biases stay f32; inference dequantizes on the fly, so this is the
    desk-scale stand-in for an externally quantized model.
    """
    tensors = dict(model.tensors)
    for layer in model.weight_layers():
        t = tensors[layer.weight_ref]
        if t.dtype != F32:
            continue
        x = t.data.astype(np.float64)
        lo, hi = float(x.min()), float(x.max())
        if hi <= lo:
            hi = lo + 1e-6
        scale = (hi - lo) / 255.0
        zp = int(np.clip(round_half_away(-lo / scale), 0, 255))
        tensors[t.name] = quantize_affine(t, QuantParams(scale, zp))
    return Model(model.manifest, tensors)


# --- framed file I/O ----------------------------------------------------------


def write_atomic(path, payload: bytes) -> int:
    """Write bytes via a temp file + rename; no partial file on failure."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".bqkit-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(payload)


def _frame(magic: bytes, header: dict, chunks: list) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([magic, struct.pack("<I", len(hdr)), hdr] + chunks)


def _read_frame(path, magic: bytes):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != magic:
        raise ContainerError(f"bad magic in {path}: {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise ContainerError(f"truncated header in {path}")
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    return header, raw[8 + hlen :]


def _manifest_to_dict(m: ModelManifest) -> dict:
    return {
        "layers": [
            {
                "name": l.name,
                "kind": l.kind,
                "weight_ref": l.weight_ref,
                "bias_ref": l.bias_ref,
                "conv_meta": None
                if l.conv_meta is None
                else {
                    "k": l.conv_meta.k,
                    "c_in": l.conv_meta.c_in,
                    "c_out": l.conv_meta.c_out,
                    "stride": l.conv_meta.stride,
                    "padding": l.conv_meta.padding,
                },
                "pointwise": l.pointwise,
            }
            for l in m.layers
        ],
        "input_shape": list(m.input_shape),
        "num_classes": m.num_classes,
    }


def manifest_from_dict(d: dict) -> ModelManifest:
    layers = []
    for ld in d["layers"]:
        meta = ld.get("conv_meta")
        layers.append(
            LayerDesc(
                name=ld["name"],
                kind=ld["kind"],
                weight_ref=ld.get("weight_ref"),
                bias_ref=ld.get("bias_ref"),
                conv_meta=None
                if meta is None
                else ConvMeta(meta["k"], meta["c_in"], meta["c_out"], meta["stride"], meta["padding"]),
            )
        )
    return ModelManifest(tuple(layers), tuple(d["input_shape"]), int(d["num_classes"]))


def save_model(manifest: ModelManifest, tensors: list, path) -> int:
    """Write a ".nnmod" container; returns the byte count written."""
    by_name = {t.name: t for t in tensors}
    if len(by_name) != len(tensors):
        raise ContainerError("duplicate tensor names")
    validate_model(manifest, by_name)

    table = []
    chunks = []
    offset = 0
    for t in tensors:
        raw = t.data.tobytes()
        entry = {
            "name": t.name,
            "dtype": t.dtype,
            "shape": list(t.shape),
            "offset": offset,
            "length": len(raw),
            "quant": None
            if t.quant is None
            else {"scale": t.quant.scale, "zero_point": int(t.quant.zero_point)},
        }
        table.append(entry)
        chunks.append(raw)
        offset += len(raw)

    header = {
        "format": "nnmod",
        "version": 1,
        "manifest": _manifest_to_dict(manifest),
        "tensors": table,
    }
    return write_atomic(path, _frame(_NNMOD_MAGIC, header, chunks))


def load_model(path) -> Model:
    header, payload = _read_frame(path, _NNMOD_MAGIC)
    if header.get("format") != "nnmod" or header.get("version") != 1:
        raise ContainerError(f"unsupported container version in {path}")
    manifest = manifest_from_dict(header["manifest"])
    tensors = {}
    for e in header["tensors"]:
        lo, n = e["offset"], e["length"]
        if lo + n > len(payload):
            raise ContainerError(f"tensor {e['name']!r} payload truncated")
        buf = np.frombuffer(payload[lo : lo + n], dtype=_NP_DTYPE[e["dtype"]])
        quant = e.get("quant")
        qp = None if quant is None else QuantParams(quant["scale"], quant["zero_point"])
        tensors[e["name"]] = TensorRecord(e["name"], e["dtype"], tuple(e["shape"]), buf, qp)
    validate_model(manifest, tensors)
    return Model(manifest, tensors)
