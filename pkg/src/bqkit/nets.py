"""Reference desk-scale classifier architectures with seeded initialization."""

from __future__ import annotations

import numpy as np

from . import rng
from .container import ConvMeta, LayerDesc, Model, ModelManifest, TensorRecord, F32

ARCHS = ("mlp", "cnn", "cnn4", "cnnpw")


def _init(name: str, shape: tuple, fan_in: int, seed: int) -> TensorRecord:
    g = rng.stream(seed, "init", name)
    bound = 1.0 / np.sqrt(fan_in)
    w = g.uniform(-bound, bound, size=shape).astype(np.float32)
    return TensorRecord(name, F32, shape, w.reshape(-1))


def _zeros(name: str, shape: tuple) -> TensorRecord:
    return TensorRecord(name, F32, shape, np.zeros(int(np.prod(shape)), dtype=np.float32))


def _dense(name, d_in, d_out, seed, tensors, layers):
    tensors[f"{name}.w"] = _init(f"{name}.w", (d_in, d_out), d_in, seed)
    tensors[f"{name}.b"] = _zeros(f"{name}.b", (d_out,))
    layers.append(LayerDesc(name, "Dense", f"{name}.w", f"{name}.b"))


def _conv(name, c_in, c_out, k, pad, seed, tensors, layers):
    tensors[f"{name}.w"] = _init(f"{name}.w", (c_out, c_in, k, k), c_in * k * k, seed)
    tensors[f"{name}.b"] = _zeros(f"{name}.b", (c_out,))
    layers.append(LayerDesc(name, "Conv2D", f"{name}.w", f"{name}.b",
                            ConvMeta(k, c_in, c_out, 1, pad)))


def build_model(arch: str, num_classes: int, seed: int, input_dim: int = 16) -> Model:
    """Construct an initialized reference net.

    mlp   : Dense(d,32) ReLU Dense(32,C)                  (flat inputs)
    cnn   : two 3x3 convs with pooling, one Dense head    (1x8x8 inputs)
    cnn4  : three convs + two Dense layers (5 weighted)   (1x8x8 inputs)
    cnnpw : cnn with an extra 1x1 point-wise conv         (1x8x8 inputs)
    """
    tensors: dict = {}
    layers: list = []

    if arch == "mlp":
        input_shape = (input_dim,)
        _dense("fc1", input_dim, 32, seed, tensors, layers)
        layers.append(LayerDesc("act1", "ReLU"))
        _dense("fc2", 32, num_classes, seed, tensors, layers)
    elif arch == "cnn":
        input_shape = (1, 8, 8)
        _conv("conv1", 1, 8, 3, 1, seed, tensors, layers)
        layers.append(LayerDesc("act1", "ReLU"))
        layers.append(LayerDesc("pool1", "MaxPool2x2"))
        _conv("conv2", 8, 16, 3, 1, seed, tensors, layers)
        layers.append(LayerDesc("act2", "ReLU"))
        layers.append(LayerDesc("pool2", "MaxPool2x2"))
        layers.append(LayerDesc("flat", "Flatten"))
        _dense("fc", 16 * 2 * 2, num_classes, seed, tensors, layers)
    elif arch == "cnn4":
        input_shape = (1, 8, 8)
        _conv("conv1", 1, 8, 3, 1, seed, tensors, layers)
        layers.append(LayerDesc("act1", "ReLU"))
        layers.append(LayerDesc("pool1", "MaxPool2x2"))
        _conv("conv2", 8, 12, 3, 1, seed, tensors, layers)
        layers.append(LayerDesc("act2", "ReLU"))
        _conv("conv3", 12, 16, 3, 1, seed, tensors, layers)
        layers.append(LayerDesc("act3", "ReLU"))
        layers.append(LayerDesc("pool2", "MaxPool2x2"))
        layers.append(LayerDesc("flat", "Flatten"))
        _dense("fc1", 16 * 2 * 2, 16, seed, tensors, layers)
        layers.append(LayerDesc("act4", "ReLU"))
        _dense("fc2", 16, num_classes, seed, tensors, layers)
    elif arch == "cnnpw":
        input_shape = (1, 8, 8)
        _conv("conv1", 1, 8, 3, 1, seed, tensors, layers)
        layers.append(LayerDesc("act1", "ReLU"))
        layers.append(LayerDesc("pool1", "MaxPool2x2"))
        _conv("pw1", 8, 16, 1, 0, seed, tensors, layers)
        layers.append(LayerDesc("act2", "ReLU"))
        _conv("conv2", 16, 16, 3, 1, seed, tensors, layers)
        layers.append(LayerDesc("act3", "ReLU"))
        layers.append(LayerDesc("pool2", "MaxPool2x2"))
        layers.append(LayerDesc("flat", "Flatten"))
        _dense("fc", 16 * 2 * 2, num_classes, seed, tensors, layers)
    else:
        raise ValueError(f"unknown arch {arch!r}; choose from {ARCHS}")

    layers.append(LayerDesc("out", "Softmax"))
    return Model(ModelManifest(tuple(layers), input_shape, num_classes), tensors)
