"""bqkit: sensitivity-guided weight binning and gradient-weighted k-means
compression for small neural networks, with bit-exact compressed containers.
"""

from ._kernels import BACKEND
from .container import (ConvMeta, LayerDesc, Model, ModelManifest, QuantParams,
                        TensorRecord, dequantize_affine, load_model, quantize_affine,
                        save_model)
from .datasets import Dataset, load_dataset, make_blobs, make_textures, save_dataset

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConvMeta", "Dataset", "LayerDesc", "Model", "ModelManifest",
    "QuantParams", "TensorRecord", "dequantize_affine", "load_dataset",
    "load_model", "make_blobs", "make_textures", "quantize_affine",
    "save_dataset", "save_model", "__version__",
]
