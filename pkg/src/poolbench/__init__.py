"""Pooling pixel-level embedding patches into patch vectors, and benchmarking
the pooled vectors with kNN and linear probes under random and spatial splits."""

__version__ = "0.1.0"

from .pooling import PooledMatrix, PooledVector, PoolingMethodSpec, output_dim, pool  # noqa: E402
from .tiles import DatasetManifest, PatchRecord, PatchTensor, load_manifest, read_tile, write_tile  # noqa: E402

__all__ = [
    "DatasetManifest",
    "PatchRecord",
    "PatchTensor",
    "PooledMatrix",
    "PooledVector",
    "PoolingMethodSpec",
    "load_manifest",
    "output_dim",
    "pool",
    "read_tile",
    "write_tile",
]
