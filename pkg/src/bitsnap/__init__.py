"""bitsnap: checkpoint compression with bitmask delta sparsification,
cluster-based 8-bit quantization and asynchronous in-memory staging."""

from .tensors import Checkpoint, ElementType, TensorBlob
from .bitmask import DeltaCheckpoint, DeltaRecord, chain_encode, decode_delta, encode_delta
from .quantizer import ClusterTable, QuantizedTensor, build_clusters, dequantize, quantize
from .store import CheckpointManifest, StoreConfig, load_checkpoint, save_checkpoint
from .engine import AsyncAgent, RankReport, SlotRegion, recover
from .metrics import QualityReport, QualityWeights, measure

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ElementType",
    "TensorBlob",
    "DeltaCheckpoint",
    "DeltaRecord",
    "chain_encode",
    "encode_delta",
    "decode_delta",
    "ClusterTable",
    "QuantizedTensor",
    "build_clusters",
    "quantize",
    "dequantize",
    "CheckpointManifest",
    "StoreConfig",
    "save_checkpoint",
    "load_checkpoint",
    "AsyncAgent",
    "RankReport",
    "SlotRegion",
    "recover",
    "QualityReport",
    "QualityWeights",
    "measure",
    "__version__",
]
