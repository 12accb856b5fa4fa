"""Error-bounded, region-adaptive lossy compression for gridded spatiotemporal fields."""
from .container import Archive, CompressConfig, compress, compression_ratio, decompress, verify_bounds
from .errors import (BoundUnattainableError, ConfigError, DecodeError, ExternalReferenceError,
                     GaecError, IntegrityError, NoEventsError)
from .grid import Field, PadPolicy, PartitionSpec, compute_ivt, partition, reassemble
from .guarantee import ResidualBasis, apply_correction, correct_patch, project, train_basis
from .predictor import ExternalSource, PredictorKind
from .roi import Bounds, HeatmapParams, PatchClass, PatchClassMap, classify_patches

__version__ = "0.1.0"
