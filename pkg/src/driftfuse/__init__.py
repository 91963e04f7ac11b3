"""Exemplar-free, domain-id-free domain-incremental learning engine.

Trains a disentangled two-stream classifier over backbone feature vectors,
consolidates knowledge across tasks with QR-based weight fusion, and
reports incremental-accuracy metrics.
"""

from .data import (
    DataFormatError,
    DomainFeatureReservoir,
    DomainStream,
    FeatureBatch,
    SyntheticConfig,
    generate_synthetic,
    read_features,
    write_features,
)
from .disentangle import (
    TwoStreamModel,
    build_model,
    difficulty_weight,
    disentangle_loss,
    encode,
    swap_features,
    swap_loss,
    total_loss,
)
from .fusion import FusionConfig, FusionSnapshot, capture_structure, fuse_encoder, fuse_weights, fusion_mask
from .linalg import clamp01, frobenius_diff, max_abs, qr_decompose
from .trainer import (
    AccuracyMatrix,
    NumericalError,
    RunReport,
    TrainConfig,
    ablate,
    evaluate,
    run_sequence,
    sweep,
    train_task,
)

__version__ = "0.1.0"
