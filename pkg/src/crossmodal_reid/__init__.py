"""Cross-modality (visible/infrared) embedding learning at desk scale."""

from .data import (
    Dataset, EmbeddingDump, Manifest, SampleRecord, SynthConfig, load_dataset, load_manifest, parse_manifest,
    random_erase, read_embeddings, save_dataset, synth_generate, write_embeddings, write_manifest,
)
from .encoder import EncoderConfig, TwoStreamEncoder, encode, gem_pool, load_checkpoint, non_local, save_checkpoint
from .estimator import CrossModalityEmbedder
from .evaluation import EvalReport, cmc, evaluate_protocol, evaluate_retrieval, mean_ap, project_2d, rank_gallery
from .exceptions import (
    BatchStructureError, DatasetError, DimensionError, DomainError, NumericError, ParameterError, ParseError,
    ProtocolError, ReIDError, TrainingError,
)
from .losses import (
    LossBreakdown, LossConfig, TupleEmbeddings, at_triplet, cmkd_loss, compactness, cos_margin_triplet,
    eat_directional, eat_loss, enumerate_terms, id_loss, total_loss,
)
from .numerics import Tensor, grad_check
from .sampler import TupleBatch, TupleSampler, sample_batch
from .trainer import OptimizerState, TrainConfig, TrainHistory, adam_step, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "BatchStructureError", "CrossModalityEmbedder", "Dataset", "DatasetError", "DimensionError", "DomainError",
    "EmbeddingDump", "EncoderConfig", "EvalReport", "LossBreakdown", "LossConfig", "Manifest", "NumericError",
    "OptimizerState", "ParameterError", "ParseError", "ProtocolError", "ReIDError", "SampleRecord", "SynthConfig",
    "Tensor", "TrainConfig", "TrainHistory", "TrainingError", "TupleBatch", "TupleEmbeddings", "TupleSampler",
    "TwoStreamEncoder", "adam_step", "at_triplet", "cmc", "cmkd_loss", "compactness", "cos_margin_triplet",
    "eat_directional", "eat_loss", "encode", "enumerate_terms", "evaluate_protocol", "evaluate_retrieval",
    "gem_pool", "grad_check", "id_loss", "load_checkpoint", "load_dataset", "load_manifest", "lr_schedule",
    "mean_ap", "non_local", "parse_manifest", "project_2d", "random_erase", "rank_gallery", "read_embeddings",
    "sample_batch", "save_checkpoint", "save_dataset", "synth_generate", "total_loss", "train", "write_embeddings",
    "write_manifest",
]
