"""Rotated, top-k pruned KV caches for toy decoder-only transformers."""

__version__ = "0.1.0"

from .cache import DenseKVCache, HybridKVCache, MemoryModel, compression_curve, memory_break_even_k
from .calibration import ProjectionSet, absorb_projections, calibrate, make_ablation_variant
from .config import ModelConfig
from .corpus import Corpus, bundled_corpus, load_corpus
from .estimators import SwanCalibrator, SwanProjector, TopKPruner
from .exceptions import ConfigurationError, InvalidInputError, SwanError
from .flops import break_even_length, crossover_validate, flops_standard, flops_swan
from .model import SwanParams, ToyModel, build_toy_model, decode, load_model, save_model

__all__ = [
    "ConfigurationError", "Corpus", "DenseKVCache", "HybridKVCache", "InvalidInputError", "MemoryModel",
    "ModelConfig", "ProjectionSet", "SwanCalibrator", "SwanError", "SwanParams", "SwanProjector", "ToyModel",
    "TopKPruner", "absorb_projections", "break_even_length", "build_toy_model", "bundled_corpus", "calibrate",
    "compression_curve", "crossover_validate", "decode", "flops_standard", "flops_swan", "load_corpus",
    "load_model", "make_ablation_variant", "memory_break_even_k", "save_model",
]
