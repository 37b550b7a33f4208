"""Compression and quantization-aware training for discrete hidden Markov models."""

from .compression import (
    QuantizedMatrix,
    QuantizedModel,
    dequantize,
    kl_divergence_rows,
    kmeans_quantize,
    layerwise_int_quantize,
    norm_q,
    normalize_rows,
    prune_ratio,
    quantize_linear_fixed,
    quantize_model,
    sparsity,
)
from .hmm import (
    IMPOSSIBLE,
    HmmModel,
    forward_backward,
    forward_loglik,
    sample_sequence,
    validate_model,
)
from .training import Corpus, EmConfig, EmRunRecord, em_step, quantization_aware_train, train

__version__ = "0.1.0"
