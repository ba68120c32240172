"""Adaptive early feature selection for deep CTR models.

A small auxiliary model scores feature fields per instance before the main
embedding layer; the main model embeds only the selected fields. Both models
train jointly with embedding and prediction alignment losses, and the package
accounts exactly for activated embedding parameters and lookups.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    FieldSchema,
    Instance,
    RawRecord,
    SyntheticSpec,
    Vocabulary,
    build_vocab,
    discretize_numeric,
    generate_synthetic,
    quantize,
    split_dataset,
)
from .embedding import (
    ActivationLedger,
    EmbeddingSet,
    EmbeddingTable,
    compose_activated_params,
    delta_el,
    delta_pae,
    full_param_count,
    record_batch_activation,
)
from .metrics import Metrics, auc, emit_report, logloss, parse_report, welch_t_test
from .numerics import Adam, AdamState, BatchNorm1d, Linear, Tensor, adam_step, grad_check, \
    sigmoid, softmax, xavier_init
from .predictors import Controller, PredictorConfig, bce, build_predictor
from .selection import (
    DualModel,
    ForwardTrace,
    SelectionResult,
    aefs_forward,
    embedding_alignment_loss,
    k_max_indices,
    l1_normalize_selected,
    prediction_alignment_loss,
    scale_embeddings,
)
from .training import (
    TrainConfig,
    TrainReport,
    evaluate,
    load_checkpoint,
    prepare,
    pretrain,
    save_checkpoint,
    selection_stats,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
