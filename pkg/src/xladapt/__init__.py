"""Cross-lingual domain adaptation toolkit.

Trains a shared-trunk multi-task frame classifier on source-domain data,
adapts the first k trunk layers on well-resourced target-domain data with
everything else frozen, and grafts the adapted trunk onto the untouched
low-resource head. Ships the synthetic bilingual/bidomain benchmark and the
baseline systems needed to compare the approach at desk scale.
"""

__version__ = "0.1.0"

from .model import (
    FreezeMask,
    LayerSpec,
    Network,
    NetworkSpec,
    build_network,
    forward,
    load_checkpoint,
    make_tdnn_spec,
    save_checkpoint,
    splice_context,
    transfer_shared_layers,
)
from .numerics import Rng, affine_forward, backward_chain, relu, softmax, softmax_xent
from .synthdata import (
    Corpus,
    DomainSpec,
    LanguageSpec,
    Utterance,
    bayes_oracle_error,
    load_corpus,
    make_language,
    sample_corpus,
    save_corpus,
)
from .training import (
    TrainConfig,
    adapt_shared_layers,
    apply_update,
    lr_schedule,
    train_multitask,
    train_single_task,
)

__all__ = [
    "Corpus",
    "DomainSpec",
    "FreezeMask",
    "LanguageSpec",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "Rng",
    "TrainConfig",
    "Utterance",
    "adapt_shared_layers",
    "affine_forward",
    "apply_update",
    "backward_chain",
    "bayes_oracle_error",
    "build_network",
    "forward",
    "load_checkpoint",
    "load_corpus",
    "lr_schedule",
    "make_language",
    "make_tdnn_spec",
    "relu",
    "sample_corpus",
    "save_checkpoint",
    "save_corpus",
    "softmax",
    "softmax_xent",
    "splice_context",
    "train_multitask",
    "train_single_task",
    "transfer_shared_layers",
]
