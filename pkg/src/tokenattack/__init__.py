"""Block-sparse ("token") adversarial attacks on small image classifiers.

Modules:

- ``tensor``      reverse-mode autodiff over numpy arrays
- ``models``      tiny ViT, ResNet and MLP-Mixer classifiers
- ``trainer``     minibatch SGD with momentum
- ``attack``      saliency, block selection and projected gradient ascent
- ``data``        MNIST IDX / CIFAR-10 binary loaders
- ``checkpoint``  TKAT tensor container
- ``harness``     experiment protocols and CSV reports
"""

from .attack import (
    AttackBudget,
    AttackOutcome,
    BlockPartition,
    block_saliency,
    jsma_plus_saliency,
    min_token_search,
    pixel_saliency,
    project_block_linf,
    scale_budget,
    select_topk,
    sparse_attack,
    sparse_pixel_budget,
    token_attack,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, Normalization, load_dataset, select_eval_subset
from .errors import (
    ConfigError,
    ConsistencyError,
    ContractError,
    FormatError,
    NumericalError,
    ShapeError,
    TokenAttackError,
    TrainingError,
    TruncatedFileError,
)
from .harness import ExperimentConfig, RobustnessReport, emit_report
from .models import Classifier, ModelSpec, build_model, default_spec, model_forward
from .tensor import ComputationGraph, Tensor, backward
from .trainer import TrainConfig, evaluate_accuracy, train_model

__version__ = "0.1.0"
