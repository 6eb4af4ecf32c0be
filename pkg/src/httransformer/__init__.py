"""Event-sequence transformers with history-token bottleneck pretraining."""

from . import diffcore, encoder, experiments, httokens, masks, model, objectives, pipeline, seqdata, toygen
from .diffcore import Tensor
from .experiments import ExperimentConfig, run_experiment, sweep
from .httokens import HTConfig
from .model import SequenceModel, TransformerConfig
from .pipeline import TrainConfig, extract_embeddings, finetune, pretrain
from .seqdata import Dataset, EventSequence, FieldSchema, load_dataset, split_dataset
from .toygen import ToyConfig, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ExperimentConfig",
    "run_experiment",
    "sweep",
    "HTConfig",
    "SequenceModel",
    "TransformerConfig",
    "TrainConfig",
    "extract_embeddings",
    "finetune",
    "pretrain",
    "Dataset",
    "EventSequence",
    "FieldSchema",
    "load_dataset",
    "split_dataset",
    "ToyConfig",
    "generate_dataset",
    "diffcore",
    "encoder",
    "experiments",
    "httokens",
    "masks",
    "model",
    "objectives",
    "pipeline",
    "seqdata",
    "toygen",
    "__version__",
]
