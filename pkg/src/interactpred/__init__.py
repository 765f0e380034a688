"""Interaction-prediction pre-training with a dual-frame encoder, plus frozen-encoder adaptation."""
from .config import ConfigError, DataConfig, ModelConfig, TrainConfig, load_train_config
from .data import BBox, KeyframeTriplet, generate_interaction_dataset, ingest_manifest, write_manifest
from .encoder import MultimodalEncoder
from .estimators import BehaviorCloningPolicy, InteractionPretrainer, ReferringGrounder
from .pretrain import InteractionModel, evaluate_pretraining, load_model, run_pretraining
from .text import FrozenTextEncoder, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "BBox", "BehaviorCloningPolicy", "ConfigError", "DataConfig", "FrozenTextEncoder",
    "InteractionModel", "InteractionPretrainer", "KeyframeTriplet", "ModelConfig",
    "MultimodalEncoder", "ReferringGrounder", "TrainConfig", "Vocabulary",
    "evaluate_pretraining", "generate_interaction_dataset", "ingest_manifest",
    "load_model", "load_train_config", "run_pretraining", "write_manifest",
]
