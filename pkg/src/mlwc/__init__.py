"""Multi-level weight-centric few-shot classification on numpy."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, pack_model, save_checkpoint, unpack_model
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DataError, DatasetPair, LabeledDataset, SynthSpec, load_image_dir, sample_episode, save_image_dir, synth_generate
from .estimator import MLWCClassifier
from .evaluation import CombinedModel, EvalConfig, MetricReport, ablate, branches_of, combine, evaluate, extend
from .heads import LEVELS
from .model import MultiLevelNet
from .trainer import NumericError, TrainConfig, freeze_weights, train_stage1, train_stage2
from .weightgen import AttGenConfig, AttGenParams, att_gen, att_gen_train, avg_gen

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "pack_model",
    "save_checkpoint",
    "unpack_model",
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "DataError",
    "DatasetPair",
    "LabeledDataset",
    "SynthSpec",
    "load_image_dir",
    "sample_episode",
    "save_image_dir",
    "synth_generate",
    "MLWCClassifier",
    "CombinedModel",
    "EvalConfig",
    "MetricReport",
    "ablate",
    "branches_of",
    "combine",
    "evaluate",
    "extend",
    "LEVELS",
    "MultiLevelNet",
    "NumericError",
    "TrainConfig",
    "freeze_weights",
    "train_stage1",
    "train_stage2",
    "AttGenConfig",
    "AttGenParams",
    "att_gen",
    "att_gen_train",
    "avg_gen",
]
