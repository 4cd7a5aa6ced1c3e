"""Unilateral feature alignment for domain adaptation with missing target classes."""
from .data import (Dataset, PreprocessConfig, SyntheticConfig, filter_target_classes,
                   preprocess_recording, read_dataset, synth_generate, write_dataset)
from .harness import ExperimentConfig, aggregate, emit_report, run_method, sweep
from .nets import ArchitectureSpec, ModelParams, init_params, load_checkpoint, save_checkpoint
from .train import FeatureCache, HyperParams, evaluate, stage1_pretrain, stage2_adapt

__all__ = [
    "Dataset", "PreprocessConfig", "SyntheticConfig", "filter_target_classes", "preprocess_recording",
    "read_dataset", "synth_generate", "write_dataset", "ExperimentConfig", "aggregate", "emit_report",
    "run_method", "sweep", "ArchitectureSpec", "ModelParams", "init_params", "load_checkpoint",
    "save_checkpoint", "FeatureCache", "HyperParams", "evaluate", "stage1_pretrain", "stage2_adapt",
]
