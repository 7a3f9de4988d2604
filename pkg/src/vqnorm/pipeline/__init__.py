"""Configuration, checkpoints, run manifests and the command-line pipeline."""

from .checkpoint import (load_blobs, load_brain_age, load_transformer, load_vqvae, save_blobs,
                         save_brain_age, save_transformer, save_vqvae)
from .config import EvaluationConfig, ExperimentConfig, SweepSpec, config_from_dict, load_config
from .stages import RunDir, RunManifest, run_all, run_stage

__all__ = [
    "EvaluationConfig", "ExperimentConfig", "RunDir", "RunManifest", "SweepSpec", "config_from_dict",
    "load_blobs", "load_brain_age", "load_config", "load_transformer", "load_vqvae", "run_all",
    "run_stage", "save_blobs", "save_brain_age", "save_transformer", "save_vqvae",
]
