"""Query-efficient black-box adversarial attacks guided by a neural process."""

from .anp import (AnpParameters, DeterministicRep, LatentGaussian, PixelContext,
                  decode, elbo_loss, encode, image_to_context, reconstruct,
                  train_np)
from .attack import (AttackConfig, AttackResult, margin_loss, nes_update,
                     project, run_attack, sample_batch, success_curve)
from .autodiff import (Adam, Tape, Tensor, backward, gradient_check,
                       scaled_dot_attention)
from .baselines import PixelNesConfig, coordinate_fd_attack, pixel_nes_attack
from .checkpoint import load_anp, load_classifier, save_anp, save_classifier
from .data import LabeledDataset, load_idx, synth_dataset
from .errors import (CheckpointError, ConfigError, ContractViolation,
                     IdxFormatError)
from .harness import (ExperimentSpec, MetricsRow, compare, parse_config,
                      reconstruction_gap, run_experiment)
from .victim import Classifier, QueryOracle, fgsm_attack, train_classifier

__all__ = [
    "Adam", "AnpParameters", "AttackConfig", "AttackResult", "CheckpointError",
    "Classifier", "ConfigError", "ContractViolation", "DeterministicRep",
    "ExperimentSpec", "IdxFormatError", "LabeledDataset", "LatentGaussian",
    "MetricsRow", "PixelContext", "PixelNesConfig", "QueryOracle", "Tape",
    "Tensor", "backward", "compare", "coordinate_fd_attack", "decode",
    "elbo_loss", "encode", "fgsm_attack", "gradient_check", "image_to_context",
    "load_anp", "load_classifier", "load_idx", "margin_loss", "nes_update",
    "parse_config", "pixel_nes_attack", "project", "reconstruct",
    "reconstruction_gap", "run_attack", "run_experiment", "sample_batch",
    "save_anp", "save_classifier", "scaled_dot_attention", "success_curve",
    "synth_dataset", "train_classifier", "train_np",
]
