from .checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from .config import LossBreakdown, ModelConfig, Variant, Vocab
from .forward import (batch_logits, batch_loss, build_batch, compute_loss, forward, forward_ed, forward_lm,
                      forward_palm, forward_red)
from .params import ModelParams, init_params, parameter_count
from .training import (OptimizerSettings, TrainingDivergedError, TrainResult, backward, gradient_check,
                       greedy_decode, greedy_decode_batch, train)

__all__ = [
    "CheckpointError", "LossBreakdown", "ModelConfig", "ModelParams", "OptimizerSettings",
    "TrainResult", "TrainingDivergedError", "Variant", "Vocab", "backward", "batch_logits", "batch_loss",
    "build_batch", "checkpoint_bytes", "compute_loss", "forward", "forward_ed", "forward_lm", "forward_palm",
    "forward_red", "gradient_check", "greedy_decode", "greedy_decode_batch", "init_params",
    "load_checkpoint", "parameter_count", "parse_checkpoint", "save_checkpoint", "train",
]
