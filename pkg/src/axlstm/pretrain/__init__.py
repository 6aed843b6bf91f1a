"""Pretraining: reconstruction head, masked MSE, AdamW, training loop, checkpoints, synthetic data."""

from .checkpoint import (Checkpoint, CheckpointError, ConfigMismatchError, NameCollisionError,
                         TruncatedCheckpointError, VersionMismatchError, load_checkpoint, save_checkpoint)
from .data import Clip, Dataset, band_edges, band_of, load_audio_dir, random_crop, synth_clip, synth_dataset
from .objective import masked_mse, reconstruct
from .optim import AdamW, NonFiniteGradError, adamw_update, decays, lr_schedule
from .train import (TOY_PEAK_LR, PretrainConfig, TrainError, TrainRecord, TrainResult, loss_on_batch, params_from_checkpoint,
                    prepare_batch, read_loss_csv, toy_setup, train, write_loss_csv)

__all__ = [
    "AdamW", "TOY_PEAK_LR", "Checkpoint", "CheckpointError", "Clip", "ConfigMismatchError", "Dataset", "NameCollisionError",
    "NonFiniteGradError", "PretrainConfig", "TrainError", "TrainRecord", "TrainResult", "TruncatedCheckpointError",
    "VersionMismatchError", "adamw_update", "band_edges", "band_of", "decays", "load_audio_dir", "load_checkpoint",
    "loss_on_batch", "lr_schedule", "masked_mse", "params_from_checkpoint", "prepare_batch", "random_crop",
    "read_loss_csv", "reconstruct", "save_checkpoint", "synth_clip", "synth_dataset", "toy_setup", "train", "write_loss_csv",
]
