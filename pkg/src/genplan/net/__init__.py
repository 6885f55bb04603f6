from .model import ArchConfig, BCModel, Denoiser, DenoiserInput, DenoiserOutput, modulate, sinusoidal
from .params import (
    CheckpointError,
    MissingTape,
    NonFiniteGradient,
    ParamStore,
    backward,
    load_into,
    loss_grads,
    optimizer_step,
    read_checkpoint,
    save_checkpoint,
)

__all__ = [
    "ArchConfig", "BCModel", "Denoiser", "DenoiserInput", "DenoiserOutput", "modulate", "sinusoidal",
    "CheckpointError", "MissingTape", "NonFiniteGradient", "ParamStore", "backward", "load_into",
    "loss_grads", "optimizer_step", "read_checkpoint", "save_checkpoint",
]
