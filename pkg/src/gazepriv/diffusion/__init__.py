"""Conditional DDPM on two-channel gaze velocity."""
from .denoiser import ReferenceDenoiser, init_params
from .process import (
    Conditioning,
    NoiseSchedule,
    NoisyState,
    forward_noising,
    linear_schedule,
    loss,
    predict_x0,
    reverse_step,
    sample,
    schedule_from_betas,
)
from .serialize import load_model, save_model
from .training import TrainingConfig, TrainResult, synthesize_window, train
