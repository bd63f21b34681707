"""Kalman filtering with a learned gain adapted by a noise-ratio hypernetwork."""

from .hypercm import CMWeights, HyperParams, cm_apply, cm_weights, hyper_forward
from .kf import KFState, adaptive_kf_run, kf_predict, kf_run, kf_update, steady_state_gain
from .kgain import GainNetParams, aknet_step, features, kgain_forward, run_filter
from .params import load_checkpoint, param_count, save_checkpoint
from .ssm import (
    Dataset,
    NoiseFamily,
    NoiseSchedule,
    SSModel,
    Trajectory,
    default_model,
    generate,
    generate_batch,
    sample_noise,
    sow,
)
from .training import TrainConfig, evaluate, loss, train_stage1, train_stage2

__version__ = "0.1.0"
