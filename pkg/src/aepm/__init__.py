"""Knee joint angle reconstruction with a spatial-temporal transformer."""
from .model import AEPM, ModelConfig, PredictionSet, init_parameters, load_checkpoint, save_checkpoint
from .motion_data import MotionSequence, parse_motion_csv, synth_gait, subject_spec, write_motion_csv
from .training import TrainConfig, train
from .evaluation import KneeReadout, rmse_best, rmse_mean, scenario_report, sliding_infer

__all__ = [
    "AEPM", "ModelConfig", "PredictionSet", "init_parameters", "load_checkpoint", "save_checkpoint",
    "MotionSequence", "parse_motion_csv", "synth_gait", "subject_spec", "write_motion_csv",
    "TrainConfig", "train", "KneeReadout", "rmse_best", "rmse_mean", "scenario_report", "sliding_infer",
]
