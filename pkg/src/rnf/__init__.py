"""LSTM encoders that mirror the prediction and
update steps of Bayesian filtering, trained to forecast with missing data."""
from .core import RnfModel, init_model
from .data import LgssmSpec, Trajectory, kalman_oracle, simulate_lgssm
from .inference import filter_trajectory, multistep_predictions
from .training import TrainConfig, train_model

__version__ = "0.1.0"

__all__ = ["RnfModel", "init_model", "LgssmSpec", "Trajectory", "kalman_oracle", "simulate_lgssm",
           "filter_trajectory", "multistep_predictions", "TrainConfig", "train_model"]
