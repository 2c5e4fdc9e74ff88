"""Decoy-state BB84 link simulator with adversarial side-channel detection."""

from .physics import ChannelParams, DecoyConfig
from .attacks import (
    AttackParams,
    Blinding,
    FeasibleSet,
    Null,
    PNS,
    TimeShift,
    Trojan,
    eve_leakage,
    is_feasible,
    project,
)
from .simulator import BlockRecord, simulate_block, simulate_stream
from .telemetry import extract_features, fit_normalizer
from .finite_key import (
    EpsilonBudget,
    attacked_secret_fraction,
    operational_loss,
    pooled_secret_fraction,
    secret_fraction,
)
from .defender import DefenderModel, load_model, save_model
from .training import MetricsReport, TrainConfig, evaluate_model, minimax_train

__version__ = "0.1.0"

__all__ = [
    "AttackParams",
    "Blinding",
    "BlockRecord",
    "ChannelParams",
    "DecoyConfig",
    "DefenderModel",
    "EpsilonBudget",
    "FeasibleSet",
    "MetricsReport",
    "Null",
    "PNS",
    "TimeShift",
    "TrainConfig",
    "Trojan",
    "attacked_secret_fraction",
    "eve_leakage",
    "evaluate_model",
    "extract_features",
    "fit_normalizer",
    "is_feasible",
    "load_model",
    "minimax_train",
    "operational_loss",
    "pooled_secret_fraction",
    "project",
    "save_model",
    "secret_fraction",
    "simulate_block",
    "simulate_stream",
]
