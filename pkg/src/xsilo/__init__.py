"""Differentially private cross-silo learning: secure summation, distributed
noise, oblivious subsampling and random projection over simulated parties."""

from .config import ExperimentConfig, PartySpec, ProtocolConfig, load_config
from .dpnoise import NoisePlan, plan_noise
from .fixedpoint import FixedPointCodec, FixedVector, decode, encode
from .harness import inject_adversary, run_experiment
from .learner import Model, TrainConfig, run_training
from .projection import ProjectionSpec, solve_sensitivity
from .transport import SecureSum

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "FixedPointCodec",
    "FixedVector",
    "Model",
    "NoisePlan",
    "PartySpec",
    "ProjectionSpec",
    "ProtocolConfig",
    "SecureSum",
    "TrainConfig",
    "decode",
    "encode",
    "inject_adversary",
    "load_config",
    "plan_noise",
    "run_experiment",
    "run_training",
    "solve_sensitivity",
]
