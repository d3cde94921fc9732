"""SPLASH activations, a small autodiff engine, and adversarial-attack tooling."""
__version__ = "0.1.0"

from .activations import ActivationKind, PiecewiseLinearSpec, SplashActivation, make_splash_spec, param_count
from .approx import FitResult, fit_splash
from .attacks import AttackConfig, AttackReport, run_campaign
from .data import Dataset, mnist_like
from .nn import Model, TrainConfig, build_model, load_checkpoint, save_checkpoint, train
from .tensor import Graph, Parameter, Tensor

__all__ = [
    "ActivationKind", "AttackConfig", "AttackReport", "Dataset", "FitResult", "Graph", "Model", "Parameter",
    "PiecewiseLinearSpec", "SplashActivation", "Tensor", "TrainConfig", "build_model", "fit_splash",
    "load_checkpoint", "make_splash_spec", "mnist_like", "param_count", "run_campaign", "save_checkpoint", "train",
]
