"""Empiricalized latent-variable models with a model-agnostic posterior
approximation over latent-code indices, plus the training objectives,
synthetic benchmarks, and evaluation harness built around it."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DegenerateRowError,
    DomainError,
    FitFailureError,
    NumericError,
    RecoveryFailureError,
    TrainingError,
)

__all__ = [
    "__version__",
    "ConfigurationError",
    "DegenerateRowError",
    "DomainError",
    "FitFailureError",
    "NumericError",
    "RecoveryFailureError",
    "TrainingError",
    "Dataset",
    "GenerativeModel",
    "MapaTable",
    "TrainConfig",
    "compute_table",
    "generate",
    "train",
]


def __getattr__(name):
    # lazy re-exports keep `import mapa_lab` light
    if name in ("Dataset", "generate"):
        from . import datasets
        return getattr(datasets, name)
    if name in ("MapaTable", "compute_table"):
        from . import mapa
        return getattr(mapa, name)
    if name == "GenerativeModel":
        from .models import GenerativeModel
        return GenerativeModel
    if name in ("TrainConfig", "train"):
        from . import training
        return getattr(training, name)
    raise AttributeError(f"module 'mapa_lab' has no attribute '{name}'")
