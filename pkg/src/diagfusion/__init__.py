"""Multimodal failure diagnosis for microservice systems.

Telemetry (traces, logs, metrics) is turned into time-ordered event
sequences, events are embedded with a supervised bag-of-n-grams model,
and a topology-adaptive graph network over the service dependency graph
ranks root-cause instances and predicts the failure type.
"""
from .errors import ConfigError, DataError, DiagFusionError, ModelFormatError, TrainingDivergence

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DiagFusionError", "ModelFormatError", "TrainingDivergence"]
