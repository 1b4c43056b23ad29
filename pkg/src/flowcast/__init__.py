"""Diverse trajectory sampling on top of an autoregressive affine flow.

The toy intersection simulator, the flow, the DSF and DLow samplers, the
evaluation metrics and a small CLI that drives them end to end.
"""

from .dlow import DLowConfig, predict_dlow, train_dlow
from .dsf import DsfConfig, DsfParams, predict, train_dsf_batch, train_dsf_transductive
from .flow import FlowParams, FlowTrainConfig, PredictionSet, log_likelihood, sample_iid, train_flow
from .metrics import MetricsReport, evaluate, min_ade, min_fde, self_distance
from .sim import SimConfig, build_multifuture_eval, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "DLowConfig", "DsfConfig", "DsfParams", "FlowParams", "FlowTrainConfig", "MetricsReport", "PredictionSet",
    "SimConfig", "build_multifuture_eval", "evaluate", "generate_dataset", "log_likelihood", "min_ade", "min_fde",
    "predict", "predict_dlow", "sample_iid", "self_distance", "train_dlow", "train_dsf_batch",
    "train_dsf_transductive", "train_flow",
]
