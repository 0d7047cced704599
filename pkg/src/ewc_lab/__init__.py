"""Elastic weight consolidation on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .autodiff import ParamVector
from .ewc import PenaltyLedger, TaskAnchor, penalty, penalty_gradient
from .fisher import FisherEstimate, estimate_fisher
from .model import Architecture, Batch, accuracy, init_params
from .tasks import StreamConfig, build_stream
from .trainer import TrainConfig, run_sequence, lambda_sweep

__all__ = [
    "ParamVector", "PenaltyLedger", "TaskAnchor", "penalty", "penalty_gradient",
    "FisherEstimate", "estimate_fisher", "Architecture", "Batch", "accuracy", "init_params",
    "StreamConfig", "build_stream", "TrainConfig", "run_sequence", "lambda_sweep",
]
