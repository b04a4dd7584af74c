"""Desk-scale federated learning: FedAvg training of a toy segmentation
network, cascaded lung masking of a classification dataset, and Grad-CAM
explanation, with a deterministic simulation mode and a TCP mode."""

__version__ = "0.1.0"

from .errors import FedkitError
from .federation import (
    ClientUpdate,
    FLConfig,
    FederationResult,
    RoundRecord,
    evaluate_global,
    fedavg_aggregate,
    local_train,
    partition_iid,
    rounds_to_threshold,
    run_federation,
    run_round,
    select_clients,
)
from .models import (
    ARCHITECTURES,
    CLS_CNN_PLAIN,
    CLS_CNN_SKIP,
    SEG_UNET_MINI,
    ModelWeights,
    build_network,
    extract_weights,
    load_weights,
)
from .optim import OptimizerSpec
from .transport import LoopbackTransport, client_run, run_simulation, serve

__all__ = [
    "ARCHITECTURES",
    "CLS_CNN_PLAIN",
    "CLS_CNN_SKIP",
    "ClientUpdate",
    "FLConfig",
    "FederationResult",
    "FedkitError",
    "LoopbackTransport",
    "ModelWeights",
    "OptimizerSpec",
    "RoundRecord",
    "SEG_UNET_MINI",
    "build_network",
    "client_run",
    "evaluate_global",
    "extract_weights",
    "fedavg_aggregate",
    "load_weights",
    "local_train",
    "partition_iid",
    "rounds_to_threshold",
    "run_federation",
    "run_round",
    "run_simulation",
    "select_clients",
    "serve",
]
