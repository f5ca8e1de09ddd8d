"""MASER: federated learning with multi-key homomorphic aggregation of pruned models."""

from .config import ExperimentConfig, parse_config
from .errors import Abort, ConfigError, FormatError, MaserError, ProtocolError
from .mkhe import (
    aggregate_pk,
    ct_add,
    decode,
    encode,
    encrypt,
    keygen,
    merge,
    partial_dec,
    setup,
)
from .model import Architecture, ModelParams, TrainConfig, fedavg, local_train
from .protocol.experiment import run_experiment, run_plaintext
from .report import ExperimentReport, summarize
from .sparsify import Mask, gen_mask, make_slices, reconstruct, vote_masks

__version__ = "0.1.0"

__all__ = [
    "Abort",
    "Architecture",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "FormatError",
    "MaserError",
    "Mask",
    "ModelParams",
    "ProtocolError",
    "TrainConfig",
    "aggregate_pk",
    "ct_add",
    "decode",
    "encode",
    "encrypt",
    "fedavg",
    "gen_mask",
    "keygen",
    "local_train",
    "make_slices",
    "merge",
    "parse_config",
    "partial_dec",
    "reconstruct",
    "run_experiment",
    "run_plaintext",
    "setup",
    "summarize",
    "vote_masks",
]
