"""Data models: twin models, topology, traffic traces and checkpoints."""

from .twin_model import ModelArch, SampleBatch, TrafficSample, TwinModel
from .topology import (
    ClusterAssignment,
    ConnectivityMatrix,
    ConnectivityWeights,
    NdtNode,
    TopologyEvent,
)
from .traffic import NdtData, ScenarioConfig, TracePair, TrafficKind, TrafficTrace
from .checkpoint_models import Checkpoint, StoreMode, StorePolicy

__all__ = [
    "ModelArch",
    "SampleBatch",
    "TrafficSample",
    "TwinModel",
    "ClusterAssignment",
    "ConnectivityMatrix",
    "ConnectivityWeights",
    "NdtNode",
    "TopologyEvent",
    "NdtData",
    "ScenarioConfig",
    "TracePair",
    "TrafficKind",
    "TrafficTrace",
    "Checkpoint",
    "StoreMode",
    "StorePolicy",
]
