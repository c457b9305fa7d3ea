"""Checkpoint data structures for adaptive topology-aware checkpointing.

The store logic lives in ``src.services.checkpoints``; this module only holds
the records it manipulates so that configuration can reference the policy
without importing the service layer.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

from ..core.errors import InvalidInput
from .topology import ClusterAssignment, ConnectivityMatrix
from .twin_model import TwinModel


class StoreMode(Enum):
    """Checkpoint saving strategies."""
    NAIVE = "naive"
    FIXED = "fixed"
    ATAC = "atac"


@dataclass
class StorePolicy:
    """Tunables of the checkpoint store."""
    mode: StoreMode = StoreMode.ATAC
    fixed_interval: int = 10
    lambda_w: float = 1.0
    lambda_c: float = 1.0
    tau_drift: float = 0.05
    kappa: float = 0.5
    p_min: float = 1.0
    p_max: float = 20.0
    budget: int = 64
    recent_window: int = 50

    def __post_init__(self):
        if isinstance(self.mode, str):
            try:
                self.mode = StoreMode(self.mode)
            except ValueError:
                raise InvalidInput(f"Unknown checkpoint mode: '{self.mode}'")

    def validate(self) -> None:
        """Check ordering and positivity constraints.

        Raises:
            InvalidInput: If any bound is violated
        """
        if not 1 <= self.p_min <= self.p_max:
            raise InvalidInput(f"Interval bounds must satisfy 1 <= p_min <= p_max, got: [{self.p_min}, {self.p_max}]")
        if self.budget < 2:
            raise InvalidInput(f"Checkpoint budget must be at least 2, got: {self.budget}")
        if self.fixed_interval < 1:
            raise InvalidInput(f"Fixed interval must be positive, got: {self.fixed_interval}")
        if self.lambda_w < 0 or self.lambda_c < 0:
            raise InvalidInput("Utility weights cannot be negative")
        if self.tau_drift <= 0 or self.kappa <= 0:
            raise InvalidInput("tau_drift and kappa must be positive")
        if self.recent_window < 0:
            raise InvalidInput("recent_window cannot be negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode.value,
            'fixed_interval': self.fixed_interval,
            'lambda_w': self.lambda_w,
            'lambda_c': self.lambda_c,
            'tau_drift': self.tau_drift,
            'kappa': self.kappa,
            'p_min': self.p_min,
            'p_max': self.p_max,
            'budget': self.budget,
            'recent_window': self.recent_window,
        }


@dataclass
class Checkpoint:
    """A stored global model with its topology snapshot."""
    round: int
    model: TwinModel
    connectivity: Optional[ConnectivityMatrix] = None
    clusters: Optional[ClusterAssignment] = None
    anchor: bool = False

    @property
    def bytes(self) -> int:
        """Storage accounting: 8 bytes per parameter plus the matrix."""
        size = self.model.dimension * 8
        if self.connectivity is not None:
            size += self.connectivity.n * self.connectivity.n * 8
        return size


@dataclass
class SaveDecision:
    """Outcome of observing one round."""
    round: int
    saved: bool
    reason: str = ""
    anchor: bool = False
    utility: float = 0.0
    interval: float = 0.0
    evicted: List[int] = field(default_factory=list)


@dataclass
class StoreState:
    """Mutable state of a checkpoint store."""
    checkpoints: Dict[int, Checkpoint] = field(default_factory=dict)
    p_t: float = 1.0
    rounds_since_save: int = 0
    last_round: int = 0
    last_model: Optional[TwinModel] = None
    last_connectivity: Optional[ConnectivityMatrix] = None
    over_budget: bool = False

    def rounds(self) -> List[int]:
        """Stored rounds in ascending order."""
        return sorted(self.checkpoints)
