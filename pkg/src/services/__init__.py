"""Services package for twinning, checkpointing and untwinning."""

from .twinning import (
    TwinHistory,
    TwinningConfig,
    TwinningEngine,
    create_twinning_engine
)
from .checkpoints import CheckpointStore, create_checkpoint_store
from .untwinning import (
    UntwinRequest,
    UntwinResult,
    UntwinningConfig,
    UntwinningService,
    create_untwinning_service
)

__all__ = [
    "TwinHistory",
    "TwinningConfig",
    "TwinningEngine",
    "create_twinning_engine",
    "CheckpointStore",
    "create_checkpoint_store",
    "UntwinRequest",
    "UntwinResult",
    "UntwinningConfig",
    "UntwinningService",
    "create_untwinning_service"
]
