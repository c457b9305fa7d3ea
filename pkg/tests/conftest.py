"""Shared scenario builders for the test suite."""

from typing import Any, Dict, Optional

import numpy as np
import pytest

from src.core.config import RunConfig
from src.data.twin_model import SampleBatch


def small_config(
    num_ndts: int = 3,
    rounds: int = 10,
    horizon: int = 120,
    seed: int = 0,
    output_dir: Optional[str] = None,
    **sections: Dict[str, Any],
) -> RunConfig:
    """A validated RunConfig small enough to twin in well under a second.

    Extra keyword arguments are merged into the matching config sections.
    """
    data: Dict[str, Any] = {
        'seed': seed,
        'scenario': {'num_ndts': num_ndts, 'horizon': horizon, 'seed': seed},
        'training': {'rounds': rounds, 'local_steps': 2},
        'untwin': {'lipschitz_probes': 20},
        'execution': {'output_dir': output_dir or 'runs/test'},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    config = RunConfig.from_dict(data)
    config.validate()
    return config


def random_batch(rng: np.random.Generator, size: int = 8, input_dim: int = 3) -> SampleBatch:
    return SampleBatch(rng.normal(size=(size, input_dim)), rng.normal(size=size))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return small_config(output_dir=str(tmp_path / "run"))
