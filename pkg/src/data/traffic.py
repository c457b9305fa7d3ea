"""Synthetic correlated traffic traces and the data-similarity attribute.

Each NDT observes a flow series (vehicles per interval) and a speed series
(km/h). Both are AR(1) processes around per-NDT base means. Innovations mix a
regional factor, a spatial field shared by nearby sensors, with an
idiosyncratic factor private to the sensor; the regional share decays with
the sensor's distance to the regional anchor.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import wasserstein_distance

from ..core.errors import InvalidInput
from ..core.rng import substream
from .topology import NdtNode
from .twin_model import SampleBatch, TrafficSample

SIMILARITY_BINS = 32


class TrafficKind(Enum):
    """Measured quantity of a trace."""
    FLOW = "flow"
    SPEED = "speed"


@dataclass
class ScenarioConfig:
    """Parameters of the synthetic traffic scenario."""
    num_ndts: int = 10
    horizon: int = 720
    base_flow: Union[float, List[float]] = 120.0
    base_speed: Union[float, List[float]] = 95.0
    ar_coefficient: float = 0.8
    noise_std: float = 0.15
    spatial_corr_length: float = 2000.0
    seed: int = 42
    regional_anchor: Optional[List[float]] = None
    train_fraction: float = 0.8
    traces_csv: Optional[str] = None

    def validate(self) -> None:
        """Raise InvalidInput on out-of-range scenario values."""
        if self.num_ndts < 1:
            raise InvalidInput(f"num_ndts must be positive, got: {self.num_ndts}")
        if self.horizon < 2:
            raise InvalidInput(f"horizon must be at least 2, got: {self.horizon}")
        if not 0 < self.ar_coefficient < 1:
            raise InvalidInput(f"ar_coefficient must lie in (0, 1), got: {self.ar_coefficient}")
        if self.noise_std < 0:
            raise InvalidInput(f"noise_std cannot be negative, got: {self.noise_std}")
        if self.spatial_corr_length <= 0:
            raise InvalidInput(f"spatial_corr_length must be positive, got: {self.spatial_corr_length}")
        if not 0 < self.train_fraction < 1:
            raise InvalidInput(f"train_fraction must lie in (0, 1), got: {self.train_fraction}")
        for name in ('base_flow', 'base_speed'):
            value = getattr(self, name)
            if isinstance(value, (list, tuple)) and len(value) != self.num_ndts:
                raise InvalidInput(f"{name} lists one mean per NDT; expected {self.num_ndts}, got: {len(value)}")

    def base_mean(self, kind: 'TrafficKind', sensor_id: int) -> float:
        value = self.base_flow if kind is TrafficKind.FLOW else self.base_speed
        if isinstance(value, (list, tuple)):
            return float(value[sensor_id])
        return float(value)


@dataclass
class TrafficTrace:
    """Readings of one sensor over the whole horizon."""
    sensor_id: int
    readings: np.ndarray
    kind: TrafficKind = TrafficKind.FLOW

    def __post_init__(self):
        self.kind = TrafficKind(self.kind)
        self.readings = np.asarray(self.readings, dtype=np.float64).reshape(-1)
        if np.any(self.readings < 0):
            raise InvalidInput(f"{self.kind.value} readings cannot be negative")

    def __len__(self) -> int:
        return int(self.readings.shape[0])


@dataclass
class TracePair:
    """Flow and speed traces of one NDT."""
    flow: TrafficTrace
    speed: TrafficTrace

    def get(self, kind: TrafficKind) -> TrafficTrace:
        return self.flow if TrafficKind(kind) is TrafficKind.FLOW else self.speed


@dataclass
class NdtData:
    """Time-ordered train/evaluation split of one NDT's windows."""
    sensor_id: int
    train: SampleBatch
    eval: SampleBatch


def _regional_field(cfg: ScenarioConfig, nodes: Sequence[NdtNode], kind: TrafficKind) -> np.ndarray:
    """Spatially correlated standard-normal field, shape (horizon, N)."""
    positions = np.array([node.position for node in nodes])
    distances = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    kernel = np.exp(-distances / cfg.spatial_corr_length)
    eigvals, eigvecs = np.linalg.eigh(kernel)
    root = eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    draws = substream(cfg.seed, "regional", kind.value).standard_normal((cfg.horizon, len(nodes)))
    return draws @ root.T


def _anchor(cfg: ScenarioConfig, nodes: Sequence[NdtNode]) -> np.ndarray:
    if cfg.regional_anchor is not None:
        return np.asarray(cfg.regional_anchor, dtype=np.float64)
    return np.mean([node.position for node in nodes], axis=0)


def _generate_kind(cfg: ScenarioConfig, nodes: Sequence[NdtNode], kind: TrafficKind) -> List[TrafficTrace]:
    anchor = _anchor(cfg, nodes)
    regional = _regional_field(cfg, nodes, kind)
    a = cfg.ar_coefficient
    traces = []
    for idx, node in enumerate(nodes):
        base = cfg.base_mean(kind, node.id)
        weight = float(np.exp(-np.linalg.norm(np.asarray(node.position) - anchor) / cfg.spatial_corr_length))
        own = substream(cfg.seed, "sensor", node.id, kind.value).standard_normal(cfg.horizon)
        shock = weight * regional[:, idx] + np.sqrt(max(0.0, 1.0 - weight * weight)) * own
        scale = cfg.noise_std * base
        readings = np.empty(cfg.horizon)
        readings[0] = base + scale * shock[0]
        innovation = scale * np.sqrt(1.0 - a * a)
        for t in range(1, cfg.horizon):
            readings[t] = base + a * (readings[t - 1] - base) + innovation * shock[t]
        traces.append(TrafficTrace(node.id, np.clip(readings, 0.0, None), kind))
    return traces


def generate_traces(cfg: ScenarioConfig, nodes: Sequence[NdtNode]) -> Dict[int, TracePair]:
    """Generate flow and speed traces for every NDT.

    Output is a pure function of (cfg, node positions): every sensor draws from
    its own (seed, sensor_id) substream and the regional field from a
    dedicated stream.
    """
    cfg.validate()
    if len(nodes) != cfg.num_ndts:
        raise InvalidInput(f"Scenario declares {cfg.num_ndts} NDTs but {len(nodes)} nodes were given")
    flows = _generate_kind(cfg, nodes, TrafficKind.FLOW)
    speeds = _generate_kind(cfg, nodes, TrafficKind.SPEED)
    return {node.id: TracePair(flows[i], speeds[i]) for i, node in enumerate(nodes)}


def window_batch(readings: np.ndarray, lag: int, sensor_id: int = 0, offset: int = 0) -> SampleBatch:
    """Sliding lag windows of a series as a column-stacked batch."""
    readings = np.asarray(readings, dtype=np.float64)
    if lag <= 0:
        raise InvalidInput(f"lag must be positive, got: {lag}")
    if lag >= readings.shape[0]:
        raise InvalidInput(f"lag ({lag}) must be shorter than the series ({readings.shape[0]})")
    count = readings.shape[0] - lag
    features = np.lib.stride_tricks.sliding_window_view(readings, lag)[:count].copy()
    labels = readings[lag:].copy()
    return SampleBatch(features, labels, sensor_id, np.arange(count) + offset)


def window_dataset(trace: TrafficTrace, lag: int) -> List[TrafficSample]:
    """Turn a trace into (window -> next reading) samples."""
    return window_batch(trace.readings, lag, trace.sensor_id).samples()


def data_similarity(trace_i: TrafficTrace, trace_j: TrafficTrace) -> float:
    """Histogram Wasserstein similarity in [0, 1].

    Both traces are binned into ``SIMILARITY_BINS`` bins over their joint
    min-max range; bin masses sit on evenly spaced points spanning that range,
    so two constants at opposite ends of the range are maximally dissimilar.
    """
    if trace_i.kind is not trace_j.kind:
        raise InvalidInput(f"Cannot compare {trace_i.kind.value} with {trace_j.kind.value} traces")
    if len(trace_i) != len(trace_j):
        raise InvalidInput(f"Trace lengths differ: {len(trace_i)} vs {len(trace_j)}")
    lo = float(min(trace_i.readings.min(), trace_j.readings.min()))
    hi = float(max(trace_i.readings.max(), trace_j.readings.max()))
    span = hi - lo
    if span <= 0:
        return 1.0
    h_i, _ = np.histogram(trace_i.readings, bins=SIMILARITY_BINS, range=(lo, hi))
    h_j, _ = np.histogram(trace_j.readings, bins=SIMILARITY_BINS, range=(lo, hi))
    support = np.linspace(lo, hi, SIMILARITY_BINS)
    distance = wasserstein_distance(support, support, u_weights=h_i, v_weights=h_j)
    return float(np.clip(1.0 - distance / span, 0.0, 1.0))


def similarity_matrix(traces: Sequence[TrafficTrace]) -> np.ndarray:
    """Symmetric tau matrix with ones on the diagonal."""
    n = len(traces)
    tau = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            tau[i, j] = tau[j, i] = data_similarity(traces[i], traces[j])
    return tau


@dataclass
class TraceScaler:
    """Pooled z-scoring fitted on the training prefix of every trace."""
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, traces: Sequence[TrafficTrace], train_fraction: float) -> 'TraceScaler':
        cut = [max(1, int(len(t) * train_fraction)) for t in traces]
        pooled = np.concatenate([t.readings[:c] for t, c in zip(traces, cut)])
        std = float(pooled.std())
        return cls(float(pooled.mean()), std if std > 0 else 1.0)

    def transform(self, readings: np.ndarray) -> np.ndarray:
        return (np.asarray(readings, dtype=np.float64) - self.mean) / self.std


def split_batch(batch: SampleBatch, train_fraction: float) -> Tuple[SampleBatch, SampleBatch]:
    """Time-ordered split; the evaluation part always keeps at least one sample."""
    n = len(batch)
    if n < 2:
        raise InvalidInput(f"Need at least 2 windows to split, got: {n}")
    cut = min(n - 1, max(1, int(round(n * train_fraction))))
    index = np.arange(n)
    return batch.subset(index[:cut]), batch.subset(index[cut:])


def build_datasets(
    traces: Dict[int, TracePair],
    kind: TrafficKind,
    lag: int,
    train_fraction: float,
    scaler: Optional[TraceScaler] = None,
) -> Tuple[Dict[int, NdtData], TraceScaler]:
    """Standardise, window and split every NDT's trace of one kind."""
    kind = TrafficKind(kind)
    selected = [traces[n].get(kind) for n in sorted(traces)]
    if scaler is None:
        scaler = TraceScaler.fit(selected, train_fraction)
    datasets = {}
    for trace in selected:
        batch = window_batch(scaler.transform(trace.readings), lag, trace.sensor_id)
        train, evaluation = split_batch(batch, train_fraction)
        datasets[trace.sensor_id] = NdtData(trace.sensor_id, train, evaluation)
    return datasets, scaler
