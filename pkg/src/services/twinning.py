"""Forward twinning engine.

This service runs the federated mapping protocol: every participating NDT
adapts the previous global twin on its own data, the server averages the
local models, and the new global model is broadcast. Each round is recorded
so that the untwinning service can later measure how much any set of NDTs
shifted the global trajectory.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from sklearn.metrics import mean_squared_error

from ..core.config import RunConfig
from ..core.errors import InvalidInput
from ..core.rng import describe_schedule, substream
from ..data.topology import (
    ClusterAssignment,
    ConnectivityMatrix,
    ConnectivityWeights,
    NdtNode,
    TopologyEvent,
    cluster_ndts,
    connectivity,
    pairwise_attributes,
    should_recluster,
    topology_drift,
)
from ..data.traffic import NdtData, TracePair, TrafficKind, build_datasets, generate_traces, similarity_matrix
from ..data.twin_model import ModelArch, SampleBatch, TwinModel, clip, gradient, init_model, predict_batch, sgd_step

EARLY_STOP_DRIFT = 1e-6
EARLY_STOP_PATIENCE = 5


@dataclass
class TwinningConfig:
    """Engine settings resolved from a run configuration."""
    seed: int = 42
    rounds: int = 200
    eta: float = 0.002
    batch_size: int = 32
    local_epochs: int = 1
    local_steps: Optional[int] = None
    clip: Optional[float] = 10.0
    arch: ModelArch = ModelArch.LINEAR
    hidden: int = 8
    bias: bool = True
    lag: int = 6
    task: TrafficKind = TrafficKind.FLOW
    train_fraction: float = 0.8
    non_participants: List[int] = field(default_factory=list)
    retention: str = "full"
    num_clusters: int = 1
    recluster_fraction: float = 0.1
    workers: int = 1

    @classmethod
    def from_run_config(cls, config: RunConfig, **kwargs) -> 'TwinningConfig':
        """Create TwinningConfig from a RunConfig.

        Args:
            config: Validated run configuration
            **kwargs: Additional override parameters
        """
        training = config.training
        values = dict(
            seed=config.seed,
            rounds=training.rounds,
            eta=training.eta,
            batch_size=training.batch_size,
            local_epochs=training.local_epochs,
            local_steps=training.local_steps,
            clip=training.clip,
            arch=ModelArch(training.arch),
            hidden=training.hidden,
            bias=training.bias,
            lag=training.lag,
            task=TrafficKind(training.task),
            train_fraction=config.scenario.train_fraction,
            non_participants=list(training.non_participants),
            retention=training.retention,
            num_clusters=config.clustering.resolve_count(config.scenario.num_ndts),
            recluster_fraction=config.clustering.recluster_fraction,
            workers=config.execution.workers,
        )
        values.update(kwargs)
        return cls(**values)

    def recluster_threshold(self, reference: ConnectivityMatrix) -> float:
        """Drift a topology event must exceed to trigger re-clustering."""
        return self.recluster_fraction * reference.frobenius()


@dataclass
class RoundRecord:
    """Snapshot of one twinning round."""
    round: int
    global_model: TwinModel
    participating: FrozenSet[int]
    local_models: Optional[Dict[int, TwinModel]] = None
    set_sums: Optional[Dict[FrozenSet[int], Tuple[np.ndarray, int]]] = None
    wall_time: float = 0.0


@dataclass
class TopologyLogEntry:
    """Connectivity and clustering in force from ``round`` onwards."""
    round: int
    connectivity: ConnectivityMatrix
    clusters: ClusterAssignment
    drift: float = 0.0
    reclustered: bool = False


@dataclass
class TwinHistory:
    """Recorded forward trajectory, rounds 1..T plus the initial model."""
    initial_model: TwinModel
    records: List[RoundRecord] = field(default_factory=list)
    rng_schedule: Dict = field(default_factory=dict)
    topology_log: List[TopologyLogEntry] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.records)

    @property
    def final_model(self) -> TwinModel:
        return self.records[-1].global_model if self.records else self.initial_model

    def append(self, record: RoundRecord) -> None:
        expected = self.rounds + 1
        if record.round != expected:
            raise InvalidInput(f"History rounds must be contiguous; expected {expected}, got: {record.round}")
        self.records.append(record)

    def record(self, t: int) -> RoundRecord:
        if not 1 <= t <= self.rounds:
            raise InvalidInput(f"Round {t} not recorded (history covers 1..{self.rounds})")
        return self.records[t - 1]

    def global_model(self, t: int) -> TwinModel:
        """w^t; round 0 is the initial model."""
        if t == 0:
            return self.initial_model
        return self.record(t).global_model

    def topology_at(self, t: int) -> TopologyLogEntry:
        """Latest topology entry in force at round t."""
        current = self.topology_log[0]
        for entry in self.topology_log:
            if entry.round > t:
                break
            current = entry
        return current

    def participants(self) -> FrozenSet[int]:
        seen = set()
        for record in self.records:
            seen |= record.participating
        return frozenset(seen)

    def mean_excluding(self, t: int, excluded: Iterable[int]) -> np.ndarray:
        """Average of round-t local models with ``excluded`` removed.

        Raises:
            InvalidInput: If nothing remains or the round was summarised
                         without this exclusion set
        """
        record = self.record(t)
        excluded = frozenset(excluded)
        remaining = sorted(record.participating - excluded)
        if not remaining:
            raise InvalidInput(f"No local models remain at round {t} after excluding {sorted(excluded)}")
        if not excluded & record.participating:
            return record.global_model.params.copy()
        if record.local_models is not None:
            return aggregate([record.local_models[n] for n in remaining], remaining).params
        if record.set_sums is None or excluded not in record.set_sums:
            raise InvalidInput(f"Round {t} holds no summary for exclusion set {sorted(excluded)}")
        set_sum, count = record.set_sums[excluded]
        total = record.global_model.params * len(record.participating)
        return (total - set_sum) / (len(record.participating) - count)


def local_map(
    global_model: TwinModel,
    data: SampleBatch,
    eta: float,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 32,
    clip_threshold: Optional[float] = 10.0,
) -> TwinModel:
    """Adapt the global model to one NDT's data.

    Mini-batches are consecutive chunks of fresh permutations drawn from
    ``rng``; a batch size at least the data size means full-batch steps.

    Args:
        global_model: Starting point w^{t-1}
        data: Training windows of the NDT
        eta: Learning rate
        steps: Number of clipped SGD steps
        rng: The (NDT, round) substream
        batch_size: Mini-batch size
        clip_threshold: Gradient norm bound, or None to disable clipping

    Returns:
        The local model w_n^t
    """
    if len(data) == 0:
        raise InvalidInput("Local data cannot be empty")
    if steps < 0:
        raise InvalidInput(f"steps cannot be negative, got: {steps}")
    if steps == 0 or eta == 0:
        return global_model.copy()

    n = len(data)
    size = min(batch_size, n)
    model = global_model
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if order.size < size:
            order = np.concatenate([order, rng.permutation(n)])
        index, order = order[:size], order[size:]
        g = gradient(model, data.subset(index))
        if clip_threshold is not None:
            g = clip(g, clip_threshold)
        model = sgd_step(model, g, eta)
    return model


def aggregate(models: Sequence[TwinModel], ids: Optional[Sequence[int]] = None) -> TwinModel:
    """Unweighted coordinate-wise mean of local models.

    Models are summed in ascending id order so the result does not depend on
    the order of the input list.
    """
    if not models:
        raise InvalidInput("Cannot aggregate an empty model list")
    ids = list(range(len(models))) if ids is None else list(ids)
    if len(ids) != len(models):
        raise InvalidInput(f"Got {len(models)} models but {len(ids)} ids")
    first = models[0]
    for model in models[1:]:
        if not first.same_shape(model):
            raise InvalidInput("Cannot aggregate models of different architectures")
    ordered = [model for _, model in sorted(zip(ids, models), key=lambda pair: pair[0])]
    params = np.mean(np.stack([model.params for model in ordered]), axis=0)
    return TwinModel(params, first.arch, first.input_dim, first.hidden, first.bias, max(m.version for m in models) + 1)


def evaluate_mse(model: TwinModel, datasets: Dict[int, NdtData], subset: Iterable[int]) -> float:
    """MSE pooled over the evaluation windows of the NDTs in ``subset``."""
    subset = sorted(set(subset))
    if not subset:
        raise InvalidInput("Evaluation subset cannot be empty")
    missing = [n for n in subset if n not in datasets]
    if missing:
        raise InvalidInput(f"Unknown NDT ids: {missing}")
    pooled = SampleBatch.concat(datasets[n].eval for n in subset)
    return float(mean_squared_error(pooled.labels, predict_batch(model, pooled.features)))


class TwinningEngine:
    """Owns the datasets, topology and substreams of one simulated deployment."""

    def __init__(
        self,
        config: TwinningConfig,
        nodes: List[NdtNode],
        datasets: Dict[int, NdtData],
        similarity: np.ndarray,
        weights: Optional[ConnectivityWeights] = None,
        events: Optional[List[TopologyEvent]] = None,
        traces: Optional[Dict[int, TracePair]] = None,
    ):
        """Initialize the engine.

        Args:
            config: Engine settings
            nodes: Initial node list
            datasets: Per-NDT train/eval windows
            similarity: Data-similarity matrix of the raw traces
            weights: Connectivity weights
            events: Scheduled topology changes
            traces: Raw traces, kept for export
        """
        if len(datasets) != len(nodes):
            raise InvalidInput(f"Got {len(nodes)} nodes but {len(datasets)} datasets")
        self.config = config
        self.nodes = list(nodes)
        self.datasets = datasets
        self.similarity = np.asarray(similarity, dtype=np.float64)
        self.weights = weights or ConnectivityWeights()
        self.events = sorted(events or [], key=lambda e: (e.round, e.node_id))
        self.traces = traces
        self._candidate_sets: List[FrozenSet[int]] = []

    @property
    def num_ndts(self) -> int:
        return len(self.nodes)

    @property
    def participants(self) -> List[int]:
        skip = set(self.config.non_participants)
        return [n for n in range(self.num_ndts) if n not in skip]

    def initial_model(self) -> TwinModel:
        cfg = self.config
        return init_model(cfg.arch, cfg.lag, substream(cfg.seed, "init"), cfg.hidden, cfg.bias)

    def steps_for(self, ndt: int) -> int:
        cfg = self.config
        if cfg.local_steps is not None:
            return cfg.local_steps
        return cfg.local_epochs * math.ceil(len(self.datasets[ndt].train) / cfg.batch_size)

    def connectivity_for(self, nodes: List[NdtNode], round_tag: int = 0) -> ConnectivityMatrix:
        return connectivity(pairwise_attributes(nodes, self.similarity), self.weights, round_tag)

    def set_candidate_sets(self, sets: Iterable[Iterable[int]]) -> None:
        """Exclusion sets whose local-model sums are kept in summary retention."""
        self._candidate_sets = [frozenset(s) for s in sets]

    def local_update(self, global_model: TwinModel, ndt: int, t: int) -> TwinModel:
        """Local mapping of one NDT at round t on its own substream."""
        cfg = self.config
        return local_map(
            global_model,
            self.datasets[ndt].train,
            cfg.eta,
            self.steps_for(ndt),
            substream(cfg.seed, "batch", ndt, t),
            cfg.batch_size,
            cfg.clip,
        )

    def local_models(self, global_model: TwinModel, t: int, ids: Sequence[int]) -> Dict[int, TwinModel]:
        """Run local mapping for ``ids`` at round t, in parallel when configured."""
        ids = sorted(ids)
        if self.config.workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
                results = list(executor.map(lambda n: self.local_update(global_model, n, t), ids))
        else:
            results = [self.local_update(global_model, n, t) for n in ids]
        return dict(zip(ids, results))

    def run_forward(self, store=None) -> TwinHistory:
        """Run T twinning rounds from the initial model.

        Args:
            store: Optional CheckpointStore observing every global model

        Returns:
            TwinHistory with every round recorded
        """
        cfg = self.config
        participants = self.participants
        if not participants:
            raise InvalidInput("Every NDT is a non-participant; nothing to twin")

        nodes = list(self.nodes)
        current = self.connectivity_for(nodes, 0)
        clusters = cluster_ndts(current, min(cfg.num_clusters, self.num_ndts), 0)
        reference = current
        w = self.initial_model()
        history = TwinHistory(
            initial_model=w,
            rng_schedule=describe_schedule(cfg.seed),
            topology_log=[TopologyLogEntry(0, current, clusters)],
        )
        if store is not None:
            store.pin_initial(w, current, clusters)

        logger.info(f"Starting forward twinning: {len(participants)} NDTs, {cfg.rounds} rounds")
        for t in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            reclustered = False
            pending = [e for e in self.events if e.round == t]
            if pending:
                for event in pending:
                    nodes = event.apply(nodes)
                current = self.connectivity_for(nodes, t)
                drift = topology_drift(current, reference)
                threshold = cfg.recluster_threshold(reference)
                if should_recluster(drift, threshold):
                    clusters = cluster_ndts(current, min(cfg.num_clusters, self.num_ndts), t)
                    reference = current
                    reclustered = True
                    logger.info(f"Round {t}: topology drift {drift:.4f} > {threshold:.4f}, re-clustered")
                history.topology_log.append(TopologyLogEntry(t, current, clusters, drift, reclustered))

            locals_t = self.local_models(w, t, participants)
            w = aggregate(list(locals_t.values()), list(locals_t.keys()))
            record = RoundRecord(t, w, frozenset(participants), wall_time=0.0)
            if cfg.retention == "full":
                record.local_models = locals_t
            else:
                record.set_sums = self._summarise(locals_t)
            record.wall_time = time.perf_counter() - started
            history.append(record)

            if store is not None:
                store.observe(t, w, current, reclustered, clusters)
            logger.debug(f"Round {t}: |w|={np.linalg.norm(w.params):.4f}")

        logger.success(f"Forward twinning finished after {cfg.rounds} rounds")
        return history

    def _summarise(self, locals_t: Dict[int, TwinModel]) -> Dict[FrozenSet[int], Tuple[np.ndarray, int]]:
        sums = {}
        for members in self._candidate_sets:
            present = sorted(members & locals_t.keys())
            if present:
                sums[members] = (np.sum(np.stack([locals_t[n].params for n in present]), axis=0), len(present))
            else:
                sums[members] = (np.zeros(next(iter(locals_t.values())).dimension), 0)
        return sums

    def run_rounds(
        self,
        start_model: TwinModel,
        first_round: int,
        last_round: int,
        excluded: Iterable[int] = (),
        early_stop: bool = False,
        on_round: Optional[Callable[[int, TwinModel], None]] = None,
    ) -> Tuple[TwinModel, int]:
        """Replay rounds ``first_round..last_round`` without ``excluded``.

        Uses the same per-(NDT, round) substreams as the forward run, so the
        remaining NDTs see exactly the randomness they saw originally.

        Returns:
            (final model, number of rounds executed)
        """
        excluded = set(excluded) | set(self.config.non_participants)
        remaining = [n for n in range(self.num_ndts) if n not in excluded]
        if not remaining:
            raise InvalidInput("No NDT remains to run rounds with")
        w = start_model
        executed = 0
        quiet = 0
        for t in range(first_round, last_round + 1):
            locals_t = self.local_models(w, t, remaining)
            new_w = aggregate(list(locals_t.values()), list(locals_t.keys()))
            executed += 1
            drift = float(np.linalg.norm(new_w.params - w.params))
            w = new_w
            if on_round is not None:
                on_round(t, w)
            if early_stop:
                quiet = quiet + 1 if drift < EARLY_STOP_DRIFT else 0
                if quiet >= EARLY_STOP_PATIENCE:
                    logger.info(f"Early stop at round {t}: drift below {EARLY_STOP_DRIFT} for {quiet} rounds")
                    break
        return w, executed

    def pooled_train(self, ids: Optional[Iterable[int]] = None) -> SampleBatch:
        ids = sorted(self.participants if ids is None else ids)
        return SampleBatch.concat(self.datasets[n].train for n in ids)


def create_twinning_engine(config: RunConfig, **kwargs) -> TwinningEngine:
    """Factory function to build an engine from a run configuration.

    Generates the synthetic traces, or imports them when
    ``scenario.traces_csv`` is set, standardises and windows them, and
    computes the data-similarity matrix on the raw traces.

    Args:
        config: Validated run configuration
        **kwargs: TwinningConfig overrides

    Returns:
        Configured TwinningEngine

    Raises:
        InvalidInput: If the imported traces do not cover exactly the configured NDTs
    """
    engine_config = TwinningConfig.from_run_config(config, **kwargs)
    nodes = config.build_nodes()
    if config.scenario.traces_csv:
        traces = _imported_traces(config.scenario.traces_csv, nodes)
    else:
        traces = generate_traces(config.scenario, nodes)
    return engine_from_traces(engine_config, nodes, traces, config.weights, config.topology.build_events())


def _imported_traces(path: str, nodes: List[NdtNode]) -> Dict[int, TracePair]:
    from ..integrations.storage import read_traces_csv

    if not Path(path).is_file():
        raise InvalidInput(f"Trace file not found: {path}")
    traces = read_traces_csv(Path(path))
    expected = [node.id for node in nodes]
    if sorted(traces) != expected:
        raise InvalidInput(f"Trace file {path} covers sensors {sorted(traces)}, expected {expected}")
    logger.info(f"Imported traces of {len(traces)} sensors from {path}")
    return traces


def engine_from_traces(
    engine_config: TwinningConfig,
    nodes: List[NdtNode],
    traces: Dict[int, TracePair],
    weights: Optional[ConnectivityWeights] = None,
    events: Optional[List[TopologyEvent]] = None,
) -> TwinningEngine:
    """Build an engine over externally supplied traces (e.g. a CSV import)."""
    datasets, _ = build_datasets(traces, engine_config.task, engine_config.lag, engine_config.train_fraction)
    similarity = similarity_matrix([traces[n].get(engine_config.task) for n in sorted(traces)])
    return TwinningEngine(engine_config, nodes, datasets, similarity, weights, events, traces)
