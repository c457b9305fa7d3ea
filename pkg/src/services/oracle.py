"""Ground truth and metrics for untwinning runs.

Retraining from scratch without the untwinned NDTs is the reference every
untwinning result is measured against. This module provides that oracle,
the error and distance metrics, the two-sample indistinguishability probe,
runtime accounting and the checkpoint ablation.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy import stats
from sklearn.metrics import mean_squared_error

from ..core.config import RunConfig
from ..core.errors import InsufficientSamples, InvalidInput, NothingRemains
from ..core.rng import substream
from ..data.checkpoint_models import StoreMode, StorePolicy
from ..data.twin_model import SampleBatch, TwinModel, predict_batch
from .checkpoints import CheckpointStore
from .twinning import TwinHistory, TwinningEngine, create_twinning_engine, evaluate_mse
from .untwinning import RollbackPlan, build_untwin_set, importance_scores

MIN_PROBE_SEEDS = 30


@dataclass
class ExperimentReport:
    """One row of the untwin metrics table."""
    config_hash: str
    mode: str
    seed: int
    mse_target: float
    mse_remaining: float
    ped_target: Optional[float] = None
    ped_remaining: Optional[float] = None
    param_distance: Optional[float] = None
    accuracy_gap: Optional[float] = None
    rounds_executed: int = 0
    wall_time: float = 0.0
    checkpoint_count: int = 0
    checkpoint_bytes: int = 0
    replay_extension: int = 0
    speedup: Optional[float] = None
    rounds_ratio: Optional[float] = None

    def __post_init__(self):
        for name in ('ped_target', 'ped_remaining'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise InvalidInput(f"{name} cannot be negative, got: {value}")

    def to_row(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ProbeReport:
    """Two-sample comparison of a statistic across seeded runs."""
    statistic: str
    seeds: List[int]
    values_a: List[float]
    values_b: List[float]
    ks_statistic: float
    ks_pvalue: float
    permutation_pvalue: float
    alpha: float = 0.05

    @property
    def mean_a(self) -> float:
        return float(np.mean(self.values_a))

    @property
    def mean_b(self) -> float:
        return float(np.mean(self.values_b))

    @property
    def distinguishable(self) -> bool:
        return self.permutation_pvalue < self.alpha

    @property
    def decision(self) -> str:
        if self.distinguishable:
            return f"distinguishable at level {self.alpha}"
        return f"not distinguishable at level {self.alpha}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'statistic': self.statistic,
            'seeds': self.seeds,
            'mean_a': self.mean_a,
            'mean_b': self.mean_b,
            'std_a': float(np.std(self.values_a)),
            'std_b': float(np.std(self.values_b)),
            'ks_statistic': self.ks_statistic,
            'ks_pvalue': self.ks_pvalue,
            'permutation_pvalue': self.permutation_pvalue,
            'alpha': self.alpha,
            'decision': self.decision,
        }

    def rows(self) -> List[Dict[str, Any]]:
        """One row per seed per pipeline."""
        out = []
        for pipeline, values in (('a', self.values_a), ('b', self.values_b)):
            for seed, value in zip(self.seeds, values):
                out.append({'seed': seed, 'pipeline': pipeline, 'value': value})
        return out


@dataclass
class RuntimeReport:
    """Measured and structural speedup of an untwinning run."""
    untwin_seconds: float
    scratch_seconds: float
    speedup: float
    rounds_ratio: float


@dataclass
class AblationRow:
    """Checkpoint policy outcome on a recorded trajectory."""
    policy: str
    count: int
    bytes: int
    reduction: float
    mean_extension: float
    replay_overhead_seconds: float
    anchors: int = 0


@dataclass
class StudyRow:
    """Target/remaining MSE of one removal strategy for one seed."""
    seed: int
    strategy: str
    excluded: List[int]
    target_mse: float
    remaining_mse: float


@dataclass
class StudyReport:
    """Outcome of the connected-set study."""
    target: int
    rows: List[StudyRow] = field(default_factory=list)

    def mean(self, strategy: str) -> float:
        return float(np.mean([r.target_mse for r in self.rows if r.strategy == strategy]))

    def connected_worse_fraction(self) -> float:
        """Share of seeds where removing the connected set hurts target data more than the target alone."""
        by_seed: Dict[int, Dict[str, float]] = {}
        for row in self.rows:
            by_seed.setdefault(row.seed, {})[row.strategy] = row.target_mse
        wins = [s['connected'] > s['target'] for s in by_seed.values() if 'connected' in s and 'target' in s]
        return float(np.mean(wins)) if wins else 0.0


def retrain_from_scratch(engine: TwinningEngine, exclude: Iterable[int] = ()) -> TwinModel:
    """Full forward protocol from w^0 without ``exclude``, same substreams.

    Raises:
        NothingRemains: If no participant is left
    """
    exclude = set(exclude)
    if not set(engine.participants) - exclude:
        raise NothingRemains(f"Excluding {sorted(exclude)} leaves no participating NDT")
    model, _ = engine.run_rounds(engine.initial_model(), 1, engine.config.rounds, excluded=exclude)
    return model


def _batch_mse(model: TwinModel, batch: SampleBatch) -> float:
    return float(mean_squared_error(batch.labels, predict_batch(model, batch.features)))


def ped(model_a: TwinModel, model_b: TwinModel, eval_set: SampleBatch) -> float:
    """Prediction error difference |MSE_a - MSE_b| on one evaluation set."""
    return abs(_batch_mse(model_a, eval_set) - _batch_mse(model_b, eval_set))


def param_distance(model_a: TwinModel, model_b: TwinModel) -> float:
    """L2 distance between parameter vectors."""
    if model_a.dimension != model_b.dimension:
        raise InvalidInput(f"Dimensions differ: {model_a.dimension} vs {model_b.dimension}")
    return float(np.linalg.norm(model_a.params - model_b.params))


def accuracy_gap(mse_method: float, mse_remap: float) -> float:
    """Relative MSE gap of a method against the remap oracle."""
    if mse_remap <= 0:
        raise InvalidInput(f"Oracle MSE must be positive, got: {mse_remap}")
    return (mse_method - mse_remap) / mse_remap


def _ks_statistic(x: np.ndarray, y: np.ndarray) -> float:
    return float(stats.ks_2samp(x, y).statistic)


def compare_samples(
    values_a: Sequence[float],
    values_b: Sequence[float],
    seeds: Sequence[int],
    statistic: str = "eval_mse_target",
    alpha: float = 0.05,
    resamples: int = 999,
    seed: int = 0,
) -> ProbeReport:
    """KS statistic plus a permutation p-value over two equal-size samples.

    Raises:
        InsufficientSamples: If fewer than 30 values per pipeline are given
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"Pipelines need equal seed counts, got: {a.size} vs {b.size}")
    if a.size < MIN_PROBE_SEEDS:
        raise InsufficientSamples(f"Probe needs at least {MIN_PROBE_SEEDS} seeds, got: {a.size}")

    ks = stats.ks_2samp(a, b)
    permutation = stats.permutation_test(
        (a, b),
        _ks_statistic,
        permutation_type='independent',
        vectorized=False,
        n_resamples=resamples,
        alternative='greater',
        random_state=substream(seed, "probe"),
    )
    return ProbeReport(
        statistic=statistic,
        seeds=list(seeds),
        values_a=a.tolist(),
        values_b=b.tolist(),
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        permutation_pvalue=float(permutation.pvalue),
        alpha=alpha,
    )


def indistinguishability_probe(
    seeds: Sequence[int],
    pipeline_a: Callable[[int], float],
    pipeline_b: Callable[[int], float],
    statistic: str = "eval_mse_target",
    alpha: float = 0.05,
    resamples: int = 999,
    workers: int = 1,
) -> ProbeReport:
    """Run both pipelines on every seed and compare their statistics.

    Args:
        seeds: At least 30 seeds
        pipeline_a: Seed -> statistic, e.g. untwinning
        pipeline_b: Seed -> statistic, e.g. retrain from scratch
        statistic: Name of the compared quantity
        alpha: Test level
        resamples: Permutation resamples
        workers: Seeds evaluated concurrently

    Returns:
        ProbeReport
    """
    seeds = list(seeds)
    if len(seeds) < MIN_PROBE_SEEDS:
        raise InsufficientSamples(f"Probe needs at least {MIN_PROBE_SEEDS} seeds, got: {len(seeds)}")

    def run(seed: int) -> Tuple[float, float]:
        return float(pipeline_a(seed)), float(pipeline_b(seed))

    logger.info(f"Running indistinguishability probe over {len(seeds)} seeds")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            pairs = list(executor.map(run, seeds))
    else:
        pairs = [run(seed) for seed in seeds]
    report = compare_samples(
        [p[0] for p in pairs], [p[1] for p in pairs], seeds, statistic, alpha, resamples, seed=min(seeds)
    )
    logger.info(f"Probe: KS={report.ks_statistic:.4f}, p={report.permutation_pvalue:.4f} ({report.decision})")
    return report


def time_pipeline(
    fn: Callable[[], Any], repeats: int = 3, clock: Callable[[], float] = time.perf_counter
) -> Tuple[Any, float]:
    """Run ``fn`` once as warm-up, then ``repeats`` times; return last result and median seconds."""
    if repeats < 1:
        raise InvalidInput(f"repeats must be positive, got: {repeats}")
    fn()
    durations = []
    result = None
    for _ in range(repeats):
        started = clock()
        result = fn()
        durations.append(clock() - started)
    return result, float(np.median(durations))


def runtime_report(plan: RollbackPlan, untwin_seconds: float, scratch_seconds: float, T: int) -> RuntimeReport:
    """Speedup of untwinning over scratch, measured and in rounds."""
    replayed = plan.k + plan.replay_extension
    rounds_ratio = T / replayed if replayed > 0 else float('inf')
    speedup = scratch_seconds / untwin_seconds if untwin_seconds > 0 else float('inf')
    return RuntimeReport(untwin_seconds, scratch_seconds, speedup, rounds_ratio)


def replay_store(history: TwinHistory, policy: StorePolicy) -> CheckpointStore:
    """Feed a recorded trajectory through a fresh store."""
    store = CheckpointStore(policy)
    entry = history.topology_at(0)
    store.pin_initial(history.initial_model, entry.connectivity, entry.clusters)
    for t in range(1, history.rounds + 1):
        entry = history.topology_at(t)
        store.observe(t, history.global_model(t), entry.connectivity, entry.round == t and entry.reclustered, entry.clusters)
    return store


def default_policies(base: StorePolicy) -> Dict[str, StorePolicy]:
    """naive, fixed(10), fixed(50) and the configured ATAC policy."""
    atac = StorePolicy(**{**base.to_dict(), 'mode': StoreMode.ATAC})
    return {
        'naive': StorePolicy(mode=StoreMode.NAIVE),
        'fixed10': StorePolicy(mode=StoreMode.FIXED, fixed_interval=10),
        'fixed50': StorePolicy(mode=StoreMode.FIXED, fixed_interval=50),
        'atac': atac,
    }


def checkpoint_ablation(
    history: TwinHistory,
    policies: Dict[str, StorePolicy],
    round_seconds: Optional[float] = None,
) -> List[AblationRow]:
    """Storage and replay cost of each policy on the same trajectory.

    The mean extension averages ``target - t*`` over every rollback target
    1..T-1; overhead converts it to seconds with the mean recorded round time.
    """
    if round_seconds is None:
        times = [r.wall_time for r in history.records]
        round_seconds = float(np.mean(times)) if times else 0.0
    rows = []
    for name, policy in policies.items():
        store = replay_store(history, policy)
        report = store.storage_report()
        targets = range(1, max(history.rounds, 2))
        extensions = [store.retrieve_proximal(t)[1] for t in targets]
        mean_extension = float(np.mean(extensions)) if extensions else 0.0
        rows.append(AblationRow(
            policy=name,
            count=report.count,
            bytes=report.bytes,
            reduction=report.reduction,
            mean_extension=mean_extension,
            replay_overhead_seconds=mean_extension * round_seconds,
            anchors=report.anchors,
        ))
        logger.debug(f"Ablation {name}: {report.count} checkpoints, mean extension {mean_extension:.2f}")
    return rows


def connected_set_study(config: RunConfig, target: int, seeds: Sequence[int]) -> StudyReport:
    """Retrain from scratch removing nothing, the target alone, or its connected set.

    Target-data MSE is measured on the target's evaluation windows.
    """
    report = StudyReport(target=target)
    for seed in seeds:
        engine = create_twinning_engine(config.with_seed(seed))
        if not 0 <= target < engine.num_ndts:
            raise InvalidInput(f"Unknown NDT id: {target}")
        c = engine.connectivity_for(engine.nodes)
        connected = build_untwin_set(importance_scores(c, target), config.untwin.theta, target).members
        strategies = {'none': set(), 'target': {target}, 'connected': set(connected)}
        for name, excluded in strategies.items():
            model = retrain_from_scratch(engine, excluded)
            remaining = [n for n in engine.participants if n not in excluded] or engine.participants
            report.rows.append(StudyRow(
                seed=seed,
                strategy=name,
                excluded=sorted(excluded),
                target_mse=evaluate_mse(model, engine.datasets, [target]),
                remaining_mse=evaluate_mse(model, engine.datasets, remaining),
            ))
    logger.info(
        f"Connected-set study on NDT {target}: target-only MSE {report.mean('target'):.4f}, "
        f"connected-set MSE {report.mean('connected'):.4f}"
    )
    return report
