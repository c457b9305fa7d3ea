"""Experiment orchestration behind the command line.

Each command reads a RunConfig, runs the services and writes its artifacts
into the output directory under an exclusive lock. Artifacts carry the
config hash; commands refuse to mix artifacts produced by a different
forward configuration.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from loguru import logger

from ..core.config import RunConfig, config_hash, forward_hash
from ..core.errors import InvalidInput, StateError
from ..data.twin_model import SampleBatch
from ..integrations import storage
from .checkpoints import CheckpointStore, create_checkpoint_store
from .oracle import (
    ExperimentReport,
    ProbeReport,
    accuracy_gap,
    checkpoint_ablation,
    connected_set_study,
    default_policies,
    indistinguishability_probe,
    param_distance,
    ped,
    retrain_from_scratch,
    runtime_report,
    time_pipeline,
)
from .twinning import TwinHistory, TwinningEngine, create_twinning_engine, evaluate_mse
from .untwinning import UntwinRequest, UntwinResult, build_untwin_set, create_untwinning_service, importance_scores

CHECKPOINT_DIR = "checkpoints"
PLAN_FILE = "plan.json"
METRICS_FILE = "metrics.csv"
PROBE_FILE = "probe.json"
PROBE_CSV = "probe.csv"
ABLATION_FILE = "ablation.csv"
STUDY_FILE = "study.csv"


@dataclass
class TwinOutcome:
    """What cmd_twin produced."""
    history: TwinHistory
    store: CheckpointStore
    mse: float
    output_dir: Path
    seconds: float


@dataclass
class UntwinOutcome:
    """What cmd_untwin produced."""
    result: UntwinResult
    report: ExperimentReport
    output_dir: Path


@dataclass
class UntwinOptions:
    """Command-line overrides for an untwinning run."""
    with_oracle: bool = False
    noise: Optional[float] = None
    force_t_star: Optional[int] = None
    rollback_rule: Optional[str] = None
    overrides: Dict[str, Any] = field(default_factory=dict)

    def service_kwargs(self) -> Dict[str, Any]:
        kwargs = dict(self.overrides)
        if self.noise is not None:
            kwargs['noise_override'] = self.noise
        if self.force_t_star is not None:
            kwargs['force_t_star'] = self.force_t_star
        if self.rollback_rule is not None:
            kwargs['rollback_rule'] = self.rollback_rule
        return kwargs


class ExperimentRunner:
    """Runs the twin, untwin, compare and report commands for one config."""

    def __init__(self, config: RunConfig, output_dir: Optional[str] = None):
        self.config = config
        self.output_dir = Path(output_dir or config.execution.output_dir)
        self.hash = config_hash(config)
        self.forward = forward_hash(config)

    def _manifest(self) -> Dict[str, Any]:
        return {
            'config_hash': self.hash,
            'forward_hash': self.forward,
            'seed': self.config.seed,
            'config': self.config.to_dict(),
        }

    def _update_timing(self, **entries: float) -> None:
        path = self.output_dir / storage.TIMING_FILE
        timing = storage.read_json(path) if path.exists() else {}
        timing.update(entries)
        storage.write_json(path, timing)

    def cmd_twin(self) -> TwinOutcome:
        """Run forward twinning and write history, checkpoints and baseline metrics."""
        with storage.output_lock(self.output_dir):
            started = time.perf_counter()
            engine = create_twinning_engine(self.config)
            store = create_checkpoint_store(self.config.checkpoints)
            if engine.config.retention == "summary":
                engine.set_candidate_sets(self._candidate_sets(engine))
            history = engine.run_forward(store)
            seconds = time.perf_counter() - started

            storage.write_json(self.output_dir / storage.MANIFEST_FILE, self._manifest())
            storage.write_history(self.output_dir / storage.HISTORY_FILE, history, self.forward)
            storage.write_store(store, self.output_dir / CHECKPOINT_DIR, self.forward)
            storage.write_model(self.output_dir / storage.MODEL_FILE, history.final_model, {'stage': 'twin'})
            if engine.traces is not None:
                storage.write_traces_csv(self.output_dir / "traces.csv", engine.traces)

            mse = evaluate_mse(history.final_model, engine.datasets, engine.participants)
            report = store.storage_report()
            storage.write_metrics_csv(self.output_dir / METRICS_FILE, [self._twin_row(history, mse, report)])
            self._update_timing(twin=seconds)

        logger.success(f"Twinning finished: MSE {mse:.5f}, {report.count} checkpoints in {self.output_dir}")
        return TwinOutcome(history, store, mse, self.output_dir, seconds)

    def _candidate_sets(self, engine: TwinningEngine) -> List[frozenset]:
        c = engine.connectivity_for(_final_nodes(engine))
        theta = self.config.untwin.theta
        return [build_untwin_set(importance_scores(c, n), theta, n).members for n in range(engine.num_ndts)]

    def _twin_row(self, history: TwinHistory, mse: float, report) -> Dict[str, Any]:
        return {
            'mode': 'twin',
            'config_hash': self.hash,
            'seed': self.config.seed,
            'rounds_executed': history.rounds,
            'mse_remaining': mse,
            'checkpoint_count': report.count,
            'checkpoint_bytes': report.bytes,
            'reduction': report.reduction,
        }

    def _load_forward(self):
        manifest_path = self.output_dir / storage.MANIFEST_FILE
        if not manifest_path.exists():
            raise StateError(f"No twinning artifacts in {self.output_dir}; run 'twin' first")
        manifest = storage.read_json(manifest_path)
        if manifest.get('forward_hash') != self.forward:
            raise StateError(
                f"Artifacts in {self.output_dir} were produced by a different configuration "
                f"({manifest.get('forward_hash', '?')[:12]} vs {self.forward[:12]})"
            )
        history, _ = storage.read_history(self.output_dir / storage.HISTORY_FILE)
        store, _ = storage.read_store(self.output_dir / CHECKPOINT_DIR)
        return history, store

    def cmd_untwin(self, mode: str, targets: Sequence[int], options: Optional[UntwinOptions] = None) -> UntwinOutcome:
        """Run SRU or PRU against the stored forward run.

        Args:
            mode: 'sru' or 'pru'
            targets: NDT ids to remove (exactly one for sru)
            options: Oracle and noise overrides

        Returns:
            UntwinOutcome with the result and its metrics row
        """
        options = options or UntwinOptions()
        if mode not in ('sru', 'pru'):
            raise InvalidInput(f"Unknown untwinning mode: '{mode}'")
        targets = list(targets)
        if mode == 'sru' and len(targets) != 1:
            raise InvalidInput(f"sru takes exactly one target, got: {targets}")
        if not targets:
            raise InvalidInput("At least one target is required")
        n = self.config.scenario.num_ndts
        unknown = [t for t in targets if not 0 <= t < n]
        if unknown:
            raise InvalidInput(f"Unknown NDT ids: {unknown}")

        with storage.output_lock(self.output_dir):
            history, store = self._load_forward()
            engine = create_twinning_engine(self.config)
            service = create_untwinning_service(self.config, engine, history, store, **options.service_kwargs())
            requests = [UntwinRequest(t, history.rounds) for t in targets]

            def untwin() -> UntwinResult:
                return service.sru(requests[0]) if mode == 'sru' else service.pru(requests)

            if options.with_oracle:
                result, untwin_seconds = time_pipeline(untwin)
            else:
                result = untwin()
                untwin_seconds = result.wall_time

            report = self._untwin_report(mode, engine, result, targets, options.with_oracle, untwin_seconds)
            plan = {
                'config_hash': self.hash,
                'mode': mode,
                'targets': targets,
                'K_max': result.k_max,
                'excluded': sorted(result.excluded),
                'rounds_executed': result.rounds_executed,
                'dropped_clusters': result.dropped_clusters,
                'plans': [p.to_dict() for p in result.plans],
                'sets': [s.to_dict() for s in result.sets],
            }
            storage.write_json(self.output_dir / PLAN_FILE, plan)
            storage.write_model(self.output_dir / f"model_{mode}.bin", result.model, {'stage': mode})
            rows = self._baseline_rows() + [report.to_row()]
            storage.write_metrics_csv(self.output_dir / METRICS_FILE, rows)
            self._update_timing(**{mode: untwin_seconds})

        return UntwinOutcome(result, report, self.output_dir)

    def _baseline_rows(self) -> List[Dict[str, Any]]:
        path = self.output_dir / METRICS_FILE
        if not path.exists():
            return []
        frame = storage.read_metrics_csv(path)
        if 'mode' not in frame.columns:
            return []
        return [{k: v for k, v in row.items() if v == v} for row in frame[frame['mode'] == 'twin'].to_dict('records')]

    def _untwin_report(
        self, mode: str, engine: TwinningEngine, result: UntwinResult, targets: List[int],
        with_oracle: bool, untwin_seconds: float,
    ) -> ExperimentReport:
        remaining = [n for n in engine.participants if n not in result.excluded]
        mse_target = evaluate_mse(result.model, engine.datasets, targets)
        mse_remaining = evaluate_mse(result.model, engine.datasets, remaining)
        plan = max(result.plans, key=lambda p: p.k)
        index = storage.read_json(self.output_dir / CHECKPOINT_DIR / storage.STORE_INDEX)
        report = ExperimentReport(
            config_hash=self.hash,
            mode=mode,
            seed=self.config.seed,
            mse_target=mse_target,
            mse_remaining=mse_remaining,
            rounds_executed=result.rounds_executed,
            wall_time=untwin_seconds,
            checkpoint_count=index['count'],
            checkpoint_bytes=index['bytes'],
            replay_extension=plan.replay_extension,
        )
        if with_oracle:
            scratch, scratch_seconds = time_pipeline(lambda: retrain_from_scratch(engine, result.excluded))
            target_eval = SampleBatch.concat(engine.datasets[t].eval for t in targets)
            remaining_eval = SampleBatch.concat(engine.datasets[n].eval for n in remaining)
            report.ped_target = ped(result.model, scratch, target_eval)
            report.ped_remaining = ped(result.model, scratch, remaining_eval)
            report.param_distance = param_distance(result.model, scratch)
            scratch_mse = evaluate_mse(scratch, engine.datasets, remaining)
            report.accuracy_gap = accuracy_gap(mse_remaining, scratch_mse) if scratch_mse > 0 else None
            runtime = runtime_report(plan, untwin_seconds, scratch_seconds, self.config.training.rounds)
            report.speedup = runtime.speedup
            report.rounds_ratio = runtime.rounds_ratio
            self._update_timing(scratch=scratch_seconds)
            logger.info(
                f"Oracle: PED target {report.ped_target:.3g}, remaining {report.ped_remaining:.3g}, "
                f"speedup {runtime.speedup:.1f}x"
            )
        return report

    def _probe_statistic(self, seed: int, target: int, untwin: bool) -> float:
        config = self.config.with_seed(seed)
        engine = create_twinning_engine(config)
        if untwin:
            store = create_checkpoint_store(config.checkpoints)
            history = engine.run_forward(store)
            service = create_untwinning_service(config, engine, history, store)
            model = service.sru(UntwinRequest(target, history.rounds)).model
        else:
            c = engine.connectivity_for(_final_nodes(engine))
            members = build_untwin_set(importance_scores(c, target), config.untwin.theta, target).members
            model = retrain_from_scratch(engine, members)
        return evaluate_mse(model, engine.datasets, [target])

    def cmd_compare(self, target: int = 0, seeds: Optional[int] = None, self_check: bool = False) -> ProbeReport:
        """Indistinguishability probe of SRU against scratch retraining.

        With ``self_check`` both pipelines retrain from scratch on disjoint
        seed ranges, which calibrates the probe itself.
        """
        count = seeds if seeds is not None else self.config.probe.seeds
        if not 0 <= target < self.config.scenario.num_ndts:
            raise InvalidInput(f"Unknown NDT id: {target}")
        seed_list = [self.config.seed + i for i in range(count)]
        if self_check:
            def pipeline_a(seed: int) -> float:
                return self._probe_statistic(seed, target, untwin=False)

            def pipeline_b(seed: int) -> float:
                return self._probe_statistic(seed + count, target, untwin=False)
        else:
            def pipeline_a(seed: int) -> float:
                return self._probe_statistic(seed, target, untwin=True)

            def pipeline_b(seed: int) -> float:
                return self._probe_statistic(seed, target, untwin=False)

        with storage.output_lock(self.output_dir):
            started = time.perf_counter()
            report = indistinguishability_probe(
                seed_list,
                pipeline_a,
                pipeline_b,
                alpha=self.config.probe.alpha,
                resamples=self.config.probe.resamples,
                workers=self.config.execution.workers,
            )
            payload = {'config_hash': self.hash, 'target': target, 'self_check': self_check, **report.to_dict()}
            storage.write_json(self.output_dir / PROBE_FILE, payload)
            storage.write_metrics_csv(self.output_dir / PROBE_CSV, report.rows())
            self._update_timing(compare=time.perf_counter() - started)
        return report

    def cmd_report(
        self, ablation: bool = False, study: bool = False, target: int = 0, seeds: Optional[int] = None
    ) -> str:
        """Summarise the artifacts of the output directory.

        Args:
            ablation: Replay the stored history through every checkpoint policy
            study: Retrain without ``target`` alone and without its connected set
            target: NDT of the connected-set study
            seeds: Seed count of the study, defaults to ``probe.seeds``

        Returns:
            Report text, one line per artifact
        """
        manifest_path = self.output_dir / storage.MANIFEST_FILE
        if not manifest_path.exists():
            raise StateError(f"No artifacts in {self.output_dir}")
        manifest = storage.read_json(manifest_path)
        lines = [f"Run {self.output_dir} (config {manifest['config_hash'][:12]}, seed {manifest['seed']})"]

        index_path = self.output_dir / CHECKPOINT_DIR / storage.STORE_INDEX
        if index_path.exists():
            index = storage.read_json(index_path)
            lines.append(
                f"Checkpoints: {index['count']} stored ({index['policy']['mode']}), "
                f"{index['bytes']} bytes, {index['reduction']:.1%} reduction, anchors {index['anchors']}"
            )
        metrics_path = self.output_dir / METRICS_FILE
        if metrics_path.exists():
            frame = storage.read_metrics_csv(metrics_path)
            for row in frame.to_dict('records'):
                lines.append(
                    f"{row.get('mode', '?')}: MSE remaining {row.get('mse_remaining', float('nan')):.5f}, "
                    f"rounds {row.get('rounds_executed')}"
                )
        plan_path = self.output_dir / PLAN_FILE
        if plan_path.exists():
            plan = storage.read_json(plan_path)
            for p in plan['plans']:
                lines.append(
                    f"{plan['mode']} plan: K={p['K']}, t_safe={p['t_safe']}, t*={p['t_star']}, "
                    f"sigma={p['sigma']:.3g}, members={p['members']}"
                )
        probe_path = self.output_dir / PROBE_FILE
        if probe_path.exists():
            probe = storage.read_json(probe_path)
            lines.append(
                f"Probe over {len(probe['seeds'])} seeds: KS={probe['ks_statistic']:.4f}, "
                f"p={probe['permutation_pvalue']:.4f} ({probe['decision']})"
            )

        if ablation:
            history, _ = storage.read_history(self.output_dir / storage.HISTORY_FILE)
            timing_path = self.output_dir / storage.TIMING_FILE
            round_seconds = None
            if timing_path.exists() and history.rounds:
                round_seconds = storage.read_json(timing_path).get('twin', 0.0) / history.rounds
            rows = checkpoint_ablation(history, default_policies(self.config.checkpoints), round_seconds)
            storage.write_metrics_csv(self.output_dir / ABLATION_FILE, [vars(r) for r in rows])
            for r in rows:
                lines.append(
                    f"ablation {r.policy}: {r.count} checkpoints, {r.reduction:.1%} reduction, "
                    f"mean extension {r.mean_extension:.2f} rounds ({r.replay_overhead_seconds:.3f}s)"
                )
        if study:
            lines.extend(self._study_lines(target, seeds))
        return "\n".join(lines)

    def _study_lines(self, target: int, seeds: Optional[int]) -> List[str]:
        count = seeds if seeds is not None else self.config.probe.seeds
        if count < 1:
            raise InvalidInput(f"Study needs at least one seed, got: {count}")
        report = connected_set_study(self.config, target, [self.config.seed + i for i in range(count)])
        rows = [{**vars(r), 'excluded': ",".join(str(n) for n in r.excluded)} for r in report.rows]
        storage.write_metrics_csv(self.output_dir / STUDY_FILE, rows)
        return [
            f"study NDT {target} over {count} seeds: target-data MSE none {report.mean('none'):.5f}, "
            f"target {report.mean('target'):.5f}, connected {report.mean('connected'):.5f}",
            f"study connected set worse than target alone on {report.connected_worse_fraction():.0%} of seeds",
        ]


def _final_nodes(engine: TwinningEngine):
    nodes = list(engine.nodes)
    for event in engine.events:
        if event.round <= engine.config.rounds:
            nodes = event.apply(nodes)
    return nodes


def create_experiment_runner(config: RunConfig, output_dir: Optional[str] = None) -> ExperimentRunner:
    """Factory function to create an experiment runner."""
    return ExperimentRunner(config, output_dir)
