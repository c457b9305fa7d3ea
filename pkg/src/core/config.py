"""Configuration management for untwinning experiments.

This module loads a run configuration from a JSON or YAML file into a tree of
dataclasses with embedded defaults. It provides the config hash stamped into
every artifact and the discovery rules used by the command line.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from loguru import logger

from ..data.checkpoint_models import StorePolicy
from ..data.topology import ConnectivityWeights, NdtNode, TopologyEvent, default_cluster_count, line_topology
from ..data.traffic import ScenarioConfig, TrafficKind
from ..data.twin_model import ModelArch
from .errors import ConfigError, InvalidInput

DEFAULT_CONFIG_NAME = "default.json"
HASH_EXCLUDED = ("output_dir", "workers")
FORWARD_EXCLUDED = ("untwin", "probe", "execution")


def _from_section(cls, data: Any, section: str):
    """Build a dataclass from a mapping, warning on and ignoring unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{section}' must be a mapping", key=section)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key in known:
            kwargs[key] = value
        else:
            logger.warning(f"Unknown {section} parameter '{key}' ignored")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), key=section)


@dataclass
class TopologyConfig:
    """Node layout: a line of sensors or an explicit node list."""
    layout: str = "line"
    spacing: float = 800.0
    coverage_radius: float = 500.0
    capacities: List[float] = field(default_factory=lambda: [100.0, 150.0, 200.0])
    nodes: List[Dict[str, Any]] = field(default_factory=list)
    events: List[Dict[str, Any]] = field(default_factory=list)

    def build_nodes(self, num_ndts: int) -> List[NdtNode]:
        """Materialise the node list for ``num_ndts`` sensors."""
        if self.layout == "line":
            return line_topology(num_ndts, self.spacing, self.coverage_radius, self.capacities)
        if self.layout != "explicit":
            raise InvalidInput(f"Unknown topology layout: '{self.layout}'")
        if len(self.nodes) != num_ndts:
            raise InvalidInput(f"Explicit topology lists {len(self.nodes)} nodes, expected {num_ndts}")
        return [
            NdtNode(
                id=int(spec.get('id', idx)),
                position=tuple(spec.get('position', (0.0, 0.0))),
                backhaul_capacity=float(spec.get('backhaul_capacity', 100.0)),
                coverage_radius=float(spec.get('coverage_radius', self.coverage_radius)),
            )
            for idx, spec in enumerate(self.nodes)
        ]

    def build_events(self) -> List[TopologyEvent]:
        events = []
        for spec in self.events:
            position = spec.get('position')
            events.append(TopologyEvent(
                round=int(spec['round']),
                node_id=int(spec['node_id']),
                position=tuple(position) if position is not None else None,
                backhaul_capacity=spec.get('backhaul_capacity'),
                coverage_radius=spec.get('coverage_radius'),
            ))
        return sorted(events, key=lambda e: (e.round, e.node_id))


@dataclass
class TrainingConfig:
    """Forward twinning parameters."""
    rounds: int = 200
    eta: float = 0.002
    batch_size: int = 32
    local_epochs: int = 1
    local_steps: Optional[int] = None
    arch: str = "linear"
    hidden: int = 8
    bias: bool = True
    lag: int = 6
    clip: Optional[float] = 10.0
    task: str = "flow"
    non_participants: List[int] = field(default_factory=list)
    retention: str = "full"

    def validate(self) -> None:
        if self.rounds < 1:
            raise InvalidInput(f"rounds must be at least 1, got: {self.rounds}")
        if self.eta < 0:
            raise InvalidInput(f"eta cannot be negative, got: {self.eta}")
        if self.batch_size < 1:
            raise InvalidInput(f"batch_size must be positive, got: {self.batch_size}")
        if self.local_epochs < 1:
            raise InvalidInput(f"local_epochs must be positive, got: {self.local_epochs}")
        if self.local_steps is not None and self.local_steps < 0:
            raise InvalidInput(f"local_steps cannot be negative, got: {self.local_steps}")
        if self.lag < 1:
            raise InvalidInput(f"lag must be positive, got: {self.lag}")
        if self.clip is not None and self.clip <= 0:
            raise InvalidInput(f"clip must be positive or null, got: {self.clip}")
        if self.retention not in ("full", "summary"):
            raise InvalidInput(f"retention must be 'full' or 'summary', got: '{self.retention}'")
        ModelArch(self.arch)
        TrafficKind(self.task)
        if ModelArch(self.arch) is ModelArch.MLP and self.hidden < 1:
            raise InvalidInput(f"mlp hidden width must be positive, got: {self.hidden}")


@dataclass
class UntwinConfig:
    """Untwinning parameters shared by SRU and PRU."""
    theta: float = 2.5
    epsilon: float = 10.0
    beta: float = 0.05
    gamma_star: Optional[float] = None
    phi_star: Optional[float] = None
    phi_star_fraction: float = 0.05
    sigma_min: float = 1e-6
    rollback_rule: str = "theorem"
    early_stop: bool = False
    lipschitz_probes: int = 100

    def validate(self) -> None:
        if self.theta < 0:
            raise InvalidInput(f"theta cannot be negative, got: {self.theta}")
        if self.epsilon <= 0:
            raise InvalidInput(f"epsilon must be positive, got: {self.epsilon}")
        if not 0 < self.beta <= 1.25:
            raise InvalidInput(f"beta must lie in (0, 1.25], got: {self.beta}")
        if self.gamma_star is not None and self.gamma_star <= 0:
            raise InvalidInput(f"gamma_star must be positive, got: {self.gamma_star}")
        if self.phi_star is not None and self.phi_star < 0:
            raise InvalidInput(f"phi_star cannot be negative, got: {self.phi_star}")
        if self.sigma_min < 0:
            raise InvalidInput(f"sigma_min cannot be negative, got: {self.sigma_min}")
        if self.rollback_rule not in ("theorem", "literal"):
            raise InvalidInput(f"rollback_rule must be 'theorem' or 'literal', got: '{self.rollback_rule}'")


@dataclass
class ClusteringConfig:
    """PRU clustering and re-clustering trigger."""
    num_clusters: Optional[int] = None
    recluster_fraction: float = 0.1

    def resolve_count(self, num_ndts: int) -> int:
        m = self.num_clusters if self.num_clusters is not None else default_cluster_count(num_ndts)
        if not 1 <= m <= num_ndts:
            raise InvalidInput(f"num_clusters must be within [1, {num_ndts}], got: {m}")
        return m

    def validate(self) -> None:
        if self.recluster_fraction < 0:
            raise InvalidInput(f"recluster_fraction cannot be negative, got: {self.recluster_fraction}")


@dataclass
class ProbeConfig:
    """Indistinguishability probe settings."""
    seeds: int = 30
    alpha: float = 0.05
    resamples: int = 999

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise InvalidInput(f"alpha must lie in (0, 1), got: {self.alpha}")
        if self.resamples < 1:
            raise InvalidInput(f"resamples must be positive, got: {self.resamples}")


@dataclass
class ExecutionConfig:
    """Where and how runs execute; excluded from the config hash."""
    output_dir: str = "runs/default"
    workers: int = 1

    def validate(self) -> None:
        if self.workers < 1:
            raise InvalidInput(f"workers must be positive, got: {self.workers}")


@dataclass
class RunConfig:
    """Complete description of one experiment."""
    seed: int = 42
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    weights: ConnectivityWeights = field(default_factory=ConnectivityWeights)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    untwin: UntwinConfig = field(default_factory=UntwinConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    checkpoints: StorePolicy = field(default_factory=StorePolicy)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    execution: ExecutionConfig = field(default_factory=ExecutionConfig)

    SECTIONS = {
        'scenario': ScenarioConfig,
        'topology': TopologyConfig,
        'weights': ConnectivityWeights,
        'training': TrainingConfig,
        'untwin': UntwinConfig,
        'clustering': ClusteringConfig,
        'checkpoints': StorePolicy,
        'probe': ProbeConfig,
        'execution': ExecutionConfig,
    }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Create a RunConfig from a parsed mapping.

        Args:
            data: Mapping with optional top-level ``seed`` and section mappings

        Returns:
            RunConfig instance (not yet validated)
        """
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("Configuration root must be a mapping")
        kwargs: Dict[str, Any] = {}
        for key, value in data.items():
            if key == 'seed':
                kwargs['seed'] = value
            elif key in cls.SECTIONS:
                kwargs[key] = _from_section(cls.SECTIONS[key], value, key)
            else:
                logger.warning(f"Unknown configuration section '{key}' ignored")
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        result: Dict[str, Any] = {'seed': self.seed}
        for name in self.SECTIONS:
            section = getattr(self, name)
            result[name] = section.to_dict() if hasattr(section, 'to_dict') else asdict(section)
        return result

    def validate(self) -> None:
        """Validate every section.

        Raises:
            ConfigError: Naming the section of the first violated constraint
        """
        checks = [
            ('seed', self._check_seed),
            ('scenario', self.scenario.validate),
            ('weights', self.weights.validate),
            ('training', self.training.validate),
            ('untwin', self.untwin.validate),
            ('clustering', self.clustering.validate),
            ('checkpoints', self.checkpoints.validate),
            ('probe', self.probe.validate),
            ('execution', self.execution.validate),
        ]
        for key, check in checks:
            try:
                check()
            except ValueError as e:
                raise ConfigError(str(e), key=key)
        try:
            nodes = self.topology.build_nodes(self.scenario.num_ndts)
            self.clustering.resolve_count(len(nodes))
            for event in self.topology.build_events():
                event.apply(nodes)
        except (InvalidInput, KeyError) as e:
            raise ConfigError(str(e), key='topology')
        if self.training.lag >= self.scenario.horizon:
            raise ConfigError(
                f"lag must be shorter than the horizon, got: {self.training.lag} >= {self.scenario.horizon}",
                key='training.lag',
            )
        bad = [n for n in self.training.non_participants if not 0 <= n < self.scenario.num_ndts]
        if bad:
            raise ConfigError(f"Unknown NDT ids: {bad}", key='training.non_participants')

    def _check_seed(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidInput(f"seed must be a non-negative integer, got: {self.seed}")

    def with_seed(self, seed: int) -> 'RunConfig':
        """Copy of this config with the training and scenario seeds replaced."""
        data = self.to_dict()
        data['seed'] = seed
        data['scenario']['seed'] = seed
        return RunConfig.from_dict(data)

    def build_nodes(self) -> List[NdtNode]:
        return self.topology.build_nodes(self.scenario.num_ndts)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form, ignoring output location and workers."""
    data = config.to_dict()
    for key in HASH_EXCLUDED:
        data['execution'].pop(key, None)
    return _digest(data)


def forward_hash(config: RunConfig) -> str:
    """Hash of the sections that determine the forward run and its artifacts."""
    data = config.to_dict()
    for key in FORWARD_EXCLUDED:
        data.pop(key, None)
    return _digest(data)


def _digest(data: Dict[str, Any]) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _line_index(text: str) -> Dict[str, int]:
    """Map dotted keys to 1-based source lines."""
    index: Dict[str, int] = {}

    def walk(node, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                dotted = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                index[dotted] = key_node.start_mark.line + 1
                walk(value_node, dotted)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return index


def _find_default_config() -> Optional[Path]:
    project_root = Path(__file__).resolve().parent.parent.parent
    for path in (project_root / "config" / DEFAULT_CONFIG_NAME, Path.cwd() / "config" / DEFAULT_CONFIG_NAME):
        if path.exists():
            return path
    return None


def load_run_config(config_path: Optional[str] = None) -> RunConfig:
    """Load and validate a run configuration.

    Args:
        config_path: Path to a JSON or YAML file. If None, uses the
                    UNTWIN_CONFIG environment variable, then config/default.json.

    Returns:
        Validated RunConfig with environment overrides applied

    Raises:
        FileNotFoundError: If no configuration file can be found
        ConfigError: If the file is malformed or a value is out of range
    """
    if config_path is None:
        config_path = os.getenv('UNTWIN_CONFIG')
    if config_path is None:
        found = _find_default_config()
        if found is None:
            raise FileNotFoundError(
                f"No configuration given and config/{DEFAULT_CONFIG_NAME} not found.\n"
                f"Pass --config or set UNTWIN_CONFIG."
            )
        config_path = found

    config_path = Path(config_path)
    if not config_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    text = config_path.read_text(encoding='utf-8')
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        raise ConfigError(
            f"Configuration file has invalid syntax: {config_path}",
            line=mark.line + 1 if mark is not None else None,
        )

    lines = _line_index(text)
    try:
        config = RunConfig.from_dict(data or {})
        _apply_env_overrides(config)
        config.validate()
    except ConfigError as e:
        if e.key is not None and e.line is None:
            raise ConfigError(e.message, key=e.key, line=lines.get(e.key))
        raise

    logger.info(f"Successfully loaded configuration from {config_path}")
    logger.info(
        f"N={config.scenario.num_ndts} NDTs, T={config.training.rounds} rounds, "
        f"checkpoint mode={config.checkpoints.mode.value}"
    )
    return config


def _apply_env_overrides(config: RunConfig) -> None:
    out = os.getenv('UNTWIN_OUT')
    if out:
        config.execution.output_dir = out
    workers = os.getenv('UNTWIN_WORKERS')
    if workers:
        try:
            config.execution.workers = int(workers)
        except ValueError:
            raise ConfigError(f"UNTWIN_WORKERS must be a number, got: '{workers}'", key='execution.workers')


def create_example_config(output_path: str) -> None:
    """Write a default configuration file.

    Args:
        output_path: Where to save the example configuration
    """
    with open(output_path, 'w', encoding='utf-8') as file:
        json.dump(RunConfig().to_dict(), file, indent=2, sort_keys=True)
        file.write("\n")

    logger.info(f"Created example configuration at {output_path}")
