"""Untwinning: removing NDTs' influence from the global twin.

Single-request untwinning (SRU) scores every NDT's coupling to the target,
forms the untwinning set, measures how far that set pushed the recorded
trajectory, rolls back to the latest round whose accumulated influence is
within the safety threshold, perturbs the rolled-back model with calibrated
Gaussian noise and remaps the remaining NDTs up to the current round.

Parallel-request untwinning (PRU) does the same per cluster: each cluster
rolls back to its own depth and the clusters restart in a staggered fashion,
synchronising through a global aggregation every round.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from ..core.config import RunConfig
from ..core.errors import InvalidInput, NothingRemains
from ..core.rng import substream
from ..data.topology import ClusterAssignment, ConnectivityMatrix
from ..data.twin_model import ModelArch, SampleBatch, TwinModel, gradient
from .checkpoints import CheckpointStore
from .twinning import TwinHistory, TwinningEngine, aggregate

ROLLBACK_RULES = ("theorem", "literal")


@dataclass
class UntwinRequest:
    """Request to remove one NDT's influence."""
    target: int
    issued_round: int = 0


@dataclass
class UntwinSet:
    """Untwinning set S_u with the importance scores it was built from."""
    target: int
    members: FrozenSet[int]
    scores: Dict[int, float]
    threshold: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'target': self.target,
            'members': sorted(self.members),
            'scores': {str(k): v for k, v in sorted(self.scores.items())},
            'threshold': self.threshold if math.isfinite(self.threshold) else "inf",
        }


@dataclass
class PrivacyBudget:
    """Indistinguishability budget (epsilon, beta)."""
    epsilon: float = 10.0
    beta: float = 0.05

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InvalidInput(f"epsilon must be positive, got: {self.epsilon}")
        omega(self.beta)

    @property
    def omega(self) -> float:
        return omega(self.beta)


@dataclass
class SensitivityCurve:
    """Per-round sensitivity, cumulative influence and rollback criterion."""
    delta: np.ndarray
    phi: np.ndarray
    gamma: np.ndarray
    lipschitz_estimate: float
    eta: float

    @property
    def growth_base(self) -> float:
        return 1.0 + self.eta * self.lipschitz_estimate

    @property
    def rounds(self) -> int:
        return int(self.phi.shape[0] - 1)


@dataclass
class RollbackPlan:
    """Where an untwinning run restarts and how much noise it injects."""
    k: int
    t_safe: int
    t_star: int
    replay_extension: int
    sigma: float
    perturb_labels: List[int] = field(default_factory=list)
    phi_star: float = 0.0
    rule: str = "theorem"
    targets: List[int] = field(default_factory=list)
    members: List[int] = field(default_factory=list)
    rounds_executed: int = 0
    cluster: Optional[int] = None

    def __post_init__(self):
        if not self.t_star <= self.t_safe:
            raise InvalidInput(f"t_star ({self.t_star}) cannot exceed t_safe ({self.t_safe})")
        if self.sigma < 0:
            raise InvalidInput(f"sigma cannot be negative, got: {self.sigma}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'K': self.k,
            't_safe': self.t_safe,
            't_star': self.t_star,
            'replay_extension': self.replay_extension,
            'sigma': self.sigma,
            'perturb_stream': ['perturb', self.perturb_labels],
            'phi_star': self.phi_star,
            'rule': self.rule,
            'targets': self.targets,
            'members': self.members,
            'rounds_executed': self.rounds_executed,
            'cluster': self.cluster,
        }


def importance_scores(c: ConnectivityMatrix, target: int) -> Dict[int, float]:
    """Connectivity of every other NDT to ``target``."""
    if not 0 <= target < c.n:
        raise InvalidInput(f"Unknown NDT id: {target}")
    column = c.column(target)
    return {n: float(column[n]) for n in range(c.n) if n != target}


def build_untwin_set(scores: Dict[int, float], theta: float, target: int) -> UntwinSet:
    """S_u = {n : I(n) >= theta} plus the target itself."""
    if theta < 0:
        raise InvalidInput(f"theta cannot be negative, got: {theta}")
    members = {n for n, s in scores.items() if s >= theta and n != target}
    members.add(target)
    return UntwinSet(target, frozenset(members), dict(scores), theta)


def target_importance(s: UntwinSet) -> float:
    """I(n_u): strongest coupling among the non-target members, 1.0 if none."""
    others = [s.scores[n] for n in s.members if n != s.target]
    return max(others) if others else 1.0


def delta_t(history: TwinHistory, s: UntwinSet, t: int, importance: float) -> float:
    """Instantaneous sensitivity of round t to the untwinning set."""
    record = history.record(t)
    without = history.mean_excluding(t, s.members)
    return float(importance * np.linalg.norm(record.global_model.params - without))


def delta_series(history: TwinHistory, s: UntwinSet, importance: Optional[float] = None) -> np.ndarray:
    """deltas[tau] is the sensitivity of the update producing w^(tau+1)."""
    importance = target_importance(s) if importance is None else importance
    return np.array([delta_t(history, s, t, importance) for t in range(1, history.rounds + 1)])


def phi_curve(deltas: Sequence[float], eta: float, lipschitz: float) -> np.ndarray:
    """Cumulative influence via phi(t) = B phi(t-1) + delta_(t-1), phi(0) = 0."""
    if eta < 0 or lipschitz < 0:
        raise InvalidInput(f"eta and lipschitz must be non-negative, got: {eta}, {lipschitz}")
    base = 1.0 + eta * lipschitz
    deltas = np.asarray(deltas, dtype=np.float64)
    phi = np.zeros(deltas.shape[0] + 1)
    for t in range(1, phi.shape[0]):
        phi[t] = base * phi[t - 1] + deltas[t - 1]
    return phi


def omega(beta: float) -> float:
    """Omega = sqrt(2 (ln 1.25 - ln beta)) for beta in (0, 1.25]."""
    if not 0 < beta <= 1.25:
        raise InvalidInput(f"beta must lie in (0, 1.25], got: {beta}")
    return math.sqrt(max(0.0, 2.0 * (math.log(1.25) - math.log(beta))))


def gamma_curve(phi: Sequence[float], budget: PrivacyBudget) -> np.ndarray:
    """gamma(t) = Omega / (epsilon phi(t)); +inf where phi is zero."""
    phi = np.asarray(phi, dtype=np.float64)
    w = budget.omega
    if w == 0:
        return np.zeros_like(phi)
    gamma = np.full_like(phi, np.inf)
    positive = phi > 0
    gamma[positive] = w / (budget.epsilon * phi[positive])
    return gamma


def rollback_depth(phi: Sequence[float], threshold_phi: float, T: int) -> int:
    """K = T - max{t <= T : phi(t) <= threshold_phi}."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[0] < T + 1:
        raise InvalidInput(f"phi covers rounds 0..{phi.shape[0] - 1}, need 0..{T}")
    safe = np.nonzero(phi[:T + 1] <= threshold_phi)[0]
    t_safe = int(safe.max()) if safe.size else 0
    return T - t_safe


def literal_rollback_depth(gamma: Sequence[float], gamma_star: float, T: int) -> int:
    """K = T - max{t <= T : gamma(t) <= gamma_star}; full rollback if none qualify."""
    gamma = np.asarray(gamma, dtype=np.float64)
    safe = np.nonzero(gamma[:T + 1] <= gamma_star)[0]
    t_safe = int(safe.max()) if safe.size else 0
    return T - t_safe


def noise_sigma(phi_at_safe: float, budget: PrivacyBudget, sigma_min: float = 1e-6) -> float:
    """Gaussian-mechanism scale max(sigma_min, Omega phi / epsilon)."""
    if phi_at_safe < 0:
        raise InvalidInput(f"phi cannot be negative, got: {phi_at_safe}")
    return max(sigma_min, budget.omega * phi_at_safe / budget.epsilon)


def perturb(model: TwinModel, sigma: float, stream: np.random.Generator) -> TwinModel:
    """Add i.i.d. N(0, sigma^2) noise to every parameter."""
    if sigma < 0:
        raise InvalidInput(f"sigma cannot be negative, got: {sigma}")
    if sigma == 0:
        return model.copy()
    return model.with_params(model.params + stream.normal(0.0, sigma, size=model.dimension))


def estimate_lipschitz(
    model: TwinModel,
    data: SampleBatch,
    history: Optional[TwinHistory] = None,
    probes: int = 100,
    seed: int = 0,
) -> float:
    """Smoothness constant L of the training loss.

    Exact for the linear model (largest eigenvalue of the loss Hessian);
    for the MLP the largest gradient-difference ratio over random pairs of
    recorded global models.
    """
    if model.arch is ModelArch.LINEAR:
        x = data.features
        if model.bias:
            x = np.hstack([x, np.ones((x.shape[0], 1))])
        hessian = 2.0 * (x.T @ x) / x.shape[0]
        return float(np.linalg.eigvalsh(hessian)[-1])

    if history is None or history.rounds < 1:
        raise InvalidInput("MLP Lipschitz estimate needs a recorded history")
    rng = substream(seed, "lipschitz")
    best = 0.0
    for _ in range(probes):
        a, b = rng.choice(history.rounds + 1, size=2, replace=False)
        w_a, w_b = history.global_model(int(a)), history.global_model(int(b))
        gap = float(np.linalg.norm(w_a.params - w_b.params))
        if gap == 0:
            continue
        diff = np.linalg.norm(gradient(w_a, data).values - gradient(w_b, data).values)
        best = max(best, float(diff / gap))
    return best


def partition_requests(
    requests: Sequence[UntwinRequest], clusters: ClusterAssignment
) -> Dict[int, List[UntwinRequest]]:
    """Route every request to its target's cluster; every cluster gets a list."""
    parts: Dict[int, List[UntwinRequest]] = {a: [] for a in range(clusters.num_clusters)}
    for request in requests:
        if request.target not in clusters.member_of:
            raise InvalidInput(f"Unknown NDT id: {request.target}")
        parts[clusters.member_of[request.target]].append(request)
    return parts


def cluster_rollback_depth(depths: Iterable[int]) -> int:
    """K_a: depth of the most sensitive target, 0 for no targets."""
    return max(depths, default=0)


@dataclass
class UntwinningConfig:
    """Configuration for SRU/PRU runs."""
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
    noise_override: Optional[float] = None
    force_t_star: Optional[int] = None

    @classmethod
    def from_run_config(cls, config: RunConfig, **kwargs) -> 'UntwinningConfig':
        u = config.untwin
        values = dict(
            theta=u.theta,
            epsilon=u.epsilon,
            beta=u.beta,
            gamma_star=u.gamma_star,
            phi_star=u.phi_star,
            phi_star_fraction=u.phi_star_fraction,
            sigma_min=u.sigma_min,
            rollback_rule=u.rollback_rule,
            early_stop=u.early_stop,
            lipschitz_probes=u.lipschitz_probes,
        )
        values.update(kwargs)
        return cls(**values)

    @property
    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(self.epsilon, self.beta)


@dataclass
class UntwinResult:
    """Outcome of an SRU or PRU run."""
    model: TwinModel
    plans: List[RollbackPlan]
    sets: List[UntwinSet]
    curves: Dict[int, SensitivityCurve]
    excluded: FrozenSet[int]
    rounds_executed: int
    wall_time: float
    dropped_clusters: List[int] = field(default_factory=list)

    @property
    def plan(self) -> RollbackPlan:
        return self.plans[0]

    @property
    def k_max(self) -> int:
        return max(p.k for p in self.plans)


class UntwinningService:
    """Runs SRU and PRU against a recorded forward history."""

    def __init__(
        self,
        config: UntwinningConfig,
        engine: TwinningEngine,
        history: TwinHistory,
        store: CheckpointStore,
    ):
        if config.rollback_rule not in ROLLBACK_RULES:
            raise InvalidInput(f"Unknown rollback rule: '{config.rollback_rule}'")
        self.config = config
        self.engine = engine
        self.history = history
        self.store = store
        self.budget = config.budget
        self._lipschitz: Optional[float] = None

    @property
    def T(self) -> int:
        return self.history.rounds

    @property
    def connectivity(self) -> ConnectivityMatrix:
        return self.history.topology_at(self.T).connectivity

    @property
    def clusters(self) -> ClusterAssignment:
        return self.history.topology_at(self.T).clusters

    def lipschitz(self) -> float:
        if self._lipschitz is None:
            self._lipschitz = estimate_lipschitz(
                self.history.initial_model,
                self.engine.pooled_train(),
                self.history,
                self.config.lipschitz_probes,
                self.engine.config.seed,
            )
            logger.debug(f"Lipschitz estimate L={self._lipschitz:.4f}")
        return self._lipschitz

    def untwin_set(self, target: int, within: Optional[Iterable[int]] = None) -> UntwinSet:
        """S_u for ``target``, optionally restricted to a cluster's members."""
        s = build_untwin_set(importance_scores(self.connectivity, target), self.config.theta, target)
        if within is not None:
            s = UntwinSet(target, s.members & frozenset(within), s.scores, s.threshold)
        return s

    def curve(self, s: UntwinSet) -> SensitivityCurve:
        deltas = delta_series(self.history, s)
        eta = self.engine.config.eta
        lipschitz = self.lipschitz()
        phi = phi_curve(deltas, eta, lipschitz)
        return SensitivityCurve(deltas, phi, gamma_curve(phi, self.budget), lipschitz, eta)

    def phi_star(self, curve: SensitivityCurve) -> float:
        cfg = self.config
        if cfg.phi_star is not None:
            return cfg.phi_star
        if cfg.gamma_star is not None:
            return self.budget.omega / (self.budget.epsilon * cfg.gamma_star)
        return cfg.phi_star_fraction * float(curve.phi.max())

    def safe_round(self, curve: SensitivityCurve) -> Tuple[int, float]:
        """(t_safe, phi*) under the configured rollback rule."""
        phi_star = self.phi_star(curve)
        if self.config.rollback_rule == "theorem":
            k = rollback_depth(curve.phi, phi_star, self.T)
        else:
            gamma_star = self.config.gamma_star
            if gamma_star is None:
                gamma_star = self.budget.omega / (self.budget.epsilon * phi_star) if phi_star > 0 else math.inf
            k = literal_rollback_depth(curve.gamma, gamma_star, self.T)
        return self.T - k, phi_star

    def _restart_point(self, t_safe: int) -> Tuple[TwinModel, int, int]:
        """(model, t_star, t_safe) honouring a forced restart round."""
        forced = self.config.force_t_star
        if forced is not None:
            if not 0 <= forced <= self.T:
                raise InvalidInput(f"Forced t* must lie in [0, {self.T}], got: {forced}")
            t_safe = max(t_safe, forced)
            target = forced
        else:
            target = t_safe
        if target == self.T:
            return self.history.final_model, self.T, t_safe
        checkpoint, _ = self.store.retrieve_proximal(target)
        return checkpoint.model, checkpoint.round, t_safe

    def _check_remaining(self, excluded: FrozenSet[int]) -> None:
        remaining = set(self.engine.participants) - excluded
        if not remaining:
            raise NothingRemains(f"Excluding {sorted(excluded)} leaves no participating NDT")

    def sru(self, request: UntwinRequest) -> UntwinResult:
        """Single-request untwinning.

        Args:
            request: Target NDT to remove

        Returns:
            UntwinResult with the remapped model and its rollback plan

        Raises:
            NothingRemains: If the untwinning set covers every participant
        """
        started = time.perf_counter()
        T = self.T
        s = self.untwin_set(request.target)
        self._check_remaining(s.members)
        logger.info(f"SRU for NDT {request.target}: S_u={sorted(s.members)}")

        curve = self.curve(s)
        t_safe, phi_star = self.safe_round(curve)
        source, t_star, t_safe = self._restart_point(t_safe)
        sigma = self._sigma(curve.phi[t_safe])
        labels = [request.target]
        perturbed = perturb(source, sigma, substream(self.engine.config.seed, "perturb", tuple(labels)))

        model, executed = self.engine.run_rounds(
            perturbed, t_star + 1, T, excluded=s.members, early_stop=self.config.early_stop
        )
        plan = RollbackPlan(
            k=T - t_safe,
            t_safe=t_safe,
            t_star=t_star,
            replay_extension=t_safe - t_star,
            sigma=sigma,
            perturb_labels=labels,
            phi_star=phi_star,
            rule=self.config.rollback_rule,
            targets=labels,
            members=sorted(s.members),
            rounds_executed=executed,
        )
        elapsed = time.perf_counter() - started
        logger.success(
            f"SRU done: K={plan.k}, t*={t_star}, sigma={sigma:.3g}, {executed} remap rounds in {elapsed:.2f}s"
        )
        return UntwinResult(model, [plan], [s], {request.target: curve}, s.members, executed, elapsed)

    def _sigma(self, phi_at_safe: float) -> float:
        if self.config.noise_override is not None:
            return self.config.noise_override
        return noise_sigma(float(phi_at_safe), self.budget, self.config.sigma_min)

    def pru(self, requests: Sequence[UntwinRequest], clusters: Optional[ClusterAssignment] = None) -> UntwinResult:
        """Parallel-request untwinning with staggered cluster restarts.

        Args:
            requests: Targets to remove
            clusters: Cluster assignment; defaults to the one in force at T

        Returns:
            UntwinResult with one plan per cluster holding requests
        """
        started = time.perf_counter()
        T = self.T
        clusters = clusters or self.clusters
        if not requests:
            raise InvalidInput("PRU needs at least one request")
        parts = partition_requests(requests, clusters)
        seed = self.engine.config.seed
        skip = set(self.engine.config.non_participants)

        restart: Dict[int, int] = {}
        models: Dict[int, TwinModel] = {}
        remaining: Dict[int, List[int]] = {}
        plans: List[RollbackPlan] = []
        sets: List[UntwinSet] = []
        curves: Dict[int, SensitivityCurve] = {}
        excluded: set = set()
        dropped: List[int] = []

        for a in range(clusters.num_clusters):
            members = clusters.members(a)
            targets = sorted({r.target for r in parts[a]})
            if not targets:
                restart[a] = T
                models[a] = self.history.final_model
                remaining[a] = [n for n in members if n not in skip]
                continue

            cluster_sets = [self.untwin_set(target, within=members) for target in targets]
            cluster_curves = [self.curve(s) for s in cluster_sets]
            safe = [self.safe_round(curve) for curve in cluster_curves]
            depths = [T - t for t, _ in safe]
            k_a = cluster_rollback_depth(depths)
            source, t_star, t_safe = self._restart_point(T - k_a)
            sigma = max(self._sigma(curve.phi[t_safe]) for curve in cluster_curves)

            union = frozenset().union(*(s.members for s in cluster_sets))
            excluded |= union
            models[a] = perturb(source, sigma, substream(seed, "perturb", tuple(targets)))
            restart[a] = t_star
            remaining[a] = [n for n in members if n not in union and n not in skip]
            sets.extend(cluster_sets)
            curves.update(dict(zip(targets, cluster_curves)))
            plans.append(RollbackPlan(
                k=T - t_safe,
                t_safe=t_safe,
                t_star=t_star,
                replay_extension=t_safe - t_star,
                sigma=sigma,
                perturb_labels=targets,
                phi_star=max(p for _, p in safe),
                rule=self.config.rollback_rule,
                targets=targets,
                members=sorted(union),
                cluster=a,
            ))
            if not remaining[a]:
                dropped.append(a)
                logger.warning(f"Cluster {a} has no members left after untwinning; dropped from aggregation")

        self._check_remaining(frozenset(excluded))
        live = [a for a in range(clusters.num_clusters) if a not in dropped]
        logger.info(f"PRU: {len(plans)} clusters roll back, K_max={max(p.k for p in plans)}")

        first = min(restart[a] for a in live) + 1
        global_model = aggregate([models[a] for a in live], live)
        started_clusters: set = set()
        executed = 0
        for t in range(first, T + 1):
            for a in live:
                if t < restart[a] + 1:
                    continue
                start = models[a] if a not in started_clusters else global_model
                started_clusters.add(a)
                locals_t = self.engine.local_models(start, t, remaining[a])
                models[a] = aggregate(list(locals_t.values()), list(locals_t.keys()))
            global_model = aggregate([models[a] for a in live], live)
            executed += 1

        for plan in plans:
            plan.rounds_executed = T - plan.t_star if plan.cluster not in dropped else 0
        elapsed = time.perf_counter() - started
        logger.success(f"PRU done: {executed} staggered rounds in {elapsed:.2f}s")
        return UntwinResult(global_model, plans, sets, curves, frozenset(excluded), executed, elapsed, dropped)


def create_untwinning_service(
    config: RunConfig,
    engine: TwinningEngine,
    history: TwinHistory,
    store: CheckpointStore,
    **kwargs,
) -> UntwinningService:
    """Factory function to create an untwinning service.

    Args:
        config: Run configuration
        engine: Engine the history was recorded with
        history: Forward history through T
        store: Checkpoint store populated during the forward run
        **kwargs: UntwinningConfig overrides (e.g. noise_override, force_t_star)
    """
    return UntwinningService(UntwinningConfig.from_run_config(config, **kwargs), engine, history, store)
