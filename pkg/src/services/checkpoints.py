"""Checkpoint store with adaptive topology-aware checkpointing.

Three saving modes are supported: ``naive`` keeps every round, ``fixed``
keeps one round every p, and ``atac`` scores each round by model and
topology drift, pins re-clustering rounds as anchors, stretches or shrinks
its keep-alive interval with the observed drift and coarsens old history to
stay within a checkpoint budget.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from ..core.errors import InvalidInput, OverBudget
from ..data.checkpoint_models import Checkpoint, SaveDecision, StoreMode, StorePolicy, StoreState
from ..data.topology import ClusterAssignment, ConnectivityMatrix, topology_drift
from ..data.twin_model import TwinModel


@dataclass
class StorageReport:
    """Storage accounting; the pinned round-0 checkpoint is not counted."""
    count: int
    bytes: int
    rounds_observed: int
    reduction: float
    anchors: int
    over_budget: bool = False

    def to_dict(self) -> Dict:
        return {
            'count': self.count,
            'bytes': self.bytes,
            'rounds_observed': self.rounds_observed,
            'reduction': self.reduction,
            'anchors': self.anchors,
            'over_budget': self.over_budget,
        }


def utility(dw: float, dc: float, policy: StorePolicy) -> float:
    """Drift utility ``lambda_w * dw + lambda_c * dc``."""
    if dw < 0 or dc < 0:
        raise InvalidInput(f"Drifts cannot be negative, got: dw={dw}, dc={dc}")
    return policy.lambda_w * dw + policy.lambda_c * dc


def update_interval(p_t: float, u: float, policy: StorePolicy) -> float:
    """Inverse-exponential keep-alive schedule, clipped to [p_min, p_max]."""
    p_next = p_t * math.exp(policy.kappa * (policy.tau_drift - u))
    return float(min(policy.p_max, max(policy.p_min, p_next)))


def age_band(age: int, window: int) -> int:
    """Band j such that age lies in [(2^j - 1) H, (2^(j+1) - 1) H)."""
    h = max(window, 1)
    band = 0
    while age >= ((2 ** (band + 1)) - 1) * h:
        band += 1
    return band


class CheckpointStore:
    """Sparse timeline of global models; single writer."""

    def __init__(self, policy: Optional[StorePolicy] = None):
        self.policy = policy or StorePolicy()
        self.policy.validate()
        self.state = StoreState(p_t=float(self.policy.p_max))

    @property
    def last_save(self) -> int:
        return self.state.last_round - self.state.rounds_since_save

    @property
    def mode(self) -> StoreMode:
        return self.policy.mode

    @property
    def count(self) -> int:
        """Stored checkpoints excluding the pinned round 0."""
        return sum(1 for r in self.state.checkpoints if r != 0)

    def rounds(self) -> List[int]:
        return self.state.rounds()

    def anchors(self) -> List[int]:
        return sorted(r for r, c in self.state.checkpoints.items() if c.anchor)

    def get(self, t: int) -> Checkpoint:
        if t not in self.state.checkpoints:
            raise InvalidInput(f"Round {t} is not checkpointed")
        return self.state.checkpoints[t]

    def pin_initial(
        self,
        model: TwinModel,
        connectivity: Optional[ConnectivityMatrix] = None,
        clusters: Optional[ClusterAssignment] = None,
    ) -> None:
        """Store w^0; it is never evicted."""
        self.state.checkpoints[0] = Checkpoint(0, model.copy(), connectivity, clusters, anchor=False)
        self.state.last_round = 0
        self.state.last_model = model
        self.state.last_connectivity = connectivity

    def observe(
        self,
        t: int,
        model: TwinModel,
        connectivity: Optional[ConnectivityMatrix] = None,
        reclustered: bool = False,
        clusters: Optional[ClusterAssignment] = None,
    ) -> SaveDecision:
        """Decide whether round t is checkpointed.

        Args:
            t: Round, strictly after the last observed one
            model: Global model w^t
            connectivity: Connectivity matrix in force at round t
            reclustered: Whether clustering changed at round t
            clusters: Cluster assignment in force at round t

        Returns:
            SaveDecision describing what happened
        """
        state, policy = self.state, self.policy
        if 0 not in state.checkpoints:
            raise InvalidInput("pin_initial must be called before observe")
        if t <= state.last_round:
            raise InvalidInput(f"Rounds must be observed in order; last was {state.last_round}, got: {t}")

        dw = float(np.linalg.norm(model.params - state.last_model.params)) if state.last_model is not None else 0.0
        dc = 0.0
        if connectivity is not None and state.last_connectivity is not None:
            dc = topology_drift(connectivity, state.last_connectivity)
        u = utility(dw, dc, policy)
        last_save = self.last_save
        since = t - last_save

        reason = ""
        if policy.mode is StoreMode.NAIVE:
            reason = "every-round"
        elif policy.mode is StoreMode.FIXED:
            if since >= policy.fixed_interval:
                reason = "interval"
        else:
            if reclustered:
                reason = "anchor"
            elif u >= policy.tau_drift:
                reason = "drift"
            elif since >= math.ceil(state.p_t):
                reason = "keep-alive"

        decision = SaveDecision(round=t, saved=bool(reason), reason=reason, utility=u, interval=state.p_t)
        if reason:
            anchor = policy.mode is StoreMode.ATAC and reclustered
            state.checkpoints[t] = Checkpoint(t, model.copy(), connectivity, clusters, anchor=anchor)
            decision.anchor = anchor
            last_save = t
            logger.debug(f"Checkpoint round {t} ({reason}, u={u:.4f})")

        if policy.mode is StoreMode.ATAC:
            state.p_t = update_interval(state.p_t, u, policy)
        state.rounds_since_save = t - last_save
        state.last_round = t
        state.last_model = model
        state.last_connectivity = connectivity

        if policy.mode is StoreMode.ATAC and self.count > policy.budget:
            decision.evicted = self.coarsen()
        return decision

    def coarsen_pass(self, slot_width: int) -> List[int]:
        """One sparsification sweep over checkpoints older than the recent window.

        Band j holds ages in [(2^j - 1) H, (2^(j+1) - 1) H) measured back from
        the window edge; its slots are ``slot_width * 2^j`` rounds wide and
        keep only their newest checkpoint. Anchors and round 0 are never
        evicted but still count as a slot's newest member.
        """
        if slot_width < 1:
            raise InvalidInput(f"slot_width must be positive, got: {slot_width}")
        boundary = self.state.last_round - self.policy.recent_window
        slots: Dict[Tuple[int, int], List[int]] = {}
        for r in self.rounds():
            if r > boundary:
                continue
            band = age_band(boundary - r, self.policy.recent_window)
            width = slot_width * (2 ** band)
            slots.setdefault((band, r // width), []).append(r)

        evicted = []
        for members in slots.values():
            newest = max(members)
            for r in members:
                if r == newest or r == 0 or self.state.checkpoints[r].anchor:
                    continue
                del self.state.checkpoints[r]
                evicted.append(r)
        return sorted(evicted)

    def coarsen(self) -> List[int]:
        """Coarsen with doubling slot widths until the budget holds.

        Returns:
            Evicted rounds. Sets ``state.over_budget`` when protected
            checkpoints alone exceed the budget.
        """
        budget = self.policy.budget
        if self.count <= budget:
            return []
        evicted: List[int] = []
        width = 1
        limit = 2 * max(self.state.last_round, 1)
        while self.count > budget and width <= limit:
            width *= 2
            evicted.extend(self.coarsen_pass(width))
        self.state.over_budget = self.count > budget
        if self.state.over_budget:
            error = OverBudget(f"{self.count} checkpoints remain above budget {budget} after coarsening")
            logger.warning(str(error))
        logger.debug(f"Coarsening evicted {len(evicted)} checkpoints")
        return sorted(evicted)

    def retrieve_proximal(self, target_round: int) -> Tuple[Checkpoint, int]:
        """Nearest checkpoint at or before ``target_round``.

        Returns:
            (checkpoint, replay extension = target_round - checkpoint round)
        """
        if target_round < 0:
            raise InvalidInput(f"target_round cannot be negative, got: {target_round}")
        candidates = [r for r in self.state.checkpoints if r <= target_round]
        if not candidates:
            raise InvalidInput("Store is empty; round 0 was never pinned")
        t_star = max(candidates)
        return self.state.checkpoints[t_star], target_round - t_star

    def storage_report(self) -> StorageReport:
        counted = [c for r, c in self.state.checkpoints.items() if r != 0]
        rounds = self.state.last_round
        reduction = 1.0 - len(counted) / rounds if rounds > 0 else 0.0
        return StorageReport(
            count=len(counted),
            bytes=sum(c.bytes for c in counted),
            rounds_observed=rounds,
            reduction=reduction,
            anchors=sum(1 for c in counted if c.anchor),
            over_budget=self.state.over_budget,
        )


def create_checkpoint_store(policy: Optional[StorePolicy] = None) -> CheckpointStore:
    """Factory function to create a checkpoint store."""
    return CheckpointStore(policy)
