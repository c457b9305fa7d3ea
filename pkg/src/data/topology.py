"""Sensor/NDT network topology, connectivity scoring and clustering.

The connectivity score between two NDTs combines inverse geographic distance,
normalised backhaul capacity, coverage overlap and data similarity. The
resulting symmetric matrix drives untwinning sets, PRU clustering and the
topology-drift signal of the checkpoint store.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..core.errors import InvalidInput

G_MIN = 1.0
LINKAGE_DECIMALS = 12


@dataclass
class NdtNode:
    """A deployed NDT: a roadside sensor with its base-station attributes."""
    id: int
    position: tuple = (0.0, 0.0)
    backhaul_capacity: float = 100.0
    coverage_radius: float = 500.0

    def __post_init__(self):
        self.position = (float(self.position[0]), float(self.position[1]))
        if self.coverage_radius <= 0:
            raise InvalidInput(f"coverage_radius must be positive, got: {self.coverage_radius}")
        if self.backhaul_capacity < 0:
            raise InvalidInput(f"backhaul_capacity cannot be negative, got: {self.backhaul_capacity}")

    def distance_to(self, other: 'NdtNode') -> float:
        return math.hypot(self.position[0] - other.position[0], self.position[1] - other.position[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'position': list(self.position),
            'backhaul_capacity': self.backhaul_capacity,
            'coverage_radius': self.coverage_radius,
        }


@dataclass
class AttributeQuad:
    """Pairwise attributes (g, k, delta, tau) of two NDTs."""
    g: float
    k: float
    delta: float
    tau: float


@dataclass
class AttributeMatrix:
    """The four attribute planes for every NDT pair."""
    g: np.ndarray
    k: np.ndarray
    delta: np.ndarray
    tau: np.ndarray

    @property
    def n(self) -> int:
        return int(self.g.shape[0])

    def pair(self, i: int, j: int) -> AttributeQuad:
        return AttributeQuad(float(self.g[i, j]), float(self.k[i, j]), float(self.delta[i, j]), float(self.tau[i, j]))


@dataclass
class ConnectivityWeights:
    """Non-negative weights of the four connectivity terms."""
    w_g: float = 1.0
    w_k: float = 1.0
    w_delta: float = 1.0
    w_tau: float = 1.0

    def validate(self) -> None:
        values = [self.w_g, self.w_k, self.w_delta, self.w_tau]
        if any(v < 0 for v in values):
            raise InvalidInput("Connectivity weights cannot be negative")
        if not any(v > 0 for v in values):
            raise InvalidInput("At least one connectivity weight must be positive")


@dataclass
class ConnectivityMatrix:
    """Symmetric N x N coupling scores; the diagonal is a 0.0 sentinel."""
    values: np.ndarray
    round_tag: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise InvalidInput(f"Connectivity matrix must be square, got shape: {self.values.shape}")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def score(self, i: int, j: int) -> float:
        return float(self.values[i, j])

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j].copy()

    def frobenius(self) -> float:
        """Frobenius norm over off-diagonal entries."""
        mask = ~np.eye(self.n, dtype=bool)
        return float(np.linalg.norm(self.values[mask]))


@dataclass
class ClusterAssignment:
    """Partition of NDT ids into M non-empty clusters."""
    num_clusters: int
    member_of: Dict[int, int]
    round_tag: int = 0

    def members(self, cluster: int) -> List[int]:
        return sorted(n for n, c in self.member_of.items() if c == cluster)

    def clusters(self) -> List[List[int]]:
        return [self.members(c) for c in range(self.num_clusters)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'num_clusters': self.num_clusters,
            'member_of': {str(k): v for k, v in sorted(self.member_of.items())},
            'round_tag': self.round_tag,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ClusterAssignment':
        return cls(
            num_clusters=int(data['num_clusters']),
            member_of={int(k): int(v) for k, v in data['member_of'].items()},
            round_tag=int(data.get('round_tag', 0)),
        )


@dataclass
class TopologyEvent:
    """A scheduled change of one node's attributes at the start of a round."""
    round: int
    node_id: int
    position: Optional[tuple] = None
    backhaul_capacity: Optional[float] = None
    coverage_radius: Optional[float] = None

    def apply(self, nodes: List[NdtNode]) -> List[NdtNode]:
        """Return a new node list with this event applied."""
        if not 0 <= self.node_id < len(nodes):
            raise InvalidInput(f"Topology event references unknown NDT {self.node_id}")
        updated = list(nodes)
        node = nodes[self.node_id]
        updated[self.node_id] = NdtNode(
            id=node.id,
            position=self.position if self.position is not None else node.position,
            backhaul_capacity=self.backhaul_capacity if self.backhaul_capacity is not None else node.backhaul_capacity,
            coverage_radius=self.coverage_radius if self.coverage_radius is not None else node.coverage_radius,
        )
        return updated


def line_topology(
    num_ndts: int,
    spacing: float = 800.0,
    coverage_radius: float = 500.0,
    capacities: Optional[Sequence[float]] = None,
) -> List[NdtNode]:
    """Sensors laid out along a straight road segment.

    Args:
        num_ndts: Number of sensors
        spacing: Distance between neighbours in meters
        coverage_radius: Radius of every coverage disk
        capacities: Backhaul capacities cycled over the nodes (Mbps)

    Returns:
        List of nodes with contiguous ids
    """
    if num_ndts < 1:
        raise InvalidInput(f"num_ndts must be positive, got: {num_ndts}")
    capacities = list(capacities) if capacities else [100.0, 150.0, 200.0]
    return [
        NdtNode(i, (i * spacing, 0.0), capacities[i % len(capacities)], coverage_radius)
        for i in range(num_ndts)
    ]


def _check_ids(nodes: Sequence[NdtNode]) -> None:
    ids = [node.id for node in nodes]
    if ids != list(range(len(nodes))):
        raise InvalidInput(f"NDT ids must be unique and contiguous from 0, got: {ids}")


def coverage_overlap(r1: float, r2: float, distance: float) -> float:
    """Lens area of two disks divided by the smaller disk's area."""
    if distance >= r1 + r2:
        return 0.0
    small = min(r1, r2)
    if distance <= abs(r1 - r2):
        return 1.0
    alpha = math.acos((distance ** 2 + r1 ** 2 - r2 ** 2) / (2 * distance * r1))
    beta = math.acos((distance ** 2 + r2 ** 2 - r1 ** 2) / (2 * distance * r2))
    area = (
        r1 ** 2 * alpha
        + r2 ** 2 * beta
        - 0.5 * math.sqrt(max(0.0, (-distance + r1 + r2) * (distance + r1 - r2) * (distance - r1 + r2) * (distance + r1 + r2)))
    )
    return float(min(1.0, max(0.0, area / (math.pi * small ** 2))))


def pairwise_attributes(nodes: Sequence[NdtNode], similarity: np.ndarray) -> AttributeMatrix:
    """Compute (g, k, delta, tau) for every pair of NDTs.

    Args:
        nodes: At least two nodes with contiguous ids
        similarity: N x N data-similarity matrix (tau), see ``traffic.similarity_matrix``

    Returns:
        AttributeMatrix with g clamped to ``G_MIN``
    """
    if len(nodes) < 2:
        raise InvalidInput(f"Need at least 2 NDTs, got: {len(nodes)}")
    _check_ids(nodes)
    n = len(nodes)
    tau = np.asarray(similarity, dtype=np.float64)
    if tau.shape != (n, n):
        raise InvalidInput(f"Similarity matrix must be {n}x{n}, got: {tau.shape}")

    g = np.full((n, n), G_MIN)
    k = np.ones((n, n))
    delta = np.ones((n, n))
    pair_caps = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            distance = nodes[i].distance_to(nodes[j])
            g[i, j] = g[j, i] = max(distance, G_MIN)
            delta[i, j] = delta[j, i] = coverage_overlap(
                nodes[i].coverage_radius, nodes[j].coverage_radius, distance
            )
            pair_caps[i, j] = pair_caps[j, i] = min(nodes[i].backhaul_capacity, nodes[j].backhaul_capacity)

    top = pair_caps.max()
    if top > 0:
        off = ~np.eye(n, dtype=bool)
        k[off] = pair_caps[off] / top
    return AttributeMatrix(g=g, k=k, delta=delta, tau=np.clip(tau, 0.0, 1.0))


def connectivity(attrs: AttributeMatrix, weights: ConnectivityWeights, round_tag: int = 0) -> ConnectivityMatrix:
    """Weighted coupling score for every pair; diagonal set to the 0.0 sentinel."""
    weights.validate()
    g = np.maximum(attrs.g, G_MIN)
    values = (
        weights.w_g / g
        + weights.w_k * attrs.k
        + weights.w_delta * attrs.delta
        + weights.w_tau * attrs.tau
    )
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 0.0)
    return ConnectivityMatrix(values, round_tag)


def topology_drift(c_new: ConnectivityMatrix, c_old: ConnectivityMatrix) -> float:
    """Frobenius norm of the off-diagonal difference of two matrices."""
    if c_new.n != c_old.n:
        raise InvalidInput(f"Cannot compare {c_new.n}x{c_new.n} with {c_old.n}x{c_old.n} matrices")
    diff = c_new.values - c_old.values
    mask = ~np.eye(c_new.n, dtype=bool)
    return float(np.linalg.norm(diff[mask]))


def cluster_ndts(c: ConnectivityMatrix, m: int, round_tag: Optional[int] = None) -> ClusterAssignment:
    """Average-linkage agglomerative clustering on connectivity similarity.

    Repeatedly merges the two clusters with the highest mean inter-cluster
    score until ``m`` remain. Equal scores (to 12 decimals) go to the pair
    with the lowest smallest-member ids. Clusters are numbered by their
    smallest member id.
    """
    n = c.n
    if not 1 <= m <= n:
        raise InvalidInput(f"Cluster count must be within [1, {n}], got: {m}")
    tag = c.round_tag if round_tag is None else round_tag
    if m == 1:
        return ClusterAssignment(1, {i: 0 for i in range(n)}, tag)

    # kept sorted by smallest member, so groups[a][0] < groups[b][0] for a < b
    groups = [[i] for i in range(n)]
    while len(groups) > m:
        best = None
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                score = round(float(c.values[np.ix_(groups[a], groups[b])].mean()), LINKAGE_DECIMALS)
                key = (-score, groups[a][0], groups[b][0])
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        groups[a] = sorted(groups[a] + groups[b])
        del groups[b]

    member_of = {node: idx for idx, group in enumerate(groups) for node in group}
    return ClusterAssignment(m, member_of, tag)


def default_cluster_count(num_ndts: int) -> int:
    return max(1, math.ceil(num_ndts / 4))


def should_recluster(drift: float, threshold: float) -> bool:
    """Re-cluster only on a strictly larger drift than the threshold."""
    if threshold < 0:
        raise InvalidInput(f"Recluster threshold cannot be negative, got: {threshold}")
    return drift > threshold
