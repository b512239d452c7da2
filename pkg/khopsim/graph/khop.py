"""Undirected communication graphs, k-hop neighborhoods, and coupling matrices.

Agents are numbered ``1..n`` everywhere, matching the edge-list format.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from khopsim.errors import (
    DimensionError,
    EmptyNeighborhood,
    GraphNotConnected,
    IndexOutOfRange,
    InternalConsistencyError,
)
from khopsim.linalg.dense import extreme_eigenvalues

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Graph:
    """Connected undirected graph over agents ``1..n``."""

    n: int
    edges: frozenset[tuple[int, int]]
    _nx: nx.Graph = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        normalized: set[tuple[int, int]] = set()
        for edge in self.edges:
            i, j = (int(v) for v in edge)
            if i == j:
                raise ValueError(f"self-loop on agent {i} is not allowed")
            for v in (i, j):
                if not 1 <= v <= self.n:
                    raise IndexOutOfRange(f"edge endpoint {v} outside 1..{self.n}")
            normalized.add((min(i, j), max(i, j)))
        g = nx.Graph()
        g.add_nodes_from(range(1, self.n + 1))
        g.add_edges_from(normalized)
        if not nx.is_connected(g):
            raise GraphNotConnected(
                f"graph with n={self.n} and {len(normalized)} edges is not connected"
            )
        object.__setattr__(self, "edges", frozenset(normalized))
        object.__setattr__(self, "_nx", g)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]]) -> Graph:
        """Build a graph, rejecting duplicate edges in either orientation."""
        seen: set[tuple[int, int]] = set()
        for edge in edges:
            i, j = int(edge[0]), int(edge[1])
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {{{i}, {j}}}")
            seen.add(key)
        return cls(n=int(n), edges=frozenset(seen))

    @property
    def nx_graph(self) -> nx.Graph:
        return self._nx

    @property
    def agents(self) -> range:
        return range(1, self.n + 1)

    def check_agent(self, i: int) -> None:
        if not 1 <= i <= self.n:
            raise IndexOutOfRange(f"agent index {i} outside 1..{self.n}")

    def neighbors(self, i: int) -> frozenset[int]:
        self.check_agent(i)
        return frozenset(self._nx.neighbors(i))

    def has_edge(self, i: int, j: int) -> bool:
        return self._nx.has_edge(i, j)

    def is_connected(self) -> bool:
        return nx.is_connected(self._nx)

    def distances(self, i: int, cutoff: int | None = None) -> dict[int, int]:
        """BFS hop distances from ``i`` (optionally truncated at ``cutoff``)."""
        self.check_agent(i)
        return dict(nx.single_source_shortest_path_length(self._nx, i, cutoff=cutoff))

    def laplacian(self) -> np.ndarray:
        adj = nx.to_numpy_array(self._nx, nodelist=list(self.agents))
        return np.diag(adj.sum(axis=1)) - adj


@dataclass(frozen=True)
class KHopNeighborhood:
    """Agents at hop distance ``2..k`` from ``agent``, ascending."""

    agent: int
    k: int
    members: tuple[int, ...]
    one_hop: frozenset[int]

    @property
    def eta(self) -> int:
        return len(self.members)

    def position(self, member: int) -> int:
        """Slot of ``member`` inside the stacked estimate vectors."""
        try:
            return self.members.index(member)
        except ValueError:
            raise IndexOutOfRange(
                f"agent {member} is not a {self.k}-hop member of agent {self.agent}"
            ) from None


@dataclass(frozen=True, eq=False)
class ObserverCoupling:
    """``M = L + H`` for one agent together with its extreme eigenvalues."""

    L: np.ndarray
    H: np.ndarray
    M: np.ndarray
    lambda_min: float
    lambda_max: float

    @property
    def eta(self) -> int:
        return int(self.M.shape[0])

    @property
    def condition(self) -> float:
        return self.lambda_max / self.lambda_min


@dataclass(frozen=True, eq=False)
class SelectionMap:
    """Index lists realizing the k-hop and 1-hop selection matrices."""

    agent: int
    khop_rows: np.ndarray
    onehop_rows: np.ndarray
    state_dim: int

    def select_khop(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[self.khop_rows]

    def select_onehop(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[self.onehop_rows]


@dataclass(frozen=True)
class Lemma1Report:
    """Neighbor-overlap check for one agent ``j``."""

    agent: int
    members: tuple[int, ...]
    components: tuple[tuple[int, ...], ...]
    every_member_anchored: bool
    every_component_anchored: bool

    @property
    def ok(self) -> bool:
        return self.every_member_anchored and self.every_component_anchored


def khop_set(g: Graph, i: int, k: int) -> KHopNeighborhood:
    """Return the agents at shortest-path distance ``2..k`` from ``i``."""
    g.check_agent(i)
    if k < 2:
        raise ValueError("hop horizon k must be >= 2")
    if not g.is_connected():
        raise GraphNotConnected("k-hop sets require a connected graph")
    dist = g.distances(i, cutoff=k)
    members = tuple(sorted(j for j, d in dist.items() if 2 <= d <= k))
    return KHopNeighborhood(agent=i, k=k, members=members, one_hop=g.neighbors(i))


def all_khop_sets(g: Graph, k: int) -> list[KHopNeighborhood]:
    """k-hop sets of every agent, in agent order."""
    return [khop_set(g, i, k) for i in g.agents]


def coupling_matrices(g: Graph, nb: KHopNeighborhood) -> ObserverCoupling:
    """Induced-subgraph Laplacian, overlap matrix, and their sum for ``nb``."""
    if nb.eta == 0:
        raise EmptyNeighborhood(f"agent {nb.agent} has no {nb.k}-hop neighbors")
    sub = g.nx_graph.subgraph(nb.members)
    adj = nx.to_numpy_array(sub, nodelist=list(nb.members))
    lap = np.diag(adj.sum(axis=1)) - adj
    overlap = np.diag(
        [float(len(g.neighbors(m) & nb.one_hop)) for m in nb.members]
    )
    m = lap + overlap
    lam_min, lam_max = extreme_eigenvalues(m)
    logger.debug(
        "agent %d: eta=%d lambda(M) in [%.6g, %.6g]", nb.agent, nb.eta, lam_min, lam_max
    )
    for a in (lap, overlap, m):
        a.setflags(write=False)
    return ObserverCoupling(
        L=lap, H=overlap, M=m, lambda_min=lam_min, lambda_max=lam_max
    )


def selection_map(g: Graph, nb: KHopNeighborhood, state_dim: int) -> SelectionMap:
    """Row indices into the stacked global state for ``nb``'s blocks."""
    if state_dim < 1:
        raise ValueError("state_dim must be >= 1")

    def rows(agents: Iterable[int]) -> np.ndarray:
        out = [(a - 1) * state_dim + c for a in agents for c in range(state_dim)]
        return np.asarray(out, dtype=np.intp)

    return SelectionMap(
        agent=nb.agent,
        khop_rows=rows(nb.members),
        onehop_rows=rows(sorted(nb.one_hop)),
        state_dim=state_dim,
    )


def check_lemma1(g: Graph, k: int) -> list[Lemma1Report]:
    """Verify the neighbor-overlap lemma for every agent.

    Every k-hop member ``i`` of ``j`` must either touch another member or share
    a 1-hop neighbor with ``j``. Every connected component of the member
    subgraph must contain an agent sharing a 1-hop neighbor with ``j``, and
    components with at least two members must contain one satisfying both
    conditions. Raises :class:`InternalConsistencyError` on any violation.
    """
    reports = []
    for j in g.agents:
        nb = khop_set(g, j, k)
        member_set = frozenset(nb.members)
        in_group = {i: len(g.neighbors(i) & member_set) for i in nb.members}
        shared = {i: len(g.neighbors(i) & nb.one_hop) for i in nb.members}
        member_ok = all(in_group[i] > 0 or shared[i] > 0 for i in nb.members)

        comps = tuple(
            tuple(sorted(c))
            for c in nx.connected_components(g.nx_graph.subgraph(nb.members))
        )
        comps = tuple(sorted(comps))
        comp_ok = True
        for comp in comps:
            if len(comp) == 1:
                comp_ok &= shared[comp[0]] > 0
            else:
                comp_ok &= any(in_group[i] > 0 and shared[i] > 0 for i in comp)
        reports.append(
            Lemma1Report(
                agent=j,
                members=nb.members,
                components=comps,
                every_member_anchored=member_ok,
                every_component_anchored=comp_ok,
            )
        )

    bad = [r.agent for r in reports if not r.ok]
    if bad:
        raise InternalConsistencyError(
            f"neighbor-overlap lemma violated for agents {bad} (k={k})"
        )
    return reports


def error_permutation(
    nbs: Sequence[KHopNeighborhood], state_dim: int
) -> np.ndarray:
    """Index array ``p`` with ``by_target = by_estimator[p]``.

    ``by_estimator`` concatenates each estimator's stacked errors in agent
    order; ``by_target`` groups the same coordinates by estimated agent, the
    estimators inside each group ascending.
    """
    offsets: dict[int, int] = {}
    cursor = 0
    for nb in nbs:
        offsets[nb.agent] = cursor
        cursor += nb.eta * state_dim

    perm: list[int] = []
    for target in nbs:
        # estimators of `target` are exactly its own k-hop members
        for estimator in target.members:
            slot = nbs[estimator - 1].position(target.agent)
            start = offsets[estimator] + slot * state_dim
            perm.extend(range(start, start + state_dim))
    if len(perm) != cursor:
        raise InternalConsistencyError("k-hop sets are not symmetric")
    return np.asarray(perm, dtype=np.intp)


def _infer_state_dim(
    nbs: Sequence[KHopNeighborhood], size: int, state_dim: int | None
) -> int:
    total = sum(nb.eta for nb in nbs)
    if state_dim is None:
        if total == 0:
            state_dim = 1
        elif size % total:
            raise DimensionError(
                f"vector length {size} is not a multiple of sum(eta)={total}"
            )
        else:
            state_dim = size // total
    if size != total * state_dim:
        raise DimensionError(
            f"expected vector length {total * state_dim}, got {size}"
        )
    return state_dim


def reorder_errors(
    nbs: Sequence[KHopNeighborhood],
    stacked_by_estimator: np.ndarray,
    state_dim: int | None = None,
) -> np.ndarray:
    """Regroup ``[x~^1; ...; x~^n]`` into ``[x~_1; ...; x~_n]``."""
    vec = np.asarray(stacked_by_estimator, dtype=np.float64).reshape(-1)
    dim = _infer_state_dim(nbs, vec.size, state_dim)
    return vec[error_permutation(nbs, dim)]


def parse_edge_list(text: str) -> Graph:
    """Parse ``n`` on the first line followed by ``i j`` lines (1-based).

    Blank lines and ``#`` comments are ignored.
    """
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines:
        raise ValueError("edge list is empty")
    try:
        n = int(lines[0])
        edges = [tuple(int(tok) for tok in line.split()) for line in lines[1:]]
    except ValueError as exc:
        raise ValueError(f"malformed edge list: {exc}") from exc
    for edge in edges:
        if len(edge) != 2:
            raise ValueError(f"edge line must hold two indices, got {edge}")
    return Graph.from_edges(n, edges)


def load_edge_list(path: str | Path) -> Graph:
    """Read a graph from an edge-list text file."""
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        return parse_edge_list(f.read())


def _from_nx(g: nx.Graph) -> Graph:
    mapping = {v: idx + 1 for idx, v in enumerate(sorted(g.nodes))}
    relabeled = nx.relabel_nodes(g, mapping)
    return Graph(n=relabeled.number_of_nodes(), edges=frozenset(relabeled.edges))


def path_graph(n: int) -> Graph:
    return _from_nx(nx.path_graph(n))


def cycle_graph(n: int) -> Graph:
    return _from_nx(nx.cycle_graph(n))


def complete_graph(n: int) -> Graph:
    return _from_nx(nx.complete_graph(n))


def star_graph(leaves: int) -> Graph:
    """Star with hub ``1`` and ``leaves`` outer agents."""
    return _from_nx(nx.star_graph(leaves))


def random_connected_graph(
    n: int, p: float, rng: np.random.Generator, max_tries: int = 1000
) -> Graph:
    """Erdos-Renyi sample conditioned on connectivity."""
    for _ in range(max_tries):
        g = nx.gnp_random_graph(n, p, seed=int(rng.integers(0, 2**31 - 1)))
        if n == 1 or nx.is_connected(g):
            return _from_nx(g)
    raise RuntimeError(f"no connected G({n}, {p}) sample in {max_tries} tries")
