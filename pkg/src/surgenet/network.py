"""Road network representation: nodes, BPR links, incidence, shortest paths.

Networks are immutable after construction and safe to share across
concurrent solver runs. Link travel times follow the Bureau of Public
Roads polynomial t(v) = t0 * (1 + coeff * (v / capacity) ** power);
special link kinds carry matching-queue costs (resolved by the
diagonalized solver) or zero cost (drive-through connectors).
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "NodeKind",
    "CostKind",
    "Node",
    "Link",
    "Network",
    "ODPair",
    "NetworkParseError",
    "load_network",
    "bpr_time",
    "bpr_integral",
    "shortest_path",
    "UNREACHABLE",
]

#: Label assigned to nodes that cannot be reached from the origin.
UNREACHABLE = math.inf


class NodeKind(enum.Enum):
    PLAIN = "plain"
    DRIVER_ORIGIN = "driver_origin"
    RIDER_DESTINATION = "rider_destination"
    MARKET = "market"
    CONNECTOR = "connector"
    RIDER_SOURCE = "rider_source"


class CostKind(enum.Enum):
    BPR = "bpr"
    MATCHING_WAIT = "matching_wait"
    ZERO = "zero"


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind = NodeKind.PLAIN


@dataclass(frozen=True)
class Link:
    """Directed link with a BPR cost parameterization.

    ``t0`` is the free-flow travel time in minutes, ``capacity`` the flow
    capacity in veh/h. ``bpr_coeff`` defaults to 0.15 and ``bpr_power``
    must be a positive integer for BPR links.
    """

    id: int
    tail: int
    head: int
    t0: float
    capacity: float
    bpr_power: int
    bpr_coeff: float = 0.15
    cost_kind: CostKind = CostKind.BPR

    def __post_init__(self) -> None:
        if self.cost_kind is CostKind.BPR:
            if self.t0 < 0:
                raise ValueError(f"link {self.id}: negative free-flow time")
            if not self.capacity > 0:
                raise ValueError(f"link {self.id}: capacity must be positive")
            if self.bpr_power < 0:
                raise ValueError(f"link {self.id}: negative BPR power")


@dataclass(frozen=True)
class MarketLinks:
    """Bookkeeping for one augmented rider node.

    ``connector`` is the original road node (the paper's s'), ``market``
    and ``source`` are the added market (s) and rider-source (s'') nodes.
    The three link ids are the driver wait link s'->s, the rider wait
    link s''->s, and the zero-cost drive link s''->s'.
    """

    market: int
    connector: int
    source: int
    driver_wait_link: int
    rider_wait_link: int
    drive_link: int


@dataclass(frozen=True)
class Network:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    incidence: np.ndarray = field(repr=False)
    #: rider node id -> MarketLinks, non-None only for augmented networks
    augmented: Mapping[int, MarketLinks] | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def link_position(self, link_id: int) -> int:
        return self._link_index[link_id]

    def out_links(self, node: int) -> Sequence[tuple[int, int]]:
        """(link position, head node) pairs leaving ``node``."""
        return self._out[node]

    def __post_init__(self) -> None:
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValueError("node ids must be dense 0..N-1 in order")
        index: dict[int, int] = {}
        out: list[list[tuple[int, int]]] = [[] for _ in self.nodes]
        n = len(self.nodes)
        for pos, link in enumerate(self.links):
            if link.id in index:
                raise ValueError(f"duplicate link id {link.id}")
            index[link.id] = pos
            if not (0 <= link.tail < n and 0 <= link.head < n):
                raise ValueError(f"link {link.id}: dangling node reference")
            out[link.tail].append((pos, link.head))
        object.__setattr__(self, "_link_index", index)
        object.__setattr__(self, "_out", tuple(tuple(o) for o in out))
        self._check_incidence()

    def _check_incidence(self) -> None:
        a = self.incidence
        if a.shape != (self.n_nodes, self.n_links):
            raise ValueError("incidence shape mismatch")
        if not np.allclose(a.sum(axis=0), 0.0):
            raise ValueError("incidence columns must sum to zero")
        for pos, link in enumerate(self.links):
            col = a[:, pos]
            if link.tail == link.head:
                if np.any(col != 0):
                    raise ValueError(f"self-loop link {link.id}: column must be zero")
                continue
            if col[link.tail] != 1 or col[link.head] != -1 or np.count_nonzero(col) != 2:
                raise ValueError(f"link {link.id}: malformed incidence column")

    def with_roles(
        self,
        driver_origins: Iterable[int] = (),
        rider_destinations: Iterable[int] = (),
    ) -> "Network":
        """Return a copy with node kinds set for the given roles."""
        drivers = set(driver_origins)
        riders = set(rider_destinations)
        nodes = []
        for node in self.nodes:
            if node.id in drivers:
                nodes.append(replace(node, kind=NodeKind.DRIVER_ORIGIN))
            elif node.id in riders:
                nodes.append(replace(node, kind=NodeKind.RIDER_DESTINATION))
            else:
                nodes.append(node)
        return Network(tuple(nodes), self.links, self.incidence, self.augmented)


def build_network(nodes: Sequence[Node], links: Sequence[Link],
                  augmented: Mapping[int, MarketLinks] | None = None) -> Network:
    """Assemble a Network, constructing the signed node-link incidence."""
    a = np.zeros((len(nodes), len(links)))
    for pos, link in enumerate(links):
        if link.tail != link.head:
            a[link.tail, pos] += 1.0
            a[link.head, pos] -= 1.0
    return Network(tuple(nodes), tuple(links), a, augmented)


@dataclass(frozen=True)
class ODPair:
    origin: int
    destination: int

    def incidence_vector(self, n_nodes: int) -> np.ndarray:
        """E_rs: +1 at origin, -1 at destination, all zero when equal."""
        e = np.zeros(n_nodes)
        if self.origin != self.destination:
            e[self.origin] = 1.0
            e[self.destination] = -1.0
        return e


class NetworkParseError(ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


def load_network(text: str, bpr_coeff: float = 0.15) -> Network:
    """Parse a network from its link-table text format.

    The format is a header line ``nodes <N>`` followed by one line per
    link: ``<link_id> <tail> <head> <t0_minutes> <capacity> <bpr_power>``.
    Lines starting with ``#`` and blank lines are ignored.
    """
    n_nodes: int | None = None
    links: list[Link] = []
    seen_ids: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if n_nodes is None:
            if parts[0] != "nodes" or len(parts) != 2:
                raise NetworkParseError(lineno, "expected header 'nodes <N>'")
            try:
                n_nodes = int(parts[1])
            except ValueError:
                raise NetworkParseError(lineno, f"bad node count {parts[1]!r}") from None
            if n_nodes <= 0:
                raise NetworkParseError(lineno, "node count must be positive")
            continue
        if len(parts) != 6:
            raise NetworkParseError(lineno, f"expected 6 fields, got {len(parts)}")
        try:
            link_id, tail, head = int(parts[0]), int(parts[1]), int(parts[2])
            t0, capacity = float(parts[3]), float(parts[4])
            power = int(parts[5])
        except ValueError as exc:
            raise NetworkParseError(lineno, str(exc)) from None
        if link_id in seen_ids:
            raise NetworkParseError(lineno, f"duplicate link id {link_id}")
        seen_ids.add(link_id)
        if not (0 <= tail < n_nodes and 0 <= head < n_nodes):
            raise NetworkParseError(lineno, f"link {link_id} references unknown node")
        if capacity <= 0:
            raise NetworkParseError(lineno, f"link {link_id} has non-positive capacity")
        if t0 < 0:
            raise NetworkParseError(lineno, f"link {link_id} has negative free-flow time")
        links.append(Link(link_id, tail, head, t0, capacity, power, bpr_coeff))
    if n_nodes is None:
        raise NetworkParseError(1, "empty network file")
    return build_network([Node(i) for i in range(n_nodes)], links)


def bpr_time(link: Link, v: float) -> float:
    """Travel time on ``link`` at flow ``v``, strictly increasing in v."""
    if v < 0:
        raise ValueError("negative link flow")
    if link.cost_kind is CostKind.ZERO:
        return 0.0
    if link.cost_kind is not CostKind.BPR:
        raise ValueError("bpr_time requires a BPR link")
    return link.t0 * (1.0 + link.bpr_coeff * (v / link.capacity) ** link.bpr_power)


def bpr_integral(link: Link, v: float) -> float:
    """Integral of the link time from 0 to ``v`` (the Beckmann term).

    Closed form t0*v + t0*coeff*v**(p+1) / ((p+1)*c**p); its derivative
    is exactly ``bpr_time``.
    """
    if v < 0:
        raise ValueError("negative link flow")
    if link.cost_kind is CostKind.ZERO:
        return 0.0
    if link.cost_kind is not CostKind.BPR:
        raise ValueError("bpr_integral requires a BPR link")
    p = link.bpr_power
    return link.t0 * v + link.t0 * link.bpr_coeff * v ** (p + 1) / ((p + 1) * link.capacity**p)


def shortest_path(network: Network, times: np.ndarray, origin: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """One-to-all shortest paths by Dijkstra's algorithm.

    Returns ``(labels, predecessors)`` where ``labels[n]`` is the exact
    shortest cost from ``origin`` to node ``n`` (``UNREACHABLE`` if no
    path exists) and ``predecessors[n]`` is the position of the incoming
    link on a shortest path (-1 for the origin and unreachable nodes).
    """
    times = np.asarray(times, dtype=float)
    if times.shape != (network.n_links,):
        raise ValueError("times must have one entry per link")
    if times.size and (np.min(times) < 0 or not np.all(np.isfinite(times))):
        raise ValueError("link costs must be finite and non-negative")
    if not (0 <= origin < network.n_nodes):
        raise ValueError(f"invalid origin {origin}")

    labels = np.full(network.n_nodes, UNREACHABLE)
    preds = np.full(network.n_nodes, -1, dtype=np.int64)
    done = np.zeros(network.n_nodes, dtype=bool)
    labels[origin] = 0.0
    heap: list[tuple[float, int]] = [(0.0, origin)]
    while heap:
        dist, node = heapq.heappop(heap)
        if done[node]:
            continue
        done[node] = True
        for pos, head in network.out_links(node):
            cand = dist + times[pos]
            if cand < labels[head]:
                labels[head] = cand
                preds[head] = pos
                heapq.heappush(heap, (cand, head))
    return labels, preds
