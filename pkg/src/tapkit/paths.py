"""Shortest routes, all-or-nothing assignment, and simple-route enumeration.

Route ties are always broken toward the lexicographically smallest node
sequence (and smallest link id among parallels) so that downstream
Jacobians and route sets are reproducible bit-for-bit.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .network import DemandVector, FlowState, Network

_REL_TIE_TOL = 1e-12


@dataclass(frozen=True)
class Route:
    """A simple route: node sequence, link sequence, and its cost."""

    nodes: tuple[int, ...]
    links: tuple[int, ...]
    cost: float

    def __len__(self) -> int:
        return len(self.links)


@dataclass(frozen=True)
class RouteSet:
    """Enumerated simple routes per OD pair with link-route incidence."""

    per_od: tuple[tuple[Route, ...], ...]
    n_links: int

    @property
    def n_routes(self) -> int:
        return sum(len(r) for r in self.per_od)

    def od_offsets(self) -> np.ndarray:
        """Start index of each OD pair's route block in the stacked route order."""
        sizes = [len(r) for r in self.per_od]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    def incidence(self) -> np.ndarray:
        """Stacked link-route incidence matrix, shape (n_links, n_routes)."""
        A = np.zeros((self.n_links, self.n_routes))
        col = 0
        for routes in self.per_od:
            for r in routes:
                A[list(r.links), col] = 1.0
                col += 1
        return A

    def to_json(self) -> list:
        return [
            [{"nodes": list(r.nodes), "links": list(r.links), "cost": r.cost} for r in routes]
            for routes in self.per_od
        ]


def _validate_costs(network: Network, link_costs) -> np.ndarray:
    c = np.asarray(link_costs, dtype=float)
    if c.shape != (network.n_links,):
        raise ValueError("link cost vector has wrong length")
    if np.any(c <= 0):
        raise ValueError("link costs must be positive")
    return c


def _reverse_adjacency(network: Network):
    """incoming[v] = list of (tail, link_id)."""
    incoming = [[] for _ in range(network.n_nodes)]
    for a in range(network.n_links):
        incoming[network.head[a]].append((int(network.tail[a]), a))
    return incoming


def _forward_adjacency(network: Network):
    outgoing = [[] for _ in range(network.n_nodes)]
    for a in range(network.n_links):
        outgoing[network.tail[a]].append((int(network.head[a]), a))
    return outgoing


def _sp_route(outgoing, incoming, n_nodes, cost, origin, dest,
              banned_links=frozenset(), banned_nodes=frozenset()):
    """Lex-smallest shortest simple route avoiding banned links/nodes, or None.

    Label-setting on the reversed graph gives distances-to-destination;
    the route is then rebuilt forward, always picking the smallest optimal
    successor node (smallest link id among parallels).  Positive costs
    make the distance strictly decrease along the walk, so the result is
    simple.
    """
    dist = np.full(n_nodes, np.inf)
    dist[dest] = 0.0
    heap = [(0.0, dest)]
    done = [False] * n_nodes
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for u, a in incoming[v]:
            if a in banned_links or u in banned_nodes:
                continue
            nd = d + cost[a]
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, u))
    if not np.isfinite(dist[origin]):
        return None
    nodes = [int(origin)]
    links: list[int] = []
    u = int(origin)
    visited = {u}
    while u != dest:
        tol = _REL_TIE_TOL * (1.0 + abs(dist[u]))
        best_v, best_a = -1, -1
        for v, a in outgoing[u]:
            if a in banned_links or v in banned_nodes or v in visited:
                continue
            if cost[a] + dist[v] <= dist[u] + tol:
                if best_v == -1 or v < best_v or (v == best_v and a < best_a):
                    best_v, best_a = v, a
        if best_a == -1:
            return None
        nodes.append(best_v)
        links.append(best_a)
        visited.add(best_v)
        u = best_v
    return Route(nodes=tuple(nodes), links=tuple(links),
                 cost=float(sum(cost[a] for a in links)))


def shortest_routes(network: Network, link_costs) -> list[Route]:
    """Minimum-cost simple route for every OD pair at the given link costs."""
    cost = _validate_costs(network, link_costs)
    incoming = _reverse_adjacency(network)
    outgoing = _forward_adjacency(network)
    routes = []
    for o, t in network.od_pairs:
        r = _sp_route(outgoing, incoming, network.n_nodes, cost, int(o), int(t))
        if r is None:
            raise RuntimeError(
                f"destination {network.node_ids[t]} unreachable from {network.node_ids[o]}"
            )
        routes.append(r)
    return routes


def all_or_nothing(network: Network, demand: DemandVector, link_costs) -> FlowState:
    """Load each OD demand entirely onto its shortest route.

    The returned flow carries the exact per-OD decomposition, so node
    balance ``N @ x^w = d^w`` holds to the last bit.
    """
    routes = shortest_routes(network, link_costs)
    by_od = np.zeros((network.n_od, network.n_links))
    for i, r in enumerate(routes):
        g = demand.values[i]
        if g > 0:
            by_od[i, list(r.links)] = g
    return FlowState(x=by_od.sum(axis=0), by_od=by_od)


def k_shortest_simple(network: Network, od: tuple[int, int], k: int, link_costs) -> list[Route]:
    """Up to ``k`` cheapest distinct simple routes for one OD pair (deviation search).

    Routes are ordered by cost (ties by node then link sequence); fewer
    than ``k`` are returned when the network does not contain ``k`` simple
    routes.  Route identity is the link sequence, so parallel links yield
    distinct routes.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    cost = _validate_costs(network, link_costs)
    outgoing = _forward_adjacency(network)
    incoming = _reverse_adjacency(network)
    origin, dest = int(od[0]), int(od[1])

    first = _sp_route(outgoing, incoming, network.n_nodes, cost, origin, dest)
    if first is None:
        raise RuntimeError("destination unreachable")
    accepted = [first]
    candidates: list[tuple[float, tuple, tuple, Route]] = []
    seen = {first.links}
    while len(accepted) < k:
        base = accepted[-1]
        for j in range(len(base.links)):
            spur_node = base.nodes[j]
            root_nodes = base.nodes[: j + 1]
            root_links = base.links[:j]
            banned_links = set()
            for r in accepted:
                if r.links[:j] == root_links and len(r.links) > j:
                    banned_links.add(r.links[j])
            spur = _sp_route(outgoing, incoming, network.n_nodes, cost,
                             int(spur_node), dest,
                             frozenset(banned_links), frozenset(root_nodes[:-1]))
            if spur is None:
                continue
            nodes = root_nodes + spur.nodes[1:]
            if len(set(nodes)) != len(nodes):
                continue
            links = root_links + spur.links
            if links in seen:
                continue
            total = float(sum(cost[a] for a in links))
            candidates.append((total, nodes, links, Route(nodes=nodes, links=links, cost=total)))
            seen.add(links)
        if not candidates:
            break
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        accepted.append(candidates.pop(0)[3])
    return accepted


def enumerate_routes(network: Network, k: int, link_costs) -> RouteSet:
    """k-cheapest simple routes for every OD pair, stacked into a RouteSet."""
    per_od = tuple(
        tuple(k_shortest_simple(network, (int(o), int(t)), k, link_costs))
        for o, t in network.od_pairs
    )
    return RouteSet(per_od=per_od, n_links=network.n_links)
