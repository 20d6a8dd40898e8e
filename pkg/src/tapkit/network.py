"""Road-network data model, OD demand, link flows, and benchmark-file ingestion.

The canonical input format is the plain-text benchmark format used by the
classic transportation test networks: a ``*_net.tntp`` link table plus a
``*_trips.tntp`` origin-destination table.  Observed link flows are read
from CSV (one row per link, one column per observation).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class NetworkDataError(Exception):
    """Unparseable or invalid network / trips / flow input."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Network:
    """Directed road network with per-link free-flow time and capacity.

    Nodes are renumbered internally to a dense 0-based index; ``node_ids``
    keeps the original identifiers for reporting.  ``od_pairs`` holds
    (origin, destination) internal indices, one row per demanded pair.
    """

    node_ids: np.ndarray        # (n_nodes,) original ids
    tail: np.ndarray            # (n_links,) internal tail node of each link
    head: np.ndarray            # (n_links,) internal head node of each link
    free_flow_time: np.ndarray  # (n_links,) minutes, > 0
    capacity: np.ndarray        # (n_links,) vehicles/hour, > 0
    od_pairs: np.ndarray        # (n_od, 2) internal (origin, destination)

    def __post_init__(self):
        for name in ("node_ids", "tail", "head", "free_flow_time", "capacity", "od_pairs"):
            getattr(self, name).setflags(write=False)
        n = self.n_nodes
        if np.any(self.tail == self.head):
            bad = int(np.argmax(self.tail == self.head))
            raise NetworkDataError(f"self-loop link at node {self.node_ids[self.tail[bad]]}")
        if np.any(self.free_flow_time <= 0) or np.any(self.capacity <= 0):
            bad = int(np.argmax((self.free_flow_time <= 0) | (self.capacity <= 0)))
            raise NetworkDataError(
                "nonpositive free-flow time or capacity on link "
                f"{self.link_label(bad)}"
            )
        if self.od_pairs.size:
            if np.any(self.od_pairs[:, 0] == self.od_pairs[:, 1]):
                raise NetworkDataError("OD pair with identical origin and destination")
            keys = self.od_pairs[:, 0] * n + self.od_pairs[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise NetworkDataError("duplicate OD pairs")
        self._check_strongly_connected()

    def _check_strongly_connected(self):
        adj = csr_matrix(
            (np.ones(self.n_links), (self.tail, self.head)),
            shape=(self.n_nodes, self.n_nodes),
        )
        ncomp, labels = connected_components(adj, directed=True, connection="strong")
        if ncomp > 1:
            a = int(np.argmax(labels != labels[0]))
            raise NetworkDataError(
                "network is not strongly connected: no route between nodes "
                f"{self.node_ids[0]} and {self.node_ids[a]}"
            )

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_links(self) -> int:
        return len(self.tail)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    def link_label(self, a: int) -> str:
        """Human-readable ``(tail->head)`` label using original node ids."""
        return f"({self.node_ids[self.tail[a]]}->{self.node_ids[self.head[a]]})"

    def incidence(self) -> np.ndarray:
        """Node-link incidence matrix: -1 at the tail, +1 at the head.

        With this orientation a per-OD flow ``x`` satisfies ``N @ x = d``
        where ``d`` is -demand at the origin and +demand at the destination.
        """
        N = np.zeros((self.n_nodes, self.n_links))
        cols = np.arange(self.n_links)
        N[self.tail, cols] = -1.0
        N[self.head, cols] = 1.0
        return N

    def demand_node_vector(self, od_index: int, amount: float) -> np.ndarray:
        """Node vector with ``-amount`` at the pair's origin, ``+amount`` at its destination."""
        d = np.zeros(self.n_nodes)
        o, t = self.od_pairs[od_index]
        d[o] -= amount
        d[t] += amount
        return d

    def to_json(self) -> dict:
        return {
            "nodes": [int(i) for i in self.node_ids],
            "links": [
                {
                    "tail": int(self.node_ids[self.tail[a]]),
                    "head": int(self.node_ids[self.head[a]]),
                    "free_flow_time": float(self.free_flow_time[a]),
                    "capacity": float(self.capacity[a]),
                }
                for a in range(self.n_links)
            ],
            "od_pairs": [
                [int(self.node_ids[o]), int(self.node_ids[t])] for o, t in self.od_pairs
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Network":
        node_ids = np.asarray(obj["nodes"], dtype=np.int64)
        index = {int(v): i for i, v in enumerate(node_ids)}
        links = obj["links"]
        return cls(
            node_ids=node_ids,
            tail=np.array([index[int(l["tail"])] for l in links], dtype=np.int64),
            head=np.array([index[int(l["head"])] for l in links], dtype=np.int64),
            free_flow_time=np.array([float(l["free_flow_time"]) for l in links]),
            capacity=np.array([float(l["capacity"]) for l in links]),
            od_pairs=np.array(
                [[index[int(o)], index[int(t)]] for o, t in obj["od_pairs"]],
                dtype=np.int64,
            ).reshape(-1, 2),
        )


@dataclass(frozen=True)
class DemandVector:
    """Nonnegative flow demand per OD pair, aligned to ``Network.od_pairs``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        self.values.setflags(write=False)
        if self.values.ndim != 1:
            raise NetworkDataError("demand vector must be one-dimensional")
        if np.any(self.values < 0):
            raise NetworkDataError("negative OD demand")

    def __len__(self) -> int:
        return len(self.values)

    def scaled(self, factor: float) -> "DemandVector":
        return DemandVector(self.values * factor)

    def to_json(self) -> list:
        return [float(v) for v in self.values]


@dataclass(frozen=True)
class FlowState:
    """Per-link flow vector, optionally with its per-OD decomposition."""

    x: np.ndarray                   # (n_links,)
    by_od: np.ndarray | None = None  # (n_od, n_links); sums to x when present

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if np.any(self.x < 0):
            raise NetworkDataError("negative link flow")

    def check_feasible(self, network: Network, demand: DemandVector, tol: float = 1e-6) -> bool:
        """True when the decomposition routes exactly the demand of every OD pair.

        Requires ``by_od``; checks ``x == sum_w x^w`` and node balance
        ``N @ x^w == d^w`` within ``tol * (1 + |demand|)`` per pair.
        """
        if self.by_od is None:
            raise ValueError("flow has no per-OD decomposition")
        if np.any(self.by_od < -tol):
            return False
        if not np.allclose(self.x, self.by_od.sum(axis=0), atol=tol * (1 + np.abs(self.x).max(initial=0.0))):
            return False
        N = network.incidence()
        for i in range(network.n_od):
            d = network.demand_node_vector(i, demand.values[i])
            resid = N @ self.by_od[i] - d
            if np.abs(resid).max() > tol * (1 + abs(demand.values[i])):
                return False
        return True

    def to_json(self) -> dict:
        out = {"x": [float(v) for v in self.x]}
        if self.by_od is not None:
            out["by_od"] = [[float(v) for v in row] for row in self.by_od]
        return out


def _read_metadata(lines, path):
    meta = {}
    body_start = 0
    for i, raw in enumerate(lines):
        line = raw.strip()
        if line.startswith("<END OF METADATA>"):
            body_start = i + 1
            break
        if line.startswith("<"):
            try:
                key, val = line[1:].split(">", 1)
            except ValueError:
                raise NetworkDataError("malformed metadata line", path, i + 1)
            meta[key.strip()] = val.strip()
    return meta, body_start


def load_network(net_file, trips_file) -> tuple[Network, DemandVector]:
    """Load a benchmark-format network and trips table.

    Returns the network plus the demand vector over every OD pair with
    positive trips (zero-trip pairs are dropped).  Raises
    :class:`NetworkDataError` with file/line context on malformed input,
    nonpositive link parameters, or a non-strongly-connected graph.
    """
    with open(net_file) as fh:
        lines = fh.readlines()
    _, body = _read_metadata(lines, str(net_file))

    rows = []
    for i in range(body, len(lines)):
        line = lines[i].strip()
        if not line or line.startswith("~") or line.startswith("<"):
            continue
        parts = line.rstrip(";").split()
        if len(parts) < 5:
            raise NetworkDataError("expected at least 5 link columns", str(net_file), i + 1)
        try:
            u, v = int(parts[0]), int(parts[1])
            cap, fft = float(parts[2]), float(parts[4])
        except ValueError:
            raise NetworkDataError("unparseable link row", str(net_file), i + 1)
        rows.append((u, v, cap, fft, i + 1))
    if not rows:
        raise NetworkDataError("no link rows found", str(net_file))

    node_ids = np.unique([r[0] for r in rows] + [r[1] for r in rows])
    index = {int(v): i for i, v in enumerate(node_ids)}
    tail = np.array([index[r[0]] for r in rows], dtype=np.int64)
    head = np.array([index[r[1]] for r in rows], dtype=np.int64)
    cap = np.array([r[2] for r in rows])
    fft = np.array([r[3] for r in rows])
    for r in rows:
        if r[2] <= 0 or r[3] <= 0:
            raise NetworkDataError(
                f"nonpositive capacity or free-flow time on link ({r[0]}->{r[1]})",
                str(net_file), r[4],
            )

    with open(trips_file) as fh:
        tlines = fh.readlines()
    _, tbody = _read_metadata(tlines, str(trips_file))
    demand: dict[tuple[int, int], float] = {}
    origin = None
    for i in range(tbody, len(tlines)):
        line = tlines[i].strip()
        if not line or line.startswith("~"):
            continue
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1])
            except (IndexError, ValueError):
                raise NetworkDataError("malformed origin header", str(trips_file), i + 1)
            if origin not in index:
                raise NetworkDataError(f"unknown origin node {origin}", str(trips_file), i + 1)
            continue
        if origin is None:
            raise NetworkDataError("trip entry before any origin header", str(trips_file), i + 1)
        for entry in line.split(";"):
            entry = entry.strip()
            if not entry:
                continue
            try:
                dest_s, val_s = entry.split(":")
                dest, val = int(dest_s), float(val_s)
            except ValueError:
                raise NetworkDataError("malformed trip entry", str(trips_file), i + 1)
            if dest not in index:
                raise NetworkDataError(f"unknown destination node {dest}", str(trips_file), i + 1)
            if val < 0:
                raise NetworkDataError("negative trip volume", str(trips_file), i + 1)
            if val > 0:
                if dest == origin:
                    raise NetworkDataError(
                        f"positive intrazonal demand at node {origin}", str(trips_file), i + 1
                    )
                demand[(index[origin], index[dest])] = demand.get((index[origin], index[dest]), 0.0) + val

    pairs = sorted(demand)
    od_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    g = np.array([demand[p] for p in pairs])
    net = Network(
        node_ids=node_ids.astype(np.int64), tail=tail, head=head,
        free_flow_time=fft, capacity=cap, od_pairs=od_pairs,
    )
    return net, DemandVector(g)


def load_flows(csv_file, network: Network) -> list[FlowState]:
    """Read observed link flows: header ``link_id,obs_1,...,obs_K``, one row per link.

    Link ids are the 0-based positions of the links in the network file.
    Returns one :class:`FlowState` per observation column.
    """
    import csv as _csv

    with open(csv_file, newline="") as fh:
        reader = _csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise NetworkDataError("empty flow file", str(csv_file))
        k = len(header) - 1
        if k < 1:
            raise NetworkDataError("flow file needs at least one observation column", str(csv_file), 1)
        data = np.full((network.n_links, k), np.nan)
        count = 0
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != k + 1:
                raise NetworkDataError(
                    f"expected {k + 1} columns, found {len(row)}", str(csv_file), i + 2
                )
            try:
                link = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise NetworkDataError("unparseable flow row", str(csv_file), i + 2)
            if not 0 <= link < network.n_links:
                raise NetworkDataError(f"unknown link id {link}", str(csv_file), i + 2)
            if not np.isnan(data[link]).all():
                raise NetworkDataError(f"duplicate link id {link}", str(csv_file), i + 2)
            if min(vals) < 0:
                raise NetworkDataError(f"negative flow on link {link}", str(csv_file), i + 2)
            data[link] = vals
            count += 1
        if count != network.n_links:
            raise NetworkDataError(
                f"expected one row per link ({network.n_links}), found {count}", str(csv_file)
            )
    return [FlowState(x=data[:, j].copy()) for j in range(k)]


def save_flows(csv_file, flows: list[FlowState]) -> None:
    """Inverse of :func:`load_flows`; writes full-precision values."""
    import csv as _csv

    k = len(flows)
    n = len(flows[0].x)
    with open(csv_file, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["link_id"] + [f"obs_{j + 1}" for j in range(k)])
        for a in range(n):
            writer.writerow([a] + [f"{f.x[a]:.17g}" for f in flows])


def network_to_json_file(path, network: Network, demand: DemandVector | None = None) -> None:
    obj = network.to_json()
    if demand is not None:
        obj["demand"] = demand.to_json()
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
