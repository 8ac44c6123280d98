"""Road networks: construction, simplification, turn projection and features.

Arc travel times are in minutes, lengths in meters, speeds in m/s and
coordinates in a local planar frame (meters).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

SPEED_MIN_DEFAULT = 5.5
SPEED_MAX_DEFAULT = 10.0

# Feature channel order shared with the choice model.
FEATURE_NAMES = ("tt_nonresidential", "tt_residential", "intersection", "left_turn", "u_turn")


class NetworkError(ValueError):
    pass


class NodeKind(IntEnum):
    PLAIN = 0
    INTERSECTION_CONTROL = 1


class ArcClass(IntEnum):
    NON_RESIDENTIAL = 0
    RESIDENTIAL = 1


_KIND_NAMES = {NodeKind.PLAIN: "plain", NodeKind.INTERSECTION_CONTROL: "intersection_control"}
_CLASS_NAMES = {ArcClass.NON_RESIDENTIAL: "non_residential", ArcClass.RESIDENTIAL: "residential"}


@dataclass(frozen=True, eq=False)
class Network:
    """Directed road graph.

    Outgoing arcs of node ``i`` are ``out_arcs[out_ptr[i]:out_ptr[i + 1]]``,
    i.e. the column of node ``i`` in compressed-column storage. Arc order is
    insertion order and every arc-indexed array follows it.
    """

    x: np.ndarray
    y: np.ndarray
    kind: np.ndarray
    tail: np.ndarray
    head: np.ndarray
    length: np.ndarray
    speed_min: np.ndarray
    speed_max: np.ndarray
    arc_class: np.ndarray
    out_ptr: np.ndarray = field(init=False, repr=False)
    out_arcs: np.ndarray = field(init=False, repr=False)
    in_ptr: np.ndarray = field(init=False, repr=False)
    in_arcs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.x)
        # stable sort keeps insertion order within a column
        out_arcs = np.argsort(self.tail, kind="stable")
        out_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(out_ptr, self.tail + 1, 1)
        in_arcs = np.argsort(self.head, kind="stable")
        in_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(in_ptr, self.head + 1, 1)
        object.__setattr__(self, "out_arcs", out_arcs)
        object.__setattr__(self, "out_ptr", np.cumsum(out_ptr))
        object.__setattr__(self, "in_arcs", in_arcs)
        object.__setattr__(self, "in_ptr", np.cumsum(in_ptr))
        for name in ("x", "y", "kind", "tail", "head", "length", "speed_min", "speed_max", "arc_class"):
            getattr(self, name).setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.x)

    @property
    def n_arcs(self) -> int:
        return len(self.tail)

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def outgoing(self, node: int) -> np.ndarray:
        return self.out_arcs[self.out_ptr[node]:self.out_ptr[node + 1]]

    def incoming(self, node: int) -> np.ndarray:
        return self.in_arcs[self.in_ptr[node]:self.in_ptr[node + 1]]

    @property
    def adjacency(self) -> sp.csc_matrix:
        """Node adjacency, column ``i`` holds the heads of arcs leaving ``i``.

        Stored values are ``arc index + 1`` (parallel arcs keep the first).
        """
        first = {}
        for a in range(self.n_arcs):
            first.setdefault((int(self.tail[a]), int(self.head[a])), a)
        rows = np.array([k[1] for k in first], dtype=np.int64)
        cols = np.array([k[0] for k in first], dtype=np.int64)
        data = np.array(list(first.values()), dtype=np.int64) + 1
        return sp.csc_matrix((data, (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def arc_between(self, i: int, j: int) -> int:
        """Index of the first arc ``i -> j``."""
        for a in self.outgoing(i):
            if self.head[a] == j:
                return int(a)
        raise NetworkError(f"no arc ({i}, {j})")

    def arcs_of_path(self, nodes: Sequence[int]) -> list[int]:
        return [self.arc_between(int(i), int(j)) for i, j in zip(nodes[:-1], nodes[1:])]

    def nodes_of_path(self, arcs: Sequence[int]) -> list[int]:
        arcs = list(arcs)
        if not arcs:
            return []
        return [int(self.tail[arcs[0]])] + [int(self.head[a]) for a in arcs]

    def free_flow(self) -> np.ndarray:
        """Free-flow travel time in minutes."""
        return self.length / self.speed_max / 60.0

    def diameter(self) -> int:
        """Diameter in arcs, ignoring unreachable pairs."""
        g = sp.csr_matrix(
            (np.ones(self.n_arcs), (self.tail, self.head)), shape=(self.n_nodes, self.n_nodes)
        )
        if self.n_nodes <= 3000:
            dist = csgraph.shortest_path(g, unweighted=True)
            finite = dist[np.isfinite(dist)]
            return int(finite.max()) if finite.size else 0
        # double sweep lower bound on large graphs
        d0 = csgraph.breadth_first_order(g, 0, return_predecessors=False)
        dist = csgraph.shortest_path(g, unweighted=True, indices=[0, int(d0[-1])])
        finite = dist[np.isfinite(dist)]
        return int(finite.max())


def build_network(
    nodes,
    arcs,
    lengths,
    speeds=None,
    classes=None,
    kinds=None,
    *,
    allow_parallel: bool = False,
) -> Network:
    """Build a :class:`Network`.

    Parameters
    ----------
    nodes
        Node count, or an ``(n, 2)`` array of planar coordinates.
    arcs
        Sequence of ``(tail, head)`` pairs.
    lengths
        Arc lengths in meters.
    speeds
        Per-arc ``(speed_min, speed_max)`` pairs in m/s. Defaults to 5.5 and 10.
    classes
        Per-arc :class:`ArcClass` values, default non-residential.
    kinds
        Per-node :class:`NodeKind` values, default plain.
    allow_parallel
        Accept several arcs with the same endpoints. Without it a repeated
        ``(tail, head)`` is rejected as a duplicate.
    """
    if isinstance(nodes, (int, np.integer)):
        n = int(nodes)
        xy = np.full((n, 2), np.nan)
    else:
        xy = np.asarray(nodes, dtype=float).reshape(-1, 2)
        n = len(xy)
    arcs = np.asarray(arcs, dtype=np.int64).reshape(-1, 2)
    if len(arcs) == 0:
        raise NetworkError("graph has no arcs")
    if arcs.min() < 0 or arcs.max() >= n:
        bad = arcs[(arcs < 0).any(axis=1) | (arcs >= n).any(axis=1)][0]
        raise NetworkError(f"arc {tuple(bad)} references a node outside 0..{n - 1}")
    if np.any(arcs[:, 0] == arcs[:, 1]):
        raise NetworkError("self loops are not allowed")
    if not allow_parallel:
        seen = set()
        for i, j in arcs.tolist():
            if (i, j) in seen:
                raise NetworkError(f"duplicate arc ({i}, {j})")
            seen.add((i, j))
    lengths = np.asarray(lengths, dtype=float).reshape(-1)
    if len(lengths) != len(arcs):
        raise NetworkError("one length per arc is required")
    if not np.all(lengths > 0):
        raise NetworkError("arc lengths must be positive")
    if speeds is None:
        vmin = np.full(len(arcs), SPEED_MIN_DEFAULT)
        vmax = np.full(len(arcs), SPEED_MAX_DEFAULT)
    else:
        speeds = np.asarray(speeds, dtype=float).reshape(-1, 2)
        vmin, vmax = speeds[:, 0].copy(), speeds[:, 1].copy()
    if np.any(vmin <= 0) or np.any(vmin > vmax):
        raise NetworkError("speed bounds must satisfy 0 < speed_min <= speed_max")
    cls = np.zeros(len(arcs), dtype=np.int8) if classes is None else np.asarray(classes, dtype=np.int8)
    knd = np.zeros(n, dtype=np.int8) if kinds is None else np.asarray(kinds, dtype=np.int8)
    return Network(
        x=xy[:, 0].copy(), y=xy[:, 1].copy(), kind=knd,
        tail=arcs[:, 0].copy(), head=arcs[:, 1].copy(), length=lengths.copy(),
        speed_min=vmin, speed_max=vmax, arc_class=cls,
    )


def _subnetwork(net: Network, keep_nodes: np.ndarray, keep_arcs: np.ndarray) -> Network:
    remap = -np.ones(net.n_nodes, dtype=np.int64)
    remap[keep_nodes] = np.arange(len(keep_nodes))
    return Network(
        x=net.x[keep_nodes].copy(), y=net.y[keep_nodes].copy(), kind=net.kind[keep_nodes].copy(),
        tail=remap[net.tail[keep_arcs]], head=remap[net.head[keep_arcs]],
        length=net.length[keep_arcs].copy(), speed_min=net.speed_min[keep_arcs].copy(),
        speed_max=net.speed_max[keep_arcs].copy(), arc_class=net.arc_class[keep_arcs].copy(),
    )


def largest_component(net: Network) -> Network:
    """Restrict to the largest strongly connected component."""
    g = sp.csr_matrix((np.ones(net.n_arcs), (net.tail, net.head)), shape=(net.n_nodes, net.n_nodes))
    n_comp, labels = csgraph.connected_components(g, directed=True, connection="strong")
    if n_comp == 1:
        return net
    sizes = np.bincount(labels)
    best = int(np.argmax(sizes))  # first label wins ties
    keep_nodes = np.flatnonzero(labels == best)
    keep_arcs = np.flatnonzero((labels[net.tail] == best) & (labels[net.head] == best))
    return _subnetwork(net, keep_nodes, keep_arcs)


# -- simplification -----------------------------------------------------------

class _MutableGraph:
    """Dict-of-arcs working copy used by :func:`simplify_network`."""

    def __init__(self, net: Network):
        self.x = net.x.tolist()
        self.y = net.y.tolist()
        self.kind = net.kind.tolist()
        self.alive = [True] * net.n_nodes
        self.arcs = {}  # id -> [tail, head, length, vmin, vmax, cls]
        for a in range(net.n_arcs):
            self.arcs[a] = [int(net.tail[a]), int(net.head[a]), float(net.length[a]),
                            float(net.speed_min[a]), float(net.speed_max[a]), int(net.arc_class[a])]
        self.next_id = net.n_arcs

    def out_in(self):
        out = {i: [] for i in range(len(self.x))}
        inc = {i: [] for i in range(len(self.x))}
        for a, (i, j, *_rest) in self.arcs.items():
            out[i].append(a)
            inc[j].append(a)
        return out, inc

    def add_node(self, x, y):
        self.x.append(x)
        self.y.append(y)
        self.kind.append(int(NodeKind.PLAIN))
        self.alive.append(True)
        return len(self.x) - 1

    def add_arc(self, rec):
        self.arcs[self.next_id] = rec
        self.next_id += 1

    def to_network(self) -> Network:
        nodes = np.flatnonzero(np.array(self.alive))
        remap = -np.ones(len(self.x), dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        ids = sorted(self.arcs)
        recs = [self.arcs[a] for a in ids]
        return Network(
            x=np.array(self.x)[nodes], y=np.array(self.y)[nodes],
            kind=np.array(self.kind, dtype=np.int8)[nodes],
            tail=remap[np.array([r[0] for r in recs], dtype=np.int64)],
            head=remap[np.array([r[1] for r in recs], dtype=np.int64)],
            length=np.array([r[2] for r in recs]), speed_min=np.array([r[3] for r in recs]),
            speed_max=np.array([r[4] for r in recs]),
            arc_class=np.array([r[5] for r in recs], dtype=np.int8),
        )


def _merge(r1, r2):
    # travel times add, so bounds combine harmonically
    length = r1[2] + r2[2]
    vmin = length / (r1[2] / r1[3] + r2[2] / r2[3])
    vmax = length / (r1[2] / r1[4] + r2[2] / r2[4])
    cls = r1[5] if r1[2] >= r2[2] else r2[5]
    return [r1[0], r2[1], length, vmin, vmax, cls]


def _thin_controls(g: _MutableGraph, radius: float) -> bool:
    """Demote a control node when a retained control node lies within ``radius``."""
    out, inc = g.out_in()
    controls = [i for i, k in enumerate(g.kind) if g.alive[i] and k == NodeKind.INTERSECTION_CONTROL]
    retained = set()
    changed = False
    for c in controls:
        # undirected Dijkstra bounded by radius
        dist = {c: 0.0}
        heap = [(0.0, c)]
        near = False
        while heap:
            dv, v = heapq.heappop(heap)
            if dv > dist.get(v, math.inf):
                continue
            if v != c and v in retained:
                near = True
                break
            for a in out[v] + inc[v]:
                rec = g.arcs[a]
                u = rec[1] if rec[0] == v else rec[0]
                du = dv + rec[2]
                if du <= radius and du < dist.get(u, math.inf):
                    dist[u] = du
                    heapq.heappush(heap, (du, u))
        if near:
            g.kind[c] = int(NodeKind.PLAIN)
            changed = True
        else:
            retained.add(c)
    return changed


def _bypass(g: _MutableGraph, max_bypass: float) -> bool:
    changed = False
    for m in range(len(g.x)):
        if not g.alive[m] or g.kind[m] != NodeKind.PLAIN:
            continue
        out, inc = g.out_in()
        o_arcs, i_arcs = out[m], inc[m]
        nbrs = {g.arcs[a][1] for a in o_arcs} | {g.arcs[a][0] for a in i_arcs}
        if len(nbrs) != 2:
            continue
        u, w = sorted(nbrs)
        pairs = []
        if len(o_arcs) == 1 and len(i_arcs) == 1:
            pairs = [(i_arcs[0], o_arcs[0])]
            if g.arcs[pairs[0][0]][0] == g.arcs[pairs[0][1]][1]:
                continue
        elif len(o_arcs) == 2 and len(i_arcs) == 2:
            for a_in in i_arcs:
                src = g.arcs[a_in][0]
                a_out = [a for a in o_arcs if g.arcs[a][1] != src]
                if len(a_out) != 1:
                    break
                pairs.append((a_in, a_out[0]))
            if len(pairs) != 2:
                continue
        else:
            continue
        merged = [_merge(g.arcs[a], g.arcs[b]) for a, b in pairs]
        if any(r[2] > max_bypass for r in merged):
            continue
        existing = {(r[0], r[1]) for a, r in g.arcs.items() if a not in {x for p in pairs for x in p}}
        if any((r[0], r[1]) in existing for r in merged):
            continue
        for a, b in pairs:
            del g.arcs[a], g.arcs[b]
        for r in merged:
            g.add_arc(r)
        g.alive[m] = False
        changed = True
    return changed


def _split_long(g: _MutableGraph, max_length: float) -> bool:
    changed = False
    mids = {}
    for a in sorted(g.arcs):
        rec = g.arcs[a]
        if rec[2] <= max_length:
            continue
        i, j = rec[0], rec[1]
        key = (min(i, j), max(i, j), rec[2])
        if key not in mids:
            mids[key] = g.add_node((g.x[i] + g.x[j]) / 2, (g.y[i] + g.y[j]) / 2)
        m = mids[key]
        half = rec[2] / 2
        del g.arcs[a]
        g.add_arc([i, m, half, rec[3], rec[4], rec[5]])
        g.add_arc([m, j, half, rec[3], rec[4], rec[5]])
        changed = True
    return changed


def simplify_network(
    net: Network,
    max_bypass: float = 100.0,
    max_arc_length: float = 200.0,
    control_radius: float = 100.0,
) -> Network:
    """Remove geometry-only nodes, thin close control nodes, split long arcs.

    Rules are applied until nothing changes, then the largest strongly
    connected component is returned.
    """
    while True:
        g = _MutableGraph(net)
        changed = True
        while changed:
            changed = _thin_controls(g, control_radius)
            changed |= _bypass(g, max_bypass)
            changed |= _split_long(g, max_arc_length)
        full = g.to_network()
        net = largest_component(full)
        # dropping other components can expose new pass-through nodes
        if net is full:
            return net


# -- turn projection ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TurnGraph:
    """Arc-to-arc transition graph.

    States ``0..n_arcs-1`` are the arcs of the network; state ``n_arcs + i``
    is the start state of node ``i`` (no previous arc). Transition ``t`` moves
    from state ``src[t]`` onto arc ``tgt[t]``. The first ``n_turns``
    transitions are turns ``(i,j) -> (j,k)``, the rest are departures.
    Transitions are sorted by source state; ``indptr`` indexes them.
    """

    network: Network
    src: np.ndarray
    tgt: np.ndarray
    left_turn: np.ndarray
    u_turn: np.ndarray
    intersection: np.ndarray
    n_turns: int
    indptr: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_states(self) -> int:
        return self.network.n_arcs + self.network.n_nodes

    @property
    def n_transitions(self) -> int:
        return len(self.src)

    def start_state(self, node: int) -> int:
        return self.network.n_arcs + int(node)

    def transition_lookup(self) -> dict:
        return {(int(s), int(t)): k for k, (s, t) in enumerate(zip(self.src, self.tgt))}

    def state_graph(self) -> sp.csr_matrix:
        n = self.n_states
        return sp.csr_matrix((np.ones(len(self.src)), (self.src, self.tgt)), shape=(n, n))


def turn_angle(net: Network, a: int, b: int) -> float:
    """Signed heading change from arc ``a`` onto arc ``b`` in degrees, CCW positive."""
    i, j, k = net.tail[a], net.head[a], net.head[b]
    h1 = (net.x[j] - net.x[i], net.y[j] - net.y[i])
    h2 = (net.x[k] - net.x[j], net.y[k] - net.y[j])
    if not all(np.isfinite(h1 + h2)):
        raise NetworkError(f"missing coordinates for turn at node {j}")
    cross = h1[0] * h2[1] - h1[1] * h2[0]
    dot = h1[0] * h2[0] + h1[1] * h2[1]
    return math.degrees(math.atan2(cross, dot))


def project_turns(net: Network, left_range: tuple[float, float] = (30.0, 150.0)) -> TurnGraph:
    src, tgt, left, uturn, inter = [], [], [], [], []
    for a in range(net.n_arcs):
        j = net.head[a]
        for b in net.outgoing(j):
            src.append(a)
            tgt.append(int(b))
            is_u = int(net.head[b] == net.tail[a])
            is_left = 0
            if not is_u:
                ang = turn_angle(net, a, int(b))
                is_left = int(left_range[0] < ang < left_range[1])
            left.append(is_left)
            uturn.append(is_u)
            inter.append(int(net.kind[j] == NodeKind.INTERSECTION_CONTROL))
    n_turns = len(src)
    for i in range(net.n_nodes):
        for b in net.outgoing(i):
            src.append(net.n_arcs + i)
            tgt.append(int(b))
            left.append(0)
            uturn.append(0)
            inter.append(0)
    src = np.array(src, dtype=np.int64)
    n_states = net.n_arcs + net.n_nodes
    indptr = np.zeros(n_states + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    return TurnGraph(
        network=net, src=src, tgt=np.array(tgt, dtype=np.int64),
        left_turn=np.array(left, dtype=np.int8), u_turn=np.array(uturn, dtype=np.int8),
        intersection=np.array(inter, dtype=np.int8), n_turns=n_turns, indptr=np.cumsum(indptr),
    )


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Per-transition features, columns ordered as :data:`FEATURE_NAMES`."""

    turns: TurnGraph
    T: np.ndarray
    arc_class: np.ndarray
    X: np.ndarray

    @property
    def tt_nonresidential(self) -> np.ndarray:
        return self.X[:, 0]

    @property
    def tt_residential(self) -> np.ndarray:
        return self.X[:, 1]


def build_features(turns: TurnGraph, T, arc_class=None) -> FeatureSet:
    T = np.asarray(T, dtype=float)
    if arc_class is None:
        arc_class = turns.network.arc_class
    arc_class = np.asarray(arc_class)
    res = arc_class[turns.tgt] == ArcClass.RESIDENTIAL
    tt = T[turns.tgt]
    X = np.zeros((turns.n_transitions, 5))
    X[:, 0] = np.where(res, 0.0, tt)
    X[:, 1] = np.where(res, tt, 0.0)
    X[:, 2] = turns.intersection
    X[:, 3] = turns.left_turn
    X[:, 4] = turns.u_turn
    return FeatureSet(turns=turns, T=T, arc_class=arc_class, X=X)


# -- travel time box ------------------------------------------------------------

@dataclass(frozen=True)
class TravelTimeBounds:
    t_min: np.ndarray
    t_max: np.ndarray

    def __post_init__(self):
        if not (np.all(self.t_min > 0) and np.all(self.t_min <= self.t_max)):
            raise NetworkError("bounds must satisfy 0 < t_min <= t_max")

    def contains(self, T, tol: float = 0.0) -> bool:
        return bool(np.all(T >= self.t_min - tol) and np.all(T <= self.t_max + tol))


def travel_time_bounds(net: Network, city_speed_max: float | None = None,
                       floor_speed: float | None = None) -> TravelTimeBounds:
    """Per-arc travel-time box in minutes, ``[L / speed_max, L / floor_speed]``.

    ``city_speed_max`` caps the per-arc maxima; without ``floor_speed`` the
    per-arc minimum speeds are used.
    """
    if floor_speed is not None and floor_speed <= 0:
        raise NetworkError("floor_speed must be positive")
    vmax = net.speed_max if city_speed_max is None else np.minimum(net.speed_max, city_speed_max)
    vlow = net.speed_min if floor_speed is None else np.full(net.n_arcs, float(floor_speed))
    vlow = np.minimum(vlow, vmax)
    return TravelTimeBounds(t_min=net.length / vmax / 60.0, t_max=net.length / vlow / 60.0)


# -- shortest paths -------------------------------------------------------------

class ShortestPath(NamedTuple):
    nodes: list
    arcs: list
    time: float


def shortest_path(net: Network, T, o: int, d: int) -> ShortestPath:
    """Minimum total ``T`` path; ties go to the lexicographically smallest node sequence."""
    if o == d:
        raise NetworkError("origin and destination must differ")
    T = np.asarray(T, dtype=float)
    best = {o: (0.0, (o,), ())}
    heap = [(0.0, (o,), ())]
    done = set()
    while heap:
        dist, nodes, arcs = heapq.heappop(heap)
        u = nodes[-1]
        if u in done:
            continue
        done.add(u)
        if u == d:
            return ShortestPath(list(nodes), list(arcs), dist)
        for a in net.outgoing(u):
            v = int(net.head[a])
            if v in done:
                continue
            key = (dist + T[a], nodes + (v,), arcs + (int(a),))
            cur = best.get(v)
            if cur is None or key[:2] < cur[:2]:
                best[v] = key
                heapq.heappush(heap, key)
    raise NetworkError(f"node {d} is unreachable from {o}")


def shortest_distances(net: Network, T, origins) -> tuple[np.ndarray, np.ndarray]:
    """Shortest-path times and the metric length of those paths from each origin."""
    T = np.asarray(T, dtype=float)
    n = net.n_nodes
    # parallel arcs collapse to the fastest
    order = np.lexsort((T, net.head, net.tail))
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = (net.tail[order][1:] != net.tail[order][:-1]) | (net.head[order][1:] != net.head[order][:-1])
    arcs = order[keep]
    g = sp.csr_matrix((T[arcs], (net.tail[arcs], net.head[arcs])), shape=(n, n))
    lengths = sp.csr_matrix((net.length[arcs], (net.tail[arcs], net.head[arcs])), shape=(n, n))
    origins = np.asarray(origins, dtype=np.int64)
    times, pred = csgraph.dijkstra(g, indices=origins, return_predecessors=True)
    meters = np.full_like(times, np.inf)
    for r, o in enumerate(origins):
        order_nodes = np.argsort(times[r])
        meters[r, o] = 0.0
        for v in order_nodes:
            p = pred[r, v]
            if p >= 0:
                meters[r, v] = meters[r, p] + lengths[p, v]
    return times, meters


# -- synthetic lattice ------------------------------------------------------------

def synthetic_grid(
    rows: int = 10,
    cols: int = 10,
    spacing: float = 600.0,
    speed_min: float = SPEED_MIN_DEFAULT,
    speed_max: float = SPEED_MAX_DEFAULT,
    profile: str = "speed",
    center: float = 3300.0,
    amplitude: float = 3.0,
) -> tuple[Network, np.ndarray]:
    """Bidirectional 4-neighbour lattice and its ground-truth travel times.

    Node ``r * cols + c`` sits at ``(c * spacing, r * spacing)``. With
    ``q = (y_head - center)^2 / center^2`` the arc profile is

    * ``"speed"``: speed ``speed_max - amplitude * q`` m/s, time ``L / speed``;
    * ``"seconds"``: time ``L / speed_max - amplitude * q`` seconds.

    Both are clamped to ``[L / speed_max, L / speed_min]``. Returns times in minutes.
    """
    if rows < 2 or cols < 2:
        raise NetworkError("grid needs at least 2 rows and 2 columns")
    if profile not in ("speed", "seconds"):
        raise ValueError(f"unknown profile {profile!r}")
    coords = np.array([(c * spacing, r * spacing) for r in range(rows) for c in range(cols)], dtype=float)
    arcs = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    arcs.append((i, rr * cols + cc))
    net = build_network(coords, arcs, np.full(len(arcs), float(spacing)),
                        speeds=np.tile([speed_min, speed_max], (len(arcs), 1)))
    q = (net.y[net.head] - center) ** 2 / center ** 2
    L = net.length
    if profile == "speed":
        seconds = L / (speed_max - amplitude * q)
    else:
        seconds = L / speed_max - amplitude * q
    seconds = np.clip(seconds, L / speed_max, L / speed_min)
    return net, seconds / 60.0


# -- text format -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def save_network(net: Network, path) -> None:
    lines = [f"{net.n_nodes},{net.n_arcs}"]
    for i in range(net.n_nodes):
        lines.append(f"{i},{_fmt(net.x[i])},{_fmt(net.y[i])},{_KIND_NAMES[NodeKind(net.kind[i])]}")
    for a in range(net.n_arcs):
        lines.append(
            f"{net.tail[a]},{net.head[a]},{_fmt(net.length[a])},{_fmt(net.speed_min[a])},"
            f"{_fmt(net.speed_max[a])},{_CLASS_NAMES[ArcClass(net.arc_class[a])]}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_network(path) -> Network:
    kinds = {v: k for k, v in _KIND_NAMES.items()}
    classes = {v: k for k, v in _CLASS_NAMES.items()}
    text = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        n, m = (int(v) for v in text[0].split(","))
        coords, knd = [], []
        for lineno, line in enumerate(text[1:1 + n], start=2):
            i, x, y, k = line.split(",")
            if int(i) != lineno - 2:
                raise NetworkError(f"line {lineno}: node ids must be consecutive from 0")
            coords.append((float(x), float(y)))
            knd.append(kinds[k])
        arcs, lengths, speeds, cls = [], [], [], []
        for line in text[1 + n:1 + n + m]:
            t, h, L, vmin, vmax, c = line.split(",")
            arcs.append((int(t), int(h)))
            lengths.append(float(L))
            speeds.append((float(vmin), float(vmax)))
            cls.append(classes[c])
    except (ValueError, KeyError, IndexError) as exc:
        raise NetworkError(f"malformed network file {path}: {exc}") from exc
    if len(arcs) != m:
        raise NetworkError(f"expected {m} arcs, found {len(arcs)}")
    return build_network(np.array(coords), arcs, lengths, speeds, cls, knd, allow_parallel=True)


def save_arc_table(path, values: dict[str, np.ndarray], net: Network) -> None:
    """Arc-indexed table aligned with the network's arc order."""
    names = list(values)
    lines = ["arc,tail,head," + ",".join(names)]
    for a in range(net.n_arcs):
        cells = [str(a), str(net.tail[a]), str(net.head[a])] + [_fmt(values[k][a]) for k in names]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_arc_table(path, column: str) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    k = header.index(column)
    return np.array([float(line.split(",")[k]) for line in lines[1:]])
