"""Recursive logit path choice on the turn graph.

Value functions ``z = exp(w)`` for every destination come from one sparse LU
factorization of ``I - M`` where ``M[s, s'] = exp(v(s'|s))``. Walks end by an
absorbing move of utility zero, available from every arc entering the
destination.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .network import FeatureSet, TurnGraph, build_features

log = logging.getLogger(__name__)

Z_FLOOR = 1e-250
N_FEATURES = 5
U_TURN = 4


class SingularSystemError(RuntimeError):
    pass


class UnreachableError(ValueError):
    pass


class TrappedWalkError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChoiceParams:
    """Utility weights aligned with the feature channels.

    ``fixed`` marks weights held constant during estimation; the u-turn weight
    is fixed by default.
    """

    b: np.ndarray
    fixed: tuple = (False, False, False, False, True)

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if b.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} weights, got {b.size}")
        if not np.all(np.isfinite(b)):
            raise ValueError("utility weights must be finite")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "fixed", tuple(bool(f) for f in self.fixed))

    @classmethod
    def default(cls, value: float = -2.0, u_turn: float = -5.0) -> "ChoiceParams":
        return cls(np.array([value] * 4 + [u_turn]))

    @classmethod
    def synthetic(cls, travel_time: float = -2.0, left: float = -2.0, u_turn: float = -5.0) -> "ChoiceParams":
        """Three-weight model: one travel-time weight for both street classes."""
        return cls(np.array([travel_time, travel_time, 0.0, left, u_turn]))

    @property
    def free(self) -> np.ndarray:
        return ~np.array(self.fixed)

    def with_b(self, b) -> "ChoiceParams":
        return ChoiceParams(np.asarray(b, dtype=float), self.fixed)


@dataclass(frozen=True, eq=False)
class UtilityMatrix:
    features: FeatureSet
    params: ChoiceParams
    v: np.ndarray

    @property
    def turns(self) -> TurnGraph:
        return self.features.turns


def compute_utilities(features: FeatureSet, params: ChoiceParams) -> UtilityMatrix:
    if features.X.shape[1] != len(params.b):
        raise ValueError(f"{features.X.shape[1]} feature channels but {len(params.b)} weights")
    return UtilityMatrix(features, params, features.X @ params.b)


# -- reachability -----------------------------------------------------------------

def reachable_states(turns: TurnGraph, d: int) -> np.ndarray:
    """States from which a walk can be absorbed at ``d``."""
    cache = turns.cache.setdefault("reach", {})
    if d in cache:
        return cache[d]
    if "rev" not in turns.cache:
        turns.cache["rev"] = turns.state_graph().T.tocsr()
    rev = turns.cache["rev"]
    mask = np.zeros(turns.n_states, dtype=bool)
    frontier = turns.network.incoming(d)
    mask[frontier] = True
    while frontier.size:
        nb = rev[frontier].indices
        nb = np.unique(nb[~mask[nb]])
        mask[nb] = True
        frontier = nb
    mask.setflags(write=False)
    cache[d] = mask
    return mask


# -- value functions ------------------------------------------------------------------

@dataclass(eq=False)
class ValueSolution:
    """Value functions for a set of destinations sharing one factorization.

    ``Z[:, k]`` holds ``z`` over all states for ``destinations[k]``; the
    absorbing entry (always one) is not stored, see :meth:`z`.
    """

    utilities: UtilityMatrix
    m: np.ndarray
    M: sp.csr_matrix
    lu: object
    destinations: np.ndarray
    Z: np.ndarray
    reach: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def turns(self) -> TurnGraph:
        return self.utilities.turns

    @property
    def params(self) -> ChoiceParams:
        return self.utilities.params

    @property
    def T(self) -> np.ndarray:
        return self.utilities.features.T

    def column(self, d) -> np.ndarray | int:
        idx = self._dest_index[np.asarray(d)]
        if np.any(idx < 0):
            raise KeyError(f"destination(s) not solved: {np.asarray(d)[idx < 0]}")
        return idx

    def __post_init__(self):
        idx = -np.ones(self.turns.network.n_nodes, dtype=np.int64)
        idx[self.destinations] = np.arange(len(self.destinations))
        self._dest_index = idx

    def z(self, d: int) -> np.ndarray:
        return np.append(self.Z[:, self.column(d)], 1.0)

    def w(self, node, d) -> np.ndarray | float:
        """Expected maximum utility from ``node`` (start state) to ``d``."""
        node = np.asarray(node)
        return np.log(self.Z[self.turns.network.n_arcs + node, self.column(d)])

    def log_z_od(self, o, d) -> np.ndarray:
        return np.log(self.Z[self.turns.network.n_arcs + np.asarray(o), self.column(d)])


def solve_values(utilities: UtilityMatrix, destinations) -> ValueSolution:
    turns = utilities.turns
    net = turns.network
    n = turns.n_states
    destinations = np.unique(np.asarray(destinations, dtype=np.int64).reshape(-1))
    m = np.exp(utilities.v)
    # transitions are sorted by source state, so the CSR pattern is the turn graph's
    M = sp.csr_matrix((m, turns.tgt, turns.indptr), shape=(n, n))
    A = (sp.identity(n, format="csr") - M).tocsc()
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise SingularSystemError("value function diverges; utilities too close to zero") from exc
    rhs = np.zeros((n, len(destinations)))
    for k, d in enumerate(destinations):
        rhs[net.incoming(d), k] = 1.0
    Z = lu.solve(rhs) if len(destinations) else rhs
    if not np.all(np.isfinite(Z)):
        raise SingularSystemError("value function diverges; utilities too close to zero")
    reach = np.column_stack([reachable_states(turns, int(d)) for d in destinations]) if len(destinations) \
        else np.zeros((n, 0), dtype=bool)
    negative = int(np.count_nonzero((Z < 0) & reach))
    Z = np.abs(Z)
    clamped = int(np.count_nonzero((Z < Z_FLOOR) & reach))
    Z = np.maximum(Z, Z_FLOOR)
    if negative:
        log.warning("%d negative value-function entries replaced by their absolute value", negative)
    diag = {"factorizations": 1, "negative_z": negative, "clamped_z": clamped}
    return ValueSolution(utilities, m, M, lu, destinations, Z, reach, diag)


def solve_model(turns: TurnGraph, T, params: ChoiceParams, destinations) -> ValueSolution:
    return solve_values(compute_utilities(build_features(turns, T), params), destinations)


# -- transition probabilities -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic ``P(s'|s; d)``; the last column is the absorbing move."""

    P: sp.csr_matrix
    reachable: np.ndarray
    d: int
    turns: TurnGraph

    @property
    def absorbing(self) -> int:
        return self.P.shape[1] - 1


def transition_probs(sol: ValueSolution, d: int) -> TransitionMatrix:
    turns = sol.turns
    net = turns.network
    n = turns.n_states
    k = sol.column(d)
    z = sol.Z[:, k]
    reach = sol.reach[:, k]
    ok = reach[turns.src] & reach[turns.tgt]
    vals = np.where(ok, sol.m * z[turns.tgt] / z[turns.src], 0.0)
    ends = net.incoming(d)
    rows = np.concatenate([turns.src, ends])
    cols = np.concatenate([turns.tgt, np.full(len(ends), n)])
    data = np.concatenate([vals, 1.0 / z[ends]])
    P = sp.csr_matrix((data, (rows, cols)), shape=(n, n + 1))
    P.eliminate_zeros()
    return TransitionMatrix(P, reach, int(d), turns)


# -- sampling ---------------------------------------------------------------------------

def _slots(turns: TurnGraph) -> dict:
    """Per-state choice slots: outgoing transitions then, for arcs, an absorbing slot."""
    if "slots" in turns.cache:
        return turns.cache["slots"]
    n_arcs = turns.network.n_arcs
    n = turns.n_states
    n_out = np.diff(turns.indptr)
    counts = n_out + (np.arange(n) < n_arcs)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    trans = -np.ones(ptr[-1], dtype=np.int64)
    t = np.arange(turns.n_transitions)
    trans[ptr[turns.src] + (t - turns.indptr[turns.src])] = t
    out = {
        "ptr": ptr,
        "trans": trans,
        "state": np.repeat(np.arange(n), counts),
        "absorb": ptr[1:n_arcs + 1] - 1,
        "nonempty": np.flatnonzero(counts > 0),
    }
    turns.cache["slots"] = out
    return out


def default_max_steps(turns: TurnGraph) -> int:
    if "max_steps" not in turns.cache:
        turns.cache["max_steps"] = 50 * max(1, turns.network.diameter())
    return turns.cache["max_steps"]


class _SlotTable:
    """Cumulative slot probabilities for a group of destination columns."""

    def __init__(self, sol: ValueSolution, cols: np.ndarray):
        turns = sol.turns
        net = turns.network
        sl = _slots(turns)
        n = turns.n_states
        Z = sol.Z[:, cols]
        reach = sol.reach[:, cols]
        P = np.zeros((len(sl["trans"]), len(cols)))
        is_t = sl["trans"] >= 0
        t = sl["trans"][is_t]
        src, tgt = turns.src[t], turns.tgt[t]
        P[is_t] = sol.m[t, None] * Z[tgt] / Z[src] * (reach[tgt] & reach[src])
        dests = sol.destinations[cols]
        hit = net.head[:, None] == dests[None, :]
        P[sl["absorb"]] = hit / Z[:net.n_arcs] * reach[:net.n_arcs]
        cs = np.cumsum(P, axis=0)
        start = sl["ptr"][sl["state"]]
        base = np.where((start > 0)[:, None], cs[np.maximum(start - 1, 0)], 0.0)
        cum = cs - base
        nonempty = sl["nonempty"]
        ends = sl["ptr"][nonempty + 1] - 1
        self.total = np.zeros((n, len(cols)))
        self.total[nonempty] = cum[ends]
        pos = np.where(P > 0, np.arange(len(P))[:, None], -1)
        self.lastpos = -np.ones((n, len(cols)), dtype=np.int64)
        self.lastpos[nonempty] = np.maximum.reduceat(pos, sl["ptr"][nonempty], axis=0)
        self.stride = 2.0 * (n + 1)
        G = cum + 2.0 * sl["state"][:, None] + self.stride * np.arange(len(cols))[None, :]
        self.flat = np.ascontiguousarray(G.T).ravel()
        self.n_slots = len(P)
        self.sl = sl

    def draw(self, state, col, u):
        target = 2.0 * state + self.stride * col + u * self.total[state, col]
        r = np.searchsorted(self.flat, target, side="right") - col * self.n_slots
        return np.minimum(r, self.lastpos[state, col])


@dataclass(eq=False)
class PathBatch:
    """Sampled walks stored as (walker, step, transition) records."""

    turns: TurnGraph
    origins: np.ndarray
    dests: np.ndarray
    ok: np.ndarray
    walker: np.ndarray
    trans: np.ndarray
    resampled: int = 0

    @property
    def n(self) -> int:
        return len(self.origins)

    def counts(self) -> sp.csr_matrix:
        """Walker-by-arc traversal counts."""
        return sp.csr_matrix(
            (np.ones(len(self.walker)), (self.walker, self.turns.tgt[self.trans])),
            shape=(self.n, self.turns.network.n_arcs),
        )

    def static_sums(self) -> np.ndarray:
        """Per-walker sums of the intersection, left-turn and u-turn indicators."""
        t = self.trans
        out = np.zeros((self.n, 3))
        for k, col in enumerate((self.turns.intersection, self.turns.left_turn, self.turns.u_turn)):
            out[:, k] = np.bincount(self.walker, weights=col[t], minlength=self.n)
        return out

    def utility_sums(self, v: np.ndarray) -> np.ndarray:
        return np.bincount(self.walker, weights=v[self.trans], minlength=self.n)

    def path(self, i: int) -> list:
        lo, hi = np.searchsorted(self.walker, [i, i + 1])
        return self.turns.tgt[self.trans[lo:hi]].tolist()

    def paths(self) -> list:
        bounds = np.searchsorted(self.walker, np.arange(self.n + 1))
        arcs = self.turns.tgt[self.trans]
        return [arcs[bounds[i]:bounds[i + 1]].tolist() for i in range(self.n)]


def sample_paths(sol: ValueSolution, origins, dests, rng: np.random.Generator,
                 max_steps: int | None = None, max_resample: int = 10,
                 strict: bool = False) -> PathBatch:
    """Sample one walk per ``(origins[i], dests[i])`` from the current model.

    Walks longer than ``max_steps`` arcs are redrawn up to ``max_resample``
    times; walkers still trapped afterwards have ``ok`` False (or raise when
    ``strict``).
    """
    turns = sol.turns
    n_arcs = turns.network.n_arcs
    origins = np.asarray(origins, dtype=np.int64).reshape(-1)
    dests = np.asarray(dests, dtype=np.int64).reshape(-1)
    if max_steps is None:
        max_steps = default_max_steps(turns)
    cols = sol.column(dests)
    start = n_arcs + origins
    if len(origins) and not np.all(sol.reach[start, cols]):
        bad = np.flatnonzero(~sol.reach[start, cols])[0]
        raise UnreachableError(f"destination {dests[bad]} unreachable from {origins[bad]}")
    n_w = len(origins)
    attempt = np.zeros(n_w, dtype=np.int64)
    ok = np.ones(n_w, dtype=bool)
    rec_w, rec_s, rec_t, rec_a = [], [], [], []
    ucols = np.unique(cols)
    group = max(1, int(4e6 // max(1, len(_slots(turns)["trans"]))))
    resampled = 0
    for g0 in range(0, len(ucols), group):
        gcols = ucols[g0:g0 + group]
        table = _SlotTable(sol, gcols)
        local = -np.ones(len(sol.destinations), dtype=np.int64)
        local[gcols] = np.arange(len(gcols))
        todo = np.flatnonzero(np.isin(cols, gcols))
        lcol = local[cols]
        state = start.copy()
        for rnd in range(max_resample + 1):
            if not todo.size:
                break
            state[todo] = start[todo]
            act = todo
            steps = 0
            trapped = np.empty(0, dtype=np.int64)
            while act.size:
                r = table.draw(state[act], lcol[act], rng.random(act.size))
                t = table.sl["trans"][r]
                moving = t >= 0
                act, t = act[moving], t[moving]
                steps += 1
                if steps > max_steps:
                    trapped = act
                    break
                rec_w.append(act)
                rec_t.append(t)
                rec_s.append(np.full(act.size, steps, dtype=np.int64))
                rec_a.append(attempt[act].copy())
                state[act] = turns.tgt[t]
            if trapped.size:
                resampled += trapped.size
                attempt[trapped] += 1
                if rnd == max_resample:
                    ok[trapped] = False
            todo = trapped
    if not ok.all():
        if strict:
            raise TrappedWalkError(f"{int((~ok).sum())} walks exceeded {max_steps} steps")
        log.warning("%d walks still trapped after %d redraws", int((~ok).sum()), max_resample)
    if rec_w:
        w = np.concatenate(rec_w)
        s = np.concatenate(rec_s)
        t = np.concatenate(rec_t)
        a = np.concatenate(rec_a)
        keep = (a == attempt[w]) & ok[w]
        w, s, t = w[keep], s[keep], t[keep]
        order = np.lexsort((s, w))
        w, t = w[order], t[order]
    else:
        w = t = np.empty(0, dtype=np.int64)
    return PathBatch(turns, origins, dests, ok, w, t, resampled)


def sample_path(trans: TransitionMatrix, o: int, d: int, rng: np.random.Generator,
                max_steps: int, max_resample: int = 10) -> list:
    """Single walk from node ``o`` following ``trans``; returns the arc sequence."""
    if d != trans.d:
        raise ValueError(f"transition matrix is for destination {trans.d}, not {d}")
    P = trans.P
    start = trans.turns.start_state(o)
    if not trans.reachable[start]:
        raise UnreachableError(f"destination {d} unreachable from {o}")
    for _ in range(max_resample + 1):
        s, path = start, []
        while len(path) <= max_steps:
            row = slice(P.indptr[s], P.indptr[s + 1])
            nxt = int(rng.choice(P.indices[row], p=P.data[row] / P.data[row].sum()))
            if nxt == trans.absorbing:
                return path
            path.append(nxt)
            s = nxt
    raise TrappedWalkError(f"walk from {o} to {d} exceeded {max_steps} steps {max_resample + 1} times")


# -- path likelihood ----------------------------------------------------------------------

def path_transitions(turns: TurnGraph, path, o: int | None = None, d: int | None = None) -> np.ndarray:
    """Transition ids of an arc path; validates the walk."""
    net = turns.network
    path = [int(a) for a in path]
    if not path:
        raise ValueError("empty path")
    if o is not None and net.tail[path[0]] != o:
        raise ValueError(f"path does not start at {o}")
    if d is not None and net.head[path[-1]] != d:
        raise ValueError(f"path does not end at {d}")
    lookup = turns.cache.get("lookup")
    if lookup is None:
        lookup = turns.cache["lookup"] = turns.transition_lookup()
    states = [turns.start_state(net.tail[path[0]])] + path[:-1]
    try:
        return np.array([lookup[(s, a)] for s, a in zip(states, path)], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"path uses a nonexistent transition {exc.args[0]}") from None


def path_loglik(sol: ValueSolution, path, o: int | None = None, d: int | None = None) -> float:
    """``ln P(r) = sum of utilities along r - w(o; d)``."""
    net = sol.turns.network
    o = int(net.tail[path[0]]) if o is None else o
    d = int(net.head[path[-1]]) if d is None else d
    t = path_transitions(sol.turns, path, o, d)
    return float(sol.utilities.v[t].sum() - sol.w(o, d))


def expected_transition_counts(sol: ValueSolution, origins, dests, weights=None,
                               per_pair: bool = False) -> np.ndarray:
    """Expected transition traversal counts under ``P(.|o, d)``.

    Uses ``dz_o/dM_t = y[src_t] z[tgt_t]`` with ``y`` the row of
    ``(I - M)^-1`` for the start state of ``o``, obtained by solving with the
    transposed factors. Returns the weighted sum over pairs, or one row per
    pair when ``per_pair``.
    """
    turns = sol.turns
    n_arcs = turns.network.n_arcs
    origins = np.asarray(origins, dtype=np.int64).reshape(-1)
    dests = np.asarray(dests, dtype=np.int64).reshape(-1)
    weights = np.ones(len(origins)) if weights is None else np.asarray(weights, dtype=float)
    uo, oi = np.unique(origins, return_inverse=True)
    E = np.zeros((turns.n_states, len(uo)))
    E[n_arcs + uo, np.arange(len(uo))] = 1.0
    Y = sol.lu.solve(E, trans="T")
    cols = sol.column(dests)
    zod = sol.Z[n_arcs + origins, cols]
    if per_pair:
        return Y[turns.src][:, oi].T * sol.m[None, :] * sol.Z[turns.tgt][:, cols].T / zod[:, None]
    G = np.zeros((len(uo), len(sol.destinations)))
    np.add.at(G, (oi, cols), weights / zod)
    H = sol.Z @ G.T
    return sol.m * np.einsum("to,to->t", Y[turns.src], H[turns.tgt])


@dataclass(frozen=True)
class Gradient:
    b: np.ndarray
    T: np.ndarray

    def __add__(self, other):
        return Gradient(self.b + other.b, self.T + other.T)

    def __mul__(self, c):
        return Gradient(self.b * c, self.T * c)

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([self.b, self.T])


def _arc_weights(sol: ValueSolution) -> np.ndarray:
    """d v / d T_a for transitions entering arc a, per arc."""
    b = sol.params.b
    cls = sol.utilities.features.arc_class
    return np.where(cls == 1, b[1], b[0])


def grad_from_counts(sol: ValueSolution, trans_counts: np.ndarray) -> Gradient:
    """Gradient of ``sum_t c_t v_t`` for transition counts ``c``."""
    turns = sol.turns
    gb = trans_counts @ sol.utilities.features.X
    gT = _arc_weights(sol) * np.bincount(turns.tgt, weights=trans_counts, minlength=turns.network.n_arcs)
    return Gradient(gb, gT)


def grad_path_loglik(sol: ValueSolution, path) -> Gradient:
    """Analytic gradient of ``ln P(r)`` with respect to ``b`` and ``T``."""
    turns = sol.turns
    net = turns.network
    o, d = int(net.tail[path[0]]), int(net.head[path[-1]])
    t = path_transitions(turns, path, o, d)
    if sol.diagnostics.get("clamped_z"):
        sol.diagnostics["clamped_gradient"] = sol.diagnostics.get("clamped_gradient", 0) + 1
    observed = np.bincount(t, minlength=turns.n_transitions).astype(float)
    expected = expected_transition_counts(sol, [o], [d])
    return grad_from_counts(sol, observed - expected)


# -- enumeration (oracles, small instances) ------------------------------------------------------

def enumerate_paths(turns: TurnGraph, o: int, d: int, limit: int = 10_000) -> list | None:
    """All arc paths from ``o`` absorbed at ``d``, or None when the set is
    infinite (a reachable cycle) or larger than ``limit``."""
    net = turns.network
    reach = reachable_states(turns, d)
    start = turns.start_state(o)
    if not reach[start]:
        return []
    out = []
    on_stack = set()
    too_many = False

    def visit(s, prefix):
        nonlocal too_many
        if too_many:
            return False
        if s < net.n_arcs and net.head[s] == d:
            out.append(list(prefix))
            if len(out) > limit:
                too_many = True
                return False
        on_stack.add(s)
        for t in range(turns.indptr[s], turns.indptr[s + 1]):
            nxt = int(turns.tgt[t])
            if not reach[nxt]:
                continue
            if nxt in on_stack:
                return False
            prefix.append(nxt)
            if not visit(nxt, prefix):
                return False
            prefix.pop()
        on_stack.discard(s)
        return True

    if not visit(start, []):
        return None
    return out
