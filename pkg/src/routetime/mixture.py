"""Trip mixture: origin, destination, path, predicted time, observed time.

Every observation granularity gets its log-likelihood by marginalizing what
was not observed. Unobserved paths are integrated by Monte Carlo over walks
sampled from the choice model; gradients use the score-function identity
``grad E[f] = E[grad f + f grad ln P(r)]``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import integrate
from scipy.special import logsumexp

from .network import Network, TurnGraph
from .route_choice import (
    ChoiceParams,
    Gradient,
    UnreachableError,
    ValueSolution,
    enumerate_paths,
    expected_transition_counts,
    grad_from_counts,
    path_transitions,
    sample_paths,
    solve_model,
)

K_CITY = 35
K_SYNTHETIC = 100


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    """One trip record. ``r`` is a node sequence; ``t`` is in minutes."""

    o: int
    d: int | None = None
    t: float | None = None
    r: tuple | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.r is not None:
            r = tuple(int(v) for v in self.r)
            object.__setattr__(self, "r", r)
            if len(r) < 2 or r[0] != self.o:
                raise ObservationError(f"path {r} does not start at origin {self.o}")
            if self.d is None:
                object.__setattr__(self, "d", r[-1])
            elif r[-1] != self.d:
                raise ObservationError(f"path {r} does not end at destination {self.d}")
        if self.d is None and self.t is None:
            raise ObservationError("an observation needs a destination or a travel time")
        if self.t is not None and not self.t > 0:
            raise ObservationError(f"travel time must be positive, got {self.t}")
        if self.d is not None and self.d == self.o:
            raise ObservationError("origin and destination must differ")
        if not self.weight > 0:
            raise ObservationError("weight must be positive")

    @property
    def kind(self) -> str:
        if self.r is not None:
            return "full" if self.t is not None else "path"
        if self.d is None:
            return "no_destination"
        return "no_path" if self.t is not None else "od"

    def without_path(self) -> "Observation":
        return replace(self, r=None)

    def without_time(self) -> "Observation":
        return replace(self, t=None)


@dataclass(frozen=True)
class ODDistributions:
    """Empirical origin and destination-given-origin frequencies."""

    p_o: dict
    p_d: dict  # o -> {d: prob}

    @classmethod
    def from_observations(cls, observations: Iterable[Observation]) -> "ODDistributions":
        count_o, count_od = {}, {}
        for ob in observations:
            count_o[ob.o] = count_o.get(ob.o, 0.0) + ob.weight
            if ob.d is not None:
                inner = count_od.setdefault(ob.o, {})
                inner[ob.d] = inner.get(ob.d, 0.0) + ob.weight
        total = sum(count_o.values())
        p_o = {o: c / total for o, c in count_o.items()}
        p_d = {o: {d: c / sum(inner.values()) for d, c in inner.items()} for o, inner in count_od.items()}
        return cls(p_o, p_d)

    @classmethod
    def uniform(cls, n_nodes: int) -> "ODDistributions":
        p = 1.0 / n_nodes
        q = 1.0 / (n_nodes - 1)
        return cls({o: p for o in range(n_nodes)},
                   {o: {d: q for d in range(n_nodes) if d != o} for o in range(n_nodes)})

    def log_p_o(self, o: int) -> float:
        p = self.p_o.get(o, 0.0)
        return math.log(p) if p > 0 else -math.inf

    def log_p_d(self, o: int, d: int) -> float:
        p = self.p_d.get(o, {}).get(d, 0.0)
        return math.log(p) if p > 0 else -math.inf

    def destinations(self, o: int) -> np.ndarray:
        return np.array(sorted(self.p_d.get(o, {})), dtype=np.int64)


# -- observation densities ----------------------------------------------------------

def partition_smsle(gamma: float) -> float:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return math.sqrt(math.pi / gamma)


def smsle_logpdf(t, theta, gamma: float):
    """Log density of the loss ``gamma * ln^2(t / theta) + ln t``.

    This is a log-normal with ``mu = ln theta`` and ``sigma = 1 / sqrt(2 gamma)``.
    """
    t = np.asarray(t, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if not gamma > 0 or np.any(t <= 0) or np.any(theta <= 0):
        raise ValueError("t, theta and gamma must be positive")
    out = -gamma * np.log(t / theta) ** 2 - np.log(t) - 0.5 * math.log(math.pi / gamma)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SmsleDensity:
    """Observed-time density ``f(t; theta)`` used by the mixture.

    Any object exposing the same methods can be plugged into a
    :class:`JointModel`.
    """

    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def sigma(self) -> float:
        return 1.0 / math.sqrt(2.0 * self.gamma)

    def logpdf(self, t, theta):
        return smsle_logpdf(t, theta, self.gamma)

    def dlogpdf_dtheta(self, t, theta):
        return 2.0 * self.gamma * np.log(np.asarray(t) / theta) / theta

    def expected_log(self, theta):
        return np.log(theta)

    @property
    def mean_multiplier(self) -> float:
        return math.exp(self.sigma ** 2 / 2)

    @property
    def mode_multiplier(self) -> float:
        return math.exp(-self.sigma ** 2)


# -- losses as densities ----------------------------------------------------------------

LOSSES: dict[str, Callable] = {
    "mse": lambda x, th: (x - th) ** 2,
    "linex": lambda x, th: np.exp(x - th) - (x - th) - 1.0,
    "msle": lambda x, th: np.log(x / th) ** 2,
}


@dataclass(frozen=True)
class LossDensity:
    loss: Callable
    domain: tuple
    theta: float
    partition: float

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > self.domain[0]) & (x < self.domain[1])
        with np.errstate(all="ignore"):
            val = -self.loss(x, self.theta) - math.log(self.partition)
        return np.where(inside, val, -np.inf)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def partition_at(self, theta: float) -> float:
        return _partition(self.loss, self.domain, theta)

    def partition_is_constant(self, thetas: Sequence[float], tol: float = 1e-6) -> bool:
        values = [self.partition_at(th) for th in thetas]
        return max(values) - min(values) <= tol * max(1.0, max(values))


def _partition(loss, domain, theta) -> float:
    def f(x):
        with np.errstate(all="ignore"):
            return float(np.exp(-loss(x, theta)))

    lo, hi = domain
    # split at theta so quad sees the bulk of the mass
    pivots = [p for p in (theta,) if lo < p < hi]
    pieces = [lo] + pivots + [hi]
    total = 0.0
    for a, b in zip(pieces[:-1], pieces[1:]):
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(f, a, b, limit=200, epsabs=1e-13, epsrel=1e-12)
            except integrate.IntegrationWarning:
                raise ValueError("partition integral diverges") from None
        total += val
        if not math.isfinite(val) or err > 1e-3 * max(abs(val), 1.0) or val > 1e12:
            raise ValueError("partition integral diverges")
    return total


def loss_to_logpdf(loss, domain=(-math.inf, math.inf), theta: float = 0.0) -> LossDensity:
    """Turn a loss ``L(x, theta)`` into the density ``exp(-L) / Z_L(theta)``."""
    if isinstance(loss, str):
        loss = LOSSES[loss]
    return LossDensity(loss, tuple(domain), float(theta), _partition(loss, tuple(domain), theta))


# -- joint model -----------------------------------------------------------------------

@dataclass(eq=False)
class JointModel:
    turns: TurnGraph
    T: np.ndarray
    params: ChoiceParams
    density: SmsleDensity = field(default_factory=SmsleDensity)
    od: ODDistributions | None = None
    max_steps: int | None = None

    @property
    def network(self) -> Network:
        return self.turns.network

    def solve(self, destinations) -> ValueSolution:
        return solve_model(self.turns, self.T, self.params, destinations)

    def replace(self, **kw) -> "JointModel":
        return replace(self, **kw)

    def od_terms(self, ob: Observation) -> float:
        if self.od is None:
            return 0.0
        if ob.d is None:
            return self.od.log_p_o(ob.o)
        return self.od.log_p_o(ob.o) + self.od.log_p_d(ob.o, ob.d)

    def candidates(self, o: int) -> np.ndarray:
        if self.od is not None and len(self.od.destinations(o)):
            return self.od.destinations(o)
        return np.array([d for d in range(self.network.n_nodes) if d != o], dtype=np.int64)

    def log_prior_d(self, o: int, cands: np.ndarray) -> np.ndarray:
        if self.od is not None and len(self.od.destinations(o)):
            return np.array([self.od.log_p_d(o, int(d)) for d in cands])
        return np.full(len(cands), -math.log(len(cands)))


def _tgt_onehot(turns: TurnGraph) -> sp.csr_matrix:
    if "tgt_onehot" not in turns.cache:
        n = turns.n_transitions
        turns.cache["tgt_onehot"] = sp.csr_matrix(
            (np.ones(n), (np.arange(n), turns.tgt)), shape=(n, turns.network.n_arcs))
    return turns.cache["tgt_onehot"]


KIND_OD, KIND_PATH, KIND_NOPATH, KIND_NODEST = 0, 1, 2, 3


@dataclass(eq=False)
class Prepared:
    """Observations converted to arrays on a turn graph."""

    observations: list
    kind: np.ndarray
    o: np.ndarray
    d: np.ndarray
    t: np.ndarray
    w: np.ndarray
    C: sp.csr_matrix  # transition counts of observed paths

    def __len__(self):
        return len(self.kind)

    def subset(self, idx) -> "Prepared":
        idx = np.asarray(idx)
        return Prepared([self.observations[i] for i in idx], self.kind[idx], self.o[idx],
                        self.d[idx], self.t[idx], self.w[idx], self.C[idx])


def prepare(turns: TurnGraph, observations: Sequence[Observation]) -> Prepared:
    if isinstance(observations, Prepared):
        return observations
    net = turns.network
    obs = list(observations)
    kind = np.zeros(len(obs), dtype=np.int8)
    rows, cols = [], []
    for i, ob in enumerate(obs):
        for node in (ob.o, ob.d):
            if node is not None and not 0 <= node < net.n_nodes:
                raise ObservationError(f"observation {i}: node {node} not in network")
        if ob.r is not None:
            try:
                arcs = net.arcs_of_path(ob.r)
                t = path_transitions(turns, arcs, ob.o, ob.d)
            except ValueError as exc:
                raise ObservationError(f"observation {i}: {exc}") from None
            rows.append(np.full(len(t), i))
            cols.append(t)
            kind[i] = KIND_PATH
        elif ob.d is None:
            kind[i] = KIND_NODEST
        elif ob.t is not None:
            kind[i] = KIND_NOPATH
    C = sp.csr_matrix(
        (np.ones(sum(len(c) for c in cols)),
         (np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])),
        shape=(len(obs), turns.n_transitions))
    return Prepared(
        obs, kind,
        np.array([ob.o for ob in obs], dtype=np.int64),
        np.array([-1 if ob.d is None else ob.d for ob in obs], dtype=np.int64),
        np.array([np.nan if ob.t is None else ob.t for ob in obs], dtype=float),
        np.array([ob.weight for ob in obs], dtype=float), C)


@dataclass(eq=False)
class Proposal:
    """Fixed walks for one observation with their log proposal probabilities."""

    C: sp.csr_matrix
    log_q: np.ndarray


@dataclass(eq=False)
class BatchResult:
    loglik: np.ndarray
    grad: Gradient | None
    solution: ValueSolution
    diagnostics: dict


def _chunk_sample(sol, units, K, seed, max_steps):
    o, d = units
    rng = np.random.default_rng(seed)
    pb = sample_paths(sol, np.repeat(o, K), np.repeat(d, K), rng, max_steps=max_steps)
    C = sp.csr_matrix((np.ones(len(pb.trans)), (pb.walker, pb.trans)),
                      shape=(pb.n, sol.turns.n_transitions))
    return C, pb.ok, pb.resampled


def batch_loglik(model: JointModel, data, K: int = K_SYNTHETIC, rng=None, grad: bool = True,
                 sol: ValueSolution | None = None, threads: int = 1,
                 proposals: dict | None = None, walkers_per_chunk: int = 8192) -> BatchResult:
    """Per-observation log-likelihoods (OD terms excluded) and the gradient of
    their weighted sum.

    One factorization serves the whole batch. Unobserved paths are sampled in
    fixed chunks whose seeds derive from one draw of ``rng`` and the chunk
    index, so results do not depend on ``threads``. ``proposals`` maps an
    observation index to a :class:`Proposal`; those observations use the
    importance-weighted (offline) estimator.
    """
    turns = model.turns
    net = turns.network
    prep = prepare(turns, data)
    rng = np.random.default_rng(rng)
    proposals = proposals or {}
    n = len(prep)
    kinds = prep.kind
    cands = {int(i): model.candidates(int(prep.o[i])) for i in np.flatnonzero(kinds == KIND_NODEST)}
    dests = set(prep.d[(kinds == KIND_PATH) | (kinds == KIND_NOPATH)].tolist())
    for c in cands.values():
        dests.update(c.tolist())
    if sol is None:
        sol = model.solve(sorted(dests))
    v = sol.utilities.v
    T = np.asarray(model.T, dtype=float)
    dens = model.density
    onehot = _tgt_onehot(turns)
    ll = np.zeros(n)
    obs_counts = np.zeros(turns.n_transitions)
    time_T = np.zeros(net.n_arcs)
    units_o, units_d, units_w = [], [], []
    diag = {"resampled_walks": 0, "trapped_walks": 0,
            "negative_z": sol.diagnostics["negative_z"], "clamped_z": sol.diagnostics["clamped_z"]}

    P = np.flatnonzero(kinds == KIND_PATH)
    if P.size:
        C = prep.C[P]
        A = C @ onehot
        ll[P] = C @ v - sol.log_z_od(prep.o[P], prep.d[P])
        timed = ~np.isnan(prep.t[P])
        if timed.any():
            that = A[timed] @ T
            ll[P[timed]] += dens.logpdf(prep.t[P][timed], that)
            if grad:
                beta = np.zeros(P.size)
                beta[timed] = prep.w[P][timed] * dens.dlogpdf_dtheta(prep.t[P][timed], that)
                time_T += A.T @ beta
        if grad:
            obs_counts += C.T @ prep.w[P]
            units_o.append(prep.o[P])
            units_d.append(prep.d[P])
            units_w.append(prep.w[P])

    # sampled units: (observation, destination)
    u_obs, u_d = [], []
    for i in np.flatnonzero(kinds == KIND_NOPATH):
        if int(i) not in proposals:
            u_obs.append(int(i))
            u_d.append(int(prep.d[i]))
    for i, c in cands.items():
        reach = sol.reach[net.n_arcs + prep.o[i], sol.column(c)]
        if not reach.any():
            raise UnreachableError(f"observation {i}: no candidate destination reachable")
        for d in c[reach]:
            u_obs.append(i)
            u_d.append(int(d))
    u_obs = np.array(u_obs, dtype=np.int64)
    u_d = np.array(u_d, dtype=np.int64)
    blocks = []  # (unit ids, C, lnw, ok)
    if u_obs.size:
        per = max(1, walkers_per_chunk // K)
        starts = list(range(0, len(u_obs), per))
        base = int(rng.integers(2 ** 63))
        jobs = [((prep.o[u_obs[s:s + per]], u_d[s:s + per]), [base, j]) for j, s in enumerate(starts)]

        def run(job):
            return _chunk_sample(sol, job[0], K, job[1], model.max_steps)

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(run, jobs))
        else:
            results = [run(j) for j in jobs]
        for s, (Cw, ok, resampled) in zip(starts, results):
            ids = np.arange(s, min(s + per, len(u_obs)))
            diag["resampled_walks"] += int(resampled)
            diag["trapped_walks"] += int((~ok).sum())
            blocks.append((ids, Cw, None, ok))
    prop_ids = [int(i) for i in np.flatnonzero(kinds == KIND_NOPATH) if int(i) in proposals]
    prop_units = np.arange(len(u_obs), len(u_obs) + len(prop_ids))
    if prop_ids:
        u_obs = np.concatenate([u_obs, prop_ids]).astype(np.int64)
        u_d = np.concatenate([u_d, prep.d[prop_ids]]).astype(np.int64)
        for uid, i in zip(prop_units, prop_ids):
            pr = proposals[i]
            log_p = pr.C @ v - sol.log_z_od(prep.o[i], prep.d[i])
            blocks.append((np.array([uid]), pr.C, log_p - pr.log_q, np.ones(len(pr.log_q), dtype=bool)))

    n_units = len(u_obs)
    lnE = np.full(n_units, -np.inf)
    unit_data = []
    for ids, Cw, log_ratio, ok in blocks:
        k = Cw.shape[0] // len(ids)
        A = Cw @ onehot
        that = A @ T
        t_rep = np.repeat(prep.t[u_obs[ids]], k)
        lnw = np.where(ok, dens.logpdf(t_rep, np.maximum(that, 1e-300)), -np.inf)
        if log_ratio is not None:
            lnw = lnw + log_ratio
        lnw = lnw.reshape(len(ids), k)
        n_ok = ok.reshape(len(ids), k).sum(axis=1)
        if np.any(n_ok == 0):
            bad = u_obs[ids][n_ok == 0][0]
            raise RuntimeError(f"observation {bad}: all {k} sampled walks were rejected")
        lse = logsumexp(lnw, axis=1)
        lnE[ids] = lse - np.log(n_ok if log_ratio is None else k)
        unit_data.append((ids, Cw, A, that, t_rep, lnw, lse))

    # combine units into observations
    unit_weight = np.zeros(n_units)
    for i in np.unique(u_obs):
        sel = np.flatnonzero(u_obs == i)
        if kinds[i] == KIND_NODEST:
            lp = model.log_prior_d(int(prep.o[i]), u_d[sel]) + lnE[sel]
            tot = logsumexp(lp)
            ll[i] = tot
            unit_weight[sel] = prep.w[i] * np.exp(lp - tot)
        else:
            ll[i] = lnE[sel[0]]
            unit_weight[sel] = prep.w[i]

    if grad:
        for ids, Cw, A, that, t_rep, lnw, lse in unit_data:
            omega = np.exp(lnw - lse[:, None]) * unit_weight[ids][:, None]
            omega = omega.ravel()
            obs_counts += Cw.T @ omega
            time_T += A.T @ (omega * dens.dlogpdf_dtheta(t_rep, np.maximum(that, 1e-300)))
        if n_units:
            units_o.append(prep.o[u_obs])
            units_d.append(u_d)
            units_w.append(unit_weight)
        if units_o:
            S = expected_transition_counts(sol, np.concatenate(units_o), np.concatenate(units_d),
                                           np.concatenate(units_w))
        else:
            S = 0.0
        g = grad_from_counts(sol, obs_counts - S)
        g = Gradient(g.b, g.T + time_T)
    else:
        g = None
    return BatchResult(ll, g, sol, diag)


# -- per-observation likelihoods ------------------------------------------------------------

def _require(ob: Observation, *fields_):
    for f in fields_:
        if getattr(ob, f) is None:
            raise ObservationError(f"observation lacks {f}")


def loglik_full(ob: Observation, model: JointModel, sol: ValueSolution | None = None) -> float:
    """``ln P(o) + ln P(d|o) + ln P(r|o,d) + ln f(t; sum of T along r)``."""
    _require(ob, "r", "t")
    res = batch_loglik(model, [ob], K=1, grad=False, sol=sol)
    return model.od_terms(ob) + float(res.loglik[0])


def loglik_no_time(ob: Observation, model: JointModel, sol: ValueSolution | None = None) -> float:
    _require(ob, "r")
    res = batch_loglik(model, [ob.without_time()], K=1, grad=False, sol=sol)
    return model.od_terms(ob) + float(res.loglik[0])


def path_distribution(model: JointModel, o: int, d: int, sol: ValueSolution | None = None,
                      limit: int = 10_000):
    """Enumerated paths with log-probabilities and predicted times, or None."""
    paths = enumerate_paths(model.turns, o, d, limit)
    if paths is None:
        return None
    sol = sol if sol is not None else model.solve([d])
    logp = np.array([sol.utilities.v[path_transitions(model.turns, p, o, d)].sum() for p in paths])
    logp -= float(sol.w(o, d))
    times = np.array([model.T[p].sum() for p in paths])
    return paths, logp, times


def loglik_no_path(ob: Observation, model: JointModel, K: int = K_SYNTHETIC, rng=None,
                   exact: bool = False) -> float:
    """``ln P(o) + ln P(d|o) + ln E_r[f(t; t_hat)]`` with ``K`` sampled paths,
    or by enumeration when ``exact``."""
    _require(ob, "d", "t")
    if exact:
        dist = path_distribution(model, ob.o, ob.d)
        if dist is None:
            raise ValueError("path set is not enumerable")
        _, logp, times = dist
        return model.od_terms(ob) + float(logsumexp(logp + model.density.logpdf(ob.t, times)))
    res = batch_loglik(model, [ob.without_path()], K=K, rng=rng, grad=False)
    return model.od_terms(ob) + float(res.loglik[0])


def dest_posterior(ob: Observation, model: JointModel, candidates=None, K: int = K_SYNTHETIC,
                   rng=None) -> np.ndarray:
    """``P(d | o, t)`` over ``candidates`` (unreachable ones get zero)."""
    _require(ob, "t")
    cands = model.candidates(ob.o) if candidates is None else np.asarray(candidates, dtype=np.int64)
    sol = model.solve(cands)
    reach = sol.reach[model.network.n_arcs + ob.o, sol.column(cands)]
    if not reach.any():
        raise UnreachableError(f"no candidate destination reachable from {ob.o}")
    rng = np.random.default_rng(rng)
    lp = np.full(len(cands), -np.inf)
    prior = model.log_prior_d(ob.o, cands)
    for k, d in enumerate(cands):
        if reach[k]:
            res = batch_loglik(model, [Observation(ob.o, int(d), ob.t)], K=K, rng=rng, grad=False, sol=sol)
            lp[k] = prior[k] + res.loglik[0]
    return np.exp(lp - logsumexp(lp))


def mixed_loglik(observations: Sequence[Observation], model: JointModel, K: int = K_SYNTHETIC,
                 rng=None, threads: int = 1) -> float:
    """Weighted total log-likelihood over observations of any granularity."""
    obs = list(observations)
    if not obs:
        return 0.0
    res = batch_loglik(model, obs, K=K, rng=rng, grad=False, threads=threads)
    od = np.array([model.od_terms(ob) for ob in obs])
    w = np.array([ob.weight for ob in obs])
    return float(np.sum(w * (od + res.loglik)))


# -- score-function gradient estimators -------------------------------------------------------

@dataclass(frozen=True)
class ScoreGradient:
    """Monte Carlo estimate of ``E[f]`` and its gradient.

    ``grad`` estimates ``grad E[f]`` with standard error ``stderr``;
    ``grad_log`` is the ratio ``grad E[f] / E[f]``, the gradient of
    ``ln E[f]``.
    """

    expectation: float
    grad: Gradient
    stderr: Gradient
    grad_log: Gradient
    n: int
    samples: np.ndarray | None = None


def _score_terms(model: JointModel, sol: ValueSolution, o: int, d: int, t: float,
                 C: sp.csr_matrix):
    """Per-path ``grad f + f grad ln P(r)`` (rows) and ``ln f``."""
    turns = model.turns
    X = sol.utilities.features.X
    onehot = _tgt_onehot(turns)
    A = C @ onehot
    that = A @ model.T
    lf = model.density.logpdf(t, that)
    dlf = model.density.dlogpdf_dtheta(t, that)
    S = expected_transition_counts(sol, [o], [d])
    Eb = S @ X
    Earc = np.bincount(turns.tgt, weights=S, minlength=turns.network.n_arcs)
    cls = sol.utilities.features.arc_class
    arc_w = np.where(cls == 1, sol.params.b[1], sol.params.b[0])
    dense_A = A.toarray()
    score_b = C @ X - Eb
    score_T = arc_w * (dense_A - Earc) + dlf[:, None] * dense_A
    return np.hstack([score_b, score_T]), lf


def _summarize(G: np.ndarray, lf: np.ndarray, n_b: int, keep: bool) -> ScoreGradient:
    m = lf.max()
    f_s = np.exp(lf - m)
    Gs = G * f_s[:, None]
    k = len(lf)
    mean = Gs.mean(axis=0) * math.exp(m)
    se = Gs.std(axis=0, ddof=1) / math.sqrt(k) * math.exp(m) if k > 1 else np.full(G.shape[1], np.inf)
    ratio = Gs.sum(axis=0) / f_s.sum()
    return ScoreGradient(
        expectation=float(f_s.mean() * math.exp(m)),
        grad=Gradient(mean[:n_b], mean[n_b:]),
        stderr=Gradient(se[:n_b], se[n_b:]),
        grad_log=Gradient(ratio[:n_b], ratio[n_b:]),
        n=k,
        samples=(Gs * math.exp(m)) if keep else None,
    )


def grad_online(ob: Observation, model: JointModel, K: int = K_SYNTHETIC, rng=None,
                keep_samples: bool = False) -> ScoreGradient:
    """Score-function estimator with paths sampled from the current model."""
    _require(ob, "d", "t")
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(rng)
    sol = model.solve([ob.d])
    pb = sample_paths(sol, np.full(K, ob.o), np.full(K, ob.d), rng, max_steps=model.max_steps)
    keep = pb.ok
    C = sp.csr_matrix((np.ones(len(pb.trans)), (pb.walker, pb.trans)),
                      shape=(pb.n, model.turns.n_transitions))[keep]
    G, lf = _score_terms(model, sol, ob.o, ob.d, ob.t, C)
    return _summarize(G, lf, 5, keep_samples)


@dataclass(frozen=True)
class PathProposal:
    """Discrete proposal over arc paths."""

    paths: tuple
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if np.any(probs <= 0):
            raise ValueError("proposal assigns zero probability to a listed path")
        object.__setattr__(self, "paths", tuple(tuple(int(a) for a in p) for p in self.paths))
        object.__setattr__(self, "probs", probs / probs.sum())


def grad_offline(ob: Observation, model: JointModel, proposal: PathProposal, K: int = K_SYNTHETIC,
                 rng=None, keep_samples: bool = False, check_support: bool = True) -> ScoreGradient:
    """Importance-weighted estimator using paths drawn from a fixed proposal.

    When the model's path set is enumerable, every path with positive model
    probability must be in the proposal.
    """
    _require(ob, "d", "t")
    turns = model.turns
    sol = model.solve([ob.d])
    index = {p: k for k, p in enumerate(proposal.paths)}
    if check_support:
        support = enumerate_paths(turns, ob.o, ob.d)
        if support is not None:
            missing = [p for p in support if tuple(p) not in index]
            if missing:
                raise ValueError(f"proposal does not cover the model support, e.g. path {missing[0]}")
    rng = np.random.default_rng(rng)
    draw = rng.choice(len(proposal.paths), size=K, p=proposal.probs)
    trans = [path_transitions(turns, p, ob.o, ob.d) for p in proposal.paths]
    rows = np.concatenate([np.full(len(trans[j]), k) for k, j in enumerate(draw)])
    cols = np.concatenate([trans[j] for j in draw])
    C = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(K, turns.n_transitions))
    G, lf = _score_terms(model, sol, ob.o, ob.d, ob.t, C)
    log_p = C @ sol.utilities.v - float(sol.w(ob.o, ob.d))
    log_ratio = log_p - np.log(proposal.probs[draw])
    return _summarize(G, lf + log_ratio, 5, keep_samples)
