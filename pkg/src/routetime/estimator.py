"""Joint fitting of choice weights ``b`` and arc times ``T``."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy import optimize
from scipy.special import expit

from .mixture import (
    K_SYNTHETIC,
    KIND_NOPATH,
    JointModel,
    Observation,
    ODDistributions,
    Prepared,
    Proposal,
    SmsleDensity,
    batch_loglik,
    prepare,
)
from .network import Network, TravelTimeBounds, TurnGraph, project_turns, travel_time_bounds
from .route_choice import ChoiceParams, sample_paths


class FitError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class EstimatorConfig:
    """Hyperparameters of :func:`fit`.

    ``stop_delta`` is the minimum improvement of the window-smoothed mean
    objective (per unit of observation weight) over ``stop_window``
    iterations. ``T0=None`` starts from ``T_min / 0.9``.
    """

    eta: float = 0.01
    lam: float = 0.0
    gamma: float = 1.0
    K: int = K_SYNTHETIC
    batch_size: int = 1000
    stop_window: int = 50
    stop_delta: float = 0.01
    max_iters: int = 1000
    seed: int = 0
    b0: float | Sequence[float] = -2.0
    T0: np.ndarray | None = None
    u_turn: float = -5.0
    estimator: str = "online"
    refresh: int = 5
    fit_T: bool = True
    threads: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.stop_window < 1 or self.K < 1 or self.batch_size < 1 or self.max_iters < 1:
            raise ValueError("stop_window, K, batch_size and max_iters must be at least 1")
        if self.estimator not in ("online", "offline"):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    def summary(self) -> dict:
        out = asdict(self)
        out["T0"] = None if self.T0 is None else "array"
        if not np.isscalar(out["b0"]):
            out["b0"] = [float(v) for v in out["b0"]]
        return out


@dataclass
class FitResult:
    b: np.ndarray
    T: np.ndarray
    trace: list
    diagnostics: dict
    wall_time: float
    best_iteration: int
    config: EstimatorConfig
    stopped: str = "max_iters"

    @property
    def params(self) -> ChoiceParams:
        return ChoiceParams(self.b)

    def write_trace(self, path) -> None:
        keys = ["iteration", "objective", "smoothed", "best", "t_rmsle", "val_rmsle", "wall_time"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in self.trace:
                w.writerow(["" if row.get(k) is None else row[k] for k in keys])


# -- regularization and projection --------------------------------------------------------

def consecutive_pairs(turns: TurnGraph) -> np.ndarray:
    """(2, P) array of arc pairs ``(i, j) -> (j, k)`` sharing node ``j``."""
    sel = turns.src < turns.network.n_arcs
    return np.vstack([turns.src[sel], turns.tgt[sel]])


def regularization(T, L, pairs) -> tuple[float, np.ndarray]:
    """Sum over consecutive arcs of ``ln^2(pace_a / pace_b) / (L_a + L_b)``.

    Returns the value and its gradient with respect to ``T``.
    """
    T = np.asarray(T, dtype=float)
    L = np.asarray(L, dtype=float)
    a, b = np.asarray(pairs)
    diff = np.log(T[a] / L[a]) - np.log(T[b] / L[b])
    denom = L[a] + L[b]
    value = float(np.sum(diff ** 2 / denom))
    coef = 2.0 * diff / denom
    grad = np.bincount(a, coef / T[a], minlength=len(T)) - np.bincount(b, coef / T[b], minlength=len(T))
    return value, grad


def project_T(T, bounds: TravelTimeBounds) -> np.ndarray:
    return np.clip(np.asarray(T, dtype=float), bounds.t_min, bounds.t_max)


def project_gradient(g, T, bounds: TravelTimeBounds) -> np.ndarray:
    """Zero ascent components that push ``T`` out through an active face."""
    g = np.array(g, dtype=float)
    g[(T <= bounds.t_min) & (g < 0)] = 0.0
    g[(T >= bounds.t_max) & (g > 0)] = 0.0
    return g


# -- objective -----------------------------------------------------------------------------

def initial_params(config: EstimatorConfig) -> ChoiceParams:
    b = np.empty(5)
    b[:4] = config.b0
    b[4] = config.u_turn
    return ChoiceParams(b)


def objective(model: JointModel, data, lam: float = 0.0, K: int = K_SYNTHETIC, rng=None,
              pairs=None, threads: int = 1, proposals=None, total_weight: float | None = None,
              sol=None):
    """Mean weighted log-likelihood minus ``lam`` times the regularizer.

    Both terms are divided by ``total_weight`` (default: the weight of
    ``data``). Returns ``(value, grad_b, grad_T, BatchResult)``.
    """
    prep = prepare(model.turns, data)
    res = batch_loglik(model, prep, K=K, rng=rng, threads=threads, proposals=proposals, sol=sol)
    wsum = prep.w.sum()
    W = wsum if total_weight is None else total_weight
    value = float(prep.w @ res.loglik) / wsum
    gb, gT = res.grad.b / wsum, res.grad.T / wsum
    if lam > 0:
        pairs = consecutive_pairs(model.turns) if pairs is None else pairs
        r, rg = regularization(model.T, model.network.length, pairs)
        value -= lam * r / W
        gT = gT - lam * rg / W
    return value, gb, gT, res


def _make_proposals(model: JointModel, sol, prep: Prepared, idx, K, rng) -> dict:
    out = {}
    if len(idx) == 0:
        return out
    o, d = prep.o[idx], prep.d[idx]
    pb = sample_paths(sol, np.repeat(o, K), np.repeat(d, K), rng, max_steps=model.max_steps)
    C = sp.csr_matrix((np.ones(len(pb.trans)), (pb.walker, pb.trans)),
                      shape=(pb.n, model.turns.n_transitions))
    logq = C @ sol.utilities.v - sol.log_z_od(np.repeat(o, K), np.repeat(d, K))
    for j, i in enumerate(idx):
        rows = np.arange(j * K, (j + 1) * K)
        rows = rows[pb.ok[rows]]
        if rows.size:
            out[int(i)] = Proposal(C[rows], logq[rows])
    return out


def _rmsle(a, b) -> float:
    return float(np.sqrt(np.mean((np.log(a) - np.log(b)) ** 2)))


def fit(observations, network: Network | TurnGraph, bounds: TravelTimeBounds | None = None,
        config: EstimatorConfig | None = None, *, T_reference=None, validation=None,
        val_every: int = 0, od: ODDistributions | None = None, T_fixed=None, callback=None,
        verbose=False) -> FitResult:
    """Maximize the mixed log-likelihood by projected Adam over mini-batches.

    ``T_fixed`` (with ``config.fit_T=False``) holds travel times constant and
    fits only the choice weights. ``T_reference`` adds the RMSLE of the
    current ``T`` against it to the trace; ``validation`` adds the geometric
    mean prediction RMSLE every ``val_every`` iterations. ``callback(it,
    model)`` sees the model evaluated at each iteration.
    """
    config = config or EstimatorConfig()
    turns = network if isinstance(network, TurnGraph) else project_turns(network)
    net = turns.network
    obs = observations if isinstance(observations, Prepared) else list(observations)
    if len(obs) == 0:
        raise ValueError("no observations to fit")
    prep = prepare(turns, obs)
    bounds = bounds or travel_time_bounds(net)
    params = initial_params(config)
    if T_fixed is not None:
        T = np.asarray(T_fixed, dtype=float).copy()
    elif config.T0 is not None:
        T = project_T(config.T0, bounds)
    else:
        T = project_T(bounds.t_min / 0.9, bounds)
    model = JointModel(turns, T, params, SmsleDensity(config.gamma), od)
    free = params.free
    x = np.concatenate([params.b[free], T if config.fit_T else []])
    nb = int(free.sum())
    m1 = np.zeros_like(x)
    m2 = np.zeros_like(x)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    pairs = consecutive_pairs(turns)
    n = len(prep)
    W = prep.w.sum()
    batch = min(config.batch_size, n)
    order = np.random.default_rng([config.seed, 0xB47C]).permutation(n)
    pos = 0
    trace: list = []
    recent: list = []
    best_smoothed = -math.inf
    best = (params.b.copy(), T.copy(), 0)
    ref_value, ref_iter = -math.inf, 0
    diag = {"negative_z": 0, "clamped_z": 0, "trapped_walks": 0, "resampled_walks": 0}
    proposals: dict = {}
    visits = np.zeros(n, dtype=np.int64)
    stopped = "max_iters"
    start = time.perf_counter()
    for it in range(1, config.max_iters + 1):
        if pos + batch > n:
            order = np.random.default_rng([config.seed, 0xB47C, it]).permutation(n)
            pos = 0
        idx = np.sort(order[pos:pos + batch])
        pos += batch
        sub = prep.subset(idx) if batch < n else prep
        rng = np.random.default_rng([config.seed, it])
        props = None
        if config.estimator == "offline":
            sol = model.solve(np.unique(sub.d[sub.d >= 0]))
            nopath = np.flatnonzero(sub.kind == KIND_NOPATH)
            stale = [j for j in nopath if visits[idx[j]] % config.refresh == 0 or idx[j] not in proposals]
            fresh = _make_proposals(model, sol, sub, np.array(stale, dtype=np.int64), config.K, rng)
            for j in stale:
                proposals.pop(int(idx[j]), None)
            proposals.update({int(idx[j]): p for j, p in fresh.items()})
            visits[idx[nopath]] += 1
            props = {int(j): proposals[int(idx[j])] for j in nopath if int(idx[j]) in proposals}
        else:
            sol = None
        try:
            value, gb, gT, res = objective(model, sub, config.lam, config.K, rng, pairs,
                                           config.threads, props, total_weight=W, sol=sol)
        except (RuntimeError, ValueError) as exc:
            raise FitError(f"iteration {it}: {exc}", trace) from exc
        for k in diag:
            diag[k] += res.diagnostics.get(k, 0)
        if callback is not None:
            callback(it, model)
        if not math.isfinite(value) or not np.all(np.isfinite(gb)) or not np.all(np.isfinite(gT)):
            raise FitError(f"iteration {it}: objective is not finite", trace)
        recent.append(value)
        if len(recent) > config.stop_window:
            recent.pop(0)
        smoothed = float(np.mean(recent))
        row = {"iteration": it, "objective": value, "smoothed": smoothed,
               "wall_time": time.perf_counter() - start}
        # partial windows are too noisy to rank iterates; until the window
        # fills (or the run ends) the latest iterate stands in as best
        full = len(recent) == config.stop_window or it == config.max_iters
        if smoothed > best_smoothed or not full and best_smoothed == -math.inf:
            best = (model.params.b.copy(), model.T.copy(), it)
            if full:
                best_smoothed = smoothed
        row["best"] = best_smoothed if full else None
        if T_reference is not None:
            row["t_rmsle"] = _rmsle(model.T, T_reference)
        if validation is not None and val_every and it % val_every == 0:
            from .inference import evaluate
            row["val_rmsle"] = evaluate(model, validation, K=config.K, rng=config.seed).rmsle
        trace.append(row)
        if verbose and it % 10 == 0:
            print(f"it {it} obj {value:.4f} smoothed {smoothed:.4f} b {np.round(model.params.b, 3)}"
                  + (f" t_rmsle {row['t_rmsle']:.4f}" if "t_rmsle" in row else ""), flush=True)
        if it >= config.stop_window:
            if smoothed > ref_value + config.stop_delta:
                ref_value, ref_iter = smoothed, it
            elif it - ref_iter >= config.stop_window:
                stopped = "no_improvement"
                break
        # ascent step
        g = np.concatenate([gb[free], project_gradient(gT, model.T, bounds) if config.fit_T else []])
        m1 = beta1 * m1 + (1 - beta1) * g
        m2 = beta2 * m2 + (1 - beta2) * g * g
        step = config.eta * (m1 / (1 - beta1 ** it)) / (np.sqrt(m2 / (1 - beta2 ** it)) + eps)
        x = x + step
        if config.fit_T:
            x[nb:] = project_T(x[nb:], bounds)
        b = model.params.b.copy()
        b[free] = x[:nb]
        model = model.replace(params=model.params.with_b(b),
                              T=x[nb:].copy() if config.fit_T else model.T)
    b_best, T_best, best_it = best
    return FitResult(b_best, T_best, trace, diag, time.perf_counter() - start, best_it, config, stopped)


# -- hyperparameter search -----------------------------------------------------------------

@dataclass
class SearchResult:
    best: EstimatorConfig
    best_rmsle: float
    leaderboard: list = field(default_factory=list)

    def write_leaderboard(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "eta", "lambda", "gamma", "val_rmsle", "status"])
            for k, row in enumerate(self.leaderboard):
                w.writerow([k + 1, row["eta"], row["lam"], row["gamma"], row["val_rmsle"], row["status"]])


DEFAULT_RANGES = {"eta": (1e-3, 1e-1), "lam": (1e-3, 1e2), "gamma": (0.1, 10.0)}


def random_search(train, validation, network, bounds=None, budget: int = 20, ranges=None,
                  base: EstimatorConfig | None = None, seed: int = 0, include_default: bool = False,
                  threads: int = 1) -> SearchResult:
    """Sample ``budget`` configs log-uniformly in ``eta``, ``lam`` and
    ``gamma``; keep the one with the lowest validation RMSLE.

    With ``include_default`` the base config is evaluated first and counts
    toward the budget.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .inference import evaluate

    if budget < 1:
        raise ValueError("budget must be at least 1")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    base = base or EstimatorConfig()
    rng = np.random.default_rng(seed)
    configs = [base] if include_default else []
    while len(configs) < budget:
        draw = {k: float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) for k, (lo, hi) in ranges.items()}
        configs.append(replace(base, **draw))
    turns = network if isinstance(network, TurnGraph) else project_turns(network)

    def run(cfg):
        try:
            res = fit(train, turns, bounds, cfg)
            model = JointModel(turns, res.T, res.params, SmsleDensity(cfg.gamma))
            score = evaluate(model, validation, K=cfg.K, rng=seed).rmsle
            return {"eta": cfg.eta, "lam": cfg.lam, "gamma": cfg.gamma, "val_rmsle": score,
                    "status": "ok", "config": cfg}
        except Exception as exc:  # noqa: BLE001 -- a failed run is a leaderboard entry
            return {"eta": cfg.eta, "lam": cfg.lam, "gamma": cfg.gamma, "val_rmsle": math.inf,
                    "status": f"failed: {exc}", "config": cfg}

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(run, configs))
    else:
        rows = [run(c) for c in configs]
    ok = [r for r in rows if r["status"] == "ok" and math.isfinite(r["val_rmsle"])]
    if not ok:
        raise RuntimeError("all search runs failed")
    rows.sort(key=lambda r: (r["val_rmsle"], configs.index(r["config"])))
    return SearchResult(rows[0]["config"], rows[0]["val_rmsle"], rows)


# -- iterative counterexample ------------------------------------------------------------------

TWO_ARC_T2 = 1.0
TWO_ARC_OBSERVED = 2.0


def two_arc_p(x):
    """Probability of the variable arc when the other arc takes one unit."""
    return expit(TWO_ARC_T2 - np.asarray(x, dtype=float))


def two_arc_expected_msle(x, p=None, t=TWO_ARC_OBSERVED):
    """Expected MSLE of the observation when arc 1 takes ``x`` and is chosen
    with probability ``p`` (default: the model's own probability)."""
    p = two_arc_p(x) if p is None else p
    return p * np.log(t / x) ** 2 + (1 - p) * np.log(t / TWO_ARC_T2) ** 2


def naive_alternating_fit(variant: str, iters: int = 10, x0: float = 1.0) -> np.ndarray:
    """Alternate between the choice probability and the travel time of arc 1.

    ``expected_time`` sets ``x`` so the expected time matches the
    observation (``x = 1 + 1/p``); ``expected_loss`` minimizes the expected
    MSLE over ``x`` with ``p`` held fixed. Returns ``x`` for each iteration,
    starting with ``x0``; a non-finite update ends the trace with ``inf``.
    """
    x = float(x0)
    xs = [x]
    for _ in range(iters):
        p = float(two_arc_p(x))
        if variant == "expected_time":
            x = math.inf if p == 0 else (TWO_ARC_OBSERVED - (1 - p) * TWO_ARC_T2) / p
        elif variant == "expected_loss":
            x = float(optimize.minimize_scalar(lambda z: float(two_arc_expected_msle(z, p)),
                                               bounds=(1e-6, 1e6), method="bounded",
                                               options={"xatol": 1e-12}).x)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        xs.append(x)
        if not math.isfinite(x):
            break
    return np.array(xs)


def joint_two_arc_minimum(lo: float = 0.5, hi: float = 5.0, n: int = 200_001) -> tuple[float, float]:
    """Minimize the expected MSLE with ``p`` depending on ``x`` (1-D scan,
    then bounded refinement). Returns ``(x, loss)``."""
    grid = np.linspace(lo, hi, n)
    k = int(np.argmin(two_arc_expected_msle(grid)))
    step = grid[1] - grid[0]
    res = optimize.minimize_scalar(lambda z: float(two_arc_expected_msle(z)),
                                   bounds=(grid[k] - step, grid[k] + step), method="bounded",
                                   options={"xatol": 1e-12})
    return float(res.x), float(res.fun)
