"""Travel-time prediction under a fitted model and evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .mixture import K_SYNTHETIC, JointModel, Observation, batch_loglik, path_distribution
from .route_choice import UnreachableError, ValueSolution, sample_paths

ENUMERATION_LIMIT = 10_000
MODE_SPACING = 0.01
MODE_KNOTS = 512


@dataclass(frozen=True)
class PathTimes:
    """Predicted path times with log-weights (enumerated or sampled)."""

    times: np.ndarray
    log_w: np.ndarray
    exact: bool

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w - logsumexp(self.log_w))


def path_times(o: int, d: int, model: JointModel, K: int = K_SYNTHETIC, rng=None,
               sol: ValueSolution | None = None, enumerate_limit: int = ENUMERATION_LIMIT) -> PathTimes:
    """Path times for ``(o, d)``, exact when the path set has at most
    ``enumerate_limit`` members and sampled otherwise."""
    sol = sol if sol is not None else model.solve([d])
    if not sol.reach[model.network.n_arcs + o, sol.column(d)]:
        raise UnreachableError(f"destination {d} unreachable from {o}")
    if enumerate_limit:
        dist = path_distribution(model, o, d, sol, enumerate_limit)
        if dist is not None:
            _, logp, times = dist
            return PathTimes(times, logp, True)
    rng = np.random.default_rng(rng)
    pb = sample_paths(sol, np.full(K, o), np.full(K, d), rng, max_steps=model.max_steps)
    times = pb.counts()[pb.ok] @ np.asarray(model.T, dtype=float)
    if times.size == 0:
        raise RuntimeError(f"all {K} sampled walks from {o} to {d} were rejected")
    return PathTimes(times, np.zeros(len(times)), False)


def predict_geomean(o: int, d: int, model: JointModel, K: int = K_SYNTHETIC, rng=None, **kw) -> float:
    """``exp`` of the path-averaged expected log time (optimal under MSLE)."""
    pt = kw.pop("times", None) or path_times(o, d, model, K, rng, **kw)
    return float(np.exp(pt.weights @ model.density.expected_log(pt.times)))


def predict_mean(o: int, d: int, model: JointModel, K: int = K_SYNTHETIC, rng=None,
                 noise: bool = True, **kw) -> float:
    """Expected travel time; ``noise=False`` omits the density's mean factor."""
    pt = kw.pop("times", None) or path_times(o, d, model, K, rng, **kw)
    mult = model.density.mean_multiplier if noise else 1.0
    return float(pt.weights @ pt.times) * mult


def _mixture_logpdf(t, pt: PathTimes, density) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lw = pt.log_w - logsumexp(pt.log_w)
    return logsumexp(lw[None, :] + density.logpdf(t[:, None], pt.times[None, :]), axis=1)


def mode_grid(pt: PathTimes, density, spacing: float = MODE_SPACING, cap: int = MODE_KNOTS):
    """Knots between the ordered component modes; returns ``(grid, h)``."""
    modes = np.sort(pt.times) * density.mode_multiplier
    h = spacing * float(np.median(modes))
    lo, hi = modes[0], modes[-1]
    if hi - lo < h:
        lo, hi = lo - h, hi + h
    n = int(math.floor((hi - lo) / h)) + 1
    if n > cap:
        n = cap
        h = (hi - lo) / (cap - 1)
    grid = lo + h * np.arange(n)
    grid = grid[grid > 0]
    if grid.size == 0:
        grid = np.array([modes[0]])
    return grid, h


def predict_mode(o: int, d: int, model: JointModel, K: int = K_SYNTHETIC, rng=None,
                 spacing: float = MODE_SPACING, cap: int = MODE_KNOTS, **kw) -> float:
    """Maximizer of the path-mixture density of observed times.

    A grid with spacing at least ``spacing`` times the median component mode
    and at most ``cap`` knots locates the peak, then a bounded scalar search
    refines it within one knot on either side.
    """
    pt = kw.pop("times", None) or path_times(o, d, model, K, rng, **kw)
    return mode_of(pt, model.density, spacing, cap)


def mode_of(pt: PathTimes, density, spacing: float = MODE_SPACING, cap: int = MODE_KNOTS) -> float:
    grid, h = mode_grid(pt, density, spacing, cap)
    vals = _mixture_logpdf(grid, pt, density)
    k = int(np.argmax(vals))
    lo = max(grid[k] - h, grid[k] * 1e-3)
    res = optimize.minimize_scalar(lambda t: -float(_mixture_logpdf(t, pt, density)[0]),
                                   bounds=(lo, grid[k] + h), method="bounded",
                                   options={"xatol": 1e-10 * max(1.0, grid[k])})
    return float(res.x) if -res.fun >= vals[k] else float(grid[k])


def rmsle(predictions, observations) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(observations, dtype=float)
    if p.shape != t.shape:
        raise ValueError("predictions and observations differ in length")
    if np.any(p <= 0) or np.any(t <= 0):
        raise ValueError("RMSLE needs positive values")
    if p.size == 0:
        raise ValueError("RMSLE of an empty set")
    return float(np.sqrt(np.mean((np.log(p) - np.log(t)) ** 2)))


@dataclass(frozen=True)
class Prediction:
    o: int
    d: int
    mean: float
    geomean: float
    mode: float
    n_samples: int
    exact: bool = False

    def __post_init__(self):
        if not (self.mean > 0 and self.geomean > 0 and self.mode > 0):
            raise ValueError("predictions must be positive")

    def get(self, estimator: str) -> float:
        return getattr(self, estimator)


def _od_seed(seed, o, d):
    return [int(seed), int(o), int(d)]


def predict(pairs: Sequence[tuple], model: JointModel, K: int = K_SYNTHETIC, seed: int = 0,
            sol: ValueSolution | None = None) -> list[Prediction]:
    """Predictions for OD pairs; each pair's stream derives from ``seed`` and
    the pair, so results do not depend on order."""
    pairs = [(int(o), int(d)) for o, d in pairs]
    if not pairs:
        return []
    sol = sol if sol is not None else model.solve(sorted({d for _, d in pairs}))
    out = []
    for o, d in pairs:
        pt = path_times(o, d, model, K, _od_seed(seed, o, d), sol=sol)
        out.append(Prediction(o, d, predict_mean(o, d, model, times=pt),
                              predict_geomean(o, d, model, times=pt),
                              mode_of(pt, model.density), pt.n, pt.exact))
    return out


@dataclass
class EvaluationReport:
    records: list
    scores: dict = field(default_factory=dict)

    @property
    def rmsle(self) -> float:
        return self.scores["geomean"]

    def write_csv(self, path) -> None:
        names = list(self.scores)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["o", "d", "t_observed"] + [f"pred_{n}" for n in names] + [f"sle_{n}" for n in names])
            for rec in self.records:
                w.writerow([rec["o"], rec["d"], repr(rec["t"])] + [repr(rec[n]) for n in names]
                           + [repr(rec[f"sle_{n}"]) for n in names])
            fh.write("\n# summary\n")
            for n in names:
                fh.write(f"# rmsle_{n},{self.scores[n]!r}\n")


def evaluate(model: JointModel, observations: Sequence[Observation], K: int = K_SYNTHETIC, rng=0,
             estimators: Sequence[str] = ("geomean", "mode", "mean")) -> EvaluationReport:
    """RMSLE of each estimator over observations that carry ``d`` and ``t``."""
    obs = [ob for ob in observations if ob.d is not None and ob.t is not None]
    if not obs:
        raise ValueError("no observations with destination and time to evaluate")
    seed = rng if isinstance(rng, (int, np.integer)) else int(np.random.default_rng(rng).integers(2 ** 63))
    pairs = sorted({(ob.o, ob.d) for ob in obs})
    preds = {(p.o, p.d): p for p in predict(pairs, model, K, seed)}
    records = []
    for ob in obs:
        p = preds[(ob.o, ob.d)]
        rec = {"o": ob.o, "d": ob.d, "t": ob.t}
        for n in estimators:
            rec[n] = p.get(n)
            rec[f"sle_{n}"] = (math.log(rec[n]) - math.log(ob.t)) ** 2
        records.append(rec)
    scores = {n: rmsle([r[n] for r in records], [r["t"] for r in records]) for n in estimators}
    return EvaluationReport(records, scores)


def heldout_loglik(model: JointModel, observations: Sequence[Observation]) -> float:
    """Mean ``ln P(r | o, d)`` over observations with paths."""
    obs = [Observation(ob.o, ob.d, None, ob.r, ob.weight) for ob in observations if ob.r is not None]
    if not obs:
        raise ValueError("no path observations")
    res = batch_loglik(model, obs, K=1, grad=False)
    w = np.array([ob.weight for ob in obs])
    return float(w @ res.loglik / w.sum())
