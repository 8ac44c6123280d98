"""Observation files, endpoint matching, trip filters, simulation and splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mixture import ObservationError, ODDistributions, Observation
from .network import Network, TurnGraph, project_turns, shortest_distances
from .route_choice import ChoiceParams, TrappedWalkError, sample_paths, solve_model

FORMAT_VERSION = "routetime-observations/1"
MIN_TRIP_MIN = 0.5  # 30 s
MAX_TRIP_MIN = 180.0  # 3 h
MIN_SPEED = 1.0  # m/s


class FormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class ObservationSet:
    observations: list
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    @property
    def od(self) -> ODDistributions:
        return ODDistributions.from_observations(self.observations)

    def counts(self) -> dict:
        out = {}
        for ob in self.observations:
            out[ob.kind] = out.get(ob.kind, 0) + 1
        return out

    def _derive(self, obs, **notes) -> "ObservationSet":
        return ObservationSet(list(obs), {**self.manifest, **notes})

    def without_paths(self) -> "ObservationSet":
        return self._derive((ob.without_path() for ob in self.observations), paths="dropped")

    def without_times(self) -> "ObservationSet":
        return self._derive((ob.without_time() for ob in self.observations), times="dropped")


# -- file format ----------------------------------------------------------------------------

def format_observation(ob: Observation) -> str:
    parts = [f"o={ob.o}"]
    if ob.d is not None:
        parts.append(f"d={ob.d}")
    if ob.t is not None:
        parts.append(f"t={float(ob.t)!r}")
    if ob.r is not None:
        parts.append("r=" + ";".join(str(v) for v in ob.r))
    if ob.weight != 1.0:
        parts.append(f"w={float(ob.weight)!r}")
    return ",".join(parts)


def parse_observation(text: str, line: int = 0) -> Observation:
    fields_ = {}
    for part in text.strip().split(","):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in ("o", "d", "t", "r", "w") or key in fields_:
            raise FormatError(line, f"bad field {part!r}")
        fields_[key] = value.strip()
    if "o" not in fields_:
        raise FormatError(line, "missing origin")
    try:
        return Observation(
            o=int(fields_["o"]),
            d=int(fields_["d"]) if "d" in fields_ else None,
            t=float(fields_["t"]) if "t" in fields_ else None,
            r=tuple(int(v) for v in fields_["r"].split(";")) if "r" in fields_ else None,
            weight=float(fields_.get("w", 1.0)),
        )
    except (ValueError, ObservationError) as exc:
        raise FormatError(line, str(exc)) from None


def save_observations(path, obs: ObservationSet | Sequence[Observation], manifest: dict | None = None) -> None:
    if isinstance(obs, ObservationSet):
        manifest = {**obs.manifest, **(manifest or {})}
        obs = obs.observations
    manifest = {"format": FORMAT_VERSION, **(manifest or {})}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in manifest.items():
            fh.write(f"# {k}={json.dumps(v, sort_keys=True)}\n")
        for ob in obs:
            fh.write(format_observation(ob) + "\n")


def load_observations(path, format: str = "kv") -> ObservationSet:
    """Read a key=value observation file; ``#`` lines carry the manifest."""
    if format != "kv":
        raise ValueError(f"unsupported observation format {format!r}")
    manifest, obs = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    try:
                        manifest[key] = json.loads(value)
                    except json.JSONDecodeError:
                        manifest[key] = value
                continue
            obs.append(parse_observation(line, lineno))
    if manifest.get("format", FORMAT_VERSION) != FORMAT_VERSION:
        raise FormatError(1, f"unknown format {manifest['format']!r}")
    return ObservationSet(obs, manifest)


# -- endpoint matching ---------------------------------------------------------------------

def match_endpoints(points, network: Network, radius: float = 100.0):
    """Nearest node within ``radius`` meters; ties go to the lowest id.

    A single ``(x, y)`` gives a node id or None; an ``(N, 2)`` array gives an
    integer array with -1 for unmatched points.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    xy = np.column_stack([network.x, network.y])
    tree = cKDTree(xy)
    out = np.full(len(pts), -1, dtype=np.int64)
    for k, cand in enumerate(tree.query_ball_point(pts, radius)):
        if cand:
            cand = np.array(sorted(cand))
            dist = np.hypot(*(xy[cand] - pts[k]).T)
            out[k] = cand[np.argmin(dist)]  # argmin keeps the first (lowest id) tie
    if single:
        return None if out[0] < 0 else int(out[0])
    return out


# -- filtering ----------------------------------------------------------------------------

def filter_trips(obs: ObservationSet, network: Network, T_reference=None,
                 v_city_max: float | None = None) -> ObservationSet:
    """Drop implausible trips by duration and by average speed along the
    shortest path under ``T_reference`` (default free-flow times).

    Observations without a time pass both rules; those without a destination
    pass the speed rule.
    """
    T_ref = network.free_flow() if T_reference is None else np.asarray(T_reference, dtype=float)
    vmax = float(network.speed_max.max()) if v_city_max is None else float(v_city_max)
    rules = list(obs.manifest.get("filters", []))
    items = list(obs.observations)

    before = len(items)
    items = [ob for ob in items if ob.t is None or MIN_TRIP_MIN <= ob.t <= MAX_TRIP_MIN]
    rules.append({"rule": f"duration in [{MIN_TRIP_MIN}, {MAX_TRIP_MIN}] min", "before": before,
                  "after": len(items)})

    before = len(items)
    timed = [ob for ob in items if ob.t is not None and ob.d is not None]
    keep = set(range(len(items)))
    if timed:
        origins = sorted({ob.o for ob in timed})
        _, meters = shortest_distances(network, T_ref, origins)
        row = {o: k for k, o in enumerate(origins)}
        for k, ob in enumerate(items):
            if ob.t is None or ob.d is None:
                continue
            speed = meters[row[ob.o], ob.d] / (ob.t * 60.0)
            if not (MIN_SPEED <= speed <= vmax):
                keep.discard(k)
    items = [ob for k, ob in enumerate(items) if k in keep]
    rules.append({"rule": f"shortest-path speed in [{MIN_SPEED}, {vmax!r}] m/s", "before": before,
                  "after": len(items)})
    return ObservationSet(items, {**obs.manifest, "filters": rules})


# -- simulation ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationSpec:
    """Synthetic trips from the choice model at known ``(b_true, T_true)``.

    ``b_true`` holds the travel-time, left-turn and u-turn weights.
    ``noise=(mu, sigma)`` parameterizes the multiplicative log-normal error:
    of the underlying normal when ``noise_kind="normal"``, of the
    multiplier itself when ``"moments"``. ``n_trips=None`` simulates every
    ordered pair; otherwise ``n_trips / trips_per_od`` distinct pairs are
    drawn uniformly.
    """

    network: Network
    T_true: np.ndarray
    b_true: tuple = (-2.0, -2.0, -5.0)
    trips_per_od: int = 5
    noise: tuple = (0.1, math.sqrt(0.1))
    noise_kind: str = "normal"
    n_trips: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.b_true)) or len(self.b_true) != 3:
            raise ValueError("b_true must be three finite weights")
        if self.trips_per_od < 1:
            raise ValueError("trips_per_od must be at least 1")
        if self.noise_kind not in ("normal", "moments"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.noise[1] < 0 or (self.noise_kind == "moments" and self.noise[0] <= 0):
            raise ValueError("invalid noise parameters")

    @property
    def params(self) -> ChoiceParams:
        tt, left, u = self.b_true
        return ChoiceParams.synthetic(tt, left, u)

    def lognormal(self) -> tuple[float, float]:
        """(mu, sigma) of the underlying normal."""
        a, b = self.noise
        if self.noise_kind == "normal":
            return float(a), float(b)
        s2 = math.log1p((b / a) ** 2)
        return math.log(a) - s2 / 2, math.sqrt(s2)


def _od_pairs(n_nodes: int, n_pairs: int | None, rng) -> np.ndarray:
    o, d = np.divmod(np.arange(n_nodes * n_nodes), n_nodes)
    keep = o != d
    pairs = np.column_stack([o[keep], d[keep]])
    if n_pairs is None or n_pairs >= len(pairs):
        return pairs
    pick = np.sort(rng.choice(len(pairs), size=n_pairs, replace=False))
    return pairs[pick]


def simulate_trips(spec: SimulationSpec, turns: TurnGraph | None = None) -> ObservationSet:
    net = spec.network
    turns = turns if turns is not None else project_turns(net)
    rng = np.random.default_rng(spec.seed)
    n_pairs = None if spec.n_trips is None else max(1, spec.n_trips // spec.trips_per_od)
    pairs = _od_pairs(net.n_nodes, n_pairs, rng)
    sol = solve_model(turns, spec.T_true, spec.params, np.unique(pairs[:, 1]))
    origins = np.repeat(pairs[:, 0], spec.trips_per_od)
    dests = np.repeat(pairs[:, 1], spec.trips_per_od)
    pb = sample_paths(sol, origins, dests, rng)
    if not pb.ok.all():
        bad = int(np.flatnonzero(~pb.ok)[0])
        raise TrappedWalkError(f"walks from {origins[bad]} to {dests[bad]} exceeded the step limit "
                               f"after resampling ({int((~pb.ok).sum())} walks affected)")
    mu, sigma = spec.lognormal()
    mult = np.exp(mu + sigma * rng.standard_normal(len(origins)))
    T = np.asarray(spec.T_true, dtype=float)
    obs = []
    for k, arcs in enumerate(pb.paths()):
        that = float(T[arcs].sum())
        obs.append(Observation(int(origins[k]), int(dests[k]), that * float(mult[k]),
                               tuple(net.nodes_of_path(arcs))))
    manifest = {"source": "simulation", "seed": spec.seed, "b_true": list(map(float, spec.b_true)),
                "trips_per_od": spec.trips_per_od, "noise_kind": spec.noise_kind,
                "noise_mu": mu, "noise_sigma": sigma, "n_pairs": int(len(pairs))}
    return ObservationSet(obs, manifest)


# -- splitting ----------------------------------------------------------------------------

def split(obs: ObservationSet | Sequence[Observation], fractions: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple:
    """Seeded shuffle into consecutive parts of the given fractions."""
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be nonnegative and sum to 1")
    items = obs.observations if isinstance(obs, ObservationSet) else list(obs)
    manifest = obs.manifest if isinstance(obs, ObservationSet) else {}
    n = len(items)
    perm = np.random.default_rng(seed).permutation(n)
    edges = np.rint(np.cumsum(fr) * n).astype(int)
    edges[-1] = n
    parts, start = [], 0
    names = ("train", "val", "test") if len(fr) == 3 else tuple(f"part{k}" for k in range(len(fr)))
    for name, end in zip(names, edges):
        idx = perm[start:end]
        parts.append(ObservationSet([items[i] for i in idx], {**manifest, "split": name, "split_seed": seed}))
        start = end
    return tuple(parts)
