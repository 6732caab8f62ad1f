"""Datasets, chronological splits, normalization, windows and the synthetic generator."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateInputError, ParameterError, ParseError


@dataclass
class TrafficDataset:
    flow: np.ndarray
    adjacency: np.ndarray
    segment_ids: list
    timestamps: list = None
    speed: np.ndarray = None
    occupancy: np.ndarray = None
    interval: str = "5min"

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        steps, n = self.flow.shape
        if self.adjacency.shape != (n, n):
            raise DataError(f"adjacency {self.adjacency.shape} does not match {n} segments")
        if np.any(np.diag(self.adjacency)):
            raise DataError("adjacency must have a zero diagonal")
        if np.any(self.flow < 0):
            raise DataError("flow must be non-negative")
        if len(self.segment_ids) != n:
            raise DataError(f"{len(self.segment_ids)} segment ids for {n} flow columns")
        for name in ("speed", "occupancy"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64)
                if value.shape != self.flow.shape:
                    raise DataError(f"{name} shape {value.shape} != flow shape {self.flow.shape}")
                setattr(self, name, value)
        if self.timestamps is None:
            self.timestamps = [str(i) for i in range(steps)]

    @property
    def steps(self):
        return self.flow.shape[0]

    @property
    def n(self):
        return self.flow.shape[1]

    def subset(self, columns):
        """Restrict to the given segment indices (used to cap N for smoke runs)."""
        columns = list(columns)
        pick = lambda a: None if a is None else a[:, columns]
        return TrafficDataset(
            self.flow[:, columns],
            self.adjacency[np.ix_(columns, columns)],
            [self.segment_ids[i] for i in columns],
            list(self.timestamps),
            pick(self.speed),
            pick(self.occupancy),
            self.interval,
        )


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.6, 0.2, 0.2)
    tau: int = 12
    horizon: int = 12
    stride: int = 1

    def __post_init__(self):
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ParameterError(f"split ratios must be three non-negative values summing to 1, got {self.ratios}")
        if self.tau < 2 or self.horizon < 1 or self.stride < 1:
            raise ParameterError("tau >= 2, horizon >= 1 and stride >= 1 are required")

    def boundaries(self, steps):
        train_end = int(math.floor(self.ratios[0] * steps + 1e-9))
        val_end = int(math.floor((self.ratios[0] + self.ratios[1]) * steps + 1e-9))
        return train_end, val_end


@dataclass
class WindowSet:
    """History/future pairs; ``starts`` are dataset indices of each window's first step."""

    hist: np.ndarray
    fut: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return len(self.starts)

    @property
    def tau(self):
        return self.hist.shape[1]

    @property
    def horizon(self):
        return self.fut.shape[1]

    def take(self, idx):
        return WindowSet(self.hist[idx], self.fut[idx], self.starts[idx])


@dataclass
class Splits:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    train_end: int
    val_end: int


def window_starts(steps, spec):
    span = spec.tau + spec.horizon
    if steps < span:
        raise DataError(f"{steps} steps cannot hold one window of {span}")
    return np.arange(0, steps - span + 1, spec.stride)


def _collect(flow, starts, spec):
    span = spec.tau + spec.horizon
    if len(starts) == 0:
        n = flow.shape[1]
        return WindowSet(np.zeros((0, spec.tau, n)), np.zeros((0, spec.horizon, n)), np.zeros(0, dtype=int))
    idx = starts[:, None] + np.arange(span)[None, :]
    block = flow[idx]
    return WindowSet(block[:, : spec.tau].copy(), block[:, spec.tau :].copy(), starts.copy())


def make_windows(dataset, spec=SplitSpec()):
    """Chronological 6:2:2 split at window level.

    A window belongs to a split only if all of its ``tau + T`` steps fall inside
    that split's time range; windows straddling a boundary are dropped.
    """
    flow = dataset.flow if isinstance(dataset, TrafficDataset) else np.asarray(dataset)
    steps = flow.shape[0]
    starts = window_starts(steps, spec)
    span = spec.tau + spec.horizon
    train_end, val_end = spec.boundaries(steps)
    ends = starts + span
    train = starts[ends <= train_end]
    val = starts[(starts >= train_end) & (ends <= val_end)]
    test = starts[starts >= val_end]
    return Splits(
        _collect(flow, train, spec), _collect(flow, val, spec), _collect(flow, test, spec), train_end, val_end
    )


@dataclass
class Normalizer:
    """Z-score with one mean and std per dataset, fitted on training data only."""

    mean: float = None
    std: float = None

    def fit(self, train_flow):
        x = np.asarray(train_flow, dtype=np.float64)
        std = float(x.std())
        if not std > 0:
            raise DegenerateInputError("training split has zero standard deviation")
        self.mean, self.std = float(x.mean()), std
        return self

    def _check(self):
        if self.mean is None:
            raise DataError("normalizer used before fit()")

    def apply(self, x):
        self._check()
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        self._check()
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}


# -- CSV ---------------------------------------------------------------------------


def _read_wide(path, expect_ids=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", path, 1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise ParseError("header needs a timestamp column and at least one segment", path, 1)
    ids = header[1:]
    if expect_ids is not None and ids != expect_ids:
        raise ParseError(f"segment columns {ids} do not match flow file {expect_ids}", path, 1)
    stamps, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", path, lineno) from None
        if any(math.isnan(v) for v in vals):
            raise ParseError("NaN cell", path, lineno)
        stamps.append(row[0].strip())
        values.append(vals)
    if not values:
        raise ParseError("no data rows", path, 2)
    return ids, stamps, np.array(values, dtype=np.float64)


def _read_edges(path, ids):
    n = len(ids)
    lookup = {s: i for i, s in enumerate(ids)}

    def resolve(token, lineno):
        token = token.strip()
        if token in lookup:
            return lookup[token]
        try:
            i = int(token)
        except ValueError:
            raise ParseError(f"unknown segment {token!r}", path, lineno) from None
        if not 0 <= i < n:
            raise ParseError(f"segment index {i} out of range for {n} segments", path, lineno)
        return i

    adj = np.zeros((n, n), dtype=bool)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    start = 1 if rows and rows[0] and rows[0][0].strip().lower() == "src" else 0
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) not in (2, 3):
            raise ParseError(f"expected src,dst[,directed], got {len(row)} fields", path, lineno)
        a, b = resolve(row[0], lineno), resolve(row[1], lineno)
        directed = True
        if len(row) == 3:
            flag = row[2].strip()
            if flag not in ("0", "1"):
                raise ParseError(f"directed flag must be 0 or 1, got {flag!r}", path, lineno)
            directed = flag == "1"
        if a == b:
            continue
        adj[a, b] = True
        if not directed:
            adj[b, a] = True
    return adj


def load_csv(flow_path, adjacency_path, speed_path=None, occupancy_path=None, interval="5min"):
    """Read a wide flow table, an edge list, and optional speed/occupancy tables."""
    ids, stamps, flow = _read_wide(flow_path)
    if np.any(flow < 0):
        raise DataError(f"{flow_path}: negative flow values")
    adj = _read_edges(adjacency_path, ids)
    extra = {}
    for key, path in (("speed", speed_path), ("occupancy", occupancy_path)):
        if path is not None:
            sids, sstamps, values = _read_wide(path, expect_ids=ids)
            if values.shape != flow.shape:
                raise DataError(f"{path}: shape {values.shape} does not match flow {flow.shape}")
            extra[key] = values
    return TrafficDataset(flow, adj, ids, stamps, interval=interval, **extra)


def _write_wide(path, ids, stamps, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + list(ids))
        for stamp, row in zip(stamps, values):
            w.writerow([stamp] + [repr(float(v)) for v in row])


def save_csv(dataset, flow_path, adjacency_path, speed_path=None, occupancy_path=None):
    _write_wide(flow_path, dataset.segment_ids, dataset.timestamps, dataset.flow)
    with open(adjacency_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "directed"])
        a = dataset.adjacency
        for i, j in zip(*np.nonzero(a)):
            if a[j, i] and j < i:
                continue
            w.writerow([i, j, 0 if a[j, i] else 1])
    if speed_path is not None and dataset.speed is not None:
        _write_wide(speed_path, dataset.segment_ids, dataset.timestamps, dataset.speed)
    if occupancy_path is not None and dataset.occupancy is not None:
        _write_wide(occupancy_path, dataset.segment_ids, dataset.timestamps, dataset.occupancy)


# -- synthetic generator ----------------------------------------------------------------


@dataclass
class SynthTruth:
    """Planted variances and orthonormal ``T x N`` fields, plus the seasonal base."""

    lambdas: np.ndarray
    components: np.ndarray
    base: np.ndarray = field(repr=False)
    block: int = 12
    noise_floor: float = 0.0

    def residual_blocks(self, flow):
        """Block-aligned ``(B, T, N)`` deviations of ``flow`` from the seasonal base."""
        dev = np.asarray(flow) - self.base
        nblocks = dev.shape[0] // self.block
        return dev[: nblocks * self.block].reshape(nblocks, self.block, dev.shape[1])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(
                {
                    "lambda": self.lambdas.tolist(),
                    "components": self.components.tolist(),
                    "block": self.block,
                    "noise_floor": self.noise_floor,
                },
                fh,
            )


def random_orthonormal_fields(rng, k, shape):
    size = int(np.prod(shape))
    q, r = np.linalg.qr(rng.standard_normal((size, k)))
    q = q * np.sign(np.diag(r))
    return q.T.reshape((k,) + tuple(shape))


def random_road_graph(rng, n, extra_edges=None):
    """Undirected ring with a few random chords."""
    adj = np.zeros((n, n), dtype=bool)
    if n > 1:
        for i in range(n):
            j = (i + 1) % n
            if i != j:
                adj[i, j] = adj[j, i] = True
    extra = n // 2 if extra_edges is None else extra_edges
    for _ in range(extra):
        i, j = rng.choice(n, size=2, replace=False) if n > 2 else (0, 0)
        if i != j:
            adj[i, j] = adj[j, i] = True
    return adj


def synth_generate(
    seed,
    n=5,
    steps=2400,
    lambdas=(9.0, 3.0, 1.0),
    period=12,
    block=12,
    noise_floor=0.05,
    persistence=0.0,
    level=60.0,
    amplitude=4.0,
    trend=0.0,
    trend_period=0,
):
    """Seasonal flows plus planted low-rank fluctuations in the joint ``T x N`` window space.

    Time is cut into consecutive blocks of ``block`` steps. Block ``b`` receives
    ``sum_k sqrt(lambda_k) xi_{b,k} w_k`` plus iid noise of std ``noise_floor``,
    where ``{w_k}`` is a random orthonormal set of ``block x n`` fields and
    ``xi_{b,k} = rho_k * xi_{b-1,k} + sqrt(1 - rho_k^2) * eta`` has unit
    variance (``persistence`` gives ``rho`` as one value or one per component).
    Windows whose future part starts on a block boundary therefore see
    residual covariance ``sum_k lambda_k w_k w_k^T``. A nonzero ``trend`` adds
    a slow per-segment drift (flow units per step) to the base, which a
    seasonal-persistence forecast lags behind by a constant amount; with
    ``trend_period > 0`` the drift resets every ``trend_period`` steps
    (a sawtooth), keeping the series stationary.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    k = len(lambdas)
    if k < 1 or k > block * n or np.any(lambdas < 0):
        raise ParameterError(f"invalid planted rank {k} for {block}x{n} windows")
    rho = np.broadcast_to(np.asarray(persistence, dtype=np.float64), (k,)).copy()
    if np.any(rho < 0) or np.any(rho >= 1):
        raise ParameterError("persistence must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    comps = random_orthonormal_fields(rng, k, (block, n))
    offsets = level * (0.6 + 0.8 * rng.random(n))
    amps = amplitude * (0.5 + rng.random(n))
    phases = 2 * np.pi * rng.random(n)
    slopes = trend * (0.5 + rng.random(n))
    t = np.arange(steps)
    base = offsets[None, :] + amps[None, :] * np.sin(2 * np.pi * t[:, None] / period + phases[None, :])
    ramp = t % trend_period if trend_period > 0 else t
    base = base + slopes[None, :] * ramp[:, None]

    nblocks = int(math.ceil(steps / block))
    xi = np.zeros((nblocks, k))
    xi[0] = rng.standard_normal(k)
    innov = np.sqrt(1.0 - rho**2)
    for b in range(1, nblocks):
        xi[b] = rho * xi[b - 1] + innov * rng.standard_normal(k)
    noise = np.einsum("bk,k,ktn->btn", xi, np.sqrt(lambdas), comps).reshape(nblocks * block, n)
    noise = noise[:steps] + noise_floor * rng.standard_normal((steps, n))
    flow = np.maximum(base + noise, 0.0)

    free_speed = 60.0 + 10.0 * rng.random(n)
    ratio = flow / (offsets + 2 * amps)[None, :]
    speed = free_speed[None, :] * (1.0 - 0.4 * ratio)
    occupancy = 0.02 + 0.3 * ratio
    adj = random_road_graph(rng, n)
    ds = TrafficDataset(
        flow, adj, [f"seg_{i}" for i in range(n)], [str(i) for i in range(steps)], speed, occupancy
    )
    return ds, SynthTruth(lambdas, comps, base, block, noise_floor)
