"""Road capacity, window statistics and the variability-augmented BPR impedance."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, ParameterError


@dataclass(frozen=True)
class BprParams:
    alpha: float = 0.15
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError(f"BPR alpha/beta must be >= 0, got {self.alpha}, {self.beta}")


@dataclass(frozen=True)
class RoadFeatures:
    """Static attributes of one segment: free-flow time, capacity, window mean/std."""

    free_flow_time: float
    capacity: float
    window_mean: float
    window_std: float

    def __post_init__(self):
        if not self.capacity > 0:
            raise ParameterError(f"capacity must be > 0, got {self.capacity}")
        if not self.free_flow_time > 0:
            raise ParameterError(f"free-flow time must be > 0, got {self.free_flow_time}")
        if self.window_std < 0 or self.window_mean < 0:
            raise ParameterError("window mean/std must be non-negative")


def estimate_capacity(x_max, s_a, o_a, s_mean, o_mean):
    """Capacity from the peak flow and the speed/occupancy observed at that peak.

    C = x_max * (1 + (s_a / s_mean + o_mean / o_a) / 2). Above-average speed or
    below-average occupancy at the peak means the road had headroom left.
    """
    if not x_max > 0:
        raise DegenerateInputError(f"x_max must be > 0, got {x_max}")
    if not o_a > 0:
        raise DegenerateInputError(f"occupancy at peak must be > 0, got {o_a}")
    if not s_mean > 0:
        raise DegenerateInputError(f"mean speed must be > 0, got {s_mean}")
    return x_max * (1.0 + 0.5 * (s_a / s_mean + o_mean / o_a))


def capacity_proxy(x_max):
    """Peak observed flow used directly as capacity (flow-only datasets)."""
    if not x_max > 0:
        raise DegenerateInputError(f"x_max must be > 0, got {x_max}")
    return x_max


def window_stats(flow_window):
    """Arithmetic mean and population standard deviation of a flow window."""
    w = np.asarray(flow_window, dtype=np.float64)
    if w.shape[0] < 2:
        raise ParameterError(f"window length must be >= 2, got {w.shape[0]}")
    mu = w.mean(axis=0)
    sigma = np.sqrt(((w - mu) ** 2).mean(axis=0))
    if np.ndim(mu) == 0:
        return float(mu), float(sigma)
    return mu, sigma


def variability_factor(mu, sigma):
    """``1 + sigma/mu``, defined as 1 where the window mean is zero."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    safe = np.where(mu > 0, mu, 1.0)
    with np.errstate(over="ignore"):
        return np.where(mu > 0, 1.0 + sigma / safe, 1.0)


def impedance(x, f, p=BprParams()):
    """Travel time t_a * (1 + alpha (x/C)^beta) * (1 + sigma/mu) for one segment."""
    bpr = f.free_flow_time * (1.0 + p.alpha * (x / f.capacity) ** p.beta)
    return float(bpr * variability_factor(f.window_mean, f.window_std))


def impedance_array(flow, free_flow_time, capacity, mu, sigma, p=BprParams()):
    """Vectorised impedance; the trailing axis of ``flow`` indexes segments."""
    flow = np.asarray(flow, dtype=np.float64)
    ratio = np.maximum(flow, 0.0) / np.asarray(capacity, dtype=np.float64)
    bpr = np.asarray(free_flow_time) * (1.0 + p.alpha * ratio**p.beta)
    return bpr * variability_factor(mu, sigma)


def impedance_series(flow_window, features, p=BprParams()):
    """Apply the impedance cellwise over a ``tau x N`` window."""
    flow_window = np.asarray(flow_window, dtype=np.float64)
    if flow_window.ndim != 2 or flow_window.shape[1] != len(features):
        raise DimensionError(
            f"flow window {flow_window.shape} does not match {len(features)} feature rows"
        )
    return impedance_array(
        flow_window,
        np.array([f.free_flow_time for f in features]),
        np.array([f.capacity for f in features]),
        np.array([f.window_mean for f in features]),
        np.array([f.window_std for f in features]),
        p,
    )


@dataclass
class SegmentTable:
    """Per-segment impedance inputs for a whole network.

    Capacities and free-flow times are fixed; ``mu``/``sigma`` hold the
    training-split statistics used when window statistics are frozen.
    """

    segment_ids: list
    free_flow_time: np.ndarray
    capacity: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def n(self):
        return len(self.segment_ids)

    def features(self, mu=None, sigma=None):
        mu = self.mu if mu is None else mu
        sigma = self.sigma if sigma is None else sigma
        return [
            RoadFeatures(float(t), float(c), float(m), float(s))
            for t, c, m, s in zip(self.free_flow_time, self.capacity, mu, sigma)
        ]

    def window_impedance(self, flow, history, p=BprParams(), fixed_stats=False):
        """Impedance of ``flow`` (``... x L x N``) using statistics of ``history``.

        With ``fixed_stats`` the training-split mean/std replace per-window ones.
        """
        if fixed_stats:
            mu, sigma = self.mu, self.sigma
        else:
            history = np.asarray(history, dtype=np.float64)
            mu = history.mean(axis=-2, keepdims=True)
            sigma = np.sqrt(((history - mu) ** 2).mean(axis=-2, keepdims=True))
        return impedance_array(flow, self.free_flow_time, self.capacity, mu, sigma, p)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment_id", "t_a", "capacity", "mu", "sigma"])
            for row in zip(self.segment_ids, self.free_flow_time, self.capacity, self.mu, self.sigma):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [r["segment_id"] for r in rows],
            np.array([float(r["t_a"]) for r in rows]),
            np.array([float(r["capacity"]) for r in rows]),
            np.array([float(r["mu"]) for r in rows]),
            np.array([float(r["sigma"]) for r in rows]),
        )


def build_segment_table(flow, segment_ids, speed=None, occupancy=None, free_flow_time=None):
    """Estimate capacities and window statistics from a training-split flow block.

    Uses the speed/occupancy formula when both series are supplied and usable,
    otherwise the peak-flow proxy. ``flow`` must be the training split only.
    """
    flow = np.asarray(flow, dtype=np.float64)
    n = flow.shape[1]
    peak_idx = flow.argmax(axis=0)
    x_max = flow[peak_idx, np.arange(n)]
    capacity = np.empty(n)
    use_speed = speed is not None and occupancy is not None
    if use_speed:
        speed = np.asarray(speed, dtype=np.float64)
        occupancy = np.asarray(occupancy, dtype=np.float64)
        s_mean = speed.mean()
        o_mean = occupancy.mean()
    for a in range(n):
        if x_max[a] <= 0:
            # an all-zero training column; any positive capacity leaves impedance at t_a
            capacity[a] = 1.0
            continue
        if use_speed:
            try:
                capacity[a] = estimate_capacity(
                    x_max[a], speed[peak_idx[a], a], occupancy[peak_idx[a], a], s_mean, o_mean
                )
                continue
            except DegenerateInputError:
                pass
        capacity[a] = capacity_proxy(x_max[a])
    t_a = np.ones(n) if free_flow_time is None else np.asarray(free_flow_time, dtype=np.float64)
    mu, sigma = window_stats(flow)
    return SegmentTable(list(segment_ids), t_a, capacity, np.atleast_1d(mu), np.atleast_1d(sigma))
