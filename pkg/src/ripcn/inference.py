"""PC-guided sampling, calibration of the extension coefficients, and summaries."""

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .errors import DataError, ParameterError


@dataclass
class SampleCoefficients:
    t: np.ndarray
    t_max: float = 2.0
    tol: float = 1e-3

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if np.any(np.abs(self.t) > self.t_max + 1e-12):
            raise ParameterError(f"|t| must not exceed {self.t_max}, got {self.t}")

    @classmethod
    def zeros(cls, k, t_max=2.0, tol=1e-3):
        return cls(np.zeros(k), t_max, tol)


@dataclass
class Predictions:
    """Frozen-model outputs in flow units.

    ``mean`` is ``(W, T, N)``, ``components`` ``(W, K, T, N)`` unit fields and
    ``sigma`` ``(W, K)`` standard deviations along them.
    """

    mean: np.ndarray
    components: np.ndarray
    sigma: np.ndarray

    @property
    def K(self):
        return self.components.shape[1]

    def take(self, idx):
        return Predictions(self.mean[idx], self.components[idx], self.sigma[idx])


def predict(model, windows, chunk=256):
    """Run a frozen model over ``windows`` and convert the outputs to flow units."""
    means, comps, sigmas = [], [], []
    scale = model.normalizer.std
    with tk.no_grad():
        for s in range(0, len(windows), chunk):
            out = model.forward(windows.hist[s : s + chunk], strict=True)
            means.append(model.normalizer.invert(out.mean_norm))
            comps.append(out.pcs.components.data)
            sigmas.append(np.sqrt(out.pcs.variances) * scale)
    if not means:
        raise DataError("no windows to predict")
    return Predictions(np.concatenate(means), np.concatenate(comps), np.concatenate(sigmas))


def _offsets(pred, t):
    """``t_k sigma_k w_k`` for every window: ``(W, K, T, N)``."""
    return np.asarray(t)[None, :, None, None] * pred.sigma[:, :, None, None] * pred.components


def corrected_mean(pred, t):
    """Mean of the K paper-mode members: ``X^ + (1/K) sum_k t_k sigma_k w_k``."""
    return pred.mean + _offsets(pred, t).mean(axis=1)


def build_samples(pred, t, mode="paper", m=50, seed=0):
    """Extend the mean along the predicted components.

    ``paper``: the K members ``X^ + t_k sigma_k w_k``; result ``(K, W, T, N)``.
    ``gaussian``: ``m`` members ``c + sum_k eps_{m,k} sigma_k w_k`` around the
    paper-mode mean ``c`` with antithetic standard-normal ``eps``; result
    ``(m, W, T, N)``.
    """
    t = t.t if isinstance(t, SampleCoefficients) else np.asarray(t, dtype=np.float64)
    if mode == "paper":
        return np.moveaxis(pred.mean[:, None] + _offsets(pred, t), 1, 0)
    if mode != "gaussian":
        raise ParameterError(f"unknown sampling mode {mode!r}")
    if m < 2:
        raise ParameterError(f"gaussian mode needs at least 2 members, got {m}")
    w = pred.mean.shape[0]
    rng = np.random.default_rng(seed)
    half = rng.standard_normal((m // 2, w, pred.K))
    eps = np.concatenate([half, -half] + ([np.zeros((1, w, pred.K))] if m % 2 else []))
    spread = np.einsum("mwk,wk,wktn->mwtn", eps, pred.sigma, pred.components)
    return corrected_mean(pred, t)[None] + spread


def _mae(a, b):
    return float(np.mean(np.abs(a - b)))


def calibrate_t(pred, truth, t_max=2.0, tol=1e-3):
    """Coordinate-wise bisection of each ``t_k`` on validation sample-mean MAE.

    Components are visited in order 1..K starting from ``t = 0``. The MAE is
    convex in each coordinate, so the bracket ``[-t_max, t_max]`` is halved
    toward the side where a pair of probes around the midpoint is lower. A
    coordinate update is kept only if it does not increase the MAE.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.size == 0 or len(pred.mean) == 0:
        raise DataError("validation split is empty")
    k = pred.K
    t = np.zeros(k)
    probe = tol / 4.0

    def objective(tk_value, j):
        trial = t.copy()
        trial[j] = tk_value
        return _mae(corrected_mean(pred, trial), truth)

    for j in range(k):
        lo, hi = -t_max, t_max
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if objective(mid + probe, j) < objective(mid - probe, j):
                lo = max(lo, mid - probe)
            else:
                hi = min(hi, mid + probe)
        cand = float(np.clip(0.5 * (lo + hi), -t_max, t_max))
        if objective(cand, j) <= objective(t[j], j):
            t[j] = cand
    return SampleCoefficients(t, t_max, tol)


@dataclass
class ForecastDistribution:
    mean: np.ndarray
    samples: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    coverage: float = 0.95

    def to_csv(self, path, truth=None):
        """Rows ``window_id,t,segment,mean,std,lower,upper,truth`` (windows on axis 0)."""
        mean = self.mean if self.mean.ndim == 3 else self.mean[None]
        std, lo, up = (a if a.ndim == 3 else a[None] for a in (self.std, self.lower, self.upper))
        tr = None if truth is None else (truth if truth.ndim == 3 else truth[None])
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["window_id", "t", "segment", "mean", "std", "lower", "upper", "truth"])
            for w, t, n in np.ndindex(mean.shape):
                out.writerow(
                    [w, t, n]
                    + [repr(float(a[w, t, n])) for a in (mean, std, lo, up)]
                    + ["" if tr is None else repr(float(tr[w, t, n]))]
                )


def summarize(samples, coverage=0.95):
    """Cellwise mean, population std and empirical central interval of the samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ParameterError(f"need at least 2 samples, got {samples.shape[0]}")
    if not 0 < coverage <= 1:
        raise ParameterError(f"coverage must lie in (0, 1], got {coverage}")
    tail = 50.0 * (1.0 - coverage)
    lower, upper = np.percentile(samples, [tail, 100.0 - tail], axis=0)
    return ForecastDistribution(samples.mean(axis=0), samples, samples.std(axis=0), lower, upper, coverage)
