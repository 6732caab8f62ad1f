"""Point metrics and sample-based probabilistic scores (quantile CRPS, MIS)."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError

CRPS_QUANTILES = np.round(np.arange(1, 20) * 0.05, 10)
MAPE_THRESHOLD = 1.0


def _check(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def point_metrics(pred, truth, mape_threshold=MAPE_THRESHOLD):
    """MAE, RMSE and MAPE (percent, over cells with ``truth >= mape_threshold``)."""
    pred, truth = _check(pred, truth)
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    mask = truth >= mape_threshold
    mape = float(np.mean(np.abs(err[mask]) / truth[mask]) * 100.0) if mask.any() else float("nan")
    return mae, rmse, mape


def _samples(samples, truth):
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ParameterError(f"need at least 2 samples, got {samples.shape[0]}")
    if samples.shape[1:] != truth.shape:
        raise DimensionError(f"samples {samples.shape} do not match truth {truth.shape}")
    return samples, truth


def pinball(q, z, y):
    """Quantile loss of prediction ``q``-quantile ``y`` against outcome ``z``."""
    diff = z - y
    return np.maximum(q * diff, (q - 1.0) * diff)


def crps_quantile(samples, truth, normalize=True, quantiles=CRPS_QUANTILES):
    """Average pinball loss over quantiles 0.05..0.95 of the empirical sample distribution.

    Samples lie on axis 0. With ``normalize`` the cell mean is divided by the
    mean absolute truth, giving a scale-free score.
    """
    samples, truth = _samples(samples, truth)
    qs = np.quantile(samples, quantiles, axis=0)
    losses = np.stack([pinball(q, truth, qs[i]) for i, q in enumerate(quantiles)])
    score = float(losses.mean())
    if normalize:
        denom = float(np.mean(np.abs(truth)))
        return score / denom if denom > 0 else float("nan")
    return score


def interval_bounds(samples, rho=0.05):
    lower, upper = np.percentile(samples, [50.0 * rho, 100.0 - 50.0 * rho], axis=0)
    return lower, upper


def mis(samples, truth, rho=0.05):
    """Mean interval score of the empirical ``1 - rho`` central interval."""
    samples, truth = _samples(samples, truth)
    lower, upper = interval_bounds(samples, rho)
    return float(np.mean(interval_score(lower, upper, truth, rho)))


def interval_score(lower, upper, z, rho=0.05):
    lower, upper, z = (np.asarray(a, dtype=np.float64) for a in (lower, upper, z))
    return (
        (upper - lower)
        + (2.0 / rho) * (z - upper) * (z > upper)
        + (2.0 / rho) * (lower - z) * (z < lower)
    )


@dataclass
class EvalReport:
    mae: float
    rmse: float
    mape: float
    crps: float
    crps_raw: float
    mis: float
    mean_predictor_mae: float = float("nan")
    horizon: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    SCALARS = ("mae", "rmse", "mape", "crps", "crps_raw", "mis", "mean_predictor_mae")

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))

    def csv_row(self):
        return {k: getattr(self, k) for k in self.SCALARS}

    def to_csv(self, path):
        row = self.csv_row()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: repr(float(v)) for k, v in row.items()})


def evaluate(samples, mean, truth, mean_predictor=None, rho=0.05, mape_threshold=MAPE_THRESHOLD):
    """Score a sample set ``(M, W, T, N)`` and its point forecast ``(W, T, N)``.

    The per-horizon breakdown slices axis 1 of ``mean``/``truth``.
    """
    mae, rmse, mape = point_metrics(mean, truth, mape_threshold)
    report = EvalReport(
        mae=mae,
        rmse=rmse,
        mape=mape,
        crps=crps_quantile(samples, truth),
        crps_raw=crps_quantile(samples, truth, normalize=False),
        mis=mis(samples, truth, rho),
        notes={"crps_normalization": "mean pinball loss / mean |truth|", "mape_threshold": mape_threshold},
    )
    if mean_predictor is not None:
        report.mean_predictor_mae = point_metrics(mean_predictor, truth, mape_threshold)[0]
    per = {k: [] for k in ("mae", "rmse", "mape", "crps", "mis")}
    for h in range(truth.shape[1]):
        m, r, p = point_metrics(mean[:, h], truth[:, h], mape_threshold)
        per["mae"].append(m)
        per["rmse"].append(r)
        per["mape"].append(p)
        per["crps"].append(crps_quantile(samples[:, :, h], truth[:, h]))
        per["mis"].append(mis(samples[:, :, h], truth[:, h], rho))
    report.horizon = per
    return report
