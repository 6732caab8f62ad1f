"""PCA losses, the composite objective, Adam, and the training loop."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .errors import DataError, TrainingError
from .evolution import impedance_loss
from .tensor import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _projections(pcs, x):
    x = tk.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    b, t, n = x.shape
    return (pcs.components * x.reshape(b, 1, t, n)).sum(axis=(2, 3))


def directional_loss(pcs, x):
    """``-sum_k <w_k, X>_F^2`` averaged over the batch."""
    proj = _projections(pcs, x)
    return -(proj * proj).sum(axis=1).mean()


def variance_loss(pcs, x):
    """``sum_k (<w_k, X>_F^2 - ||w~_k||_F^2)^2`` averaged over the batch."""
    proj = _projections(pcs, x)
    gap = proj * proj - pcs.raw_norms
    return (gap * gap).sum(axis=1).mean()


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    start_epoch: int = 20
    end_epoch: int = 50

    def lambda2(self, epoch):
        if self.end_epoch <= self.start_epoch:
            return 1.0 if epoch >= self.end_epoch else 0.0
        return float(np.clip((epoch - self.start_epoch) / (self.end_epoch - self.start_epoch), 0.0, 1.0))


def total_loss(l_r, l_d, l_v, weights, epoch):
    return weights.lambda1 * l_r + weights.lambda2(epoch) * (l_d + l_v)


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, lr=1e-4, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params):
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def arrays(self):
        out = {"adam.t": np.array(float(self.t))}
        for name in self.m:
            out["adam.m." + name] = self.m[name]
            out["adam.v." + name] = self.v[name]
        return out

    def load_arrays(self, arrays):
        self.t = int(arrays["adam.t"])
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


def adam_step(params, state, lr=1e-4):
    """One Adam update from the ``grad`` buffers of ``params``; ``state`` is an ``Adam``."""
    state.lr = lr
    state.step(params)
    return params


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 12
    max_epochs: int = 100
    min_epochs: int = 50
    patience: int = 10
    weights: LossWeights = field(default_factory=LossWeights)


HISTORY_COLUMNS = ("epoch", "l_r", "l_d", "l_v", "lambda2", "total", "val_total")


def batch_losses(model, hist, fut, weights, epoch, strict=False):
    """Forward one batch and return ``(total, l_r, l_d, l_v)`` as tensors."""
    out = model.forward(hist, fut, strict=strict)
    ab = model.ablation
    zero = tk.Tensor(0.0)
    l_r = zero if ab.no_impedance or ab.no_lr else impedance_loss(out.r_true, out.r_pred)
    l_d = zero if ab.no_ld else directional_loss(out.pcs, out.residual)
    l_v = zero if ab.no_lv else variance_loss(out.pcs, out.residual)
    return total_loss(l_r, l_d, l_v, weights, epoch), l_r, l_d, l_v


class Trainer:
    """Epoch loop with a deterministic per-epoch shuffle and early stopping.

    Epochs are numbered from 1. Patience is only counted once ``epoch`` has
    reached both ``min_epochs`` and the end of the lambda ramp, and the best
    validation parameters are restored at the end.
    """

    def __init__(self, model, splits, cfg: TrainConfig, seed=0):
        if len(splits.train) < 1:
            raise DataError("training split holds no complete window")
        self.model = model
        self.splits = splits
        self.cfg = cfg
        self.seed = seed
        self.opt = Adam(lr=cfg.lr)
        self.epoch = 0
        self.history = []
        self.best_val = np.inf
        self.best_params = None
        self.bad_epochs = 0
        self.stopped = False

    def _validate(self, epoch):
        val = self.splits.val
        if len(val) == 0:
            return float("nan")
        with tk.no_grad():
            total, *_ = batch_losses(self.model, val.hist, val.fut, self.cfg.weights, epoch)
        return total.item()

    def run_epoch(self):
        cfg, model = self.cfg, self.model
        epoch = self.epoch + 1
        train = self.splits.train
        order = np.random.default_rng([self.seed, epoch]).permutation(len(train))
        sums = np.zeros(4)
        nb = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            model.params.zero_grad()
            total, l_r, l_d, l_v = batch_losses(model, train.hist[idx], train.fut[idx], cfg.weights, epoch)
            if not np.isfinite(total.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            total.backward()
            self.opt.step(model.params)
            sums += [l_r.item(), l_d.item(), l_v.item(), total.item()]
            nb += 1
        l_r, l_d, l_v, tot = sums / max(nb, 1)
        val_total = self._validate(epoch)
        self.epoch = epoch
        row = (epoch, l_r, l_d, l_v, cfg.weights.lambda2(epoch), tot, val_total)
        self.history.append(row)
        log.info("epoch %d l_r=%.5g l_d=%.5g l_v=%.5g total=%.5g val=%.5g", *row[:4], tot, val_total)
        self._early_stop(val_total)
        return row

    def _early_stop(self, val_total):
        cfg = self.cfg
        if self.epoch < max(cfg.min_epochs, cfg.weights.end_epoch) or not np.isfinite(val_total):
            return
        if val_total < self.best_val:
            self.best_val = val_total
            self.best_params = self.model.params.arrays()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= cfg.patience:
                self.stopped = True

    def run(self, until=None):
        until = self.cfg.max_epochs if until is None else min(until, self.cfg.max_epochs)
        while self.epoch < until and not self.stopped:
            self.run_epoch()
        return self

    def finalize(self):
        if self.best_params is not None:
            self.model.params.load_arrays(self.best_params)
        return self

    # -- resumable state ---------------------------------------------------------
    def state_arrays(self):
        out = {"param." + k: v for k, v in self.model.params.arrays().items()}
        out.update(self.opt.arrays())
        out["trainer.epoch"] = np.array(float(self.epoch))
        out["trainer.best_val"] = np.array(self.best_val)
        out["trainer.bad_epochs"] = np.array(float(self.bad_epochs))
        out["trainer.stopped"] = np.array(float(self.stopped))
        out["trainer.history"] = np.array(self.history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
        if self.best_params is not None:
            out.update({"best." + k: v for k, v in self.best_params.items()})
        return out

    def save_state(self, path):
        write_checkpoint(path, self.state_arrays())

    def load_state(self, path):
        arrays = read_checkpoint(path)
        self.model.params.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
        self.opt.load_arrays(arrays)
        self.epoch = int(arrays["trainer.epoch"])
        self.best_val = float(arrays["trainer.best_val"])
        self.bad_epochs = int(arrays["trainer.bad_epochs"])
        self.stopped = bool(arrays["trainer.stopped"])
        self.history = [tuple(r) for r in arrays["trainer.history"].tolist()]
        best = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")}
        self.best_params = best or None
        return self


def train(model, splits, cfg: TrainConfig, seed=0):
    """Train to completion and return the loss history (rows of ``HISTORY_COLUMNS``)."""
    trainer = Trainer(model, splits, cfg, seed).run().finalize()
    return trainer.history
