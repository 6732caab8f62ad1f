"""Impedance evolution network.

Historical impedance is encoded per cell, extrapolated to the horizon with
multi-head temporal attention, and decoded to one scalar per segment and
time step. Pairwise differences of the decoded values, masked by road
connectivity, form the dynamic impedance graph.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .errors import ConfigError, DimensionError
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class EvolutionNetConfig:
    hidden_dim: int = 48
    heads: int = 12
    tau: int = 12
    horizon: int = 12

    def __post_init__(self):
        for field in ("hidden_dim", "heads", "tau", "horizon"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")
        if self.hidden_dim % self.heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}"
            )

    @property
    def head_dim(self):
        return self.hidden_dim // self.heads


@dataclass
class ImpedanceGraph:
    """Time-indexed edge weights ``(B, tau+T, N, N)`` and the boolean road mask."""

    weights: Tensor
    mask: np.ndarray

    def horizon_slice(self, horizon):
        return self.weights[:, -horizon:]

    def to_csv(self, path, batch_index=0):
        w = self.weights.data[batch_index]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "a", "b", "weight"])
            for t, a, b in zip(*np.nonzero(w)):
                out.writerow([t, a, b, repr(float(w[t, a, b]))])


def impedance_loss(r_true, r_pred):
    """Mean squared difference between true and predicted future impedance."""
    r_true, r_pred = tk.as_tensor(r_true), tk.as_tensor(r_pred)
    if r_true.shape != r_pred.shape:
        raise DimensionError(f"impedance_loss shape mismatch: {r_true.shape} vs {r_pred.shape}")
    diff = r_true - r_pred
    return (diff * diff).mean()


class EvolutionNet:
    def __init__(self, cfg: EvolutionNetConfig, rng, prefix="evo."):
        self.cfg = cfg
        self.prefix = prefix
        f, t = cfg.hidden_dim, cfg.horizon
        p = ParamStore()
        p.add(prefix + "enc_w", tk.glorot(rng, 1, f, (1, f)))
        p.add(prefix + "enc_b", np.zeros(f))
        p.add(prefix + "queries", rng.normal(0.0, 1.0, (t, f)))
        for name in ("wq", "wk", "wv", "wo"):
            p.add(prefix + name, tk.glorot(rng, f, f, (f, f)))
        p.add(prefix + "bo", np.zeros(f))
        p.add(prefix + "dec_w", tk.glorot(rng, f, 1, (f, 1)))
        p.add(prefix + "dec_b", np.zeros(1))
        self.params = p

    def _p(self, name):
        return self.params[self.prefix + name]

    def encode(self, r_hist):
        """``(B, tau, N, 1)`` impedance to ``(B, tau, N, F)`` hidden states."""
        return tk.matmul(r_hist, self._p("enc_w")) + self._p("enc_b")

    def evolve(self, hidden, return_attention=False, logit_shift=0.0):
        """Attend from one learned query per future step over the history.

        ``hidden`` is ``(B, tau, N, F)``; the result is ``(B, T, N, F)``.
        """
        cfg = self.cfg
        b, tau, n, f = hidden.shape
        if f != cfg.hidden_dim:
            raise DimensionError(f"hidden width {f} != configured {cfg.hidden_dim}")
        h, d = cfg.heads, cfg.head_dim
        q = tk.matmul(self._p("queries"), self._p("wq")).reshape(cfg.horizon, h, d)
        k = tk.matmul(hidden, self._p("wk")).reshape(b, tau, n, h, d)
        v = tk.matmul(hidden, self._p("wv")).reshape(b, tau, n, h, d)
        scores = tk.einsum("thd,bsnhd->bnhts", q, k) * (1.0 / np.sqrt(d))
        att = tk.softmax_rows(scores, shift=logit_shift)
        mixed = tk.einsum("bnhts,bsnhd->btnhd", att, v).reshape(b, cfg.horizon, n, f)
        out = tk.matmul(mixed, self._p("wo")) + self._p("bo")
        if return_attention:
            return out, att
        return out

    def decode_values(self, hidden):
        """Scalar impedance per cell: ``(B, L, N, F) -> (B, L, N)``."""
        out = tk.matmul(hidden, self._p("dec_w")) + self._p("dec_b")
        b, steps, n, _ = out.shape
        return out.reshape(b, steps, n)

    def build_graph(self, r_full, mask):
        """Edge weight ``-(FC(R_a) - FC(R_b))`` on connected pairs, zero elsewhere."""
        mask = np.asarray(mask, dtype=bool)
        values = self.decode_values(r_full)
        b, steps, n = values.shape
        if mask.shape != (n, n):
            raise DimensionError(f"mask shape {mask.shape} does not match {n} segments")
        diff = values.reshape(b, steps, n, 1) - values.reshape(b, steps, 1, n)
        return ImpedanceGraph(-(diff * mask.astype(np.float64)), mask), values

    def forward(self, r_hist, mask):
        """Full pass from ``(B, tau, N)`` historical impedance.

        Returns the graph over all ``tau + T`` steps and the predicted future
        impedance ``(B, T, N)``.
        """
        b, tau, n = r_hist.shape
        hidden = self.encode(tk.as_tensor(r_hist).reshape(b, tau, n, 1))
        future = self.evolve(hidden)
        full = tk.concat([hidden, future], axis=1)
        graph, values = self.build_graph(full, mask)
        return graph, values[:, tau:]
