"""Principal component network and Schmidt orthogonalization."""

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .errors import ConfigError, DegeneracyError, DimensionError, ParameterError, StateError
from .tensor import ParamStore, Tensor

DEGENERACY_TOL = 1e-10


@dataclass(frozen=True)
class PcNetConfig:
    K: int = 3
    blocks: int = 16
    hidden: int = 32
    tcn_kernel: int = 3

    def __post_init__(self):
        if self.K < 1 or self.blocks < 1:
            raise ConfigError("K and blocks must be >= 1")
        if self.hidden < 1 or self.tcn_kernel < 1:
            raise ConfigError("hidden and tcn_kernel must be >= 1")


def normalized_adjacency(adj):
    """``D^-1/2 A D^-1/2`` without self loops; isolated rows stay zero."""
    a = np.asarray(adj, dtype=np.float64)
    deg = a.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return inv[:, None] * a * inv[None, :]


# -- PC sets ---------------------------------------------------------------------


@dataclass
class PCSet:
    """Orthonormal components ``(B, K, T, N)`` with squared pre-normalization norms.

    ``raw_norms`` holds ``||w~_k||_F^2`` per window and component, which is also
    the predicted variance along ``w_k``.
    """

    components: Tensor
    raw_norms: Tensor
    fallbacks: int = 0

    @property
    def K(self):
        return self.components.shape[1]

    @property
    def variances(self):
        return self.raw_norms.data

    def gram(self):
        w = self.components.data
        flat = w.reshape(w.shape[0], w.shape[1], -1)
        return flat @ np.swapaxes(flat, 1, 2)

    def to_json(self, path, index=0, scale=1.0):
        """Write one window's PCSet; ``scale`` converts variances to flow units."""
        w = self.components.data[index]
        k, t, n = w.shape
        with open(path, "w") as fh:
            json.dump(
                {
                    "K": k,
                    "T": t,
                    "N": n,
                    "variances": (self.variances[index] * scale**2).tolist(),
                    "components": w.tolist(),
                },
                fh,
                indent=1,
            )


def _fallback_field(previous, k, shape):
    """Unit field for a degenerate slot: indicator ``e_k`` orthogonalized against ``previous``."""
    size = int(np.prod(shape))
    for j in range(size):
        e = np.zeros(size)
        e[(k + j) % size] = 1.0
        for w in previous:
            e = e - (e @ w) * w
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            return (e / norm).reshape(shape)
    raise DegeneracyError(k + 1, 0.0)


def orthogonalize(d, strict=True):
    """Classical Gram-Schmidt over the flattened ``T x N`` fields of ``d``.

    ``d`` is ``(B, K, T, N)``; a single ``(K, T, N)`` stack is treated as ``B = 1``.
    Gradients flow through every
    projection and normalization. With ``strict`` a residual norm below
    ``DEGENERACY_TOL`` raises; otherwise the slot is filled with a fixed unit
    field, its variance set to zero, and ``fallbacks`` counts the event.
    """
    d = tk.as_tensor(d)
    if d.ndim == 3:
        d = d.reshape((1,) + d.shape)
    b, K, t, n = d.shape
    ws, norms = [], []
    fallbacks = 0
    for k in range(K):
        dk = d[:, k]
        wt = dk
        for wi in ws:
            coef = (dk * wi).sum(axis=(1, 2), keepdims=True)
            wt = wt - coef * wi
        n2 = (wt * wt).sum(axis=(1, 2))
        bad = n2.data < DEGENERACY_TOL**2
        if bad.any():
            if strict:
                raise DegeneracyError(k + 1, float(np.sqrt(n2.data[bad].min())))
            fallbacks += int(bad.sum())
            fb = np.zeros((b, t, n))
            for i in np.nonzero(bad)[0]:
                prev = [w.data[i].ravel() for w in ws]
                fb[i] = _fallback_field(prev, k, (t, n))
            safe = tk.where(bad, 1.0, n2)
            wk = tk.where(bad[:, None, None], fb, wt / tk.sqrt(safe).reshape(b, 1, 1))
            n2 = tk.where(bad, 0.0, n2)
        else:
            wk = wt / tk.sqrt(n2).reshape(b, 1, 1)
        ws.append(wk)
        norms.append(n2)
    return PCSet(tk.stack(ws, axis=1), tk.stack(norms, axis=1), fallbacks)


# -- mean predictors ------------------------------------------------------------------


class SeasonalPersistence:
    """Repeat the last ``season`` history steps cyclically over the horizon."""

    kind = "persistence"

    def __init__(self, season, horizon):
        if season < 1:
            raise ParameterError(f"season must be >= 1, got {season}")
        self.season = season
        self.horizon = horizon
        self.fitted = False

    def fit(self, windows=None):
        if windows is not None and windows.tau < self.season:
            raise ParameterError(
                f"season {self.season} longer than history length {windows.tau}"
            )
        self.fitted = True
        return self

    def predict(self, x_hist):
        if not self.fitted:
            raise StateError("mean predictor used before fit()")
        x = np.asarray(x_hist.data if isinstance(x_hist, Tensor) else x_hist, dtype=np.float64)
        tau = x.shape[-2]
        if self.season > tau:
            raise ParameterError(f"season {self.season} longer than history {tau}")
        idx = tau - self.season + (np.arange(self.horizon) % self.season)
        return x[..., idx, :]

    def arrays(self):
        return {"mean.season": np.array(float(self.season))}

    def checksum(self):
        return f"persistence-{self.season}"


class LearnedMeanHead:
    """One TCN+GCN block between a per-segment ``tau -> T`` projection and a linear read-out."""

    kind = "learned"

    def __init__(self, tau, horizon, n, adjacency, hidden=16, kernel=3, seed=0):
        rng = np.random.default_rng(seed)
        self.tau, self.horizon, self.n = tau, horizon, n
        self.adj = normalized_adjacency(adjacency)
        p = ParamStore()
        p.add("mean.proj_w", np.tile(_persistence_matrix(tau, horizon), (n, 1, 1)))
        p.add("mean.proj_b", np.zeros((n, horizon)))
        p.add("mean.enc_w", tk.glorot(rng, 1, hidden, (1, hidden)))
        p.add("mean.enc_b", np.zeros(hidden))
        p.add("mean.tcn", tk.glorot(rng, kernel * hidden, hidden, (kernel, hidden, hidden)))
        p.add("mean.tcn_b", np.zeros(hidden))
        p.add("mean.g", tk.glorot(rng, hidden, hidden, (hidden, hidden)))
        p.add("mean.g_b", np.zeros(hidden))
        p.add("mean.out_w", np.zeros((hidden, 1)))
        p.add("mean.out_b", np.zeros(1))
        self.params = p
        self.fitted = False

    def forward(self, x_hist):
        p = self.params
        x = tk.as_tensor(x_hist)
        b = x.shape[0]
        base = tk.einsum("ntk,bkn->btn", p["mean.proj_w"], x) + p["mean.proj_b"].transpose(1, 0)
        h = tk.matmul(base.reshape(b, self.horizon, self.n, 1), p["mean.enc_w"]) + p["mean.enc_b"]
        ht = tk.causal_conv1d(h, p["mean.tcn"]) + p["mean.tcn_b"]
        msg = tk.einsum("an,btnf->btaf", self.adj, ht)
        h = tk.relu(tk.matmul(msg, p["mean.g"]) + p["mean.g_b"]) + h
        out = tk.matmul(h, p["mean.out_w"]) + p["mean.out_b"]
        return base + out.reshape(b, self.horizon, self.n)

    def fit(self, windows, normalizer, epochs=30, lr=3e-3, batch_size=12, seed=0):
        from .training import Adam

        x = normalizer.apply(windows.hist)
        y = normalizer.apply(windows.fut)
        opt = Adam(lr=lr)
        for epoch in range(epochs):
            order = np.random.default_rng([seed, epoch]).permutation(len(x))
            for s in range(0, len(x), batch_size):
                idx = order[s : s + batch_size]
                self.params.zero_grad()
                err = self.forward(x[idx]) - y[idx]
                (err * err).mean().backward()
                opt.step(self.params)
        self.fitted = True
        return self

    def predict(self, x_hist):
        if not self.fitted:
            raise StateError("mean predictor used before fit()")
        with tk.no_grad():
            return self.forward(x_hist).data

    def arrays(self):
        return self.params.arrays()

    def checksum(self):
        return self.params.checksum()


def _persistence_matrix(tau, horizon):
    m = np.zeros((horizon, tau))
    season = min(tau, horizon)
    for t in range(horizon):
        m[t, tau - season + t % season] = 1.0
    return m


# -- the network -----------------------------------------------------------------------


class PCNet:
    """Encoder, ``L`` ST-Graph blocks and a TCN+FC decoder producing ``K`` raw fields.

    With ``st_graph=False`` each block is replaced by a per-cell fully
    connected layer (no temporal or spatial mixing).
    """

    def __init__(self, cfg: PcNetConfig, tau, horizon, n, adjacency, rng, st_graph=True, prefix="pc."):
        self.cfg = cfg
        self.tau, self.horizon, self.n = tau, horizon, n
        self.st_graph = st_graph
        self.prefix = prefix
        adjacency = np.asarray(adjacency)
        if adjacency.shape != (n, n):
            raise DimensionError(f"adjacency {adjacency.shape} does not match {n} segments")
        self.adj_norm = normalized_adjacency(adjacency)
        f, k = cfg.hidden, cfg.tcn_kernel
        p = ParamStore()
        p.add(prefix + "proj_w", tk.glorot(rng, tau, horizon, (n, horizon, tau)))
        p.add(prefix + "proj_b", np.zeros((n, horizon)))
        p.add(prefix + "enc_w", tk.glorot(rng, 2, f, (2, f)))
        p.add(prefix + "enc_b", np.zeros(f))
        for layer in range(cfg.blocks):
            tag = f"{prefix}block{layer:02d}."
            if st_graph:
                p.add(tag + "tcn", tk.glorot(rng, k * f, f, (k, f, f)))
                p.add(tag + "tcn_b", np.zeros(f))
                p.add(tag + "g", tk.glorot(rng, 2 * f, f, (2 * f, f)))
                p.add(tag + "g_b", np.zeros(f))
            else:
                p.add(tag + "fc", tk.glorot(rng, f, f, (f, f)))
                p.add(tag + "fc_b", np.zeros(f))
        p.add(prefix + "dec_tcn", tk.glorot(rng, k * f, f, (k, f, f)))
        p.add(prefix + "dec_tcn_b", np.zeros(f))
        p.add(prefix + "dec_w", tk.glorot(rng, f, cfg.K, (f, cfg.K)))
        p.add(prefix + "dec_b", np.zeros(cfg.K))
        self.params = p

    def _p(self, name):
        return self.params[self.prefix + name]

    def encode_concat(self, x_hist, x_mean):
        """Project history onto the horizon per segment, stack with the mean, encode.

        ``x_hist`` is ``(B, tau, N)``, ``x_mean`` is ``(B, T, N)``; returns ``(B, T, N, F')``.
        """
        x_hist, x_mean = tk.as_tensor(x_hist), tk.as_tensor(x_mean)
        b = x_hist.shape[0]
        if x_hist.shape[1:] != (self.tau, self.n) or x_mean.shape[1:] != (self.horizon, self.n):
            raise DimensionError(
                f"inputs {x_hist.shape}, {x_mean.shape} do not match tau={self.tau}, "
                f"T={self.horizon}, N={self.n}"
            )
        hist_t = tk.einsum("ntk,bkn->btn", self._p("proj_w"), x_hist) + self._p("proj_b").transpose(1, 0)
        feats = tk.stack([hist_t, x_mean], axis=-1)
        return tk.matmul(feats, self._p("enc_w")) + self._p("enc_b")

    def st_graph_block(self, h, layer, adj_norm=None, graph=None):
        """Causal TCN, then static and dynamic graph messages mixed by ``W^G``, plus skip.

        ``graph`` is the horizon-aligned impedance graph ``(B, T, N, N)`` or ``None``
        (treated as all zeros).
        """
        tag = f"block{layer:02d}."
        if not self.st_graph:
            return tk.relu(tk.matmul(h, self._p(tag + "fc")) + self._p(tag + "fc_b")) + h
        adj = self.adj_norm if adj_norm is None else np.asarray(adj_norm, dtype=np.float64)
        n = h.shape[2]
        if adj.shape != (n, n):
            raise DimensionError(f"adjacency {adj.shape} does not match hidden {h.shape}")
        ht = tk.causal_conv1d(h, self._p(tag + "tcn")) + self._p(tag + "tcn_b")
        static = tk.einsum("an,btnf->btaf", adj, ht)
        if graph is None:
            dynamic = tk.Tensor(np.zeros(ht.shape))
        else:
            if graph.shape[-3:] != (h.shape[1], n, n):
                raise DimensionError(f"impedance graph {graph.shape} does not match hidden {h.shape}")
            dynamic = tk.einsum("btan,btnf->btaf", graph, ht)
        mixed = tk.matmul(tk.concat([static, dynamic], axis=-1), self._p(tag + "g")) + self._p(tag + "g_b")
        return tk.relu(mixed) + h

    def decode(self, h):
        """``(B, T, N, F') -> (B, K, T, N)`` raw direction fields."""
        z = tk.relu(tk.causal_conv1d(h, self._p("dec_tcn")) + self._p("dec_tcn_b"))
        out = tk.matmul(z, self._p("dec_w")) + self._p("dec_b")
        return out.transpose(0, 3, 1, 2)

    def forward(self, x_hist, x_mean, graph=None):
        h = self.encode_concat(x_hist, x_mean)
        for layer in range(self.cfg.blocks):
            h = self.st_graph_block(h, layer, graph=graph)
        return self.decode(h)
