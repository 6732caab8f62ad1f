"""The assembled forecaster: impedance features, evolution net, mean predictor, PC net."""

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tk
from .evolution import EvolutionNet, EvolutionNetConfig
from .impedance import BprParams
from .pcnet import PCNet, PcNetConfig, orthogonalize
from .tensor import ParamStore


@dataclass(frozen=True)
class Ablation:
    """Switches for the five ablation variants; all ``False`` is the full model."""

    no_impedance: bool = False
    no_st_graph: bool = False
    no_lr: bool = False
    no_ld: bool = False
    no_lv: bool = False

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ForwardResult:
    pcs: object
    residual: tk.Tensor
    mean_norm: np.ndarray
    r_true: np.ndarray
    r_pred: tk.Tensor
    graph: object


class RipcnModel:
    def __init__(
        self,
        evo_cfg: EvolutionNetConfig,
        pc_cfg: PcNetConfig,
        segments,
        normalizer,
        mean_predictor,
        adjacency,
        seed=0,
        ablation=Ablation(),
        bpr=BprParams(),
        fixed_stats=False,
    ):
        self.evo_cfg, self.pc_cfg = evo_cfg, pc_cfg
        self.segments = segments
        self.normalizer = normalizer
        self.mean_predictor = mean_predictor
        self.adjacency = np.asarray(adjacency, dtype=bool)
        self.ablation = ablation
        self.bpr = bpr
        self.fixed_stats = fixed_stats
        n = self.adjacency.shape[0]
        rng = np.random.default_rng(seed)
        self.evo = EvolutionNet(evo_cfg, rng)
        self.pc = PCNet(
            pc_cfg, evo_cfg.tau, evo_cfg.horizon, n, self.adjacency, rng, st_graph=not ablation.no_st_graph
        )
        self.params = ParamStore()
        if not ablation.no_impedance:
            self.params.include(self.evo.params)
        self.params.include(self.pc.params)

    @property
    def n(self):
        return self.adjacency.shape[0]

    def forward(self, hist, fut=None, strict=True):
        """Run one batch of raw-flow windows ``(B, tau, N)`` (and futures ``(B, T, N)``)."""
        hist = np.asarray(hist, dtype=np.float64)
        horizon = self.evo_cfg.horizon
        r_hist = self.segments.window_impedance(hist, hist, self.bpr, self.fixed_stats)
        r_true = None
        if fut is not None:
            r_true = self.segments.window_impedance(fut, hist, self.bpr, self.fixed_stats)
        graph = r_pred = None
        if not self.ablation.no_impedance:
            graph, r_pred = self.evo.forward(r_hist, self.adjacency)
        x_hist = self.normalizer.apply(hist)
        x_mean = np.asarray(self.mean_predictor.predict(x_hist), dtype=np.float64)
        d = self.pc.forward(x_hist, x_mean, None if graph is None else graph.horizon_slice(horizon))
        pcs = orthogonalize(d, strict=strict)
        residual = None
        if fut is not None:
            residual = tk.Tensor(self.normalizer.apply(fut) - x_mean)
        return ForwardResult(pcs, residual, x_mean, r_true, r_pred, graph)
