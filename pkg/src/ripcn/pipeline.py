"""Run configuration and the end-to-end steps shared by the CLI and the acceptance suite."""

import dataclasses
import typing
from dataclasses import dataclass

import numpy as np

from .data import Normalizer, SplitSpec, load_csv, make_windows, synth_generate
from .errors import CompatibilityError, ConfigError, DataError
from .evolution import EvolutionNetConfig
from .impedance import BprParams, build_segment_table
from .inference import build_samples, calibrate_t, predict, summarize
from .metrics import evaluate
from .model import Ablation, RipcnModel
from .pcnet import LearnedMeanHead, PcNetConfig, SeasonalPersistence
from .tensor import read_checkpoint, write_checkpoint
from .training import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, LossWeights, TrainConfig, Trainer


@dataclass
class RunConfig:
    # data
    flow: str = ""
    adjacency: str = ""
    speed: str = ""
    occupancy: str = ""
    max_segments: int = 0
    # synthetic data (used when no flow path is given)
    synth_n: int = 5
    synth_steps: int = 2400
    synth_lambdas: str = "9,3,1"
    synth_period: int = 12
    synth_block: int = 12
    synth_noise_floor: float = 0.05
    synth_persistence: str = "0"
    synth_level: float = 60.0
    synth_amplitude: float = 4.0
    synth_trend: float = 0.0
    synth_trend_period: int = 0
    # split
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2
    tau: int = 12
    horizon: int = 12
    stride: int = 1
    # impedance
    alpha: float = 0.15
    beta: float = 4.0
    fixed_window_stats: bool = False
    # evolution net
    evo_hidden: int = 48
    heads: int = 12
    # pc net
    K: int = 3
    blocks: int = 16
    pc_hidden: int = 32
    tcn_kernel: int = 3
    # mean predictor
    mean_predictor: str = "persistence"
    season: int = 12
    mean_hidden: int = 16
    mean_epochs: int = 30
    mean_lr: float = 3e-3
    # training
    lr: float = 1e-4
    batch_size: int = 12
    max_epochs: int = 100
    min_epochs: int = 50
    patience: int = 10
    lambda1: float = 1.0
    lambda_start: int = 20
    lambda_end: int = 50
    # inference
    mode: str = "gaussian"
    num_samples: int = 50
    t_max: float = 2.0
    t_tol: float = 1e-3
    coverage: float = 0.95
    # ablations
    no_impedance: bool = False
    no_st_graph: bool = False
    no_lr: bool = False
    no_ld: bool = False
    no_lv: bool = False
    seed: int = 0

    # -- parsing --------------------------------------------------------------------
    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def set(self, key, value):
        hints = typing.get_type_hints(type(self))
        if key not in hints:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = hints[key]
        try:
            if kind is bool:
                low = str(value).strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                parsed = low in ("1", "true", "yes")
            else:
                parsed = kind(str(value).strip()) if not isinstance(value, kind) else value
        except ValueError:
            raise ConfigError(f"invalid value {value!r} for key {key!r}") from None
        setattr(self, key, parsed)
        return self

    def apply_lines(self, lines, source="<config>"):
        for lineno, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            self.set(key, value)
        return self

    @classmethod
    def from_file(cls, path, overrides=()):
        cfg = cls()
        if path:
            with open(path) as fh:
                cfg.apply_lines(fh.readlines(), str(path))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    def dump(self):
        return "".join(f"{k} = {getattr(self, k)}\n" for k in self.keys())

    # -- derived configs -------------------------------------------------------------
    def split_spec(self):
        return SplitSpec((self.train_ratio, self.val_ratio, self.test_ratio), self.tau, self.horizon, self.stride)

    def evo_config(self):
        return EvolutionNetConfig(self.evo_hidden, self.heads, self.tau, self.horizon)

    def pc_config(self):
        return PcNetConfig(self.K, self.blocks, self.pc_hidden, self.tcn_kernel)

    def ablation(self):
        return Ablation(**{k: getattr(self, k) for k in Ablation.names()})

    def train_config(self):
        return TrainConfig(
            self.lr,
            self.batch_size,
            self.max_epochs,
            self.min_epochs,
            self.patience,
            LossWeights(self.lambda1, self.lambda_start, self.lambda_end),
        )

    def lambdas(self):
        return [float(x) for x in self.synth_lambdas.split(",") if x.strip()]


def load_dataset(cfg):
    """Read the configured CSVs, or synthesize; returns ``(dataset, truth_or_None)``."""
    if cfg.flow:
        if not cfg.adjacency:
            raise ConfigError("a flow file needs an adjacency file")
        ds = load_csv(cfg.flow, cfg.adjacency, cfg.speed or None, cfg.occupancy or None)
        truth = None
    else:
        ds, truth = synth_generate(
            cfg.seed,
            n=cfg.synth_n,
            steps=cfg.synth_steps,
            lambdas=cfg.lambdas(),
            period=cfg.synth_period,
            block=cfg.synth_block,
            noise_floor=cfg.synth_noise_floor,
            persistence=[float(x) for x in cfg.synth_persistence.split(",")],
            level=cfg.synth_level,
            amplitude=cfg.synth_amplitude,
            trend=cfg.synth_trend,
            trend_period=cfg.synth_trend_period,
        )
    if cfg.max_segments and ds.n > cfg.max_segments:
        ds = ds.subset(range(cfg.max_segments))
    return ds, truth


@dataclass
class Prepared:
    dataset: object
    splits: object
    segments: object
    normalizer: Normalizer


def prepare(cfg, dataset):
    """Split, then fit the normalizer and the segment table on the training range only."""
    splits = make_windows(dataset, cfg.split_spec())
    train_flow = dataset.flow[: splits.train_end]
    if len(splits.train) == 0:
        raise DataError("training split holds no complete window")
    normalizer = Normalizer().fit(train_flow)
    speed = None if dataset.speed is None else dataset.speed[: splits.train_end]
    occ = None if dataset.occupancy is None else dataset.occupancy[: splits.train_end]
    segments = build_segment_table(train_flow, dataset.segment_ids, speed, occ)
    return Prepared(dataset, splits, segments, normalizer)


def build_mean_predictor(cfg, prep):
    if cfg.mean_predictor == "persistence":
        return SeasonalPersistence(cfg.season, cfg.horizon).fit(prep.splits.train)
    if cfg.mean_predictor == "learned":
        head = LearnedMeanHead(
            cfg.tau, cfg.horizon, prep.dataset.n, prep.dataset.adjacency, cfg.mean_hidden, cfg.tcn_kernel, cfg.seed
        )
        return head.fit(prep.splits.train, prep.normalizer, cfg.mean_epochs, cfg.mean_lr, cfg.batch_size, cfg.seed)
    raise ConfigError(f"unknown mean_predictor {cfg.mean_predictor!r}")


def build_model(cfg, prep, mean_predictor):
    return RipcnModel(
        cfg.evo_config(),
        cfg.pc_config(),
        prep.segments,
        prep.normalizer,
        mean_predictor,
        prep.dataset.adjacency,
        seed=cfg.seed,
        ablation=cfg.ablation(),
        bpr=BprParams(cfg.alpha, cfg.beta),
        fixed_stats=cfg.fixed_window_stats,
    )


def fit_model(cfg, model, prep):
    return Trainer(model, prep.splits, cfg.train_config(), cfg.seed).run().finalize()


def calibrate(cfg, model, prep):
    val = prep.splits.val
    if len(val) == 0:
        raise DataError("validation split is empty")
    return calibrate_t(predict(model, val), val.fut, cfg.t_max, cfg.t_tol)


@dataclass
class Evaluation:
    report: object
    distribution: object
    predictions: object
    truth: np.ndarray


def evaluate_model(cfg, model, prep, coeffs):
    test = prep.splits.test
    if len(test) == 0:
        raise DataError("test split is empty")
    pred = predict(model, test)
    samples = build_samples(pred, coeffs, cfg.mode, cfg.num_samples, cfg.seed)
    dist = summarize(samples, cfg.coverage)
    report = evaluate(samples, dist.mean, test.fut, mean_predictor=pred.mean, rho=1.0 - cfg.coverage)
    report.notes["mode"] = cfg.mode
    report.notes["t"] = [float(x) for x in coeffs.t]
    return Evaluation(report, dist, pred, test.fut)


def check_compatible(meta, cfg, n):
    """Refuse a checkpoint whose ``N``, ``tau`` or ``T`` differ from the run."""
    for key, want in (("n", n), ("tau", cfg.tau), ("horizon", cfg.horizon)):
        have = int(meta.get("meta." + key, want))
        if have != want:
            raise CompatibilityError(f"checkpoint {key}={have} but run has {key}={want}")


# -- checkpoints ---------------------------------------------------------------------

ARTIFACTS = {
    "mean.ckpt": "pretrain-mean",
    "evo.ckpt": "train",
    "pc.ckpt": "train",
    "t_coeffs.json": "calibrate",
    "eval_report.json": "eval",
}


def meta_records(cfg, n):
    return {
        "meta.n": np.array(float(n)),
        "meta.tau": np.array(float(cfg.tau)),
        "meta.horizon": np.array(float(cfg.horizon)),
        "meta.K": np.array(float(cfg.K)),
        "meta.seed": np.array(float(cfg.seed)),
        "meta.adam_beta1": np.array(ADAM_BETA1),
        "meta.adam_beta2": np.array(ADAM_BETA2),
        "meta.adam_eps": np.array(ADAM_EPS),
        "meta.lr": np.array(cfg.lr),
    }


def save_model(cfg, model, out_dir):
    """Write the evolution-net and PC-net parameters as two checkpoints."""
    meta = meta_records(cfg, model.n)
    evo = {} if cfg.no_impedance else model.evo.params.arrays()
    write_checkpoint(f"{out_dir}/evo.ckpt", {**evo, **meta})
    write_checkpoint(f"{out_dir}/pc.ckpt", {**model.pc.params.arrays(), **meta})


def load_model(cfg, prep, mean_predictor, out_dir):
    """Rebuild a model from ``evo.ckpt``/``pc.ckpt`` after checking N, tau and T."""
    model = build_model(cfg, prep, mean_predictor)
    for name, store in (("evo.ckpt", model.evo.params), ("pc.ckpt", model.pc.params)):
        arrays = read_checkpoint(f"{out_dir}/{name}")
        check_compatible(arrays, cfg, prep.dataset.n)
        if name == "evo.ckpt" and cfg.no_impedance:
            continue
        store.load_arrays(arrays)
    return model


def save_mean_predictor(cfg, mean_predictor, n, path):
    arrays = {**mean_predictor.arrays(), **meta_records(cfg, n)}
    arrays["meta.learned"] = np.array(1.0 if mean_predictor.kind == "learned" else 0.0)
    write_checkpoint(path, arrays)


def load_mean_predictor(cfg, prep, path):
    arrays = read_checkpoint(path)
    check_compatible(arrays, cfg, prep.dataset.n)
    if cfg.mean_predictor == "persistence":
        return SeasonalPersistence(cfg.season, cfg.horizon).fit(prep.splits.train)
    if int(arrays.get("meta.learned", 0)) != 1:
        raise CompatibilityError(f"{path} holds a persistence predictor, config asks for a learned one")
    head = LearnedMeanHead(
        cfg.tau, cfg.horizon, prep.dataset.n, prep.dataset.adjacency, cfg.mean_hidden, cfg.tcn_kernel, cfg.seed
    )
    head.params.load_arrays(arrays)
    head.fitted = True
    return head
