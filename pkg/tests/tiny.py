"""A very small synthetic run shared by the loop-level tests."""

from ripcn.pipeline import RunConfig, build_mean_predictor, build_model, load_dataset, prepare

TINY = dict(
    synth_n=4,
    synth_steps=480,
    stride=12,
    K=2,
    blocks=1,
    pc_hidden=4,
    evo_hidden=4,
    heads=2,
    lr=3e-3,
    max_epochs=4,
    min_epochs=2,
    lambda_start=1,
    lambda_end=2,
    patience=2,
    num_samples=10,
)


def tiny_config(**overrides):
    cfg = RunConfig()
    for k, v in {**TINY, **overrides}.items():
        cfg.set(k, v)
    return cfg


def tiny_model(**overrides):
    cfg = tiny_config(**overrides)
    ds, _ = load_dataset(cfg)
    prep = prepare(cfg, ds)
    mp = build_mean_predictor(cfg, prep)
    return cfg, prep, build_model(cfg, prep, mp)
