"""Command-line entry points: ``generate``, ``train`` and ``eval``.

Exit codes: 0 success, 2 invalid configuration or input files, 3 training
diverged (the partial trace is still written), 4 checkpoint does not fit
the requested model.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import envs, evaluation, training
from .cells import ModelSpec
from .config import ConfigError
from .nets import ModelMismatch

log = logging.getLogger("mtsworld")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _load_data(path) -> envs.EpisodeDataset:
    try:
        return envs.load_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc.strerror}", EXIT_CONFIG) from None
    except envs.DatasetFormatError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def _generate_split(c: dict, split: str, n: int) -> envs.EpisodeDataset:
    p = envs.PendulumParams(c["mass"], c["length"], c["damping"], c["gravity"], c["dt"])
    common = dict(T=c["T"], n_episodes=n, seed=c["seed"], split=split, torque_amp=c["torque_amp"], obs_noise=c["obs_noise"])
    if c["env"] == "pendulum":
        return envs.gen_pendulum(p, **common)
    if c["env"] == "hip_variant":
        return envs.gen_hip_variant(p, N=c["N"], **common)
    H = c["H"] or cfgmod.default_window(c["dt"])
    return envs.gen_two_timescale(p, H=H, period_steps=c["period_steps"] or None, amplitude=c["amplitude"], **common)


def cmd_generate(c: dict) -> int:
    if min(c["T"], c["n_train"], c["n_test"], c["N"]) < 1 or c["H"] < 0 or c["period_steps"] < 0:
        raise CliError("T, n_train, n_test and N must be >= 1", EXIT_CONFIG)
    try:
        train = _generate_split(c, "train", c["n_train"])
        test = _generate_split(c, "test", c["n_test"])
    except ValueError as exc:
        raise CliError(f"invalid generate config: {exc}", EXIT_CONFIG) from None
    ntrain, ntest = envs.normalize_splits(train, test)
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    envs.save_dataset(out / "train.csv", ntrain)
    envs.save_dataset(out / "test.csv", ntest)
    s = ntrain.stats
    print(f"env={c['env']} train={train.n_episodes}x{train.length} test={test.n_episodes}x{test.length} dt={train.dt}")
    print(f"obs mean={np.round(s.obs_mean, 4).tolist()} std={np.round(s.obs_std, 4).tolist()}")
    print(f"act mean={np.round(s.act_mean, 4).tolist()} std={np.round(s.act_std, 4).tolist()}")
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def model_spec(c: dict, ds: envs.EpisodeDataset) -> ModelSpec:
    H = c["H"] or cfgmod.default_window(ds.dt)
    try:
        return ModelSpec(
            c["model"], ds.obs.shape[-1], ds.act.shape[-1], c["d"], c["K"], c["bandwidth"], c["control"],
            c["hidden"], H, c["task_dim"], c["task_kind"], c["N"],
        )
    except ValueError as exc:
        raise CliError(f"invalid model config: {exc}", EXIT_CONFIG) from None


def training_arrays(spec: ModelSpec, ds: envs.EpisodeDataset, hip_data: str) -> dict:
    if spec.kind != "hiprssm":
        return ds.arrays()
    if hip_data == "windows":
        try:
            return envs.window_dataset(ds, spec.N).arrays()
        except envs.TooShort as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
    return dict(ds.arrays(), window=spec.N)


def cmd_train(c: dict) -> int:
    try:
        loss = training.LossSpec(c["loss"], c["clip_norm"])
        masks = training.MaskSpec(c["mask_step"], c["mask_window"], True)
        optim = training.OptimSpec(c["lr"])
    except ValueError as exc:
        raise CliError(f"invalid train config: {exc}", EXIT_CONFIG) from None
    if c["epochs"] < 0 or c["batch_size"] < 1 or c["tbptt"] < 0 or not 0 <= c["val_fraction"] < 1:
        raise CliError("epochs, batch_size, tbptt or val_fraction out of range", EXIT_CONFIG)
    ds = _load_data(c["train_data"])
    spec = model_spec(c, ds)
    model = spec.build(np.random.default_rng(c["seed"]))
    data = training_arrays(spec, ds, c["hip_data"])
    out = Path(c["out"])
    meta = dict(spec.to_meta(), env=ds.env or "unknown", seed=c["seed"], hip_data=c["hip_data"])
    resume = c["resume"] or None
    try:
        trace = training.train(
            model, data, loss, masks, optim, epochs=c["epochs"], tbptt_len=c["tbptt"] or None, seed=c["seed"],
            batch_size=c["batch_size"], val_fraction=c["val_fraction"], out_dir=out, resume=resume, meta=meta,
        )
    except training.Diverged as exc:
        exc.trace.to_csv(out / "trace.csv")
        raise CliError(f"training diverged: {exc}; partial trace in {out / 'trace.csv'}", EXIT_DIVERGED) from None
    except (ModelMismatch, training.CheckpointError) as exc:
        raise CliError(f"cannot resume from {resume}: {exc}", EXIT_MISMATCH) from None
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {resume}: {exc.strerror}", EXIT_CONFIG) from None
    training.save_model(out / "model.ckpt", model, meta)
    trace.to_csv(out / "trace.csv")
    last = trace.records[-1] if trace.records else None
    if last is not None:
        print(f"epochs={len(trace.records)} train_loss={last.train_loss:.5f} val_loss={last.val_loss:.5f} best_epoch={trace.best_epoch}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'trace.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def load_trained(path, kind: str):
    """Rebuild the model described by a checkpoint and load its parameters."""
    try:
        _, meta = training.load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}", EXIT_MISMATCH) from None
    except training.CheckpointError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from None
    try:
        spec = ModelSpec.from_meta(meta)
    except (KeyError, ValueError) as exc:
        raise CliError(f"{path}: checkpoint lacks a usable model record ({exc})", EXIT_MISMATCH) from None
    if spec.kind != kind:
        raise CliError(f"{path}: checkpoint holds a {spec.kind} model, config asks for {kind}", EXIT_MISMATCH)
    model = spec.build(np.random.default_rng(0))
    try:
        training.load_model(path, model)
    except ModelMismatch as exc:
        raise CliError(f"{path}: {exc}", EXIT_MISMATCH) from None
    return model, spec, meta


def evaluate(model, spec: ModelSpec, ds: envs.EpisodeDataset, c: dict) -> evaluation.RolloutResult:
    if ds.obs.shape[-1] != spec.obs_dim or ds.act.shape[-1] != spec.act_dim:
        raise CliError("test data dimensions do not match the checkpoint", EXIT_MISMATCH)
    obs, act, extra = ds.obs, ds.act, None
    if spec.kind == "hiprssm" and c["hip_data"] == "windows":
        try:
            w = envs.window_dataset(ds, spec.N)
        except envs.TooShort as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        obs, act, extra = w.obs, w.act, {"ctx_obs": w.ctx_obs, "ctx_act": w.ctx_act}
    elif spec.kind == "hiprssm":
        extra = {"window": spec.N}
    T = obs.shape[1]
    windowed = extra is not None and "ctx_obs" in extra
    ctx = c["context_len"] or max(1, T // 4 if windowed else (2 * T) // 3)
    hor = c["horizon"] or T - ctx
    try:
        return evaluation.rollout(model, obs, act, ctx, hor, ds.stats, c["deltas"], extra)
    except envs.TooShort as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def cmd_eval(c: dict) -> int:
    ds = _load_data(c["test_data"])
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if c["H_sweep"]:
        if "{H}" not in c["checkpoint"]:
            raise CliError("eval.checkpoint must contain {H} when H_sweep is set", EXIT_CONFIG)
        for H in c["H_sweep"]:
            model, spec, meta = load_trained(c["checkpoint"].replace("{H}", str(H)), c["model"])
            if spec.H != H:
                raise CliError(f"checkpoint for H={H} was trained with H={spec.H}", EXIT_MISMATCH)
            r = evaluate(model, spec, ds, c)
            if c["predictions"]:
                evaluation.write_predictions(out / f"predictions_H{H}.csv", r)
            W = c["W"] or spec.H
            rows.append(evaluation.metric_rows(r, W, f"{spec.kind}_H{H}", ds.env or meta.get("env", ""), c["seed"])[-1])
    else:
        model, spec, meta = load_trained(c["checkpoint"], c["model"])
        r = evaluate(model, spec, ds, c)
        if c["predictions"]:
            evaluation.write_predictions(out / "predictions.csv", r)
        rows = evaluation.metric_rows(r, c["W"] or spec.H, spec.kind, ds.env or meta.get("env", ""), c["seed"])
    evaluation.write_metrics(out / "metrics.csv", rows)
    for row in rows if c["H_sweep"] else rows[-1:]:
        print(f"{row['model']} horizon_step={row['horizon_step']} rmse={row['rmse']:.5f} nll={row['nll']:.5f}")
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtsworld", description="Generate data, train and evaluate latent world models.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat key = value file with one [section] per command")
    p.add_argument("--seed", type=int, default=None, help="overrides the section's seed")
    p.add_argument("--out", default=None, help="overrides the section's output directory")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        c = cfgmod.load(args.config, args.command, {"seed": args.seed, "out": args.out})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        sys.stdout.write(cfgmod.dump(args.command, c))
        return EXIT_OK
    try:
        return COMMANDS[args.command](c)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
