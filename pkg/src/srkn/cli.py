"""Command-line entry point: datagen, train, eval, generate, gradcheck.

Every command resolves a flat key=value configuration (defaults <- config
file <- --set overrides <- dedicated flags), persists the resolved config
into its run directory, and is bit-reproducible from that snapshot. Exit
codes: 0 success, 2 usage, 3 numeric failure, 4 IO.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np
import torch

from . import datasets, io, metrics, plotting
from .datasets import SequenceBatch, TaxiConfig, TaxiDataError
from .model import ModelConfig, SRKN
from .training import (DivergenceError, TrainConfig, fit, grad_check,
                       load_optimizer_arrays, make_optimizer, optimizer_arrays,
                       write_history)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DATA_DIR_ENV = "SRKN_DATA_DIR"


class UsageError(ValueError):
    pass


def data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "data")


# ---- config resolution -------------------------------------------------------

MODEL_DEFAULTS = {
    "model.m": 8,
    "model.k": 4,
    "model.s_dim": 0,
    "model.gru_hidden": 32,
    "model.enc_hidden": "32",
    "model.dec_hidden": "32",
    "model.trans_hidden": "32",
    "model.inf_hidden": "32",
    "model.bandwidth": 0,
    "model.var_floor": 1e-4,
    "model.beta_rec": 1.0,
    "model.beta_z": 0.1,
    "model.beta_s": 0.1,
    "model.beta_pred": 1.0,
    "model.switching": "learned",
    "model.bank_init_scale": 0.05,
    "model.trans_noise_init": 0.1,
    "model.init_seed": -1,
}

TAXI_DEFAULTS = {
    "taxi.lon_min": -8.73,
    "taxi.lon_max": -8.50,
    "taxi.lat_min": 41.10,
    "taxi.lat_max": 41.25,
    "taxi.seq_len": 30,
    "taxi.train_n": 86386,
    "taxi.val_n": 200,
    "taxi.test_n": 10000,
}

DATAGEN_DEFAULTS = {
    "seed": 0,
    "out": "",
    "kind": "four_modes",
    "n": 1000,
    "seq_len": 6,
    "noise_scale": 0.05,
}

TRAIN_DEFAULTS = {
    "seed": 0,
    "out": "",
    "resume": "",
    "data.path": "",
    "data.format": "batch",
    "data.val_path": "",
    "data.val_n": 0,
    "train.lr": 1e-3,
    "train.batch_size": 64,
    "train.epochs": 10,
    "train.clip_norm": 5.0,
    "train.optimizer": "adam",
    "train.z_draws": 1,
    "train.pred_trans_noise": False,
    **MODEL_DEFAULTS,
    **TAXI_DEFAULTS,
}

EVAL_DEFAULTS = {
    "seed": 0,
    "out": "",
    "checkpoint": "",
    "data.path": "",
    "eval.tau": 0,
    "eval.n_samples": 100,
    "eval.s_samples": 32,
    "eval.n_anchors": 5,
    "eval.endpoint": False,
    "eval.metrics": "recon_ll,one_step,multi_step,w_dist",
    "eval.max_sequences": 0,
    "eval.name": "",
}

GENERATE_DEFAULTS = {
    "seed": 0,
    "out": "",
    "checkpoint": "",
    "data.path": "",
    "generate.tau": 0,
    "generate.horizon": 0,
    "generate.n": 50,
    "generate.index": 0,
    "generate.max_tiles": 3,
}

GRADCHECK_DEFAULTS = {
    "seed": 0,
    "out": "",
    "checkpoint": "",
    "data.path": "",
    "gradcheck.eps": 1e-4,
    "gradcheck.threshold": 1e-3,
    "gradcheck.max_entries": 3,
    "gradcheck.n_sequences": 4,
    "gradcheck.t_len": 0,
    "gradcheck.pred_trans_noise": False,
    **MODEL_DEFAULTS,
}

# Default prediction prefix per dataset kind; the remainder is forecast.
DEFAULT_TAU = {"four_modes": 2, "car_images": 2, "taxi": 10}


def coerce(key: str, text: str, template):
    """Parse a raw config string into the type of the default value."""
    text = text.strip()
    if isinstance(template, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(template, int):
        try:
            return int(text)
        except ValueError:
            raise UsageError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(template, float):
        try:
            return float(text)
        except ValueError:
            raise UsageError(f"{key}: expected a number, got {text!r}") from None
    return text


def parse_config_file(path) -> dict[str, str]:
    """Flat key = value lines; '#' comments and blank lines ignored."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
            key, value = (part.strip() for part in stripped.split("=", 1))
            if key in out:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def resolve_config(defaults: dict, args) -> dict:
    """defaults <- config file <- --set pairs <- --seed/--out flags."""
    cfg = dict(defaults)

    def apply(raw: dict[str, str], origin: str):
        for key, value in raw.items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} ({origin}); "
                                 f"valid keys: {', '.join(sorted(defaults))}")
            cfg[key] = coerce(key, value, defaults[key])

    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        apply(parse_config_file(args.config), args.config)
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value
    apply(pairs, "--set")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def prepare_run_dir(cfg: dict, command: str) -> str:
    out = cfg["out"]
    if not out:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = os.path.join("runs", f"{command}-{stamp}-s{cfg['seed']}")
        cfg["out"] = out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved.cfg"), "w") as f:
        f.write(format_config(cfg))
    return out


# ---- shared helpers ----------------------------------------------------------


def _hidden(cfg: dict, key: str) -> tuple[int, ...]:
    parts = [p.strip() for p in str(cfg[key]).split(",") if p.strip()]
    if not parts:
        raise UsageError(f"{key}: expected comma-separated layer widths")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"{key}: expected comma-separated integers, "
                         f"got {cfg[key]!r}") from None


def model_config_from(cfg: dict, batch: SequenceBatch) -> ModelConfig:
    if batch.is_image:
        hw = tuple(batch.data.shape[-2:])
        kind, obs_dim, image_hw = "image", hw[0] * hw[1], hw
    else:
        kind, obs_dim, image_hw = "real", batch.data.shape[-1], None
    init_seed = cfg["model.init_seed"]
    if init_seed < 0:
        init_seed = cfg["seed"]
    return ModelConfig(
        input_kind=kind,
        obs_dim=obs_dim,
        image_hw=image_hw,
        m=cfg["model.m"],
        k=cfg["model.k"],
        s_dim=cfg["model.s_dim"] or None,
        gru_hidden=cfg["model.gru_hidden"],
        enc_hidden=_hidden(cfg, "model.enc_hidden"),
        dec_hidden=_hidden(cfg, "model.dec_hidden"),
        trans_hidden=_hidden(cfg, "model.trans_hidden"),
        inf_hidden=_hidden(cfg, "model.inf_hidden"),
        bandwidth=cfg["model.bandwidth"],
        var_floor=cfg["model.var_floor"],
        beta_rec=cfg["model.beta_rec"],
        beta_z=cfg["model.beta_z"],
        beta_s=cfg["model.beta_s"],
        beta_pred=cfg["model.beta_pred"],
        switching=cfg["model.switching"],
        bank_init_scale=cfg["model.bank_init_scale"],
        trans_noise_init=cfg["model.trans_noise_init"],
        init_seed=init_seed,
    )


def load_dataset(path) -> SequenceBatch:
    if not path:
        raise UsageError("data.path is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    return datasets.load_batch(path)


def load_model(path) -> tuple[SRKN, io.Checkpoint]:
    if not path:
        raise UsageError("checkpoint is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = io.load_checkpoint(path)
    return io.build_model(ckpt), ckpt


def check_compat(model: SRKN, batch: SequenceBatch):
    cfg = model.config
    if batch.is_image:
        if cfg.input_kind != "image" or tuple(batch.data.shape[-2:]) != cfg.image_hw:
            raise UsageError(
                f"checkpoint expects {cfg.input_kind} observations "
                f"(image_hw={cfg.image_hw}); dataset frames are "
                f"{tuple(batch.data.shape[-2:])}")
    elif cfg.input_kind != "real" or batch.data.shape[-1] != cfg.obs_dim:
        raise UsageError(
            f"checkpoint expects {cfg.input_kind} observations of dim "
            f"{cfg.obs_dim}; dataset has trailing shape "
            f"{tuple(batch.data.shape[2:])}")


def default_tau(cfg_value: int, batch: SequenceBatch) -> int:
    if cfg_value:
        tau = cfg_value
    else:
        tau = DEFAULT_TAU.get(batch.meta.get("kind"), max(1, batch.t_len // 2))
    if not 1 <= tau < batch.t_len:
        raise UsageError(f"tau must be in [1, {batch.t_len - 1}], got {tau}")
    return tau


# ---- commands ----------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = resolve_config(DATAGEN_DEFAULTS, args)
    cfg["kind"] = args.kind
    out = prepare_run_dir(cfg, "datagen")
    if cfg["kind"] == "four_modes":
        batch = datasets.gen_four_modes(cfg["n"], seed=cfg["seed"],
                                        noise_scale=cfg["noise_scale"])
    else:
        batch = datasets.gen_car_images(cfg["n"], seq_len=cfg["seq_len"],
                                        seed=cfg["seed"])
    path = os.path.join(out, f"{cfg['kind']}.srkn")
    datasets.save_batch(batch, path)
    print(f"wrote {path} ({batch.batch_size} sequences of length {batch.t_len})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(TRAIN_DEFAULTS, args)
    out = prepare_run_dir(cfg, "train")

    if cfg["data.format"] == "taxi_csv":
        taxi_cfg = TaxiConfig(
            lon_min=cfg["taxi.lon_min"], lon_max=cfg["taxi.lon_max"],
            lat_min=cfg["taxi.lat_min"], lat_max=cfg["taxi.lat_max"],
            seq_len=cfg["taxi.seq_len"], train_n=cfg["taxi.train_n"],
            val_n=cfg["taxi.val_n"], test_n=cfg["taxi.test_n"],
            seed=cfg["seed"])
        csv_path = cfg["data.path"] or os.path.join(data_dir(), "porto_taxi.csv")
        splits = datasets.load_taxi(csv_path, taxi_cfg)
        train_batch, val_batch = splits.train, splits.val
        for name, part in (("train", splits.train), ("val", splits.val),
                           ("test", splits.test)):
            datasets.save_batch(part, os.path.join(out, f"taxi_{name}.srkn"))
    elif cfg["data.format"] == "batch":
        train_batch = load_dataset(cfg["data.path"])
        if cfg["data.val_path"]:
            val_batch = load_dataset(cfg["data.val_path"])
        elif cfg["data.val_n"] > 0:
            train_batch, val_batch = datasets.split_batch(
                train_batch, cfg["data.val_n"], seed=cfg["seed"])
        else:
            val_batch = None
    else:
        raise UsageError(f"data.format must be 'batch' or 'taxi_csv', "
                         f"got {cfg['data.format']!r}")

    start_epoch = 0
    if cfg["resume"]:
        model, ckpt = load_model(cfg["resume"])
        check_compat(model, train_batch)
        train_cfg = TrainConfig(
            lr=cfg["train.lr"], batch_size=cfg["train.batch_size"],
            epochs=cfg["train.epochs"], clip_norm=cfg["train.clip_norm"],
            seed=cfg["seed"], optimizer=cfg["train.optimizer"],
            z_draws=cfg["train.z_draws"],
            pred_trans_noise=cfg["train.pred_trans_noise"])
        optimizer = make_optimizer(model, train_cfg)
        if ckpt.extra:
            load_optimizer_arrays(optimizer, ckpt.extra)
        start_epoch = int(ckpt.meta.get("epochs_run", 0))
    else:
        model = SRKN(model_config_from(cfg, train_batch))
        train_cfg = TrainConfig(
            lr=cfg["train.lr"], batch_size=cfg["train.batch_size"],
            epochs=cfg["train.epochs"], clip_norm=cfg["train.clip_norm"],
            seed=cfg["seed"], optimizer=cfg["train.optimizer"],
            z_draws=cfg["train.z_draws"],
            pred_trans_noise=cfg["train.pred_trans_noise"])
        optimizer = make_optimizer(model, train_cfg)

    result = fit(model, train_batch, train_cfg, val=val_batch,
                 start_epoch=start_epoch, optimizer=optimizer, log=print)

    ckpt_path = os.path.join(out, "checkpoint.srkn")
    io.save_checkpoint(
        ckpt_path, model.config, model.state_dict(),
        extra=optimizer_arrays(optimizer),
        meta={"epochs_run": start_epoch + result.epochs_run,
              "train_config": train_cfg.to_dict(),
              "diverged": result.diverged})
    write_history(os.path.join(out, "history.tsv"), result.history)
    print(f"wrote {ckpt_path}")
    if result.diverged:
        print("training diverged; checkpoint holds the last finite epoch",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(EVAL_DEFAULTS, args)
    out = prepare_run_dir(cfg, "eval")
    model, _ = load_model(cfg["checkpoint"])
    batch = load_dataset(cfg["data.path"])
    check_compat(model, batch)
    if cfg["eval.max_sequences"]:
        batch = batch.select(torch.arange(min(cfg["eval.max_sequences"],
                                              batch.batch_size)))
    tau = default_tau(cfg["eval.tau"], batch)
    wanted = tuple(m.strip() for m in cfg["eval.metrics"].split(",") if m.strip())
    if "w_dist" in wanted and cfg["eval.n_samples"] > batch.batch_size:
        raise UsageError(
            f"eval.n_samples={cfg['eval.n_samples']} exceeds the "
            f"{batch.batch_size} evaluated sequences; w_dist needs that many "
            f"similar-prefix truth sequences per anchor. Lower eval.n_samples "
            f"or raise eval.max_sequences.")
    report = metrics.evaluate(
        model, batch, tau, n_samples=cfg["eval.n_samples"],
        s_samples=cfg["eval.s_samples"], seed=cfg["seed"],
        n_anchors=cfg["eval.n_anchors"], metrics=wanted,
        endpoint=cfg["eval.endpoint"])
    report_path = os.path.join(out, "report.txt")
    metrics.write_report(report, report_path)
    name = cfg["eval.name"] or os.path.splitext(os.path.basename(cfg["checkpoint"]))[0]
    metrics.append_results_row(os.path.join(out, "results.tsv"), name, report)
    for key in metrics.ALL_METRICS:
        value = getattr(report, key)
        if value is not None:
            print(f"{key} = {value:.6f}")
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = resolve_config(GENERATE_DEFAULTS, args)
    out = prepare_run_dir(cfg, "generate")
    model, _ = load_model(cfg["checkpoint"])
    batch = load_dataset(cfg["data.path"])
    check_compat(model, batch)
    tau = default_tau(cfg["generate.tau"], batch)
    horizon = cfg["generate.horizon"] or batch.t_len - tau
    if horizon < 1:
        raise UsageError(f"horizon must be >= 1, got {horizon}")
    index = cfg["generate.index"]
    if not 0 <= index < batch.batch_size:
        raise UsageError(f"generate.index out of range [0, {batch.batch_size})")
    n = cfg["generate.n"]
    if n < 0:
        raise UsageError("generate.n must be >= 0")

    prefix = batch.data[:tau, index]
    flat_dim = int(np.prod(prefix.shape[1:]))
    with torch.no_grad():
        states, _ = model.filter_sequence(batch.data[:tau, index: index + 1])
        if n > 0:
            roll = model.rollout(states[tau - 1], horizon, n, cfg["seed"],
                                 step_offset=tau)
            obs_mean = roll.obs_mean[:, :, 0].numpy()
            obs_var = None if roll.obs_var is None else roll.obs_var[:, :, 0].numpy()
            alphas = roll.alphas[:, :, 0].numpy()
            modes = roll.modes[:, :, 0].numpy()
        else:
            obs_mean = np.zeros((0, horizon, flat_dim))
            obs_var = None if model.config.input_kind == "image" else np.zeros_like(obs_mean)
            alphas = np.zeros((0, horizon, model.config.k))
            modes = np.zeros((0, horizon), dtype=np.int64)

    arrays = {
        "prefix": prefix.numpy(),
        "obs_mean": obs_mean,
        "alphas": alphas,
        "modes": modes,
    }
    if obs_var is not None:
        arrays["obs_var"] = obs_var
    rollout_path = os.path.join(out, "rollout.srkn")
    io.write_arrays(rollout_path, arrays,
                    {"kind": "srkn-rollout", "tau": tau, "horizon": horizon,
                     "n": n, "seed": cfg["seed"], "index": index})

    if model.config.input_kind == "real":
        fig_path = os.path.join(out, "trajectories.svg")
        plotting.plot_trajectories(prefix.numpy(), obs_mean, modes, fig_path)
        figures = [fig_path]
    else:
        hw = model.config.image_hw
        figures = []
        prefix_frames = prefix.numpy().reshape(tau, *hw)
        prefix_colors = [plotting.PREFIX_COLOR] * tau
        if n == 0:
            fig_path = os.path.join(out, "frames.png")
            plotting.tile_frames(prefix_frames, prefix_colors, fig_path)
            figures.append(fig_path)
        for i in range(min(n, cfg["generate.max_tiles"])):
            frames = np.concatenate(
                [prefix_frames, obs_mean[i].reshape(horizon, *hw)], axis=0)
            colors = prefix_colors + [plotting.mode_color(k) for k in modes[i]]
            fig_path = os.path.join(out, f"rollout-{i}.png")
            plotting.tile_frames(frames, colors, fig_path)
            figures.append(fig_path)
    print(f"wrote {rollout_path}")
    for fig_path in figures:
        print(f"wrote {fig_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(GRADCHECK_DEFAULTS, args)
    out = prepare_run_dir(cfg, "gradcheck")
    batch = load_dataset(cfg["data.path"])
    if cfg["checkpoint"]:
        model, _ = load_model(cfg["checkpoint"])
    else:
        model = SRKN(model_config_from(cfg, batch))
    check_compat(model, batch)
    n_seq = min(cfg["gradcheck.n_sequences"], batch.batch_size)
    data = batch.data[:, :n_seq]
    mask = batch.mask[:, :n_seq] if batch.mask is not None else None
    if cfg["gradcheck.t_len"]:
        data = data[: cfg["gradcheck.t_len"]]
        mask = mask[: cfg["gradcheck.t_len"]] if mask is not None else None
    report = grad_check(model, data, mask, eps=cfg["gradcheck.eps"],
                        seed=cfg["seed"],
                        max_entries_per_param=cfg["gradcheck.max_entries"],
                        pred_trans_noise=cfg["gradcheck.pred_trans_noise"])
    lines = [f"eps = {report.eps}", f"max_error = {report.max_error:.3e}",
             f"worst_group = {report.worst_group}"]
    lines += [f"{group} = {err:.3e}" for group, err in sorted(report.by_group.items())]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "gradcheck.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    if report.max_error >= cfg["gradcheck.threshold"]:
        print(f"FAIL: max relative error {report.max_error:.3e} >= "
              f"threshold {cfg['gradcheck.threshold']:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"OK: max relative error below {cfg['gradcheck.threshold']:.3e}")
    return EXIT_OK


# ---- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srkn",
        description="Switching recurrent Kalman network: data, training, "
                    "evaluation, generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the seed key")
        p.add_argument("--out", default=None,
                       help="run directory (default: runs/<cmd>-<stamp>-s<seed>)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key")

    p = sub.add_parser("datagen", help="generate a toy dataset")
    p.add_argument("kind", choices=("four_modes", "car_images"))
    common(p)
    p.set_defaults(handler=cmd_datagen)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--data", default=None, help="shortcut for data.path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None, help="shortcut for checkpoint")
    p.add_argument("--data", default=None, help="shortcut for data.path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("generate", help="roll out predictions and figures")
    common(p)
    p.add_argument("--checkpoint", default=None, help="shortcut for checkpoint")
    p.add_argument("--data", default=None, help="shortcut for data.path")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--checkpoint", default=None, help="shortcut for checkpoint")
    p.add_argument("--data", default=None, help="shortcut for data.path")
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def _apply_shortcuts(args):
    extra = []
    if getattr(args, "data", None):
        extra.append(f"data.path={args.data}")
    if getattr(args, "checkpoint", None):
        extra.append(f"checkpoint={args.checkpoint}")
    if getattr(args, "resume", None):
        extra.append(f"resume={args.resume}")
    args.set = (args.set or []) + extra


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_shortcuts(args)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TaxiDataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
