"""Command-line interface.

Subcommands: gen-data, train, eval, cv, ablate, split-freq, metrics, info.
``--config`` loads a UTF-8 file of ``key = value`` lines (``#`` comments);
flags override file values. Exit codes: 0 success, 1 usage error, 2 runtime
error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, data_pipeline, image_ops, network, objectives, trainer


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_filters(text):
    parts = [p for p in str(text).replace(",", " ").split() if p]
    if len(parts) != 6:
        raise ValueError(f"expected 6 filter widths, got {len(parts)}")
    return tuple(int(p) for p in parts)


def _opt(type_fn, default=None, help="", required=False, flag=False):
    return {"type": type_fn, "default": default, "help": help,
            "required": required, "flag": flag}


_TRAIN_OPTS = {
    "data": _opt(str, required=True, help="dataset directory"),
    "epochs": _opt(int, 200),
    "lr": _opt(float, 2e-4),
    "beta1": _opt(float, 0.5),
    "beta2": _opt(float, 0.999),
    "lambda-low": _opt(float, 1.0),
    "lambda-high": _opt(float, 1.0),
    "lambda-rec": _opt(float, 1.0),
    "sigma": _opt(float, 3.0, help="frequency-split Gaussian sigma"),
    "kernel-size": _opt(int, 13, help="frequency-split kernel size (odd)"),
    "k": _opt(int, 3, help="cross-validation folds"),
    "round": _opt(int, 0, help="cross-validation round to run"),
    "seed-init": _opt(int, 1),
    "seed-data": _opt(int, 2),
    "seed-shuffle": _opt(int, 3),
    "input-size": _opt(int, 64),
    "encoder-filters": _opt(_parse_filters, network.REDUCED_ENCODER),
    "decoder-filters": _opt(_parse_filters, network.REDUCED_DECODER),
    "dropout": _opt(float, 0.5),
    "ablation": _opt(str, "full", help="unet | wo-freq | wo-att | full"),
    "mask-threshold": _opt(float, 0.01),
    "lr-decay": _opt(_parse_bool, False, flag=True),
    "out-dir": _opt(str, "runs"),
}

_EVAL_OPTS = dict(_TRAIN_OPTS)
_EVAL_OPTS["checkpoint"] = _opt(str, required=True)
_EVAL_OPTS["out-csv"] = _opt(str, None)

_CV_OPTS = {k: v for k, v in _TRAIN_OPTS.items() if k != "round"}
_ABLATE_OPTS = {k: v for k, v in _CV_OPTS.items() if k != "ablation"}

_GEN_OPTS = {
    "out": _opt(str, required=True, help="output directory"),
    "subjects": _opt(int, 30),
    "size": _opt(int, 64),
    "seed": _opt(int, 0),
}

_SPLIT_OPTS = {
    "in": _opt(str, required=True),
    "sigma": _opt(float, 3.0),
    "kernel-size": _opt(int, 13),
    "out-low": _opt(str, required=True),
    "out-high": _opt(str, required=True),
    "out-merged": _opt(str, None, help="optional exact reconstruction output"),
}

_METRICS_OPTS = {
    "a": _opt(str, required=True, help="reference image"),
    "b": _opt(str, required=True, help="comparison image"),
    "mask-threshold": _opt(float, 0.01),
}

_INFO_OPTS = {k: v for k, v in _TRAIN_OPTS.items() if k != "data"}

_SUBCOMMANDS = {
    "gen-data": _GEN_OPTS,
    "train": _TRAIN_OPTS,
    "eval": _EVAL_OPTS,
    "cv": _CV_OPTS,
    "ablate": _ABLATE_OPTS,
    "split-freq": _SPLIT_OPTS,
    "metrics": _METRICS_OPTS,
    "info": _INFO_OPTS,
}


def _build_parser():
    parser = _Parser(prog="freaunet",
                     description="Frequency-aware attention U-net toolkit")
    sub = parser.add_subparsers(dest="command")
    for name, table in _SUBCOMMANDS.items():
        p = sub.add_parser(name)
        p.error = parser.error
        p.add_argument("--config", type=str, default=None,
                       help="key = value config file; flags override it")
        for key, opt in table.items():
            if opt["flag"]:
                p.add_argument(f"--{key}", dest=key.replace("-", "_"),
                               action="store_const", const=True, default=None,
                               help=opt["help"])
            else:
                p.add_argument(f"--{key}", dest=key.replace("-", "_"),
                               type=opt["type"], default=None, help=opt["help"])
    return parser


def _read_config_file(path, table):
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in table:
            raise UsageError(
                f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                + ", ".join(sorted(table)))
        try:
            values[key] = table[key]["type"](value)
        except ValueError as e:
            raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {e}")
    return values


def _merge(ns, table):
    file_values = _read_config_file(ns.config, table) if ns.config else {}
    merged = {}
    for key, opt in table.items():
        dest = key.replace("-", "_")
        cli_val = getattr(ns, dest, None)
        if cli_val is not None:
            merged[dest] = cli_val
        elif key in file_values:
            merged[dest] = file_values[key]
        else:
            merged[dest] = opt["default"]
        if merged[dest] is None and opt["required"]:
            raise UsageError(f"missing required option --{key}")
    return merged


def _train_config(m):
    return trainer.TrainConfig(
        epochs=m["epochs"], lr=m["lr"], beta1=m["beta1"], beta2=m["beta2"],
        lambda_low=m["lambda_low"], lambda_high=m["lambda_high"],
        lambda_rec=m["lambda_rec"], sigma=m["sigma"],
        kernel_size=m["kernel_size"], k=m["k"], seed_init=m["seed_init"],
        seed_data=m["seed_data"], seed_shuffle=m["seed_shuffle"],
        input_size=m["input_size"], encoder_filters=m["encoder_filters"],
        decoder_filters=m["decoder_filters"], dropout_p=m["dropout"],
        ablation=m.get("ablation", "full"), mask_threshold=m["mask_threshold"],
        lr_decay=m["lr_decay"], out_dir=m["out_dir"]).validate()


def _load_data(m):
    return data_pipeline.load_dataset(m["data"], m["input_size"], m["sigma"],
                                      m["kernel_size"])


def _cmd_gen_data(m):
    ds = data_pipeline.synth_generate(m["subjects"], m["size"], m["seed"])
    data_pipeline.save_dataset(ds, m["out"])
    print(f"wrote {len(ds)} subject pairs ({m['size']}x{m['size']}) to {m['out']}")
    return 0


def _cmd_split_freq(m):
    img = image_ops.read_image(m["in"])
    pair = image_ops.freq_split(img.gray(), m["sigma"], m["kernel_size"])
    image_ops.write_image(
        m["out_low"], image_ops.ImageFile.from_gray(pair.low.data[0, 0], img.Q))
    image_ops.write_image(
        m["out_high"], image_ops.ImageFile.from_gray(pair.high.data[0, 0], img.Q))
    if m["out_merged"]:
        merged = image_ops.freq_merge(pair)
        image_ops.write_image(
            m["out_merged"],
            image_ops.ImageFile.from_gray(merged.data[0, 0], img.Q))
    print(f"split {m['in']} (sigma={m['sigma']}, size={m['kernel_size']})")
    return 0


def _cmd_metrics(m):
    a = image_ops.read_image(m["a"])
    b = image_ops.read_image(m["b"])
    mask = objectives.body_mask(a, m["mask_threshold"])
    print(f"mae={objectives.metric_mae(a, b, mask):.6g}")
    print(f"psnr={objectives.metric_psnr(a, b):.6g}")
    print(f"ssim={objectives.metric_ssim(a, b):.6g}")
    return 0


def _cmd_train(m):
    config = _train_config(m)
    dataset = _load_data(m)
    folds = data_pipeline.kfold_split(dataset, config.k, config.seed_data)
    model, record = trainer.train(config, dataset, folds, m["round"])
    report = trainer.evaluate(
        model, dataset, folds, m["round"], config.mask_threshold,
        Path(config.out_dir) / f"{config.ablation}_round{m['round']}_metrics.csv")
    record.metrics = report.summary()
    trainer.write_run_report(
        Path(config.out_dir) / f"{config.ablation}_round{m['round']}_run.json",
        record.to_dict())
    last = record.epoch_losses[-1]
    print(f"trained round {m['round']} for {config.epochs} epochs; "
          f"final loss {last.total:.6g}; checkpoint {record.checkpoint_path}")
    for name, (mean, std) in report.summary().items():
        print(f"{name}: {mean:.6g} ± {std:.6g}")
    return 0


def _cmd_eval(m):
    config = _train_config(m)
    model = network.load_checkpoint(m["checkpoint"])
    dataset = _load_data(m)
    folds = data_pipeline.kfold_split(dataset, config.k, config.seed_data)
    csv_path = m["out_csv"] or str(Path(config.out_dir) / "eval_metrics.csv")
    report = trainer.evaluate(model, dataset, folds, m["round"],
                              config.mask_threshold, csv_path)
    for name, (mean, std) in report.summary().items():
        print(f"{name}: {mean:.6g} ± {std:.6g}")
    print(f"wrote {csv_path}")
    return 0


def _cmd_cv(m):
    config = _train_config(m)
    dataset = _load_data(m)
    result = trainer.cross_validate(config, dataset)
    trainer.write_run_report(Path(config.out_dir) / "cv_report.json",
                             {"rounds": [r.to_dict() for r in result.records],
                              "summary": result.summary()})
    print(result.table_text(), end="")
    return 0


def _cmd_ablate(m):
    config = _train_config({**m, "ablation": "full"})
    dataset = _load_data(m)
    result = trainer.ablate(config, dataset)
    text = result.table_text()
    (Path(config.out_dir) / "ablation_table.txt").write_text(text,
                                                             encoding="utf-8")
    trainer.write_run_report(Path(config.out_dir) / "ablation_report.json",
                             result.to_dict())
    print(text, end="")
    return 0


def _cmd_info(m):
    print(f"freaunet {__version__}")
    print(f"numpy {np.__version__}")
    for key in sorted(_INFO_OPTS):
        print(f"{key} = {m[key.replace('-', '_')]}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "ablate": _cmd_ablate,
    "split-freq": _cmd_split_freq,
    "metrics": _cmd_metrics,
    "info": _cmd_info,
}


def main(argv=None):
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("a subcommand is required")
        merged = _merge(ns, _SUBCOMMANDS[ns.command])
        return _HANDLERS[ns.command](merged)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, OSError, trainer.TrainingDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
