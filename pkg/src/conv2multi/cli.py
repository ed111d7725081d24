"""Command-line interface: ``conv2multi <synth|train|predict|eval|cv|grid|plot>``.

Settings resolve as built-in defaults < ``--config`` JSON < ``--set key=value``
< dedicated flags. Failures print a single ``error: ...`` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

DEFAULTS = {
    "seed": 0,
    "data_dir": "data",
    "runs_dir": "runs",
    "synth": {
        "n": 16,
        "size": 64,
        "n_blobs": 12,
        "blob_sigma": 1.5,
        "probe_sigma_conv": 3.0,
        "probe_sigma_multi": 1.2,
        "saturation_beta": 2.0,
        "noise_sigma": 0.01,
    },
    "gan": {
        "learning_rate": 2e-4,
        "batch_size": 3,
        "optimizer": "ADAM",
        "rec_loss": "MSE",
        "rec_weight": 100.0,
        "epochs": 200,
        "base_channels": 32,
    },
    "poly": {"window": 3, "degree": 2, "samples_per_image": 2000},
    "cv": {"k": 5},
}


class UsageError(Exception):
    pass


class CommandError(Exception):
    pass


@dataclass
class CliConfig:
    subcommand: str
    data_dir: Path
    runs_dir: Path
    overrides: list[tuple[str, object]] = field(default_factory=list)
    values: dict = field(default_factory=dict)

    def get(self, dotted: str):
        node = self.values
        for part in dotted.split("."):
            node = node[part]
        return node


def _lookup(tree: dict, dotted: str):
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise UsageError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise UsageError(f"unknown config key {dotted!r}")
    return node, parts[-1]


def _coerce(key: str, template, value):
    if isinstance(value, str) and not isinstance(template, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            raise UsageError(f"{key}: cannot parse {value!r}") from None
    if isinstance(template, bool) or template is None:
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise UsageError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        return str(value)
    return value


def apply_override(tree: dict, dotted: str, value) -> None:
    node, leaf = _lookup(tree, dotted)
    node[leaf] = _coerce(dotted, node[leaf], value)


def _flatten(doc: dict, prefix: str = ""):
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, path + ".")
        else:
            yield path, value


def resolve(args, flag_keys: dict[str, str]) -> CliConfig:
    values = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        for dotted, value in _flatten(doc):
            apply_override(values, dotted, value)
    overrides = []
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        apply_override(values, key.strip(), raw)
        overrides.append((key.strip(), raw))
    for dest, dotted in flag_keys.items():
        value = getattr(args, dest, None)
        if value is not None:
            apply_override(values, dotted, value)
            overrides.append((dotted, value))
    return CliConfig(
        args.command, Path(values["data_dir"]), Path(values["runs_dir"]), overrides, values
    )


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default(dotted: str):
    node = DEFAULTS
    for part in dotted.split("."):
        node = node[part]
    return node


_FLAG_KEYS: dict[str, dict[str, str]] = {}


def _flag(sub, command: str, name: str, dotted: str, type_, help_: str, **kw):
    dest = name.lstrip("-").replace("-", "_")
    sub.add_argument(name, dest=dest, type=type_, default=None, help=f"{help_} (default: {_default(dotted)})", **kw)
    _FLAG_KEYS.setdefault(command, {})[dest] = dotted


def _shared(sub, command: str):
    _flag(sub, command, "--data-dir", "data_dir", str, "paired dataset directory (conv/, multi/)")
    _flag(sub, command, "--runs-dir", "runs_dir", str, "run records directory")
    _flag(sub, command, "--seed", "seed", int, "seed for every random choice")
    sub.add_argument("--config", default=None, help="JSON config file layered over the defaults (default: none)")
    sub.add_argument(
        "--set",
        action="append",
        default=None,
        metavar="KEY=VALUE",
        help="dotted-key override, repeatable, e.g. gan.epochs=5 (default: none)",
    )


def _gan_flags(sub, command):
    _flag(sub, command, "--epochs", "gan.epochs", int, "GAN training epochs")
    _flag(sub, command, "--batch-size", "gan.batch_size", int, "GAN batch size")
    _flag(sub, command, "--lr", "gan.learning_rate", float, "GAN learning rate")
    _flag(sub, command, "--optimizer", "gan.optimizer", str.upper, "ADAM or SGD")
    _flag(sub, command, "--rec-loss", "gan.rec_loss", str.upper, "MAE, MSE or MAE_MSE_BLEND")
    _flag(sub, command, "--rec-weight", "gan.rec_weight", float, "weight of the reconstruction term")
    _flag(sub, command, "--base-channels", "gan.base_channels", int, "network width")


def _poly_flags(sub, command):
    _flag(sub, command, "--window", "poly.window", int, "polynomial neighbourhood width")
    _flag(sub, command, "--degree", "poly.degree", int, "polynomial total degree")
    _flag(sub, command, "--samples-per-image", "poly.samples_per_image", int, "sampled pixels per training image")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conv2multi", description="Translate convolution STEM images into multislice predictions.")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("synth", help="write a synthetic paired dataset")
    _shared(p, "synth")
    _flag(p, "synth", "--n", "synth.n", int, "number of pairs")
    _flag(p, "synth", "--size", "synth.size", int, "image size in pixels (power of two >= 16)")
    _flag(p, "synth", "--n-blobs", "synth.n_blobs", int, "blobs per latent structure")
    _flag(p, "synth", "--beta", "synth.saturation_beta", float, "saturation strength of the multislice response")
    _flag(p, "synth", "--noise", "synth.noise_sigma", float, "multislice noise std (unit scale)")

    p = subs.add_parser("train", help="train a GAN or polynomial model on a whole dataset")
    _shared(p, "train")
    p.add_argument("--model", choices=["gan", "poly"], default="gan", help="model kind (default: gan)")
    p.add_argument("--out", required=True, help="checkpoint directory to write (required)")
    _gan_flags(p, "train")
    _poly_flags(p, "train")

    p = subs.add_parser("predict", help="translate convolution images with a trained model")
    _shared(p, "predict")
    p.add_argument("--model", choices=["gan", "poly", "identity"], default="gan", help="model kind (default: gan)")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory from `train` (default: none)")
    p.add_argument("--input", default=None, help="directory of convolution PNGs (default: <data-dir>/conv)")
    p.add_argument("--out", required=True, help="directory for predicted PNGs (required)")

    p = subs.add_parser("eval", help="score predicted PNGs against a dataset's multislice images")
    _shared(p, "eval")
    p.add_argument("--pred-dir", required=True, help="directory of predicted <id>.png files (required)")
    p.add_argument("--out", default=None, help="output directory for metrics.csv/json (default: <pred-dir>)")

    p = subs.add_parser("cv", help="k-fold cross-validation")
    _shared(p, "cv")
    p.add_argument("--model", choices=["gan", "poly", "identity"], default="gan", help="model kind (default: gan)")
    _flag(p, "cv", "--k", "cv.k", int, "number of folds")
    p.add_argument("--save-models", action="store_true", help="write per-fold checkpoints under models/ (default: off)")
    _gan_flags(p, "cv")
    _poly_flags(p, "cv")

    p = subs.add_parser("grid", help="first-fold hyperparameter grid search for the GAN")
    _shared(p, "grid")
    p.add_argument("--grid", required=True, help="grid JSON file (required)")
    _flag(p, "grid", "--k", "cv.k", int, "number of folds in the fold plan")
    p.add_argument("--out", default=None, help="output directory (default: <runs-dir>/grid-<hash>)")

    p = subs.add_parser("plot", help="epoch curves or SSIM triptychs")
    _shared(p, "plot")
    p.add_argument("mode", choices=["curves", "triptych"], help="figure kind")
    p.add_argument("--runs", nargs="*", default=[], help="run ids for `curves` (default: none)")
    p.add_argument("--pairs", nargs="*", default=[], help="pair ids for `triptych` (default: none)")
    p.add_argument("--pred-dir", default=None, help="predicted PNGs for `triptych` (default: none)")
    p.add_argument("--out", required=True, help="output figure path, .png or .svg (required)")
    return parser


# -- commands -----------------------------------------------------------------------


def _hyperparams(cfg: CliConfig):
    from .gan import HyperParams

    return HyperParams(seed=cfg.get("seed"), **cfg.get("gan"))


def _poly_settings(cfg: CliConfig):
    from .experiments import PolySettings

    return PolySettings(seed=cfg.get("seed"), **cfg.get("poly"))


def _load_data(cfg: CliConfig):
    from .imaging import load_dataset

    if not (cfg.data_dir / "conv").is_dir():
        raise CommandError(f"no dataset at {cfg.data_dir}")
    return load_dataset(cfg.data_dir)


def cmd_synth(cfg: CliConfig, args) -> int:
    from .synthdata import SynthConfig, generate_dataset, write_dataset

    s = cfg.get("synth")
    if s["n"] < 1:
        raise UsageError("--n must be >= 1")
    try:
        config = SynthConfig(
            seed=cfg.get("seed"),
            image_size=s["size"],
            n_blobs=s["n_blobs"],
            blob_sigma=s["blob_sigma"],
            probe_sigma_conv=s["probe_sigma_conv"],
            probe_sigma_multi=s["probe_sigma_multi"],
            saturation_beta=s["saturation_beta"],
            noise_sigma=s["noise_sigma"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = generate_dataset(config, s["n"])
    try:
        write_dataset(dataset, config, cfg.data_dir)
    except OSError as exc:
        raise CommandError(f"cannot write {cfg.data_dir}: {exc.strerror or exc}") from None
    print(f"wrote {len(dataset)} pairs to {cfg.data_dir}")
    return 0


def cmd_train(cfg: CliConfig, args) -> int:
    dataset = _load_data(cfg)
    out = Path(args.out)
    if args.model == "gan":
        from .gan import train

        model, _ = train(dataset, _hyperparams(cfg))
        model.save(out)
    else:
        from .baselines import fit_poly

        ps = _poly_settings(cfg)
        model = fit_poly(dataset, ps.window, ps.degree, ps.samples_per_image, ps.seed)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "poly.json")
    print(f"saved {args.model} model to {out}")
    return 0


def _load_predictor(kind: str, checkpoint):
    if kind == "identity":
        return lambda convs: list(convs)
    if checkpoint is None:
        raise UsageError(f"--checkpoint is required for --model {kind}")
    ckpt = Path(checkpoint)
    if kind == "gan":
        from .gan import GanModel, predict_many

        if not (ckpt / "model.json").is_file():
            raise CommandError(f"no GAN checkpoint at {ckpt}")
        model = GanModel.load(ckpt)
        return lambda convs: predict_many(model, list(convs))
    from .baselines import PolyModel, predict_poly

    if not (ckpt / "poly.json").is_file():
        raise CommandError(f"no polynomial checkpoint at {ckpt}")
    model = PolyModel.load(ckpt / "poly.json")
    return lambda convs: [predict_poly(model, c) for c in convs]


def cmd_predict(cfg: CliConfig, args) -> int:
    from .imaging import load_png, save_png

    src = Path(args.input) if args.input else cfg.data_dir / "conv"
    files = sorted(src.glob("*.png"))
    if not files:
        raise CommandError(f"no PNG files in {src}")
    predictor = _load_predictor(args.model, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = predictor(load_png(f) for f in files)
    for f, img in zip(files, preds):
        save_png(img, out / f.name)
    print(f"wrote {len(files)} predictions to {out}")
    return 0


def _load_predictions(pred_dir: Path, dataset, ids=None):
    from .imaging import load_png

    ids = ids if ids is not None else [p.stem for p in sorted(pred_dir.glob("*.png"))]
    if not ids:
        raise CommandError(f"no predictions in {pred_dir}")
    preds = []
    for pid in ids:
        if pid not in dataset:
            raise CommandError(f"unknown pair id {pid!r}")
        path = pred_dir / f"{pid}.png"
        if not path.is_file():
            raise CommandError(f"no prediction for pair {pid!r} in {pred_dir}")
        preds.append((pid, load_png(path)))
    return preds


def cmd_eval(cfg: CliConfig, args) -> int:
    from .metrics import evaluate_pairs

    dataset = _load_data(cfg)
    pred_dir = Path(args.pred_dir)
    report = evaluate_pairs(_load_predictions(pred_dir, dataset), dataset)
    out = Path(args.out) if args.out else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "metrics.csv", out / "metrics.json")
    print(f"pairs={len(report.per_pair)} mean_frac_rmse_pct={report.mean_frac_rmse_pct:.4f} "
          f"mean_ssim={report.mean_ssim:.4f}")
    return 0


def cmd_cv(cfg: CliConfig, args) -> int:
    from .experiments import allocate_run_id, format_table, run_cv, save_run
    from .experiments import run_dir as _run_dir

    k = cfg.get("cv.k")
    if k < 2:
        raise UsageError("--k must be >= 2")
    dataset = _load_data(cfg)
    if len(dataset) < k:
        raise CommandError(f"dataset has {len(dataset)} pairs, fewer than k={k}")
    kind = args.model.upper()
    settings = {"GAN": _hyperparams, "POLY": _poly_settings}.get(kind, lambda c: None)(cfg)

    pending = {}

    def keep(fold, model):
        if args.save_models:
            pending[fold] = model

    record = run_cv(dataset, kind, settings, k=k, seed=cfg.get("seed"), on_fold_model=keep)
    record = save_run(record, cfg.runs_dir)
    for fold, model in pending.items():
        dest = _run_dir(cfg.runs_dir, record.run_id) / "models" / f"fold{fold}"
        if kind == "GAN":
            model.save(dest)
        else:
            dest.mkdir(parents=True, exist_ok=True)
            model.save(dest / "poly.json")
    print(format_table(record))
    print(f"run: {record.run_id}")
    return 0


def cmd_grid(cfg: CliConfig, args) -> int:
    import csv

    from . import experiments
    from .experiments import GridSpec, GridSpecError, LEAKAGE_NOTE, config_hash, make_folds, run_grid

    try:
        doc = json.loads(Path(args.grid).read_text())
    except FileNotFoundError:
        raise UsageError(f"grid file {args.grid} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"grid file {args.grid}: invalid JSON: {exc}") from None
    try:
        grid = GridSpec.from_json(doc)
    except GridSpecError as exc:
        raise UsageError(f"grid schema: {exc}") from None
    dataset = _load_data(cfg)
    k = cfg.get("cv.k")
    if len(dataset) < k:
        raise CommandError(f"dataset has {len(dataset)} pairs, fewer than k={k}")
    plan = make_folds(len(dataset), k, cfg.get("seed"))
    best, table = run_grid(dataset, grid, plan, experiments.gan_trainer)
    out = Path(args.out) if args.out else cfg.runs_dir / f"grid-{config_hash(grid.to_json())}"
    out.mkdir(parents=True, exist_ok=True)
    fields = ["learning_rate", "batch_size", "optimizer", "rec_loss", "frac_rmse_pct"]
    with open(out / "grid_results.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for hp, score in table:
            writer.writerow([repr(hp.learning_rate), hp.batch_size, hp.optimizer.value, hp.rec_loss.value, repr(score)])
    best_score = min(s for _, s in table)
    (out / "best.json").write_text(
        json.dumps({"hyperparams": best.to_json(), "frac_rmse_pct": best_score, "note": LEAKAGE_NOTE}, indent=2) + "\n"
    )
    print(f"evaluated {len(table)} configurations; best frac RMSE {best_score:.2f}% -> {out}")
    return 0


def cmd_plot(cfg: CliConfig, args) -> int:
    from . import plotting

    out = Path(args.out)
    if args.mode == "curves":
        from .experiments import RunNotFoundError, load_run

        if not args.runs:
            raise UsageError("plot curves needs at least one --runs id")
        records = []
        for run_id in args.runs:
            try:
                records.append(load_run(run_id, cfg.runs_dir))
            except RunNotFoundError:
                raise CommandError(f"unknown run id {run_id!r}") from None
        try:
            labels = plotting.plot_curves(records, out)
        except ValueError as exc:
            raise CommandError(str(exc)) from None
        print(f"wrote {out} with {len(labels)} series")
        return 0

    if not args.pairs:
        raise UsageError("plot triptych needs at least one --pairs id")
    if not args.pred_dir:
        raise UsageError("plot triptych needs --pred-dir")
    dataset = _load_data(cfg)
    preds = dict(_load_predictions(Path(args.pred_dir), dataset, args.pairs))
    rows = [(pid, dataset[pid].conv, preds[pid], dataset[pid].multi) for pid in args.pairs]
    notes = plotting.plot_triptychs(rows, out)
    for pid, note in zip(args.pairs, notes):
        print(f"{pid}: {note}")
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "grid": cmd_grid,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args, _FLAG_KEYS.get(args.command, {}))
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
