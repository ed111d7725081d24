"""Cross-validation, first-fold grid search, epoch-stability scoring and run records.

Run directory layout::

    runs/<run_id>/config.json          configuration, mean score, provenance
    runs/<run_id>/folds.json           fold assignment and per-fold scores
    runs/<run_id>/scores.csv           fold,frac_rmse_pct
    runs/<run_id>/curve_fold<f>.csv    epoch,eval_frac_rmse_pct (GAN runs)
    runs/<run_id>/models/              optional checkpoints
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from . import __version__, baselines, gan
from .gan import EpochCurve, HyperParams, Optimizer, RecLoss
from .imaging import Dataset
from .metrics import AGGREGATION, mean_frac_rmse_pct

DEFAULT_TAIL = 20

LEAKAGE_NOTE = (
    "hyperparameters were selected on fold 0, which is also one of the "
    "cross-validation test folds; scores may be optimistic"
)


class ModelKind(str, Enum):
    GAN = "GAN"
    POLY = "POLY"
    IDENTITY = "IDENTITY"


class FoldError(ValueError):
    pass


class GridSpecError(ValueError):
    pass


class RunNotFoundError(FileNotFoundError):
    pass


class CorruptRunError(ValueError):
    pass


@dataclass(frozen=True)
class PolySettings:
    window: int = baselines.DEFAULT_WINDOW
    degree: int = baselines.DEFAULT_DEGREE
    samples_per_image: int = baselines.DEFAULT_SAMPLES_PER_IMAGE
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


# -- folds ------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    n_items: int
    k: int
    seed: int
    assignment: tuple[int, ...]

    def fold(self, f: int) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a == f]

    def complement(self, f: int) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a != f]

    def sizes(self) -> list[int]:
        return [self.assignment.count(f) for f in range(self.k)]


def make_folds(n_items: int, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle indices by ``seed`` and deal them round-robin into ``k`` folds."""
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    if n_items < k:
        raise FoldError(f"cannot split {n_items} items into {k} folds")
    order = np.random.default_rng(int(seed) & 0xFFFFFFFF).permutation(n_items)
    assignment = [0] * n_items
    for pos, item in enumerate(order):
        assignment[int(item)] = pos % k
    return FoldPlan(n_items, k, seed, tuple(assignment))


# -- run records --------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    config: dict
    fold_scores: tuple[float, ...]
    mean_score: float
    curves: tuple[EpochCurve, ...] = ()
    assignment: tuple[int, ...] = ()
    created_at: str = field(default_factory=_now)
    code_version: str = __version__

    @classmethod
    def build(cls, config: dict, fold_scores: Sequence[float], curves=(), assignment=(), run_id: str = ""):
        scores = tuple(float(s) for s in fold_scores)
        if not scores:
            raise ValueError("a run needs at least one fold score")
        return cls(run_id, config, scores, math.fsum(scores) / len(scores), tuple(curves), tuple(assignment))


def run_cv(
    dataset: Dataset,
    model_kind,
    settings: HyperParams | PolySettings | None = None,
    k: int = 5,
    seed: int = 0,
    on_fold_model: Callable[[int, object], None] | None = None,
) -> RunRecord:
    """k-fold cross-validation: train on k-1 folds, score mean fractional RMSE on the held-out one."""
    kind = ModelKind(str(getattr(model_kind, "value", model_kind)).upper())
    if len(dataset) < k:
        raise FoldError(f"dataset of {len(dataset)} pairs is too small for {k} folds")
    plan = make_folds(len(dataset), k, seed)
    if kind is ModelKind.GAN:
        settings = settings or HyperParams(seed=seed)
    elif kind is ModelKind.POLY:
        settings = settings or PolySettings(seed=seed)

    scores, curves = [], []
    for f in range(k):
        train_set = dataset.subset(plan.complement(f))
        eval_set = dataset.subset(plan.fold(f))
        if kind is ModelKind.IDENTITY:
            preds = [p.conv for p in eval_set]
            model = None
        elif kind is ModelKind.POLY:
            model = baselines.fit_poly(
                train_set, settings.window, settings.degree, settings.samples_per_image, settings.seed
            )
            preds = [baselines.predict_poly(model, p.conv) for p in eval_set]
        else:
            model, curve = gan.train(train_set, settings, eval_set)
            curves.append(curve)
            preds = gan.predict_many(model, [p.conv for p in eval_set])
        scores.append(mean_frac_rmse_pct(zip(eval_set.ids, preds), eval_set))
        if on_fold_model is not None and model is not None:
            on_fold_model(f, model)

    config = {
        "kind": "cv",
        "model": kind.value,
        "k": k,
        "seed": seed,
        "settings": settings.to_json() if settings is not None else None,
        "dataset": {
            "n_pairs": len(dataset),
            "image_size": dataset.image_size,
            "provenance": dataset.provenance,
        },
        "aggregation": AGGREGATION,
        "selection": "final epoch",
    }
    return RunRecord.build(config, scores, curves, plan.assignment)


# -- grid search ----------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    learning_rates: tuple[float, ...]
    batch_sizes: tuple[int, ...]
    optimizers: tuple[Optimizer, ...]
    rec_losses: tuple[RecLoss, ...]
    epochs: int = 200
    rec_weight: float = 100.0
    seed: int = 0
    base_channels: int = 32

    def __post_init__(self):
        for name in ("learning_rates", "batch_sizes", "optimizers", "rec_losses"):
            values = tuple(getattr(self, name))
            if not values:
                raise GridSpecError(f"{name}: must be a non-empty list")
            object.__setattr__(self, name, values)
        object.__setattr__(self, "optimizers", tuple(Optimizer(gan._enum_value(o)) for o in self.optimizers))
        object.__setattr__(self, "rec_losses", tuple(RecLoss(gan._enum_value(r)) for r in self.rec_losses))

    def __len__(self):
        return len(self.learning_rates) * len(self.batch_sizes) * len(self.optimizers) * len(self.rec_losses)

    def combinations(self) -> list[HyperParams]:
        """Cartesian product; learning rate varies slowest, reconstruction loss fastest."""
        return [
            HyperParams(lr, bs, opt, rl, self.rec_weight, self.epochs, self.seed, self.base_channels)
            for lr, bs, opt, rl in itertools.product(
                self.learning_rates, self.batch_sizes, self.optimizers, self.rec_losses
            )
        ]

    def to_json(self) -> dict:
        return {
            "learning_rates": list(self.learning_rates),
            "batch_sizes": list(self.batch_sizes),
            "optimizers": [o.value for o in self.optimizers],
            "rec_losses": [r.value for r in self.rec_losses],
            "epochs": self.epochs,
            "rec_weight": self.rec_weight,
            "seed": self.seed,
            "base_channels": self.base_channels,
        }

    @classmethod
    def from_json(cls, doc) -> "GridSpec":
        if not isinstance(doc, dict):
            raise GridSpecError("grid file must hold a JSON object")
        known = {
            "learning_rates": (float, int),
            "batch_sizes": (int,),
            "optimizers": (str,),
            "rec_losses": (str,),
        }
        scalars = {"epochs": int, "rec_weight": (float, int), "seed": int, "base_channels": int}
        for key in doc:
            if key not in known and key not in scalars:
                raise GridSpecError(f"{key}: unknown grid key")
        for key, types in known.items():
            if key not in doc:
                raise GridSpecError(f"{key}: missing required key")
            value = doc[key]
            if not isinstance(value, list) or not value:
                raise GridSpecError(f"{key}: must be a non-empty list")
            if not all(isinstance(v, types) and not isinstance(v, bool) for v in value):
                raise GridSpecError(f"{key}: has an entry of the wrong type")
        for key, types in scalars.items():
            if key in doc and (not isinstance(doc[key], types) or isinstance(doc[key], bool)):
                raise GridSpecError(f"{key}: has the wrong type")
        try:
            optimizers = [Optimizer(gan._enum_value(o)) for o in doc["optimizers"]]
        except ValueError as exc:
            raise GridSpecError(f"optimizers: {exc}") from None
        try:
            rec_losses = [RecLoss(gan._enum_value(r)) for r in doc["rec_losses"]]
        except ValueError as exc:
            raise GridSpecError(f"rec_losses: {exc}") from None
        return cls(
            tuple(float(x) for x in doc["learning_rates"]),
            tuple(doc["batch_sizes"]),
            tuple(optimizers),
            tuple(rec_losses),
            **{k: doc[k] for k in scalars if k in doc},
        )


FULL_GRID = GridSpec(
    learning_rates=(0.002, 0.0002, 0.00002),
    batch_sizes=(1, 2, 3, 5, 8, 10, 12, 13, 15, 20),
    optimizers=(Optimizer.ADAM, Optimizer.SGD),
    rec_losses=(RecLoss.MAE, RecLoss.MSE, RecLoss.MAE_MSE_BLEND),
)


def gan_trainer(train_set: Dataset, eval_set: Dataset, hp: HyperParams) -> float:
    model, _ = gan.train(train_set, hp)
    preds = gan.predict_many(model, [p.conv for p in eval_set])
    return mean_frac_rmse_pct(zip(eval_set.ids, preds), eval_set)


def run_grid(
    dataset: Dataset,
    grid: GridSpec,
    fold_plan: FoldPlan,
    trainer: Callable[[Dataset, Dataset, HyperParams], float] = gan_trainer,
    max_workers: int = 1,
) -> tuple[HyperParams, list[tuple[HyperParams, float]]]:
    """Score every grid combination on fold 0 after training on the other folds.

    The table keeps enumeration order regardless of completion order; ties go to the
    earliest combination.
    """
    if fold_plan.n_items != len(dataset):
        raise FoldError(f"fold plan covers {fold_plan.n_items} items, dataset has {len(dataset)}")
    train_set = dataset.subset(fold_plan.complement(0))
    eval_set = dataset.subset(fold_plan.fold(0))
    combos = grid.combinations()
    if max_workers > 1:
        with ProcessPoolExecutor(max_workers) as pool:
            futures = [pool.submit(trainer, train_set, eval_set, hp) for hp in combos]
            scores = [fut.result() for fut in futures]
    else:
        scores = [trainer(train_set, eval_set, hp) for hp in combos]
    table = list(zip(combos, (float(s) for s in scores)))
    best_i = min(range(len(table)), key=lambda i: (table[i][1], i))
    return table[best_i][0], table


def stability_score(curve: EpochCurve, tail: int = DEFAULT_TAIL) -> float:
    """Population std of the last ``tail`` evaluation errors."""
    if tail < 2:
        raise ValueError("tail must be >= 2")
    if len(curve) < tail:
        raise ValueError(f"curve has {len(curve)} epochs, fewer than tail={tail}")
    return float(np.std(curve.errors[-tail:]))


# -- persistence ------------------------------------------------------------------

_RUN_ID = re.compile(r"^(\d{4,})-([0-9a-f]{8})$")

_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["run_id", "config", "mean_score", "created_at", "code_version", "n_curves"],
    "properties": {
        "run_id": {"type": "string", "pattern": _RUN_ID.pattern},
        "config": {"type": "object"},
        "mean_score": {"type": "number"},
        "created_at": {"type": "string"},
        "code_version": {"type": "string"},
        "n_curves": {"type": "integer", "minimum": 0},
    },
}

_FOLDS_SCHEMA = {
    "type": "object",
    "required": ["fold_scores", "assignment"],
    "properties": {
        "fold_scores": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "assignment": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def list_runs(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if p.is_dir() and _RUN_ID.match(p.name))


def allocate_run_id(root, config: dict) -> str:
    counters = [int(_RUN_ID.match(r).group(1)) for r in list_runs(root)]
    return f"{max(counters, default=0) + 1:04d}-{config_hash(config)}"


def run_dir(root, run_id: str) -> Path:
    return Path(root) / run_id


def save_run(record: RunRecord, root) -> RunRecord:
    """Write ``record`` under ``root``; a record without an id is given a fresh one.

    Returns the record as stored (with its id).
    """
    if not record.run_id:
        record = RunRecord(
            allocate_run_id(root, record.config),
            record.config,
            record.fold_scores,
            record.mean_score,
            record.curves,
            record.assignment,
            record.created_at,
            record.code_version,
        )
    d = run_dir(root, record.run_id)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "run_id": record.run_id,
        "config": record.config,
        "mean_score": record.mean_score,
        "created_at": record.created_at,
        "code_version": record.code_version,
        "n_curves": len(record.curves),
    }
    (d / "config.json").write_text(json.dumps(meta, indent=2) + "\n")
    folds = {"fold_scores": list(record.fold_scores), "assignment": list(record.assignment)}
    (d / "folds.json").write_text(json.dumps(folds, indent=2) + "\n")
    with open(d / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "frac_rmse_pct"])
        for f, s in enumerate(record.fold_scores):
            writer.writerow([f, repr(s)])
    for f, curve in enumerate(record.curves):
        with open(d / f"curve_fold{f}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "eval_frac_rmse_pct"])
            for epoch, err in curve.entries:
                writer.writerow([epoch, repr(err)])
    return record


def _read_json(path: Path, schema: dict):
    try:
        doc = json.loads(path.read_text())
        jsonschema.validate(doc, schema)
    except FileNotFoundError:
        raise CorruptRunError(f"{path.name} is missing") from None
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise CorruptRunError(f"{path}: {getattr(exc, 'message', exc)}") from None
    return doc


def _read_csv(path: Path, header: list[str]) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise CorruptRunError(f"{path.name} is missing") from None
    if not rows or rows[0] != header:
        raise CorruptRunError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def load_run(run_id: str, root) -> RunRecord:
    d = run_dir(root, run_id)
    if not (d / "config.json").is_file():
        raise RunNotFoundError(f"no run {run_id!r} under {root}")
    meta = _read_json(d / "config.json", _CONFIG_SCHEMA)
    folds = _read_json(d / "folds.json", _FOLDS_SCHEMA)
    if meta["run_id"] != run_id:
        raise CorruptRunError(f"{d}: config.json names run {meta['run_id']!r}")
    try:
        rows = _read_csv(d / "scores.csv", ["fold", "frac_rmse_pct"])
        scores = tuple(float(r[1]) for r in rows)
        curves = []
        for f in range(meta["n_curves"]):
            rows = _read_csv(d / f"curve_fold{f}.csv", ["epoch", "eval_frac_rmse_pct"])
            curves.append(EpochCurve(tuple((int(r[0]), float(r[1])) for r in rows)))
    except (ValueError, IndexError) as exc:
        if isinstance(exc, CorruptRunError):
            raise
        raise CorruptRunError(f"{d}: {exc}") from None
    if list(scores) != folds["fold_scores"]:
        raise CorruptRunError(f"{d}: scores.csv disagrees with folds.json")
    mean = math.fsum(scores) / len(scores)
    if not math.isclose(mean, meta["mean_score"], rel_tol=1e-12, abs_tol=1e-300):
        raise CorruptRunError(f"{d}: stored mean {meta['mean_score']} != mean of fold scores {mean}")
    return RunRecord(
        run_id,
        meta["config"],
        scores,
        meta["mean_score"],
        tuple(curves),
        tuple(folds["assignment"]),
        meta["created_at"],
        meta["code_version"],
    )


def format_table(record: RunRecord) -> str:
    """Per-fold scores and their mean, one row per fold."""
    lines = ["Fold\tFrac RMSE"]
    lines += [f"{f + 1}\t{s:.2f}%" for f, s in enumerate(record.fold_scores)]
    lines.append(f"Mean\t{record.mean_score:.2f}%")
    return "\n".join(lines)
