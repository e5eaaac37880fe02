"""Experiment harness: configuration, training loop, evaluation metrics
and the configuration sweep.

A run trains one (architecture, aggregation) pair with grouped Adam,
global-norm clipping, plateau LR reduction and early stopping, restores
the best-validation parameters, then evaluates the clean and the
noise-corrupted test set.  The robustness score is the ratio of the two
accuracies.  Everything that varies is derived from the config and its
seed, so reports are reproducible number for number (wall-clock aside).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from .checkpoint import save_checkpoint
from .layers import softmax_xent
from .model import (
    AGGREGATION_KINDS,
    ARCHS,
    Model,
    aggregation_layer,
    build_cnn,
    build_mlp,
)
from .ops import InvalidValueError, sigmoid, softmax
from .optim import Adam, EarlyStopper, NonFiniteGradient, PlateauScheduler, build_param_groups


class TrainingDiverged(RuntimeError):
    """Loss or a gradient became non-finite; carries the failing step."""

    def __init__(self, message, seed=None, epoch=None, batch_index=None):
        super().__init__(message)
        self.seed = seed
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class ExperimentConfig:
    arch: str = "mlp"
    aggregation: str = "baseline"
    data: str = "synthetic"  # "cifar10" | "synthetic"
    data_dir: str = "data"
    batch_size: int = 128
    max_epochs: int = 60
    seed: int = 0
    proj_dim: int | None = None  # defaults: 128 (mlp) / 256 (cnn)
    hidden_dim: int | None = None
    classes: int = 10
    lr_standard: float = 1e-3
    lr_novel: float = 1e-2
    clip_norm: float = 1.0
    sched_factor: float = 0.5
    sched_patience: int = 5
    sched_min_delta: float = 1e-4
    sched_min_lr: float = 1e-6
    early_stop_patience: int = 10
    eps: float = 1e-8
    noise_sigma: float = 0.15
    noise_seed: int = 1234
    val_size: int = 5000
    synthetic_train: int = 2000
    synthetic_val: int = 400
    synthetic_test: int = 400
    synthetic_sigma: float = 0.08

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.aggregation not in AGGREGATION_KINDS:
            raise ValueError(
                f"aggregation must be one of {AGGREGATION_KINDS}, got {self.aggregation!r}"
            )
        default_width = 128 if self.arch == "mlp" else 256
        if self.proj_dim is None:
            self.proj_dim = default_width
        if self.hidden_dim is None:
            self.hidden_dim = self.proj_dim
        if self.proj_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("widths must be positive")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    config: dict
    seed: int
    epochs: list[dict] = field(default_factory=list)  # per-epoch metrics
    clean_accuracy: float | None = None
    noisy_accuracy: float | None = None
    rho: float | None = None
    best_epoch: int | None = None
    stopped_early: bool = False
    wall_clock_sec: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    CSV_COLUMNS = [
        "epoch", "train_loss", "val_loss", "val_acc",
        "lr_standard", "lr_novel", "mean_p", "mean_sigma", "mean_alpha",
    ]

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.CSV_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for row in self.epochs:
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in self.CSV_COLUMNS})


def build_model(config: ExperimentConfig) -> Model:
    """Construct and initialize the configured architecture."""
    rng = np.random.default_rng(config.seed)
    if config.arch == "mlp":
        return build_mlp(
            config.aggregation, rng, in_dim=3072, proj_dim=config.proj_dim,
            hidden_dim=config.hidden_dim, classes=config.classes, eps=config.eps,
        )
    return build_cnn(
        config.aggregation, rng, proj_dim=config.proj_dim,
        hidden_dim=config.hidden_dim, classes=config.classes, eps=config.eps,
    )


def _prepare_input(images: np.ndarray, arch: str) -> np.ndarray:
    if arch == "mlp":
        return images.reshape(images.shape[0], -1)
    return images


def load_datasets(config: ExperimentConfig):
    """Return (train, val, test) datasets per the config's data source."""
    if config.data == "cifar10":
        train, test = datamod.load_cifar10(config.data_dir)
        train, val = datamod.train_val_split(train, config.val_size, config.seed)
        return train, val, test
    if config.data == "synthetic":
        n = config.synthetic_train + config.synthetic_val + config.synthetic_test
        full = datamod.make_synthetic(
            n, config.classes, seed=config.seed, sigma_blob=config.synthetic_sigma
        )
        a = config.synthetic_train
        b = a + config.synthetic_val
        train = datamod.Dataset(full.images[:a], full.labels[:a], split="train")
        val = datamod.Dataset(full.images[a:b], full.labels[a:b], split="val")
        test = datamod.Dataset(full.images[b:], full.labels[b:], split="test")
        return train, val, test
    raise ValueError(f"unknown data source {config.data!r}")


def evaluate(model: Model, dataset, arch: str, noise: datamod.NoiseSpec | None = None,
             batch_size: int = 256) -> float:
    """Argmax accuracy, with optional on-the-fly Gaussian corruption."""
    images = dataset.images
    if noise is not None:
        images = datamod.add_noise(images, noise)
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        x = _prepare_input(images[lo : lo + batch_size], arch)
        logits = model.forward(x, train=False)
        correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[lo : lo + batch_size]))
    return correct / len(dataset)


def validation_loss(model: Model, dataset, arch: str, batch_size: int = 256):
    """Mean cross-entropy and accuracy over a dataset (no caching)."""
    total, correct = 0.0, 0
    for lo in range(0, len(dataset), batch_size):
        x = _prepare_input(dataset.images[lo : lo + batch_size], arch)
        y = dataset.labels[lo : lo + batch_size]
        logits = model.forward(x, train=False)
        loss, _ = softmax_xent(logits, y)
        total += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return total / len(dataset), correct / len(dataset)


def robustness_score(clean_acc: float, noisy_acc: float) -> float:
    """Noisy accuracy divided by clean accuracy (scale-invariant)."""
    if clean_acc <= 0:
        raise ZeroDivisionError("robustness score undefined for clean accuracy 0")
    return noisy_acc / clean_acc


def param_summary(model: Model) -> dict:
    """Per-layer statistics of the learnable aggregation parameters.

    Widths are reported as exp(log_sigma); two-way blends as
    sigmoid(alpha_raw); the three-way blend as softmax rows, with
    ``alpha`` giving the per-unit mass on the two novel paths.  Baseline
    models produce an empty summary.
    """
    layer = aggregation_layer(model)
    if layer is None:
        return {}

    def stats(v: np.ndarray) -> dict:
        return {
            "mean": float(v.mean()), "std": float(v.std()),
            "min": float(v.min()), "max": float(v.max()),
        }

    out: dict = {"kind": layer.kind}
    if layer.p is not None:
        out["p"] = stats(layer.p.data)
    if layer.log_sigma is not None:
        out["sigma"] = stats(np.exp(layer.log_sigma.data))
    if layer.kind == "three-way":
        blend = softmax(layer.alpha_raw.data, axis=-1)
        out["blend"] = {
            "linear": stats(blend[:, 0]),
            "fmean": stats(blend[:, 1]),
            "gaussian": stats(blend[:, 2]),
        }
        out["alpha"] = stats(blend[:, 1] + blend[:, 2])  # novel-path mass
    else:
        out["alpha"] = stats(sigmoid(layer.alpha_raw.data))
    return out


def _epoch_row(epoch, train_loss, val_loss, val_acc, groups, summary) -> dict:
    row = {
        "epoch": epoch,
        "train_loss": train_loss,
        "val_loss": val_loss,
        "val_acc": val_acc,
        "lr_standard": groups[0].learning_rate,
        "lr_novel": groups[1].learning_rate,
        "mean_p": summary.get("p", {}).get("mean"),
        "mean_sigma": summary.get("sigma", {}).get("mean"),
        "mean_alpha": summary.get("alpha", {}).get("mean"),
        "param_summary": summary or None,
    }
    return row


def train(config: ExperimentConfig, out_dir=None, datasets=None,
          model: Model | None = None, log=None) -> RunReport:
    """Run the full training protocol and return the report.

    ``datasets`` and ``model`` can be injected (the sweep reuses loaded
    data); ``out_dir`` receives report.json, metrics.csv and best.ckpt.
    """
    t0 = time.perf_counter()
    train_ds, val_ds, test_ds = datasets if datasets is not None else load_datasets(config)
    if model is None:
        model = build_model(config)
    groups = build_param_groups(model.parameters(), config.lr_standard, config.lr_novel)
    if config.aggregation == "baseline" and groups[1].params:
        raise ValueError("baseline model must have no novel parameters")
    optimizer = Adam(groups)
    scheduler = PlateauScheduler(
        groups, factor=config.sched_factor, patience=config.sched_patience,
        min_delta=config.sched_min_delta, min_lr=config.sched_min_lr,
    )
    stopper = EarlyStopper(patience=config.early_stop_patience,
                           min_delta=config.sched_min_delta)
    report = RunReport(config=config.to_dict(), seed=config.seed)
    best_state = model.state()
    best_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for bi, (xb, yb) in enumerate(
            datamod.batches(train_ds, config.batch_size, shuffle_seed=config.seed + epoch)
        ):
            x = _prepare_input(xb, config.arch)
            try:
                logits = model.forward(x, train=True)
                loss, dlogits = softmax_xent(logits, yb)
                if not np.isfinite(loss):
                    raise InvalidValueError("non-finite loss")
                model.zero_grad()
                model.backward(dlogits)
                optimizer.step(clip_norm=config.clip_norm)
            except (InvalidValueError, NonFiniteGradient) as exc:
                raise TrainingDiverged(
                    f"{exc} at epoch {epoch}, batch {bi} (seed {config.seed})",
                    seed=config.seed, epoch=epoch, batch_index=bi,
                ) from exc
            losses.append(loss)
        val_loss, val_acc = validation_loss(model, val_ds, config.arch)
        summary = param_summary(model)
        report.epochs.append(
            _epoch_row(epoch, float(np.mean(losses)), val_loss, val_acc, groups, summary)
        )
        if log:
            log(f"epoch {epoch:3d}  train {np.mean(losses):.4f}  "
                f"val {val_loss:.4f}  acc {val_acc:.4f}")
        stop = stopper.step(val_loss)
        if stopper.best_epoch == epoch:
            best_state = model.state()
            best_epoch = epoch
        scheduler.step(val_loss)
        if stop:
            report.stopped_early = True
            break

    model.load_state(best_state)
    report.best_epoch = best_epoch
    report.clean_accuracy = evaluate(model, test_ds, config.arch)
    noise = datamod.NoiseSpec(sigma_noise=config.noise_sigma, seed=config.noise_seed)
    report.noisy_accuracy = evaluate(model, test_ds, config.arch, noise=noise)
    report.rho = robustness_score(report.clean_accuracy, report.noisy_accuracy)
    report.wall_clock_sec = time.perf_counter() - t0

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save_json(out / "report.json")
        report.save_csv(out / "metrics.csv")
        save_checkpoint(model, out / "best.ckpt", extra={"config": config.to_dict()})
    return report


SWEEP_COLUMNS = [
    "arch", "aggregation", "seed", "status",
    "clean_acc", "noisy_acc", "rho", "mean_p", "mean_sigma", "mean_alpha",
]


def sweep(matrix: dict, out_dir=None, log=None) -> list[dict]:
    """Train every (arch, aggregation, seed) combination in the matrix.

    ``matrix`` holds optional ``archs``, ``aggregations`` and ``seeds``
    lists plus any ExperimentConfig overrides.  A failed run is recorded
    with its error and the sweep continues.  Returns the result rows.
    """
    archs = matrix.get("archs", list(ARCHS))
    aggregations = matrix.get("aggregations", list(AGGREGATION_KINDS))
    seeds = matrix.get("seeds", [0])
    overrides = {
        k: v for k, v in matrix.items() if k not in ("archs", "aggregations", "seeds")
    }
    rows = []
    for arch in archs:
        for seed in seeds:
            for agg in aggregations:
                row = {"arch": arch, "aggregation": agg, "seed": seed,
                       "clean_acc": None, "noisy_acc": None, "rho": None,
                       "mean_p": None, "mean_sigma": None, "mean_alpha": None}
                run_dir = Path(out_dir) / f"{arch}-{agg}-seed{seed}" if out_dir else None
                try:
                    cfg = ExperimentConfig(arch=arch, aggregation=agg, seed=seed, **overrides)
                    rep = train(cfg, out_dir=run_dir, log=log)
                    last = rep.epochs[-1] if rep.epochs else {}
                    row.update(
                        status="ok", clean_acc=rep.clean_accuracy,
                        noisy_acc=rep.noisy_accuracy, rho=rep.rho,
                        mean_p=last.get("mean_p"), mean_sigma=last.get("mean_sigma"),
                        mean_alpha=last.get("mean_alpha"),
                    )
                except Exception as exc:  # record and continue
                    row["status"] = f"error: {exc}"
                rows.append(row)
                if log:
                    log(f"[sweep] {arch}/{agg}/seed{seed}: {row['status']}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in SWEEP_COLUMNS})
        (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    return rows


def format_results_table(rows: list[dict]) -> str:
    """Render sweep rows as an accuracy/robustness table (percentages)."""
    lines = [f"{'model':<28}{'clean %':>9}{'noisy %':>9}{'rho':>8}"]
    for r in rows:
        name = f"{r['arch']} {r['aggregation']} (seed {r['seed']})"
        if r.get("clean_acc") is None:
            lines.append(f"{name:<28}{'--':>9}{'--':>9}{'--':>8}  {r['status']}")
        else:
            lines.append(
                f"{name:<28}{100 * r['clean_acc']:>9.2f}{100 * r['noisy_acc']:>9.2f}"
                f"{r['rho']:>8.3f}"
            )
    return "\n".join(lines)
