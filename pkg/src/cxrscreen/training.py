"""Training loop: re-balanced batches, early stopping, run-directory artifacts.

Class re-balancing builds every batch half positive, half negative. The
majority class is shuffled once per epoch and consumed exactly once; the
minority side is an endless stream of reshuffled permutations, truncated to
match, so minority images repeat within an epoch but as evenly as possible.
When the majority count is not a multiple of half the batch size the final
batch is smaller and still balanced.

Early stopping tracks validation accuracy: training stops once the number of
epochs since the best epoch reaches ``patience``, and the weights returned
are the best epoch's, not the last. A non-finite loss aborts the run with
the offending batch listed; it never trains through NaN.

A run directory (optional) accumulates: config.json, history.jsonl plus a
history.sha256 checksum, checkpoints/best.pt and checkpoints/last.pt, and a
cache/ of the preprocessed input stacks.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import preprocessing
from .architecture import ConvNet, bce_loss, forward, save_checkpoint, spec_hash
from .augmentation import AugmentConfig, augment_indexed
from .manifest import DatasetManifest, Label, SplitName
from .metrics import MetricsReport, as_exact_fraction

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training run aborted (for example, loss became non-finite)."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 40
    patience: int = 5
    seed: int = 0
    rebalance: bool = True
    threshold: float = 0.5
    augment: AugmentConfig | None = AugmentConfig()
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.rebalance and self.batch_size % 2:
            raise ValueError(f"batch_size must be even when re-balancing, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.patience <= self.epochs:
            raise ValueError(f"patience must be in [1, epochs={self.epochs}], got {self.patience}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass(frozen=True)
class TrainHistory:
    epochs: tuple[EpochStats, ...]
    best_epoch: int
    stopped_early: bool

    @property
    def best_val_accuracy(self) -> float:
        return self.epochs[self.best_epoch - 1].val_accuracy


# ---------------------------------------------------------------------------
# Batch construction


def balanced_batches(
    labels: Sequence[int] | np.ndarray, batch_size: int, rng: np.random.Generator
) -> Iterator[list[int]]:
    """Yield index batches with an exact 50/50 class mix.

    The majority class (ties go to negative) is covered exactly once per
    epoch; minority indices are cycled through reshuffled permutations.
    """
    if batch_size % 2:
        raise ValueError(f"batch_size must be even for balanced batches, got {batch_size}")
    y = np.asarray(labels)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y != 1)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(
            f"both classes required for balanced batches ({len(pos)} positive, {len(neg)} negative)"
        )
    if len(pos) > len(neg):
        major, minor = pos, neg
    else:
        major, minor = neg, pos

    half = batch_size // 2
    major_seq = rng.permutation(major)
    chunks = []
    needed = len(major_seq)
    while sum(len(c) for c in chunks) < needed:
        chunks.append(rng.permutation(minor))
    minor_seq = np.concatenate(chunks)[:needed]

    for start in range(0, needed, half):
        batch = np.concatenate([major_seq[start : start + half], minor_seq[start : start + half]])
        yield [int(i) for i in rng.permutation(batch)]


def rebalanced_batches(
    manifest: DatasetManifest, batch_size: int, rng: np.random.Generator
) -> Iterator[list[str]]:
    """Balanced batches of training-split image ids."""
    records = manifest.records_for_split(SplitName.TRAIN)
    ids = [r.image_id for r in records]
    labels = [1 if r.label is Label.POSITIVE else 0 for r in records]
    for batch in balanced_batches(labels, batch_size, rng):
        yield [ids[i] for i in batch]


def _plain_batches(
    n: int, batch_size: int, rng: np.random.Generator
) -> Iterator[list[int]]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start : start + batch_size]]


# ---------------------------------------------------------------------------
# Core loop


def fit_arrays(
    model: ConvNet,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig,
    run_dir: Path | str | None = None,
    train_ids: Sequence[str] | None = None,
) -> tuple[ConvNet, TrainHistory]:
    """Train on in-memory stacks; returns the model holding the best weights."""
    x_train = np.asarray(x_train, dtype=np.float32)
    x_val = np.asarray(x_val, dtype=np.float32)
    y_train = np.asarray(y_train).astype(np.int64)
    y_val = np.asarray(y_val).astype(np.int64)
    if len(x_train) != len(y_train) or len(x_val) != len(y_val):
        raise ValueError("image stacks and label vectors must have matching lengths")
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    ids = list(train_ids) if train_ids is not None else [str(i) for i in range(len(x_train))]

    run_path = Path(run_dir) if run_dir is not None else None
    history_file = None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(exist_ok=True)
        history_file = run_path / "history.jsonl"
        history_file.write_text("")

    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps
    )
    batch_rng = np.random.default_rng((cfg.seed, 1))

    stats: list[EpochStats] = []
    best_epoch = 0
    best_acc = -1.0
    best_state: dict | None = None
    since_best = 0
    steps = 0
    stopped_early = False

    for epoch in range(1, cfg.epochs + 1):
        if cfg.rebalance:
            batches = balanced_batches(y_train, cfg.batch_size, batch_rng)
        else:
            batches = _plain_batches(len(y_train), cfg.batch_size, batch_rng)

        model.train()
        loss_sum = 0.0
        seen = 0
        for batch in batches:
            xs = _assemble_batch(x_train, batch, cfg, epoch)
            ys = torch.from_numpy(np.array([y_train[i] for i in batch], dtype=np.float32))
            probs = model(xs)
            loss = bce_loss(probs, ys)
            if not torch.isfinite(loss):
                batch_ids = ", ".join(ids[i] for i in batch)
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {steps + 1}; batch images: {batch_ids}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            steps += 1
            loss_sum += float(loss.detach()) * len(batch)
            seen += len(batch)
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break

        val_probs = forward(model, x_val)
        val_acc = float(np.mean((val_probs >= cfg.threshold) == (y_val == 1)))
        stats.append(EpochStats(epoch, loss_sum / max(seen, 1), val_acc))
        logger.info("epoch %d: train_loss=%.5f val_accuracy=%.4f", epoch, stats[-1].train_loss, val_acc)

        improved = val_acc > best_acc
        if improved:
            best_acc = val_acc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1

        if run_path is not None:
            with history_file.open("a") as fh:
                fh.write(json.dumps(dataclasses.asdict(stats[-1])) + "\n")
            save_checkpoint(run_path / "checkpoints" / "last.pt", model, {"epoch": epoch})
            if improved:
                save_checkpoint(
                    run_path / "checkpoints" / "best.pt",
                    model,
                    {"epoch": epoch, "val_accuracy": val_acc},
                )

        out_of_steps = cfg.max_steps is not None and steps >= cfg.max_steps
        if since_best >= cfg.patience and epoch < cfg.epochs:
            stopped_early = True
        if stopped_early or out_of_steps:
            break

    assert best_state is not None
    model.load_state_dict(best_state)
    model.eval()

    if run_path is not None:
        digest = hashlib.sha256(history_file.read_bytes()).hexdigest()
        (run_path / "history.sha256").write_text(f"{digest}  history.jsonl\n")

    return model, TrainHistory(tuple(stats), best_epoch, stopped_early)


def _assemble_batch(
    x: np.ndarray, batch: list[int], cfg: TrainConfig, epoch: int
) -> torch.Tensor:
    if cfg.augment is None:
        stack = x[batch]
    else:
        # keyed by (epoch, dataset index): independent of batch composition
        stack = np.stack(
            [augment_indexed(x[i], cfg.augment, epoch, int(i)).astype(np.float32) for i in batch]
        )
    return torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32))


def train(
    model: ConvNet,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    data_root: Path | str,
    run_dir: Path | str | None = None,
    extra_config: dict | None = None,
) -> tuple[ConvNet, TrainHistory]:
    """Train from a split manifest, loading and preprocessing images from disk."""
    side = model.spec.input_shape[1]
    data_root = Path(data_root)

    def stack_for(split: SplitName) -> tuple[np.ndarray, np.ndarray, list[str]]:
        records = manifest.records_for_split(split)
        if not records:
            raise TrainingError(f"manifest has no images in the {split.value} split")
        paths = [data_root / r.file_path for r in records]
        x = preprocessing.preprocess_files(paths, side=side)
        y = np.array([1 if r.label is Label.POSITIVE else 0 for r in records], dtype=np.int64)
        return x, y, [r.image_id for r in records]

    x_train, y_train, train_ids = stack_for(SplitName.TRAIN)
    x_val, y_val, _ = stack_for(SplitName.VAL)

    if run_dir is not None:
        run_path = Path(run_dir)
        run_path.mkdir(parents=True, exist_ok=True)
        cache = run_path / "cache"
        cache.mkdir(exist_ok=True)
        preprocessing.write_tensor(cache / "train.tensor", x_train)
        preprocessing.write_tensor(cache / "val.tensor", x_val)
        snapshot = {
            "train_config": _config_payload(cfg),
            "spec_name": model.spec.name,
            "spec_hash": spec_hash(model.spec),
            "train_images": len(x_train),
            "val_images": len(x_val),
        }
        snapshot.update(extra_config or {})
        (run_path / "config.json").write_text(json.dumps(snapshot, indent=2) + "\n")

    return fit_arrays(model, x_train, y_train, x_val, y_val, cfg, run_dir, train_ids)


def _config_payload(cfg: TrainConfig) -> dict:
    payload = dataclasses.asdict(cfg)
    if cfg.augment is not None:
        payload["augment"] = dataclasses.asdict(cfg.augment)
    payload["betas"] = list(cfg.betas)
    return payload


# ---------------------------------------------------------------------------
# Deployment constraint gate


@dataclass(frozen=True)
class ConstraintSpec:
    """Minimum rates a screening model must meet before it can be trusted."""

    min_sensitivity: Fraction = Fraction(95, 100)
    min_ppv: Fraction = Fraction(95, 100)

    def __post_init__(self) -> None:
        object.__setattr__(self, "min_sensitivity", as_exact_fraction(self.min_sensitivity))
        object.__setattr__(self, "min_ppv", as_exact_fraction(self.min_ppv))
        for name in ("min_sensitivity", "min_ppv"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    minimum: Fraction
    value: Fraction | None
    passed: bool


@dataclass(frozen=True)
class ConstraintVerdict:
    passed: bool
    checks: tuple[ConstraintCheck, ...]


def check_constraints(report: MetricsReport, spec: ConstraintSpec = ConstraintSpec()) -> ConstraintVerdict:
    """Inclusive gate: every rate must be >= its minimum; undefined rates fail."""
    checks = []
    for name, value, minimum in (
        ("sensitivity", report.sensitivity, spec.min_sensitivity),
        ("ppv", report.ppv, spec.min_ppv),
    ):
        ok = value is not None and value >= minimum
        checks.append(ConstraintCheck(name, minimum, value, ok))
    return ConstraintVerdict(all(c.passed for c in checks), tuple(checks))


def render_verdict(verdict: ConstraintVerdict) -> str:
    lines = []
    for check in verdict.checks:
        shown = "undefined" if check.value is None else f"{float(check.value):.4f}"
        status = "pass" if check.passed else "FAIL"
        lines.append(f"{check.name} {shown} >= {float(check.minimum):.2f}: {status}")
    lines.append(f"constraint gate: {'pass' if verdict.passed else 'FAIL'}")
    return "\n".join(lines)
