"""Teacher and student training loops, evaluation and output-similarity metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import distill as D
from .data import BatchPlan, ChannelStats, Dataset, normalize_and_batch
from .nn import (
    ConfigurationError,
    Model,
    ModelSpec,
    Regressor,
    build_model,
    build_regressor,
    save_checkpoint,
)
from .tensor import (
    EVALUATION,
    TRAINING,
    NonFiniteError,
    Tensor,
    backward,
    kl_divergence_softened,
    log_softmax,
    record,
    scale,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (10, 15)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    augment: bool = False
    augment_pad: int = 4
    augment_flip: bool = True

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs: must be >= 1")
        if not (self.base_lr > 0):
            raise ConfigurationError("base_lr: must be > 0")
        if not (0 <= self.momentum < 1):
            raise ConfigurationError("momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay: must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size: must be >= 2")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ConfigurationError("lr_decay_epochs: must be strictly increasing")
        if not (0 < self.lr_decay_factor <= 1):
            raise ConfigurationError("lr_decay_factor: must lie in (0, 1]")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: one decay per milestone at or before ``epoch`` (0-based)."""
    drops = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.lr_decay_factor**drops


@dataclass
class MetricsRecord:
    epoch: int
    train_task_loss: float
    train_distill_loss: float
    test_error_pct: float
    kl_with_teacher: float
    ce_with_gt: float
    wall_seconds: float = 0.0

    def __post_init__(self):
        if not math.isnan(self.test_error_pct) and not (0.0 <= self.test_error_pct <= 100.0):
            raise ValueError(f"test_error_pct out of range: {self.test_error_pct}")


# wall time is not reproducible, so the CSV leaves it to the JSON-lines mirror
CSV_FIELDS = [f.name for f in fields(MetricsRecord) if f.name != "wall_seconds"]


class MetricsWriter:
    """Append-only CSV plus JSON-lines mirror, flushed once per record."""

    def __init__(self, csv_path, jsonl_path=None):
        self.csv_path = Path(csv_path)
        self.jsonl_path = Path(jsonl_path) if jsonl_path else self.csv_path.with_suffix(".jsonl")
        self.csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.csv_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CSV_FIELDS)
        self.jsonl_path.write_text("")

    def write(self, rec: MetricsRecord) -> None:
        row = []
        for name in CSV_FIELDS:
            v = getattr(rec, name)
            row.append(str(v) if isinstance(v, int) else f"{v:.6g}")
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_metrics_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(
    params: Sequence[Tensor],
    grads,
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: dict,
) -> None:
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.
    ``velocity`` is keyed by ``id(param)`` and updated in place.
    """
    for p in params:
        g = grads[p]
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocity.get(id(p))
        v = g.copy() if v is None else momentum * v + g
        velocity[id(p)] = v
        p.data -= lr * v


# ---------------------------------------------------------------------------
# evaluation


def predict_logits(model: Model, ds: Dataset, batch_size: int = 250) -> np.ndarray:
    out = []
    for start in range(0, len(ds), batch_size):
        x = model.normalize_input(ds.images[start : start + batch_size])
        out.append(model.forward_with_taps(x, EVALUATION, update_stats=False)[0].data)
    return np.concatenate(out)


def error_rate(logits: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(logits.argmax(axis=1) != labels))


def evaluate(model: Model, ds: Dataset) -> float:
    """Classification error in percent, BN in evaluation mode."""
    return error_rate(predict_logits(model, ds), ds.labels)


def similarity_analysis(teacher: Model, student: Model, ds: Dataset, teacher_logits=None) -> tuple[float, float]:
    """Mean KL(teacher || student) of output distributions and the student's cross-entropy."""
    t = predict_logits(teacher, ds) if teacher_logits is None else teacher_logits
    s = predict_logits(student, ds)
    return _kl_and_ce(t, s, ds.labels)


def _kl_and_ce(t: np.ndarray, s: np.ndarray, labels) -> tuple[float, float]:
    kl = kl_divergence_softened(t, Tensor._wrap(s), 1.0).item()
    ce = softmax_cross_entropy(Tensor._wrap(s), labels).item()
    return kl, ce


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Model
    history: list[MetricsRecord]
    regressors: "OrderedDict[str, Regressor]" = field(default_factory=OrderedDict)
    margins: D.MarginSpec | None = None


def freeze(model: Model) -> Model:
    for p in model.parameters():
        p.requires_grad = False
    return model


def _step_or_raise(step, fn):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"non-finite value at step {step}: {exc}") from None


def _check_loss(step: int, value: float) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"loss became {value} at step {step}")


def train_teacher(
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    cfg: TrainConfig,
    metrics_path=None,
    checkpoint_path=None,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
) -> TrainResult:
    """Train with the task loss only."""
    return train_student(
        spec,
        None,
        train,
        test,
        cfg,
        D.DistillConfig(method=D.NO_DISTILL),
        metrics_path=metrics_path,
        checkpoint_path=checkpoint_path,
        on_epoch=on_epoch,
    )


def _matching_input(x: Tensor, src: Model, dst: Model) -> Tensor:
    if np.array_equal(src.input_mean, dst.input_mean) and np.array_equal(src.input_std, dst.input_std):
        return x
    raw = x.data * src.input_std.reshape(1, -1, 1, 1) + src.input_mean.reshape(1, -1, 1, 1)
    return dst.normalize_input(raw)


def compute_margins(teacher: Model, train: Dataset, dcfg: D.DistillConfig, batch_size: int = 250) -> D.MarginSpec:
    if dcfg.margin_source == D.CLOSED_FORM:
        return D.margins_from_bn(teacher)
    stats = ChannelStats(teacher.input_mean, teacher.input_std)
    batches = normalize_and_batch(train, BatchPlan(batch_size, shuffle=False), stats=stats)
    return D.margin_empirical(teacher, batches, bn_mode=dcfg.teacher_bn_mode)


def _select_taps(taps, active):
    if active is None:
        return taps
    return OrderedDict((k, v) for k, v in taps.items() if k in active)


def build_regressors(teacher: Model, student: Model, dcfg: D.DistillConfig, seed: int) -> "OrderedDict[str, Regressor]":
    """One regressor per active tap, after checking the taps line up."""
    t_taps = OrderedDict((t.name, t) for t in teacher.taps)
    s_taps = OrderedDict((t.name, t) for t in student.taps)
    names = list(t_taps) if dcfg.active_taps is None else list(dcfg.active_taps)
    for name in names:
        if name not in t_taps or name not in s_taps:
            raise ConfigurationError(f"active_taps: {name!r} is not a tap of both models")
    t_sizes = dict(zip(t_taps, teacher.spec.spatial_sizes()))
    s_sizes = dict(zip(s_taps, student.spec.spatial_sizes()))
    for name in names:
        if t_sizes[name] != s_sizes[name]:
            raise ConfigurationError(
                f"tap {name}: teacher spatial size {t_sizes[name]} != student {s_sizes[name]}"
            )
    if dcfg.layer_weights is not None and len(dcfg.layer_weights) != len(names):
        raise ConfigurationError(
            f"layer_weights: {len(dcfg.layer_weights)} weights for {len(names)} taps"
        )
    return OrderedDict(
        (name, build_regressor(s_taps[name].channels, t_taps[name].channels, seed + 7919 * (i + 1), f"regressor.{name}"))
        for i, name in enumerate(names)
    )


def train_student(
    student_spec: ModelSpec,
    teacher: Model | None,
    train: Dataset,
    test: Dataset | None,
    cfg: TrainConfig,
    dcfg: D.DistillConfig,
    margins: D.MarginSpec | None = None,
    metrics_path=None,
    checkpoint_path=None,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
) -> TrainResult:
    """Train a student with task loss plus the configured distillation term.

    The teacher only runs forward, outside the gradient graph, with its BN
    running statistics frozen.  With ``test=None`` the per-epoch evaluation
    columns are NaN.
    """
    method = dcfg.method
    if method != D.NO_DISTILL and teacher is None:
        raise ConfigurationError(f"method {method!r} needs a teacher")
    student = build_model(student_spec, cfg.seed)
    stats = ChannelStats.fit(train)
    student.input_mean[...] = stats.mean
    student.input_std[...] = stats.std

    regressors: OrderedDict[str, Regressor] = OrderedDict()
    if teacher is not None:
        freeze(teacher)
    if dcfg.uses_features:
        regressors = build_regressors(teacher, student, dcfg, cfg.seed)
        if method == D.PROPOSED and margins is None:
            margins = compute_margins(teacher, train, dcfg)
    params = student.parameters() + [p for r in regressors.values() for p in r.parameters()]

    teacher_test_logits = predict_logits(teacher, test) if teacher is not None and test is not None else None
    writer = MetricsWriter(metrics_path) if metrics_path else None
    velocity: dict = {}
    history: list[MetricsRecord] = []
    plan = BatchPlan(cfg.batch_size, cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        task_sum = distill_sum = 0.0
        n_batches = 0
        for x, y in normalize_and_batch(
            train, plan, cfg.augment, stats, epoch, cfg.augment_pad, cfg.augment_flip
        ):
            if len(y) < 2:
                continue  # batch-statistic BN needs two samples
            t_logits = t_taps = None
            if teacher is not None and method != D.NO_DISTILL:
                t_logits, t_taps = teacher.forward_with_taps(
                    _matching_input(x, student, teacher),
                    dcfg.teacher_bn_mode,
                    update_stats=False,
                    position=dcfg.tap_position,
                )
                t_taps = _select_taps(t_taps, regressors or None)

            def forward():
                with record():
                    logits, s_taps = student.forward_with_taps(x, TRAINING, position=dcfg.tap_position)
                    task = softmax_cross_entropy(logits, y)
                    loss, dterm = task, None
                    if method == D.KD or (dcfg.with_kd and method != D.NO_DISTILL):
                        soft = kl_divergence_softened(t_logits, logits, dcfg.temperature)
                        soft = scale(soft, dcfg.temperature**2)
                        loss = D.total_loss(loss, soft, dcfg.kd_lambda)
                        dterm = soft
                    if dcfg.uses_features:
                        s_sel = _select_taps(s_taps, regressors)
                        if method == D.PROPOSED:
                            dterm = D.proposed_distill_loss(t_taps, s_sel, regressors, margins, dcfg.layer_weights)
                        else:
                            dterm = D.fitnets_l2_loss(t_taps, s_sel, regressors, dcfg.layer_weights)
                        loss = D.total_loss(loss, dterm, dcfg.alpha)
                    grads = backward(loss)
                return task.item(), (dterm.item() if dterm is not None else 0.0), loss.item(), grads

            task_v, dist_v, loss_v, grads = _step_or_raise(step, forward)
            _check_loss(step, loss_v)
            sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, velocity)
            task_sum += task_v
            distill_sum += dist_v
            n_batches += 1
            step += 1

        err = kl = ce = float("nan")
        if test is not None:
            logits = predict_logits(student, test)
            err = error_rate(logits, test.labels)
            if teacher_test_logits is not None:
                kl, ce = _kl_and_ce(teacher_test_logits, logits, test.labels)
            else:
                ce = softmax_cross_entropy(Tensor._wrap(logits), test.labels).item()
        rec = MetricsRecord(
            epoch=epoch,
            train_task_loss=task_sum / max(n_batches, 1),
            train_distill_loss=distill_sum / max(n_batches, 1),
            test_error_pct=err,
            kl_with_teacher=kl,
            ce_with_gt=ce,
            wall_seconds=time.perf_counter() - t0,
        )
        history.append(rec)
        logger.info(
            "epoch %d lr %.4g task %.4f distill %.4f err %.2f%% kl %.4f",
            epoch, lr, rec.train_task_loss, rec.train_distill_loss, rec.test_error_pct, kl,
        )
        if writer:
            writer.write(rec)
        if on_epoch:
            on_epoch(rec)
    if checkpoint_path:
        save_checkpoint(student, checkpoint_path)
    return TrainResult(student, history, regressors, margins)
