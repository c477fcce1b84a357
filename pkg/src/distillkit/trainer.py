"""Three-stage curriculum: teacher on full faces, fine-tune on occluded faces, distill."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tensor, take_rows
from .data import DatasetSplit, Subset
from .losses import DistillConfig, hint_kd_loss, standard_kd_loss, task_loss, triplet_kd_loss
from .mining import MiningConfig, Triplet, mine_epoch
from .nn import NetworkParams, NetworkSpec, build, forward, infer
from .optim import PlateauScheduler, make_optimizer

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became NaN or infinite."""


@dataclass(frozen=True)
class RunConfig:
    spec: NetworkSpec
    occlusion: str = "upper_half_hidden"
    stage_epochs: tuple[int, int, int] = (30, 20, 10)
    optimizer: str = "sgd_momentum"
    lr: tuple[float, float, float] = (0.01, 0.01, 0.01)
    lr_patience: int = 10
    batch_size: int = 32
    distill: DistillConfig = field(default_factory=DistillConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    seed: int = 0

    def __post_init__(self):
        if self.occlusion not in ("none", "upper_half_hidden", "lower_half_hidden"):
            raise ValueError(f"unknown occlusion mode {self.occlusion!r}")
        if len(self.stage_epochs) != 3 or min(self.stage_epochs) < 0:
            raise ValueError("stage_epochs needs three non-negative integers")
        if len(self.lr) != 3 or min(self.lr) <= 0:
            raise ValueError("lr needs three positive values")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def task(self) -> str:
        return "classification" if self.spec.is_classifier else "regression"


@dataclass
class StageReport:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    mining_calls: int = 0
    checkpoint: str | None = None

    @property
    def lr_trace(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_jsonl(self) -> str:
        lines = []
        for e in self.epochs:
            lines.append(json.dumps({"stage": self.stage, **e}, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("epochs")
        out["num_epochs"] = len(self.epochs)
        return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def validation_metric(params: NetworkParams, spec: NetworkSpec, subset: Subset) -> tuple[float, float]:
    """(task loss, error) on ``subset``; error is the error rate or the MAE."""
    out = infer(params, spec, subset.images)
    y = subset.targets
    if spec.is_classifier:
        logits = out["logits"]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(len(y)), y.astype(int)].mean())
        error = float(np.mean(logits.argmax(axis=1) != y.astype(int)))
    else:
        err = np.abs(out["prediction"] - y)
        loss = error = float(err.mean())
    return loss, error


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _fit(
    params: NetworkParams,
    spec: NetworkSpec,
    cfg: RunConfig,
    stage: str,
    epochs: int,
    lr: float,
    train: Subset,
    validation: Subset,
    batch_loss: Callable[[np.ndarray], Tensor],
    rng: np.random.Generator,
    epoch_start: Callable[[int], None] | None = None,
    epoch_batches: Callable[[int], list[np.ndarray]] | None = None,
) -> tuple[NetworkParams, StageReport]:
    report = StageReport(stage)
    if epochs == 0:
        return params, report
    opt = make_optimizer(cfg.optimizer, params, lr)
    sched = PlateauScheduler(lr, cfg.lr_patience)
    best_state, best_metric = None, math.inf
    for epoch in range(epochs):
        if epoch_start is not None:
            epoch_start(epoch)
        batches = epoch_batches(epoch) if epoch_batches is not None else _batches(len(train), cfg.batch_size, rng)
        total, count = 0.0, 0
        for idx in batches:
            params.zero_grad()
            loss = batch_loss(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"{stage}: loss became {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        val_loss, val_error = validation_metric(params, spec, validation)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"{stage}: validation loss became {val_loss} at epoch {epoch}")
        report.epochs.append({
            "epoch": epoch,
            "train_loss": total / count,
            "val_loss": val_loss,
            "val_error": val_error,
            "lr": opt.lr,
        })
        if val_error < best_metric:
            best_metric, best_state = val_error, params.state()
            report.best_epoch, report.best_metric = epoch, val_error
        opt.lr = sched.step(val_error)
        logger.debug("%s epoch %d: train %.4f val %.4f err %.4f", stage, epoch, total / count, val_loss, val_error)
    params.load_state(best_state)
    return params, report


def _init_regressor_bias(params: NetworkParams, spec: NetworkSpec, targets: np.ndarray) -> None:
    if not spec.is_classifier:
        params["head.bias"].data = np.full(params["head.bias"].shape, float(np.mean(targets)))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def train_stage1_teacher(cfg: RunConfig, data: DatasetSplit) -> tuple[NetworkParams, StageReport]:
    """Train the teacher with the task loss on fully visible images."""
    if data.train.occlusion != "none":
        raise ValueError("stage 1 expects unoccluded data")
    spec = cfg.spec
    params = build(spec, cfg.seed, role="teacher")
    if cfg.stage_epochs[0] == 0:
        return params, StageReport("stage1_teacher")
    _init_regressor_bias(params, spec, data.train.targets)
    train = data.train
    rng = np.random.default_rng([cfg.seed, 1])

    def batch_loss(idx):
        out = forward(params, spec, train.images[idx])
        return task_loss(out.logits if spec.is_classifier else out.prediction, train.targets[idx], cfg.task)

    return _fit(params, spec, cfg, "stage1_teacher", cfg.stage_epochs[0], cfg.lr[0],
                train, data.validation, batch_loss, rng)


def train_stage2_student(teacher: NetworkParams, cfg: RunConfig, data: DatasetSplit,
                         epochs: int | None = None) -> tuple[NetworkParams, StageReport]:
    """Fine-tune a copy of the teacher on occluded images (the no-distillation baseline)."""
    spec = cfg.spec
    occ = data.occluded(cfg.occlusion)
    student = teacher.copy(role="student")
    train = occ.train
    rng = np.random.default_rng([cfg.seed, 2])

    def batch_loss(idx):
        out = forward(student, spec, train.images[idx])
        return task_loss(out.logits if spec.is_classifier else out.prediction, train.targets[idx], cfg.task)

    n_epochs = cfg.stage_epochs[1] if epochs is None else epochs
    return _fit(student, spec, cfg, "stage2_student", n_epochs, cfg.lr[1],
                train, occ.validation, batch_loss, rng)


def train_stage3_distill(teacher: NetworkParams, student: NetworkParams, cfg: RunConfig, data: DatasetSplit,
                         distill: DistillConfig | None = None,
                         on_mine: Callable[[int, list[Triplet]], None] | None = None,
                         ) -> tuple[NetworkParams, StageReport]:
    """Distill the frozen teacher (fully visible inputs) into the student (occluded inputs)."""
    spec = cfg.spec
    dcfg = cfg.distill if distill is None else distill
    if dcfg.mode == "standard_kd" and not spec.is_classifier:
        raise ValueError("standard_kd needs class logits; use hint_kd or triplet_kd for regression")
    if dcfg.mode == "standard_kd" and spec.num_classes <= 2:
        logger.warning("standard_kd on a binary task; hint_kd is usually preferable")
    frozen = teacher.frozen()
    student = student.copy(role="student")
    occ = data.occluded(cfg.occlusion)
    full_train, train = data.train, occ.train
    teacher_out = infer(frozen, spec, full_train.images)
    rng = np.random.default_rng([cfg.seed, 3])
    stage = f"stage3_{dcfg.mode}"
    lr3 = cfg.lr[2] if dcfg.lr is None else dcfg.lr

    def task_output(out):
        return out.logits if spec.is_classifier else out.prediction

    if dcfg.mode == "standard_kd":
        def batch_loss(idx):
            out = forward(student, spec, train.images[idx])
            return standard_kd_loss(out.logits, teacher_out["logits"][idx], train.targets[idx], dcfg)

        return _fit(student, spec, cfg, stage, cfg.stage_epochs[2], lr3,
                    train, occ.validation, batch_loss, rng)

    if dcfg.mode == "hint_kd":
        teacher_hints = infer(frozen, spec, full_train.images)["hint"]

        def batch_loss(idx):
            out = forward(student, spec, train.images[idx])
            return hint_kd_loss(out.hint, teacher_hints[idx], task_output(out), train.targets[idx], dcfg, cfg.task)

        return _fit(student, spec, cfg, stage, cfg.stage_epochs[2], lr3,
                    train, occ.validation, batch_loss, rng)

    # triplet_kd: triplets are mined at the start of every epoch, batches follow anchor order
    mining_cfg = cfg.mining
    state: dict = {"positives": None, "negatives": None, "calls": 0}

    def epoch_start(epoch):
        triplets = mine_epoch(student, frozen, spec, full_train, train, mining_cfg, epoch,
                              classification=spec.is_classifier)
        state["positives"] = np.array([t.positive_idx for t in triplets])
        state["negatives"] = np.array([t.negative_idx for t in triplets])
        state["calls"] += 1
        if on_mine is not None:
            on_mine(epoch, triplets)

    def epoch_batches(epoch):
        return list(_batches(len(train), cfg.batch_size, None))

    teacher_emb = teacher_out["embedding"]

    def batch_loss(idx):
        neg = state["negatives"][idx]
        out = forward(student, spec, np.concatenate([train.images[idx], train.images[neg]]))
        m = len(idx)
        emb = out.embedding
        anchor = take_rows(emb, np.arange(m))
        negative = take_rows(emb, np.arange(m, 2 * m))
        anchor_out = take_rows(task_output(out), np.arange(m))
        return triplet_kd_loss(anchor, teacher_emb[state["positives"][idx]], negative,
                               anchor_out, train.targets[idx], dcfg, cfg.task)

    student, report = _fit(student, spec, cfg, stage, cfg.stage_epochs[2], lr3,
                           train, occ.validation, batch_loss, rng, epoch_start, epoch_batches)
    report.mining_calls = state["calls"]
    return student, report


def run_curriculum(cfg: RunConfig, data: DatasetSplit, modes: list[DistillConfig] | None = None) -> dict:
    """All three stages; returns params and reports keyed by stage name."""
    teacher, r1 = train_stage1_teacher(cfg, data)
    student, r2 = train_stage2_student(teacher, cfg, data)
    out = {"teacher": (teacher, r1), "stage2": (student, r2)}
    for dcfg in ([cfg.distill] if modes is None else modes):
        out[dcfg.mode] = train_stage3_distill(teacher, student, cfg, data, dcfg)
    return out


__all__ = [
    "RunConfig",
    "StageReport",
    "DivergenceError",
    "train_stage1_teacher",
    "train_stage2_student",
    "train_stage3_distill",
    "run_curriculum",
    "validation_metric",
]
