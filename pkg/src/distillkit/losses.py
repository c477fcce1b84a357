"""Task losses and the three distillation objectives.

All losses return scalar :class:`~distillkit.autograd.Tensor` values averaged
over the batch. Teacher-side inputs are detached before use, so no gradient
can reach teacher parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, log_softmax, squared_l2_distance

MODES = ("standard_kd", "hint_kd", "triplet_kd")
TASK_KINDS = ("classification", "regression")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "standard_kd"
    lam: float = 0.7
    tau: float = 2.0
    margin_alpha: float = 0.2
    triplet_reduction: str = "mean"
    normalize_embeddings: bool = False
    lr: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.tau >= 1.0:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.margin_alpha >= 0.0:
            raise ValueError(f"margin_alpha must be >= 0, got {self.margin_alpha}")
        if self.lr is not None and not self.lr > 0:
            raise ValueError(f"lr override must be positive, got {self.lr}")
        if self.triplet_reduction not in ("mean", "sum"):
            raise ValueError(f"triplet_reduction must be 'mean' or 'sum', got {self.triplet_reduction!r}")


def _constant(t) -> Tensor:
    data = t.data if isinstance(t, Tensor) else t
    return Tensor(np.array(data, dtype=np.float64))


def _as_2d(t: Tensor) -> Tensor:
    return t.reshape((1, -1)) if t.ndim == 1 else t


def _one_hot(target, num_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(target))
    if np.any(y != np.floor(y)) or np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"target {y.tolist()} out of range for {num_classes} classes")
    out = np.zeros((len(y), num_classes))
    out[np.arange(len(y)), y.astype(int)] = 1.0
    return out


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the batch."""
    logits = _as_2d(logits)
    onehot = Tensor(_one_hot(target, logits.shape[-1]))
    return -(log_softmax(logits) * onehot).sum(axis=-1).mean()


def mean_absolute_error(prediction: Tensor, target) -> Tensor:
    prediction = prediction.reshape((-1,))
    y = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if y.shape != prediction.shape:
        raise ValueError(f"target shape {y.shape} does not match prediction {prediction.shape}")
    return (prediction - Tensor(y)).abs().mean()


def task_loss(output, target, task: str) -> Tensor:
    """Cross-entropy (classification, from logits) or MAE (regression).

    ``output`` is the logits tensor for classification and the scalar
    prediction(s) for regression.
    """
    if task == "classification":
        return cross_entropy(output, target)
    if task == "regression":
        return mean_absolute_error(output, target)
    raise ValueError(f"unknown task kind {task!r}")


def soft_cross_entropy(student_logits: Tensor, teacher_logits, tau: float) -> Tensor:
    """Batch mean of ``-sum_c softmax(A_T/tau)[c] * log softmax(A_S/tau)[c]``."""
    teacher = _as_2d(_constant(teacher_logits))
    student_logits = _as_2d(student_logits)
    t = teacher.data / tau
    t = t - t.max(axis=-1, keepdims=True)
    soft_targets = np.exp(t)
    soft_targets /= soft_targets.sum(axis=-1, keepdims=True)
    log_p = log_softmax(student_logits * (1.0 / tau))
    return -(log_p * Tensor(soft_targets)).sum(axis=-1).mean()


def _require_mode(cfg: DistillConfig, mode: str) -> None:
    if cfg.mode != mode:
        raise ValueError(f"config mode {cfg.mode!r} does not match {mode!r}")


def standard_kd_loss(student_logits: Tensor, teacher_logits, target, cfg: DistillConfig) -> Tensor:
    """``lam * CE(N_T^tau, N_S^tau) + (1 - lam) * CE(y, N_S)``; no tau^2 rescaling."""
    _require_mode(cfg, "standard_kd")
    teacher_shape = _constant(teacher_logits).shape
    if teacher_shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {student_logits.shape} vs {teacher_shape}")
    hard = cross_entropy(student_logits, target)
    if cfg.lam == 0.0:
        return hard
    soft = soft_cross_entropy(student_logits, teacher_logits, cfg.tau)
    if cfg.lam == 1.0:
        return soft
    return soft * cfg.lam + hard * (1.0 - cfg.lam)


def hint_kd_loss(student_hint: Tensor, teacher_hint, task_output: Tensor, target, cfg: DistillConfig,
                 task: str = "regression") -> Tensor:
    """``lam * ||H_T - H_S||_1 + (1 - lam) * task_loss``.

    The L1 norm sums over all hint elements of a sample and is averaged over
    the batch.
    """
    _require_mode(cfg, "hint_kd")
    teacher_hint = _constant(teacher_hint)
    if teacher_hint.shape != student_hint.shape:
        raise ValueError(f"hint shapes differ: {student_hint.shape} vs {teacher_hint.shape}")
    base = task_loss(task_output, target, task)
    if cfg.lam == 0.0:
        return base
    diff = (student_hint - teacher_hint).abs()
    if diff.ndim <= 1:
        l1 = diff.sum()
    else:
        l1 = diff.reshape((diff.shape[0], -1)).sum(axis=-1).mean()
    if cfg.lam == 1.0:
        return l1
    return l1 * cfg.lam + base * (1.0 - cfg.lam)


def _l2_normalize(t: Tensor) -> Tensor:
    norm = (t * t).sum(axis=-1, keepdims=True) + 1e-12
    return t * (norm.log() * -0.5).exp()


def triplet_terms(anchor_emb: Tensor, positive_emb, negative_emb: Tensor, alpha: float,
                  normalize: bool = False) -> Tensor:
    """Per-triplet hinge ``max(0, |a - p|^2 - |a - n|^2 + alpha)``.

    ``positive_emb`` comes from the teacher and is treated as a constant.
    """
    positive = _constant(positive_emb)
    if not (anchor_emb.shape == positive.shape == negative_emb.shape):
        raise ValueError(
            f"embedding shapes differ: anchor {anchor_emb.shape}, positive {positive.shape}, negative {negative_emb.shape}"
        )
    if normalize:
        anchor_emb, positive, negative_emb = _l2_normalize(anchor_emb), _l2_normalize(positive), _l2_normalize(negative_emb)
    pos = squared_l2_distance(anchor_emb, positive)
    neg = squared_l2_distance(anchor_emb, negative_emb)
    return (pos - neg + float(alpha)).relu()


def triplet_term(anchor_emb: Tensor, positive_emb, negative_emb: Tensor, alpha: float) -> Tensor:
    """Hinge triplet loss for a single triplet (or the sum over a batch of them)."""
    return triplet_terms(anchor_emb, positive_emb, negative_emb, alpha).sum()


def triplet_kd_loss(anchor_emb: Tensor, positive_emb, negative_emb: Tensor, task_output: Tensor, target,
                    cfg: DistillConfig, task: str = "classification") -> Tensor:
    """``(1 - lam) * mean task loss + lam * triplet loss``.

    The triplet sum is divided by the number of triplets when
    ``cfg.triplet_reduction == "mean"`` (default) so ``lam`` does not depend on
    batch size.
    """
    _require_mode(cfg, "triplet_kd")
    anchor_emb = _as_2d(anchor_emb)
    m = anchor_emb.shape[0]
    if m == 0:
        raise ValueError("triplet_kd_loss needs at least one triplet")
    base = task_loss(task_output, target, task)
    if cfg.lam == 0.0:
        return base
    terms = triplet_terms(anchor_emb, _as_2d(_constant(positive_emb)), _as_2d(negative_emb),
                          cfg.margin_alpha, cfg.normalize_embeddings)
    trip = terms.sum() * (1.0 / m) if cfg.triplet_reduction == "mean" else terms.sum()
    if cfg.lam == 1.0:
        return trip
    return base * (1.0 - cfg.lam) + trip * cfg.lam
