"""Scikit-learn style wrapper around the three-stage curriculum.

>>> model = OcclusionDistiller(stage_epochs=(30, 20, 10)).fit(images, labels)   # doctest: +SKIP
>>> model.predict(occluded_images)                                               # doctest: +SKIP

``fit`` receives fully visible images; the occluded view for the student is
derived internally. ``predict`` and ``transform`` occlude their input with the
same mode before use, which leaves already-occluded images unchanged.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import DatasetSplit, Subset, occlude_array
from .losses import DistillConfig
from .metrics import accuracy, mae
from .mining import MiningConfig
from .nn import embed, predict, preset
from .trainer import RunConfig, train_stage1_teacher, train_stage2_student, train_stage3_distill


def _as_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, H, W) or (n, C, H, W), got {X.shape}")
    return X


class OcclusionDistiller(BaseEstimator):
    """Teacher on full images, fine-tuned student on occluded ones, then distillation.

    Parameters mirror the JSON run config; ``task`` is ``"classification"`` or
    ``"regression"``. A stratified-by-order slice of ``validation_fraction`` of
    the training data drives checkpoint selection and LR decay.
    """

    def __init__(self, task="classification", architecture="plain-small", occlusion="upper_half_hidden",
                 mode="standard_kd", lam=0.7, tau=2.0, margin_alpha=0.2, normalize_embeddings=False,
                 stage_epochs=(30, 20, 10), lr=(0.01, 0.01, 0.01), distill_lr=None, optimizer="sgd_momentum",
                 batch_size=32, validation_fraction=0.25, random_state=0):
        self.task = task
        self.architecture = architecture
        self.occlusion = occlusion
        self.mode = mode
        self.lam = lam
        self.tau = tau
        self.margin_alpha = margin_alpha
        self.normalize_embeddings = normalize_embeddings
        self.stage_epochs = stage_epochs
        self.lr = lr
        self.distill_lr = distill_lr
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _split(self, X, y) -> DatasetSplit:
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(X))
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        if n_val >= len(X):
            raise ValueError("not enough samples for a train/validation split")
        val, tr = order[:n_val], order[n_val:]
        task_name = "expression" if self.task == "classification" else "age"
        empty = Subset(X[:0], y[:0])
        return DatasetSplit(Subset(X[tr], y[tr]), Subset(X[val], y[val]), empty, task_name,
                            self.n_classes_ if self.task == "classification" else None)

    def fit(self, X, y):
        X = _as_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} targets")
        if self.task == "classification":
            self.classes_, y_enc = np.unique(y, return_inverse=True)
            if len(self.classes_) < 2:
                raise ValueError("need at least two classes")
            self.n_classes_ = len(self.classes_)
            y_fit = y_enc.astype(np.float64)
            spec = preset(self.architecture, input_shape=X.shape[1:], num_classes=self.n_classes_)
        elif self.task == "regression":
            y_fit = y.astype(np.float64)
            spec = preset(self.architecture, input_shape=X.shape[1:], head="regressor")
        else:
            raise ValueError(f"unknown task {self.task!r}")
        data = self._split(X, y_fit)
        dcfg = DistillConfig(self.mode, self.lam, self.tau, self.margin_alpha,
                             normalize_embeddings=self.normalize_embeddings, lr=self.distill_lr)
        cfg = RunConfig(spec=spec, occlusion=self.occlusion, stage_epochs=tuple(self.stage_epochs),
                        optimizer=self.optimizer, lr=tuple(self.lr), batch_size=self.batch_size, distill=dcfg,
                        mining=MiningConfig.for_task(data.task, seed=self.random_state), seed=self.random_state)
        self.spec_ = spec
        self.teacher_, r1 = train_stage1_teacher(cfg, data)
        self.baseline_, r2 = train_stage2_student(self.teacher_, cfg, data)
        self.student_, r3 = train_stage3_distill(self.teacher_, self.baseline_, cfg, data, dcfg)
        self.reports_ = {"teacher": r1, "stage2": r2, "distill": r3}
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _inputs(self, X):
        check_is_fitted(self, "student_")
        X = _as_images(X)
        if X.shape[1:] != tuple(self.spec_.input_shape):
            raise ValueError(f"expected images of shape {tuple(self.spec_.input_shape)}, got {X.shape[1:]}")
        return occlude_array(X, self.occlusion)

    def predict(self, X):
        out = predict(self.student_, self.spec_, self._inputs(X))
        return self.classes_[out] if self.task == "classification" else out

    def predict_baseline(self, X):
        """Predictions of the stage-2 (fine-tuned, not distilled) student."""
        out = predict(self.baseline_, self.spec_, self._inputs(X))
        return self.classes_[out] if self.task == "classification" else out

    def transform(self, X):
        """Student embeddings of the occluded inputs."""
        return embed(self.student_, self.spec_, self._inputs(X))

    def score(self, X, y):
        """Accuracy for classification, negative MAE for regression."""
        pred = self.predict(X)
        if self.task == "classification":
            return accuracy(pred, np.asarray(y))
        return -mae(pred, y)
