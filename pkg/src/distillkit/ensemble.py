"""Linear max-margin models on (concatenated) student embeddings.

The solvers are mini-batch subgradient descent on the primal objective with
step ``1 / (lam * t)`` and ``lam = 1 / (C * n)``, i.e. the Pegasos scheme.
Because a subgradient step need not decrease the objective, the estimator keeps
the iterate with the lowest full objective seen at the end of each epoch; its
``objective_trace_`` is therefore non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

DEFAULT_C_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0)


class DegenerateLabelsError(ValueError):
    """Training targets contain a single class."""


# ---------------------------------------------------------------------------
# embedding sets
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    """Row-aligned embedding matrix with the source of each column block."""

    matrix: np.ndarray
    targets: np.ndarray
    blocks: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.matrix.ndim != 2 or len(self.matrix) != len(self.targets):
            raise ValueError(f"embedding matrix {self.matrix.shape} not aligned with {len(self.targets)} targets")
        if not self.blocks:
            self.blocks = [("embedding", self.matrix.shape[1])]
        if sum(w for _, w in self.blocks) != self.matrix.shape[1]:
            raise ValueError("block widths do not add up to the embedding dimension")

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def concat(cls, *sets: "EmbeddingSet") -> "EmbeddingSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        n = len(sets[0])
        for s in sets[1:]:
            if len(s) != n:
                raise ValueError(f"row-count mismatch: {n} vs {len(s)}")
            if not np.array_equal(s.targets, sets[0].targets):
                raise ValueError("embedding sets are not row-aligned (targets differ)")
        return cls(
            np.concatenate([s.matrix for s in sets], axis=1),
            sets[0].targets.copy(),
            [b for s in sets for b in s.blocks],
        )


def extract_embeddings(params, spec, subset, tag: str = "embedding", batch_size: int = 256) -> EmbeddingSet:
    """Penultimate-layer activations, one row per sample of ``subset``."""
    from .nn import embed

    matrix = embed(params, spec, subset.images, batch_size)
    return EmbeddingSet(matrix, np.asarray(subset.targets).copy(), [(tag, matrix.shape[1])])


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((len(X), 1))])


class _SubgradientMixin:
    def _prepare(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            scale = X.std(axis=0)
            self.scale_ = np.where(scale > 0, scale, 1.0)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        return _augment((X - self.mean_) / self.scale_)

    def _transform(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return _augment((X - self.mean_) / self.scale_)

    def _solve(self, Xa: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Minimise ``lam/2 |w|^2 + mean(loss)`` column-wise for targets ``Y`` (n x k).

        Steps follow ``1 / (lam * (t + t0))``. The offset ``t0`` caps the first
        step at ``1 / mean |x|^2``; without it a large C (tiny ``lam``) makes
        the early steps so long that 200 epochs do not recover. After every
        epoch both the current and the running-average iterate are scored and
        the best objective seen so far is kept per column.
        """
        n, d = Xa.shape
        k = Y.shape[1]
        lam = 1.0 / (self.C * n)
        rng = np.random.default_rng(self.random_state)
        W = np.zeros((d, k))
        avg = np.zeros((d, k))
        radius = np.sqrt(2.0 * self._objective(Xa, Y, W, lam) / lam)
        best_W, best_obj = W.copy(), self._objective(Xa, Y, W, lam)
        trace = [best_obj.copy()]
        t0 = float(np.mean(np.sum(Xa * Xa, axis=1))) / lam
        t = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                t += 1
                eta = 1.0 / (lam * (t + t0))
                G = self._loss_subgradient(Xa[idx], Y[idx], W)
                W = (1.0 - eta * lam) * W - eta * G
                norms = np.linalg.norm(W, axis=0)
                over = norms > radius
                if np.any(over):
                    W[:, over] *= radius[over] / norms[over]
                avg += (W - avg) / t
            for cand in (W, avg):
                obj = self._objective(Xa, Y, cand, lam)
                better = obj < best_obj
                best_W[:, better] = cand[:, better]
                best_obj = np.where(better, obj, best_obj)
            trace.append(best_obj.copy())
        self.objective_trace_ = np.sum(trace, axis=1)
        return best_W


class MarginClassifier(_SubgradientMixin, ClassifierMixin, BaseEstimator):
    """Linear soft-margin SVM (hinge loss), one-vs-rest for more than two classes."""

    def __init__(self, C: float = 1.0, epochs: int = 200, batch_size: int = 32, standardize: bool = False,
                 random_state: int = 0):
        self.C = C
        self.epochs = epochs
        self.batch_size = batch_size
        self.standardize = standardize
        self.random_state = random_state

    @staticmethod
    def _objective(Xa, Y, W, lam):
        hinge = np.maximum(0.0, 1.0 - Y * (Xa @ W))
        return 0.5 * lam * np.sum(W * W, axis=0) + hinge.mean(axis=0)

    @staticmethod
    def _loss_subgradient(Xb, Yb, W):
        active = (Yb * (Xb @ W)) < 1.0
        return -(Xb.T @ (active * Yb)) / len(Xb)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise DegenerateLabelsError(f"need at least two classes, got {self.classes_.tolist()}")
        self.n_features_in_ = X.shape[1]
        Xa = self._prepare(X)
        if len(self.classes_) == 2:
            Y = np.where(y == self.classes_[1], 1.0, -1.0)[:, None]
        else:
            Y = np.where(y[:, None] == self.classes_[None, :], 1.0, -1.0)
        W = self._solve(Xa, Y)
        self.coef_ = W[:-1].T.copy()
        self.intercept_ = W[-1].copy()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        Xa = self._transform(X)
        scores = Xa[:, :-1] @ self.coef_.T + self.intercept_
        return scores[:, 0] if len(self.classes_) == 2 else scores

    def predict(self, X):
        scores = self.decision_function(X)
        if len(self.classes_) == 2:
            return self.classes_[(scores > 0).astype(int)]
        return self.classes_[np.argmax(scores, axis=1)]


class MarginRegressor(_SubgradientMixin, RegressorMixin, BaseEstimator):
    """Linear epsilon-insensitive support vector regression (epsilon defaults to 0)."""

    def __init__(self, C: float = 1.0, epsilon: float = 0.0, epochs: int = 200, batch_size: int = 32,
                 standardize: bool = False, random_state: int = 0):
        self.C = C
        self.epsilon = epsilon
        self.epochs = epochs
        self.batch_size = batch_size
        self.standardize = standardize
        self.random_state = random_state

    def _objective(self, Xa, Y, W, lam):
        resid = np.abs(Y - Xa @ W)
        return 0.5 * lam * np.sum(W * W, axis=0) + np.maximum(0.0, resid - self.epsilon).mean(axis=0)

    def _loss_subgradient(self, Xb, Yb, W):
        resid = Yb - Xb @ W
        active = np.abs(resid) > self.epsilon
        return -(Xb.T @ (active * np.sign(resid))) / len(Xb)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.y_offset_ = float(np.mean(y))
        Xa = self._prepare(X)
        W = self._solve(Xa, (y - self.y_offset_)[:, None])
        self.coef_ = W[:-1, 0].copy()
        self.intercept_ = float(W[-1, 0]) + self.y_offset_
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        Xa = self._transform(X)
        return Xa[:, :-1] @ self.coef_ + self.intercept_


# ---------------------------------------------------------------------------
# model selection and ensembles
# ---------------------------------------------------------------------------


def _score(model, X, y, kind: str) -> float:
    """Higher is better: accuracy, or negative MAE."""
    pred = model.predict(X)
    if kind == "classifier":
        return float(np.mean(pred == y))
    return -float(np.mean(np.abs(pred - y)))


def fit_margin_model(train: EmbeddingSet, val: EmbeddingSet, kind: str = "classifier",
                     c_grid=DEFAULT_C_GRID, **params):
    """Fit one model per C on ``train``, keep the best on ``val`` (ties: smaller C).

    Returns the fitted estimator; ``model.validation_scores_`` maps C to score.
    """
    c_grid = sorted(float(c) for c in c_grid)
    if not c_grid:
        raise ValueError("c_grid must not be empty")
    if train.dim != val.dim:
        raise ValueError(f"train/validation dimensions differ: {train.dim} vs {val.dim}")
    if kind == "classifier":
        make = lambda c: MarginClassifier(C=c, **params)  # noqa: E731
    elif kind == "regressor":
        make = lambda c: MarginRegressor(C=c, **params)  # noqa: E731
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    best, best_score, scores = None, -np.inf, {}
    for c in c_grid:
        model = make(c).fit(train.matrix, train.targets)
        score = _score(model, val.matrix, val.targets, kind)
        scores[c] = score
        if score > best_score:
            best, best_score = model, score
    best.validation_scores_ = scores
    best.blocks_ = list(train.blocks)
    return best


def ensemble_predict(model, *sets: EmbeddingSet) -> np.ndarray:
    """Concatenate row-aligned embedding sets and apply ``model``."""
    n = len(sets[0])
    for s in sets[1:]:
        if len(s) != n:
            raise ValueError(f"row-count mismatch: {n} vs {len(s)}")
    matrix = np.concatenate([s.matrix for s in sets], axis=1)
    return model.predict(matrix)


def export_model(model, path) -> None:
    """JSON ``{kind, C, weights, bias}`` (plus classes for classifiers)."""
    check_is_fitted(model, "coef_")
    if isinstance(model, MarginClassifier):
        doc = {"kind": "hinge-classifier", "C": model.C, "weights": np.atleast_2d(model.coef_).tolist(),
               "bias": np.atleast_1d(model.intercept_).tolist(), "classes": model.classes_.tolist()}
    else:
        doc = {"kind": "epsilon-regressor", "C": model.C, "epsilon": model.epsilon,
               "weights": model.coef_.tolist(), "bias": model.intercept_}
    doc["standardize"] = {"mean": model.mean_.tolist(), "scale": model.scale_.tolist()}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path):
    doc = json.loads(Path(path).read_text())
    std = doc.get("standardize")
    if doc["kind"] == "hinge-classifier":
        model = MarginClassifier(C=doc["C"])
        model.classes_ = np.array(doc["classes"])
        coef = np.array(doc["weights"], dtype=np.float64)
        model.coef_ = coef
        model.intercept_ = np.array(doc["bias"], dtype=np.float64)
    elif doc["kind"] == "epsilon-regressor":
        model = MarginRegressor(C=doc["C"], epsilon=doc.get("epsilon", 0.0))
        model.coef_ = np.array(doc["weights"], dtype=np.float64)
        model.intercept_ = float(doc["bias"])
    else:
        raise ValueError(f"unknown model kind {doc['kind']!r}")
    model.n_features_in_ = model.coef_.shape[-1]
    model.mean_ = np.array(std["mean"]) if std else np.zeros(model.n_features_in_)
    model.scale_ = np.array(std["scale"]) if std else np.ones(model.n_features_in_)
    return model
