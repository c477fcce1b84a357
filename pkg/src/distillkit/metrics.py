"""Accuracy, weighted accuracy, MAE and the paired McNemar test."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

SIGNIFICANCE_LEVEL = 0.05
EXACT_THRESHOLD = 25


def _paired(a, b, name: str):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{name}: length mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError(f"{name}: empty input")
    return a, b


def accuracy(pred, truth) -> float:
    pred, truth = _paired(pred, truth, "accuracy")
    return float(np.mean(pred == truth))


def weighted_accuracy(pred, truth, num_classes: int | None = None) -> float:
    """Macro-averaged recall over the classes present in ``truth``."""
    pred, truth = _paired(pred, truth, "weighted_accuracy")
    truth = truth.astype(int)
    if num_classes is not None and (truth.max() >= num_classes or truth.min() < 0):
        raise ValueError(f"weighted_accuracy: class id outside [0, {num_classes})")
    recalls = [np.mean(pred[truth == k] == k) for k in np.unique(truth)]
    return float(np.mean(recalls))


def mae(pred, truth) -> float:
    pred, truth = _paired(np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64), "mae")
    return float(np.mean(np.abs(pred - truth)))


def _binom_two_sided(k: int, n: int) -> float:
    """Exact two-sided p for ``min(b, c) = k`` out of ``n`` discordant pairs at p = 1/2."""
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)


def _chi2_sf_1dof(x: float) -> float:
    return math.erfc(math.sqrt(x / 2.0))


@dataclass(frozen=True)
class McNemarResult:
    statistic: float
    p_value: float
    b: int
    c: int
    method: str
    degenerate: bool = False

    def __iter__(self):
        # unpacks as (statistic, p_value)
        return iter((self.statistic, self.p_value))

    def __getitem__(self, i):
        return (self.statistic, self.p_value)[i]

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_LEVEL


def mcnemar_from_counts(b: int, c: int, exact: bool | None = None) -> McNemarResult:
    """McNemar test from discordant counts.

    ``b`` counts samples where A is right and B wrong, ``c`` the reverse.
    The statistic is the continuity-corrected ``(|b - c| - 1)^2 / (b + c)``.
    With ``exact=None`` the exact binomial p-value is used when
    ``b + c < 25`` and the chi-square (1 dof) p-value otherwise.
    """
    b, c = int(b), int(c)
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return McNemarResult(0.0, 1.0, b, c, "none", degenerate=True)
    stat = (abs(b - c) - 1) ** 2 / n
    use_exact = n < EXACT_THRESHOLD if exact is None else exact
    if use_exact:
        return McNemarResult(stat, _binom_two_sided(min(b, c), n), b, c, "exact")
    return McNemarResult(stat, _chi2_sf_1dof(stat), b, c, "chi2")


def mcnemar_test(pred_a, pred_b, truth, exact: bool | None = None) -> McNemarResult:
    pred_a, truth = _paired(pred_a, truth, "mcnemar_test")
    pred_b, _ = _paired(pred_b, truth, "mcnemar_test")
    right_a = pred_a == truth
    right_b = pred_b == truth
    b = int(np.sum(right_a & ~right_b))
    c = int(np.sum(~right_a & right_b))
    return mcnemar_from_counts(b, c, exact)


@dataclass
class EvalReport:
    """Metrics by model name, paired-test counts and provenance hashes."""

    n_samples: int
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    paired_tests: dict[str, dict] = field(default_factory=dict)
    manifest_hash: str | None = None
    dataset_hash: str | None = None

    def add_model(self, name: str, pred, truth, num_classes: int | None) -> None:
        if num_classes is None:
            self.metrics[name] = {"mae": mae(pred, truth)}
        else:
            self.metrics[name] = {
                "accuracy": accuracy(pred, truth),
                "weighted_accuracy": weighted_accuracy(pred, truth, num_classes),
            }

    def add_paired(self, name: str, pred_a, pred_b, truth) -> McNemarResult:
        res = mcnemar_test(pred_a, pred_b, truth)
        right_a, right_b = np.asarray(pred_a) == truth, np.asarray(pred_b) == truth
        counts = {
            "both_right": int(np.sum(right_a & right_b)),
            "a_only": res.b,
            "b_only": res.c,
            "both_wrong": int(np.sum(~right_a & ~right_b)),
        }
        if sum(counts.values()) != self.n_samples:
            raise ValueError("contingency counts do not sum to n_samples")
        self.paired_tests[name] = {**counts, "statistic": res.statistic, "p_value": res.p_value,
                                   "method": res.method, "significant": res.significant}
        return res

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))
