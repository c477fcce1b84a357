"""Offline hard-example mining of (occluded anchor, full positive, occluded negative) triplets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


class MiningError(ValueError):
    """No positive or negative candidate exists for an anchor."""


@dataclass(frozen=True)
class MiningConfig:
    """Candidate-pool settings.

    Fractions are taken of each pool: the anchor's class for positives and
    all other classes for negatives (classification), or the whole training
    set before threshold filtering (regression). With
    ``per_anchor_subsets=False`` one subset is drawn per pool per epoch.
    """

    pos_subset_fraction: float = 0.10
    neg_subset_fraction: float = 0.10
    regression_pos_threshold: float = 5.0
    seed: int = 0
    per_anchor_subsets: bool = False

    def __post_init__(self):
        for name in ("pos_subset_fraction", "neg_subset_fraction"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if not self.regression_pos_threshold > 0:
            raise ValueError("regression_pos_threshold must be positive")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "MiningConfig":
        """10% subsets for expression-like tasks, 20% for age/gender-like ones."""
        frac = 0.10 if task == "expression" else 0.20
        return cls(**{"pos_subset_fraction": frac, "neg_subset_fraction": frac, **overrides})


class Triplet(NamedTuple):
    anchor_idx: int
    positive_idx: int
    negative_idx: int


def _subset(rng: np.random.Generator, pool: np.ndarray, fraction: float) -> np.ndarray:
    if len(pool) == 0:
        return pool
    size = max(1, int(round(fraction * len(pool))))
    if size >= len(pool):
        return pool
    return np.sort(rng.choice(pool, size=size, replace=False))


def _sq_dist(anchors: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    diff = anchors[:, None, :] - candidates[None, :, :]
    return np.sum(diff * diff, axis=-1)


def mine_triplets(
    anchor_emb: np.ndarray,
    positive_emb: np.ndarray,
    targets: np.ndarray,
    cfg: MiningConfig,
    epoch: int = 0,
    classification: bool = True,
) -> list[Triplet]:
    """Select one triplet per anchor from precomputed embeddings.

    ``anchor_emb`` holds student embeddings of the occluded training images
    (they serve both as anchors and as negative candidates) and
    ``positive_emb`` teacher embeddings of the same images fully visible.
    The positive is the farthest same-class candidate, the negative the
    nearest different-class candidate; ties go to the lowest index.
    """
    anchor_emb = np.asarray(anchor_emb, dtype=np.float64)
    positive_emb = np.asarray(positive_emb, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    if anchor_emb.shape[0] != n or positive_emb.shape[0] != n:
        raise ValueError("embeddings and targets must describe the same samples")
    rng = np.random.default_rng([cfg.seed, epoch])
    all_idx = np.arange(n)
    positives = np.empty(n, dtype=int)
    negatives = np.empty(n, dtype=int)

    if classification:
        labels = targets.astype(int)
        classes = np.unique(labels)
        shared = {}
        if not cfg.per_anchor_subsets:
            for k in classes:
                pos = _subset(rng, all_idx[labels == k], cfg.pos_subset_fraction)
                neg = _subset(rng, all_idx[labels != k], cfg.neg_subset_fraction)
                shared[k] = (pos, neg)
        for k in classes:
            anchors = all_idx[labels == k]
            if cfg.per_anchor_subsets:
                for a in anchors:
                    pos = _subset(rng, all_idx[labels == k], cfg.pos_subset_fraction)
                    neg = _subset(rng, all_idx[labels != k], cfg.neg_subset_fraction)
                    p, q = _select(anchor_emb, positive_emb, [a], pos, neg)
                    positives[a], negatives[a] = p[0], q[0]
                continue
            pos, neg = shared[k]
            if len(neg) == 0:
                raise MiningError(f"no negative candidate for anchor {anchors[0]} (class {k} is the only class)")
            p, q = _select(anchor_emb, positive_emb, anchors, pos, neg)
            positives[anchors], negatives[anchors] = p, q
    else:
        if not cfg.per_anchor_subsets:
            pos_pool = _subset(rng, all_idx, cfg.pos_subset_fraction)
            neg_pool = _subset(rng, all_idx, cfg.neg_subset_fraction)
        for a in range(n):
            if cfg.per_anchor_subsets:
                pos_pool = _subset(rng, all_idx, cfg.pos_subset_fraction)
                neg_pool = _subset(rng, all_idx, cfg.neg_subset_fraction)
            gap_pos = np.abs(targets[pos_pool] - targets[a])
            gap_neg = np.abs(targets[neg_pool] - targets[a])
            pos = pos_pool[gap_pos < cfg.regression_pos_threshold]
            neg = neg_pool[gap_neg >= cfg.regression_pos_threshold]
            p, q = _select(anchor_emb, positive_emb, [a], pos, neg)
            positives[a], negatives[a] = p[0], q[0]

    return [Triplet(int(a), int(p), int(q)) for a, p, q in zip(all_idx, positives, negatives)]


def _select(anchor_emb, positive_emb, anchors, pos, neg):
    anchors = np.asarray(anchors)
    if len(pos) == 0:
        raise MiningError(f"no positive candidate for anchor {int(anchors[0])}")
    if len(neg) == 0:
        raise MiningError(f"no negative candidate for anchor {int(anchors[0])}")
    a = anchor_emb[anchors]
    # argmax/argmin return the first extreme, i.e. the lowest index, as pools are sorted
    p = pos[np.argmax(_sq_dist(a, positive_emb[pos]), axis=1)]
    q = neg[np.argmin(_sq_dist(a, anchor_emb[neg]), axis=1)]
    return p, q


def mine_epoch(student, teacher, spec, train_full, train_occluded, cfg: MiningConfig, epoch: int = 0,
               classification: bool = True, batch_size: int = 256) -> list[Triplet]:
    """Embed the training set with both (frozen) networks and mine triplets.

    ``train_full`` and ``train_occluded`` are :class:`~distillkit.data.Subset`
    views of the same samples.
    """
    from .nn import embed

    if len(train_full) != len(train_occluded) or not np.array_equal(train_full.targets, train_occluded.targets):
        raise ValueError("full and occluded views must index the same samples")
    anchor_emb = embed(student, spec, train_occluded.images, batch_size)
    positive_emb = embed(teacher, spec, train_full.images, batch_size)
    return mine_triplets(anchor_emb, positive_emb, train_full.targets, cfg, epoch, classification)


def write_triplets(triplets: list[Triplet], path) -> None:
    """One ``anchor positive negative`` line per triplet."""
    lines = [f"{t.anchor_idx} {t.positive_idx} {t.negative_idx}" for t in triplets]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_triplets(path) -> list[Triplet]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            a, p, q = (int(v) for v in line.split())
            out.append(Triplet(a, p, q))
    return out
