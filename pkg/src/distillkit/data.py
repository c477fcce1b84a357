"""Datasets, half-face occlusion and a synthetic privileged-information task.

Synthetic construction
----------------------
Every image is a 16x16 grayscale "face" on a mid-grey base (0.5). Its class is
written into both halves by fixed per-class templates:

    image = 0.5 + a_upper * U[k] + a_lower * L[k] + identity + noise

``U[k]`` lives on rows [0, H/2) and ``L[k]`` on rows [H/2, H). Within each half
the templates are smooth random fields, orthogonalised and scaled to unit RMS,
so the class evidence carried by a half is set by its amplitude alone. The
upper half gets the stronger signal (``a_upper > a_lower``), which gives the
ordering full > upper-visible > lower-visible for the nearest-template
(Bayes) rule. ``identity`` is a per-sample smooth nuisance field shared by
all classes, and ``noise`` is i.i.d. Gaussian pixel noise; both scale with the
``noise`` argument. Pixels are clipped to [0, 1] and quantised to 8 bits so a
PNG export reloads bit-exactly.

Tasks: ``expression`` (``num_classes`` classes, default 4), ``gender``
(2 classes) and ``age`` (regression, targets uniform on [20, 70], encoded by
rotating between two templates per half).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

OCCLUSION_MODES = ("none", "upper_half_hidden", "lower_half_hidden")
TASKS = ("expression", "gender", "age")
AGE_RANGE = (20.0, 70.0)
IMAGE_SIZE = 16
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

# half-wise signal amplitudes (pixel units) per task
_AMPLITUDES = {
    "expression": (0.12, 0.08),
    "gender": (0.12, 0.07),
    "age": (0.20, 0.12),
}
_IDENTITY_COMPONENTS = 6


class DatasetError(ValueError):
    """Raised for malformed dataset directories; the message names the file."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    target: float | int
    occlusion: str = "none"


def _check_mode(mode: str) -> None:
    if mode not in OCCLUSION_MODES:
        raise ValueError(f"unknown occlusion mode {mode!r}; expected one of {OCCLUSION_MODES}")


def occlude_array(pixels: np.ndarray, mode: str) -> np.ndarray:
    """Zero one half of the rows of an (..., H, W) array; returns a copy."""
    _check_mode(mode)
    out = np.array(pixels, dtype=np.float64, copy=True)
    h = out.shape[-2]
    if h % 2:
        raise ValueError(f"image height must be even, got {h}")
    if mode == "upper_half_hidden":
        out[..., : h // 2, :] = 0.0
    elif mode == "lower_half_hidden":
        out[..., h // 2:, :] = 0.0
    return out


def occlude(image: LabeledImage, mode: str) -> LabeledImage:
    if image.occlusion != "none":
        raise ValueError(f"image already occluded ({image.occlusion})")
    return LabeledImage(occlude_array(image.pixels, mode), image.target, mode)


@dataclass(frozen=True)
class Subset:
    images: np.ndarray
    targets: np.ndarray
    occlusion: str = "none"

    def __len__(self) -> int:
        return len(self.targets)

    def occluded(self, mode: str) -> "Subset":
        if self.occlusion != "none":
            raise ValueError(f"subset already occluded ({self.occlusion})")
        return Subset(occlude_array(self.images, mode), self.targets, mode)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], self.targets[i].item(), self.occlusion)


@dataclass(frozen=True)
class DatasetSplit:
    train: Subset
    validation: Subset
    test: Subset
    task: str
    num_classes: int | None = None

    @property
    def is_classification(self) -> bool:
        return self.num_classes is not None

    def occluded(self, mode: str) -> "DatasetSplit":
        if mode == "none":
            return self
        return replace(
            self,
            train=self.train.occluded(mode),
            validation=self.validation.occluded(mode),
            test=self.test.occluded(mode),
        )

    def splits(self) -> dict[str, Subset]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.task}:{self.num_classes}".encode())
        for name, sub in self.splits().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(sub.images, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(sub.targets, dtype=np.float64).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _smooth_fields(rng: np.random.Generator, count: int, rows: int, cols: int, bumps: int = 5) -> np.ndarray:
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    fields = np.zeros((count, rows, cols))
    for f in fields:
        for _ in range(bumps):
            cy, cx = rng.uniform(0, rows), rng.uniform(0, cols)
            width = rng.uniform(1.0, 2.5)
            f += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return fields


def _orthonormal_templates(rng: np.random.Generator, count: int, rows: int, cols: int) -> np.ndarray:
    """``count`` smooth patterns, mutually orthogonal, zero-mean, unit RMS."""
    fields = _smooth_fields(rng, count, rows, cols).reshape(count, -1)
    fields -= fields.mean(axis=1, keepdims=True)
    q, _ = np.linalg.qr(fields.T)
    q = q.T[:count] * np.sqrt(rows * cols)
    return q.reshape(count, rows, cols)


def _templates(task: str, num_classes: int, seed: int):
    rng = np.random.default_rng([seed, 7919])
    half = IMAGE_SIZE // 2
    per_half = 2 if task == "age" else num_classes
    upper = _orthonormal_templates(rng, per_half, half, IMAGE_SIZE)
    lower = _orthonormal_templates(rng, per_half, half, IMAGE_SIZE)
    identity = _smooth_fields(rng, _IDENTITY_COMPONENTS, IMAGE_SIZE, IMAGE_SIZE, bumps=3)
    identity /= np.sqrt((identity**2).mean(axis=(1, 2), keepdims=True))
    return upper, lower, identity


def class_means(task: str, num_classes: int, seed: int) -> np.ndarray:
    """Noise-free class images (before clipping); used by the Bayes oracle."""
    a_up, a_low = _AMPLITUDES[task]
    upper, lower, _ = _templates(task, num_classes, seed)
    means = np.full((num_classes, IMAGE_SIZE, IMAGE_SIZE), 0.5)
    half = IMAGE_SIZE // 2
    means[:, :half] += a_up * upper
    means[:, half:] += a_low * lower
    return means


def _render(task, targets, num_classes, noise, seed, rng):
    a_up, a_low = _AMPLITUDES[task]
    upper, lower, identity = _templates(task, num_classes, seed)
    n = len(targets)
    half = IMAGE_SIZE // 2
    images = np.full((n, IMAGE_SIZE, IMAGE_SIZE), 0.5)
    if task == "age":
        theta = (targets - AGE_RANGE[0]) / (AGE_RANGE[1] - AGE_RANGE[0]) * (np.pi / 2)
        cos, sin = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
        images[:, :half] += a_up * (cos * upper[0] + sin * upper[1])
        images[:, half:] += a_low * (cos * lower[0] + sin * lower[1])
    else:
        k = targets.astype(int)
        images[:, :half] += a_up * upper[k]
        images[:, half:] += a_low * lower[k]
    if noise > 0:
        coeffs = rng.normal(0.0, 0.25 * noise, size=(n, _IDENTITY_COMPONENTS))
        images += np.tensordot(coeffs, identity, axes=1)
        images += rng.normal(0.0, noise, size=images.shape)
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


def task_num_classes(task: str, num_classes: int | None = None) -> int | None:
    if task == "age":
        return None
    if task == "gender":
        return 2
    return 4 if num_classes is None else int(num_classes)


def generate_synthetic(
    task: str,
    n: int,
    noise: float,
    seed: int,
    num_classes: int | None = None,
    label_noise: float = 0.0,
) -> DatasetSplit:
    """Generate a 60/20/20 split of the synthetic task.

    ``label_noise`` is the fraction of train and validation labels replaced by
    a uniformly drawn wrong class (classification only); test labels stay clean.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if not 0.0 <= noise < 1.0:
        raise ValueError(f"noise must lie in [0, 1), got {noise}")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError(f"label_noise must lie in [0, 1), got {label_noise}")
    k = task_num_classes(task, num_classes)
    if k is not None and k < 2:
        raise ValueError("classification needs at least 2 classes")
    min_n = 10 * k if k is not None else 10
    if n < min_n:
        raise ValueError(f"n={n} too small; need at least {min_n} samples")

    rng = np.random.default_rng(seed)
    if k is None:
        targets = rng.uniform(*AGE_RANGE, size=n)
    else:
        targets = rng.permutation(np.arange(n) % k).astype(np.float64)
    images = _render(task, targets, k or 2, noise, seed, rng)

    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)]
    subsets = []
    for i, (lo, hi) in enumerate(bounds):
        y = targets[lo:hi].copy()
        if k is not None and label_noise > 0 and i < 2:
            flip = rng.random(len(y)) < label_noise
            shift = rng.integers(1, k, size=len(y))
            y[flip] = (y[flip] + shift[flip]) % k
        subsets.append(Subset(images[lo:hi], y))
    split = DatasetSplit(*subsets, task=task, num_classes=k)
    if k is not None:
        missing = set(range(k)) - set(split.train.targets.astype(int).tolist())
        if missing:
            raise ValueError(f"classes {sorted(missing)} absent from the train split; increase n")
    return split


# ---------------------------------------------------------------------------
# directory layout
# ---------------------------------------------------------------------------

MANIFEST = "labels.csv"
META = "dataset.json"


def save_directory(split: DatasetSplit, path) -> None:
    """Write ``images/<split>_<index>.png`` (8-bit grayscale) plus ``labels.csv``.

    ``labels.csv`` has the header ``filename,target,split``; ``dataset.json``
    records the task and number of classes.
    """
    from PIL import Image

    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, sub in split.splits().items():
        for i in range(len(sub)):
            fname = f"images/{name}_{i:05d}.png"
            arr = np.rint(np.clip(sub.images[i], 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(root / fname, optimize=False)
            target = int(sub.targets[i]) if split.is_classification else repr(float(sub.targets[i]))
            rows.append((fname, target, name))
    with open(root / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "target", "split"])
        writer.writerows(rows)
    meta = {"task": split.task, "num_classes": split.num_classes}
    (root / META).write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_directory(path) -> DatasetSplit:
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"missing manifest {manifest}")
    meta = {}
    if (root / META).is_file():
        meta = json.loads((root / META).read_text())

    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{manifest}: no samples listed")
    for col in ("filename", "target", "split"):
        if col not in rows[0]:
            raise DatasetError(f"{manifest}: missing column {col!r}")

    num_classes = meta.get("num_classes")
    task = meta.get("task")
    if task is None:
        is_int = all(r["target"].lstrip("-").isdigit() for r in rows)
        task = "expression" if is_int else "age"
        if is_int:
            num_classes = max(int(r["target"]) for r in rows) + 1
    classification = task != "age"

    buckets: dict[str, tuple[list, list]] = {"train": ([], []), "validation": ([], []), "test": ([], [])}
    for row in rows:
        fname = row["filename"]
        if row["split"] not in buckets:
            raise DatasetError(f"{fname}: unknown split {row['split']!r}")
        file = root / fname
        if not file.is_file():
            raise DatasetError(f"missing image file {fname}")
        try:
            with Image.open(file) as img:
                arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            raise DatasetError(f"corrupt image {fname}: {exc}") from None
        try:
            target = float(row["target"])
        except ValueError:
            raise DatasetError(f"{fname}: target {row['target']!r} is not a number") from None
        if classification and (target != int(target) or target < 0 or (num_classes is not None and target >= num_classes)):
            raise DatasetError(f"{fname}: label {row['target']} out of range for {num_classes} classes")
        images, targets = buckets[row["split"]]
        images.append(arr)
        targets.append(target)

    subsets = []
    for name, (images, targets) in buckets.items():
        if not images:
            raise DatasetError(f"{manifest}: split {name!r} is empty")
        shapes = {a.shape for a in images}
        if len(shapes) != 1:
            raise DatasetError(f"{manifest}: images in split {name!r} have mixed sizes {sorted(shapes)}")
        subsets.append(Subset(np.stack(images), np.asarray(targets, dtype=np.float64)))
    return DatasetSplit(*subsets, task=task, num_classes=num_classes if classification else None)
