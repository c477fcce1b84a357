"""End-to-end runs: data, the three stages, the embedding ensemble, evaluation and run artifacts.

Layout of a run directory::

    manifest.json        run id, resolved config, config hash, dataset hash
    logs/<stage>.jsonl   one JSON record per epoch
    checkpoints/*.json   parameters of every trained network
    models/*.json        linear margin models of the ensemble (if enabled)
    predictions.csv      test predictions of every evaluated model
    eval_report.json     metrics and paired tests against the stage-2 baseline
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from .data import DatasetSplit, generate_synthetic, load_directory
from .ensemble import EmbeddingSet, export_model, extract_embeddings, fit_margin_model
from .metrics import EvalReport
from .nn import load_params, predict, save_params
from .trainer import train_stage1_teacher, train_stage2_student, train_stage3_distill

logger = logging.getLogger(__name__)

BASELINE = "stage2"
PREDICTIONS = "predictions.csv"
REPORT = "eval_report.json"
MANIFEST = "manifest.json"


def load_data(cfg: dict, base_dir=None) -> DatasetSplit:
    """Dataset named by a validated config (synthetic recipe or directory)."""
    data = cfg["data"]
    if "path" in data:
        path = Path(data["path"])
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        return load_directory(path)
    syn = data["synthetic"]
    return generate_synthetic(
        syn["task"], syn["n"], syn["noise"], syn.get("seed", cfg["seed"]),
        num_classes=syn.get("num_classes"), label_noise=syn.get("label_noise", 0.0),
    )


@dataclass
class RunResult:
    out_dir: Path
    report: EvalReport
    predictions: dict[str, np.ndarray]
    truth: np.ndarray
    manifest: dict


def _write_predictions(path: Path, truth, preds: dict[str, np.ndarray], classification: bool) -> None:
    names = list(preds)
    fmt = (lambda v: str(int(v))) if classification else (lambda v: repr(float(v)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "truth", *names])
        for i in range(len(truth)):
            w.writerow([i, fmt(truth[i]), *(fmt(preds[n][i]) for n in names)])


def read_predictions(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[j]) for r in body]) for j, name in enumerate(header)}
    truth = cols.pop("truth")
    cols.pop("index")
    return truth, cols


def _ensemble(models: dict, cfg: dict, data: DatasetSplit, occlusion: str, out_dir: Path) -> dict[str, np.ndarray]:
    """Margin models on each distilled embedding alone and on their concatenation."""
    ens = cfg["ensemble"]
    kind = "classifier" if data.is_classification else "regressor"
    occ = data.occluded(occlusion)
    sets = {}
    for name, (params, spec) in models.items():
        sets[name] = {split: extract_embeddings(params, spec, sub, tag=name)
                      for split, sub in occ.splits().items()}
    combos = {f"svm_{name}": [name] for name in sets}
    if len(sets) > 1:
        combos["svm_ensemble"] = list(sets)
    preds = {}
    (out_dir / "models").mkdir(exist_ok=True)
    for label, members in combos.items():
        split = {s: EmbeddingSet.concat(*(sets[m][s] for m in members)) for s in ("train", "validation", "test")}
        model = fit_margin_model(split["train"], split["validation"], kind, ens["c_grid"],
                                 epochs=ens["epochs"], standardize=ens["standardize"], random_state=cfg["seed"])
        export_model(model, out_dir / "models" / f"{label}.json")
        preds[label] = model.predict(split["test"].matrix)
        logger.info("%s: C=%g", label, model.C)
    return preds


def execute(cfg: dict, out_dir, base_dir=None) -> RunResult:
    """Run every stage for a validated config and write all artifacts to ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)

    data = load_data(cfg, base_dir)
    task = data.task
    rc = config_mod.run_config(cfg, task, data.num_classes)
    spec = rc.spec
    manifest_hash = config_mod.config_hash(cfg)
    dataset_hash = data.content_hash()
    manifest = {
        "format": "distillkit-manifest",
        "version": 1,
        "run_id": cfg["run_id"],
        "config": cfg,
        "config_hash": manifest_hash,
        "dataset_hash": dataset_hash,
        "task": task,
        "num_classes": data.num_classes,
        "models": [],
    }

    def checkpoint(params, name, report):
        save_params(params, out_dir / "checkpoints" / f"{name}.json", spec,
                    extra={"manifest_hash": manifest_hash, "stage": report.stage})
        (out_dir / "logs" / f"{report.stage}.jsonl").write_text(report.to_jsonl())
        report.checkpoint = f"checkpoints/{name}.json"

    teacher, r1 = train_stage1_teacher(rc, data)
    checkpoint(teacher, "teacher", r1)
    student, r2 = train_stage2_student(teacher, rc, data)
    checkpoint(student, BASELINE, r2)
    distilled = {}
    stage_reports = [r1, r2]
    for dcfg in config_mod.distill_configs(cfg):
        if dcfg.mode == "standard_kd" and not data.is_classification:
            raise config_mod.ConfigError("distill.modes", "standard_kd needs a classification task")
        params, r3 = train_stage3_distill(teacher, student, rc, data, dcfg)
        checkpoint(params, dcfg.mode, r3)
        distilled[dcfg.mode] = params
        stage_reports.append(r3)

    occ = data.occluded(rc.occlusion)
    truth = data.test.targets
    preds = {
        "teacher_full": predict(teacher, spec, data.test.images),
        "teacher_occluded": predict(teacher, spec, occ.test.images),
        BASELINE: predict(student, spec, occ.test.images),
        f"{BASELINE}_full": predict(student, spec, data.test.images),
    }
    for mode, params in distilled.items():
        preds[mode] = predict(params, spec, occ.test.images)
    if cfg["ensemble"]["enabled"] and distilled:
        preds.update(_ensemble({m: (p, spec) for m, p in distilled.items()}, cfg, data, rc.occlusion, out_dir))

    report = EvalReport(n_samples=len(truth), manifest_hash=manifest_hash, dataset_hash=dataset_hash)
    for name, p in preds.items():
        report.add_model(name, p, truth, data.num_classes)
    if data.is_classification:
        for name in preds:
            if name not in ("teacher_full", "teacher_occluded", BASELINE, f"{BASELINE}_full"):
                report.add_paired(f"{name}_vs_{BASELINE}", preds[name], preds[BASELINE], truth)

    manifest["models"] = list(preds)
    manifest["stages"] = [r.summary() for r in stage_reports]
    (out_dir / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    _write_predictions(out_dir / PREDICTIONS, truth, preds, data.is_classification)
    (out_dir / REPORT).write_text(report.to_json())
    return RunResult(out_dir, report, preds, truth, manifest)


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no {MANIFEST})")
    return json.loads(path.read_text())


def load_checkpoint(run_dir, model: str):
    params, spec = load_params(Path(run_dir) / "checkpoints" / f"{model}.json")
    return params, spec
