"""Command-line front end.

Subcommands::

    distillkit gen-data --task expression --n 2000 --noise 0.3 --seed 0 OUT_DIR
    distillkit run CONFIG.json [--out RUN_DIR] [--seed N]
    distillkit compare RUN[:MODEL] ... [--baseline RUN[:MODEL]] [--csv TABLE.csv]
    distillkit export-embeddings RUN_DIR --model triplet_kd [--split test] --out EMB.csv

Exit codes: 0 success, 1 unexpected failure, 2 invalid config or arguments,
3 incompatible or missing inputs (e.g. runs on different test sets),
4 training diverged. ``DISTILLKIT_SEED`` overrides the config seed for ``run``
(``--seed`` wins over both).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import experiment
from .data import TASKS, DatasetError, generate_synthetic, save_directory
from .ensemble import extract_embeddings
from .metrics import SIGNIFICANCE_LEVEL, accuracy, mae, mcnemar_test, weighted_accuracy
from .trainer import DivergenceError

logger = logging.getLogger("distillkit")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3, 4
DAGGER = "†"


class InputError(RuntimeError):
    """Inputs exist but cannot be used together."""


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(task: str, n: int, noise: float, seed: int, out_dir, num_classes=None, label_noise=0.0) -> int:
    split = generate_synthetic(task, n, noise, seed, num_classes=num_classes, label_noise=label_noise)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_directory(split, out)
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from exc
    logger.info("wrote %d images to %s (hash %s)", n, out, split.content_hash()[:12])
    return EXIT_OK


def cmd_run(config_path, out_dir=None, seed: int | None = None) -> int:
    cfg = config_mod.load_config(config_path, seed_override=seed)
    out = Path(out_dir) if out_dir else Path("runs") / cfg["run_id"]
    result = experiment.execute(cfg, out, base_dir=Path(config_path).resolve().parent)
    for name, values in result.report.metrics.items():
        logger.info("%-20s %s", name, "  ".join(f"{k}={v:.4f}" for k, v in values.items()))
    print(out / experiment.REPORT)
    return EXIT_OK


def _parse_run_ref(ref: str) -> tuple[Path, str | None]:
    # a Windows-style drive letter is not a concern here; split on the last colon
    path, sep, model = ref.rpartition(":")
    if not sep or "/" in model or not model:
        return Path(ref), None
    return Path(path), model


def _default_model(manifest: dict) -> str:
    modes = manifest["config"]["distill"]["modes"]
    return modes[0] if modes else experiment.BASELINE


def compare_runs(refs: list[str], baseline: str | None = None) -> tuple[list[dict], str]:
    """Rows of the comparison table and the baseline label.

    Every ``ref`` is ``run_dir`` or ``run_dir:model``; without a model the
    run's first distilled model is used. The baseline defaults to the first ref.
    """
    if not refs:
        raise InputError("nothing to compare")
    loaded = []
    for ref in ([baseline] if baseline else []) + list(refs):
        run_dir, model = _parse_run_ref(ref)
        manifest = experiment.load_run(run_dir)
        model = model or _default_model(manifest)
        truth, preds = experiment.read_predictions(run_dir / experiment.PREDICTIONS)
        if model not in preds:
            raise InputError(f"{run_dir}: no predictions for model {model!r}; available: {sorted(preds)}")
        loaded.append((f"{run_dir.name}:{model}", manifest, truth, preds[model]))
    base_label, base_manifest, base_truth, base_pred = loaded[0]
    rows_in = loaded[1:] if baseline else loaded
    classification = base_manifest["num_classes"] is not None
    rows = []
    for label, manifest, truth, pred in rows_in:
        if manifest["dataset_hash"] != base_manifest["dataset_hash"] or not np.array_equal(truth, base_truth):
            raise InputError(f"{label} was evaluated on a different test set than {base_label}")
        row = {"run": label}
        if classification:
            row["accuracy"] = accuracy(pred, truth)
            row["weighted_accuracy"] = weighted_accuracy(pred, truth, manifest["num_classes"])
            res = mcnemar_test(pred, base_pred, truth)
            row["p_value"] = res.p_value
            row["significant"] = res.significant
            better = row["accuracy"] > accuracy(base_pred, truth)
            row["marker"] = DAGGER if res.significant and better else ""
        else:
            row["mae"] = mae(pred, truth)
            row["p_value"] = float("nan")
            row["significant"] = False
            row["marker"] = ""
        rows.append(row)
    return rows, base_label


def format_table(rows: list[dict], baseline: str) -> str:
    cols = [c for c in rows[0] if c != "marker"]
    cells = []
    for r in rows:
        line = []
        for c in cols:
            v = r[c]
            if c == "run":
                line.append(f"{v}{r['marker']}")
            elif isinstance(v, bool):
                line.append("yes" if v else "no")
            elif c == "p_value":
                line.append("-" if np.isnan(v) else f"{v:.4g}")
            else:
                line.append(f"{v:.4f}")
        cells.append(line)
    widths = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    out = io.StringIO()
    out.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
    out.write("  ".join("-" * w for w in widths) + "\n")
    for line in cells:
        out.write("  ".join(x.ljust(w) for x, w in zip(line, widths)).rstrip() + "\n")
    out.write(f"baseline: {baseline}; {DAGGER} significantly better (McNemar p < {SIGNIFICANCE_LEVEL})\n")
    return out.getvalue()


def write_table_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_compare(refs: list[str], baseline: str | None = None, csv_path=None) -> int:
    rows, base = compare_runs(refs, baseline)
    text = format_table(rows, base)
    sys.stdout.write(text)
    if csv_path:
        write_table_csv(rows, csv_path)
        Path(csv_path).with_suffix(".txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_export_embeddings(run_dir, model: str, out_path, split: str = "test", occlusion: str | None = None) -> int:
    run_dir = Path(run_dir)
    manifest = experiment.load_run(run_dir)
    cfg = manifest["config"]
    data = experiment.load_data(cfg)
    if data.content_hash() != manifest["dataset_hash"]:
        raise InputError(f"dataset no longer matches the one used by {run_dir}")
    try:
        params, spec = experiment.load_checkpoint(run_dir, model)
    except FileNotFoundError as exc:
        raise InputError(f"{run_dir}: no checkpoint for model {model!r}") from exc
    view = data.occluded(occlusion or cfg["occlusion"])
    emb = extract_embeddings(params, spec, view.splits()[split], tag=model)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "target", *(f"e{j}" for j in range(emb.dim))])
        for i in range(len(emb)):
            w.writerow([i, repr(float(emb.targets[i])), *(repr(float(x)) for x in emb.matrix[i])])
    logger.info("wrote %d x %d embeddings to %s", len(emb), emb.dim, out_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillkit", description="Teacher-student distillation under half-face occlusion.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more detail")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("out_dir")
    p.add_argument("--task", choices=TASKS, default="expression")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--label-noise", type=float, default=0.0)

    p = sub.add_parser("run", help="train all stages from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="run directory (default runs/<run_id>)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config and DISTILLKIT_SEED")

    p = sub.add_parser("compare", help="metrics and McNemar tests across runs")
    p.add_argument("runs", nargs="+", help="RUN_DIR or RUN_DIR:MODEL")
    p.add_argument("--baseline", default=None, help="RUN_DIR[:MODEL]; defaults to the first run")
    p.add_argument("--csv", default=None, help="also write the table as CSV (and .txt)")

    p = sub.add_parser("export-embeddings", help="dump penultimate-layer activations as CSV")
    p.add_argument("run_dir")
    p.add_argument("--model", default="triplet_kd")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--occlusion", choices=("none", "upper_half_hidden", "lower_half_hidden"), default=None)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args.task, args.n, args.noise, args.seed, args.out_dir,
                                args.num_classes, args.label_noise)
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed)
        if args.command == "compare":
            return cmd_compare(args.runs, args.baseline, args.csv)
        return cmd_export_embeddings(args.run_dir, args.model, args.out, args.split, args.occlusion)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if isinstance(exc, DatasetError):
            print(f"dataset error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
