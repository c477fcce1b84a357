import copy
import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from distillkit import config as config_mod
from distillkit import experiment

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
BUNDLED_CONFIG = ROOT / "configs" / "synthetic_expression.json"
ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|)``; entries below ``floor`` in both count as equal."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.where(scale > floor, np.abs(a - n) / np.maximum(scale, floor), 0.0)
    return float(err.max()) if err.size else 0.0


@pytest.fixture(scope="session")
def bundled_config() -> dict:
    return config_mod.load_config(BUNDLED_CONFIG)


def tiny_config(**changes) -> dict:
    raw = {
        "run_id": "tiny",
        "data": {"synthetic": {"task": "expression", "n": 200, "noise": 0.3}},
        "network": {"preset": "plain-small"},
        "stage_epochs": [2, 2, 2],
        "distill": {"modes": ["standard_kd", "triplet_kd"],
                    "overrides": {"triplet_kd": {"lambda": 0.5, "lr": 0.001, "normalize_embeddings": True}}},
        "ensemble": {"enabled": True, "epochs": 10},
    }
    raw.update(changes)
    return raw


@pytest.fixture
def write_config(tmp_path):
    def _write(raw: dict, name="cfg.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(raw))
        return path
    return _write


@pytest.fixture(scope="session")
def curriculum_runs(tmp_path_factory, bundled_config):
    """The bundled synthetic-expression experiment, once per acceptance seed."""
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for seed in ACCEPTANCE_SEEDS:
        cfg = config_mod.validate(dict(copy.deepcopy(bundled_config), seed=seed))
        start = time.perf_counter()
        runs[seed] = experiment.execute(cfg, root / f"seed{seed}")
        runs[seed].elapsed = time.perf_counter() - start
    return runs
