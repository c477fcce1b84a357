import json
import math

import numpy as np
import pytest

from distillkit.data import generate_synthetic
from distillkit.losses import DistillConfig
from distillkit.metrics import accuracy, mcnemar_test
from distillkit.mining import MiningConfig
from distillkit.nn import build, predict, preset
from distillkit.trainer import (
    DivergenceError,
    RunConfig,
    run_curriculum,
    train_stage1_teacher,
    train_stage2_student,
    train_stage3_distill,
    validation_metric,
)


def _cfg(epochs=(3, 3, 2), **kw):
    spec = kw.pop("spec", preset("plain-small", num_classes=4))
    return RunConfig(spec=spec, stage_epochs=epochs, **kw)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic("expression", 400, 0.3, seed=3)


@pytest.fixture(scope="module")
def small_curriculum(small_data):
    cfg = _cfg((4, 3, 2))
    teacher, _ = train_stage1_teacher(cfg, small_data)
    student, _ = train_stage2_student(teacher, cfg, small_data)
    return cfg, teacher, student


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_teacher_learns_noiseless_task(seed):
    data = generate_synthetic("expression", 2000, 0.0, seed=seed)
    cfg = _cfg((30, 0, 0), seed=seed)
    teacher, report = train_stage1_teacher(cfg, data)
    _, err = validation_metric(teacher, cfg.spec, data.validation)
    assert 1 - err >= 0.95
    assert len(report.epochs) == 30


def test_zero_epochs_returns_initialisation(small_data):
    cfg = _cfg((0, 0, 0), seed=5)
    teacher, report = train_stage1_teacher(cfg, small_data)
    assert teacher.equals(build(cfg.spec, 5)) and report.epochs == []


def test_loss_non_increasing_early_on_noiseless_task():
    data = generate_synthetic("expression", 400, 0.0, seed=1)
    _, report = train_stage1_teacher(_cfg((3, 0, 0)), data)
    losses = [e["train_loss"] for e in report.epochs]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_student_starts_from_teacher(small_curriculum, small_data):
    cfg, teacher, _ = small_curriculum
    student, report = train_stage2_student(teacher, cfg, small_data, epochs=0)
    assert student.equals(teacher) and student is not teacher
    assert student.role == "student" and report.epochs == []


def test_unoccluded_stage2_continues_stage1():
    data = generate_synthetic("expression", 600, 0.3, seed=2)
    cfg = _cfg((8, 4, 0), occlusion="none")
    teacher, _ = train_stage1_teacher(cfg, data)
    cont, _ = train_stage2_student(teacher, cfg, data)
    longer, _ = train_stage1_teacher(_cfg((12, 0, 0), occlusion="none"), data)
    a = accuracy(predict(cont, cfg.spec, data.validation.images), data.validation.targets)
    b = accuracy(predict(longer, cfg.spec, data.validation.images), data.validation.targets)
    assert abs(a - b) <= 0.02


@pytest.mark.parametrize("mode", ["standard_kd", "hint_kd", "triplet_kd"])
def test_lambda_zero_matches_continued_fine_tuning(small_curriculum, small_data, mode):
    cfg, teacher, student = small_curriculum
    distilled, _ = train_stage3_distill(teacher, student, cfg, small_data, DistillConfig(mode, lam=0.0))
    occ = small_data.occluded(cfg.occlusion)
    res = mcnemar_test(predict(distilled, cfg.spec, occ.test.images),
                       predict(student, cfg.spec, occ.test.images), occ.test.targets)
    assert res.p_value > 0.05


def test_teacher_untouched_by_distillation(small_curriculum, small_data):
    cfg, teacher, student = small_curriculum
    before, student_before = teacher.state(), student.state()
    for mode in ("standard_kd", "hint_kd", "triplet_kd"):
        train_stage3_distill(teacher, student, cfg, small_data, DistillConfig(mode, lam=0.5))
    for k, v in before.items():
        assert np.array_equal(teacher[k].data, v)
        assert np.array_equal(student[k].data, student_before[k])


def test_one_mining_call_per_epoch(small_curriculum, small_data):
    cfg, teacher, student = small_curriculum
    calls = []
    _, report = train_stage3_distill(teacher, student, cfg, small_data,
                                     DistillConfig("triplet_kd", lam=0.5, normalize_embeddings=True),
                                     on_mine=lambda epoch, trip: calls.append((epoch, len(trip))))
    n_train = len(small_data.train)
    assert calls == [(0, n_train), (1, n_train)]
    assert report.mining_calls == 2 == len(report.epochs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_epoch():
    data = generate_synthetic("expression", 100, 0.3, seed=0)
    data.train.images[5, 0, 0] = np.inf
    with pytest.raises(DivergenceError, match="epoch 0"):
        train_stage1_teacher(_cfg((2, 0, 0)), data)


def test_standard_kd_rejected_for_regression():
    data = generate_synthetic("age", 100, 0.3, seed=0)
    spec = preset("plain-small", head="regressor")
    cfg = RunConfig(spec=spec, stage_epochs=(1, 1, 1), mining=MiningConfig.for_task("age"))
    teacher = build(spec, 0)
    with pytest.raises(ValueError, match="standard_kd"):
        train_stage3_distill(teacher, teacher, cfg, data, DistillConfig("standard_kd"))


def test_regression_curriculum_runs():
    data = generate_synthetic("age", 150, 0.3, seed=0)
    spec = preset("plain-small", head="regressor")
    cfg = RunConfig(spec=spec, stage_epochs=(2, 1, 1), lr=(1e-3, 1e-3, 1e-4), mining=MiningConfig.for_task("age"))
    out = run_curriculum(cfg, data, [DistillConfig("hint_kd"), DistillConfig("triplet_kd", lam=0.5)])
    for _, report in out.values():
        assert all(math.isfinite(e["val_error"]) for e in report.epochs)


def test_reports_and_jsonl(small_curriculum, small_data):
    cfg, teacher, student = small_curriculum
    _, report = train_stage3_distill(teacher, student, cfg, small_data)
    lines = [json.loads(x) for x in report.to_jsonl().splitlines()]
    assert [x["epoch"] for x in lines] == [0, 1]
    assert all(x["stage"] == "stage3_standard_kd" for x in lines)
    assert all(math.isfinite(x[k]) for x in lines for k in ("train_loss", "val_loss", "val_error", "lr"))
    assert report.summary()["num_epochs"] == 2
    assert report.best_metric == min(x["val_error"] for x in lines)


def test_config_validation():
    spec = preset("plain-small")
    with pytest.raises(ValueError):
        RunConfig(spec=spec, occlusion="left")
    with pytest.raises(ValueError):
        RunConfig(spec=spec, stage_epochs=(1, -1, 1))
    with pytest.raises(ValueError):
        RunConfig(spec=spec, optimizer="rmsprop")


def test_curriculum_is_deterministic(small_data):
    cfg = _cfg((2, 2, 1))
    modes = [DistillConfig("standard_kd"), DistillConfig("triplet_kd", lam=0.5, normalize_embeddings=True)]
    a, b = run_curriculum(cfg, small_data, modes), run_curriculum(cfg, small_data, modes)
    for key in a:
        assert a[key][0].equals(b[key][0])
        assert a[key][1].epochs == b[key][1].epochs
