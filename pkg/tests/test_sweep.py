"""Sweep configs, accounting, report rendering, and the sweep loop."""

import json
import math

import numpy as np
import pytest
import torch

from robustlab.attacks.threat import AttackOutcome, ThreatModel
from robustlab.errors import ConfigurationError
from robustlab.models import build_model, save_checkpoint
from robustlab.sweep import (
    AttackBudget,
    CellResult,
    RobustnessReport,
    SweepConfig,
    desk_threats,
    evaluation_subset,
    format_report,
    robust_accuracy,
    run_sweep,
    worst_case,
)

from conftest import tiny_config


# ---------------------------------------------------------------- configs


def test_budget_validation():
    for kw in [dict(iterations=0), dict(restarts=0), dict(queries=0),
               dict(pgd0_iterations=-1), dict(keep_fraction=0.0),
               dict(keep_fraction=1.5)]:
        with pytest.raises(ConfigurationError):
            AttackBudget(**kw)
    b = AttackBudget()
    assert set(b.to_dict()) == {
        "iterations", "restarts", "queries", "pgd0_iterations",
        "phase1_iters", "phase2_iters", "keep_fraction",
    }


def test_sweep_config_validation():
    threat = (ThreatModel("linf", 0.01), AttackBudget())
    with pytest.raises(ConfigurationError):
        SweepConfig(models=(), threats=(threat,))
    with pytest.raises(ConfigurationError):
        SweepConfig(models=(("m", "x.npz"),), threats=(threat,), points=0)
    with pytest.raises(ConfigurationError):
        SweepConfig(models=(("m", "x.npz"),), threats=(threat, threat))
    with pytest.raises(ConfigurationError):
        SweepConfig(models=(("m", "a.npz"), ("m", "b.npz")),
                    threats=(threat,))
    with pytest.raises(ConfigurationError):
        SweepConfig(models=(("m", "x.npz"),), threats=(threat,),
                    worst_case_kinds=("l2",))
    cfg = SweepConfig(models=(("m", "x.npz"),), threats=(threat,),
                      worst_case_kinds=("linf",))
    assert cfg.worst_case_kinds == ("linf",)


def test_desk_threats_rescale_budgets():
    threats = desk_threats((3, 32, 32), token_size=8)
    kinds = [t.kind for t, _ in threats]
    assert kinds == ["linf", "l2", "l1", "l0_pixel", "patch", "frame"]
    by_kind = {t.kind: t for t, _ in threats}
    d, ref = 3 * 32 * 32, 3 * 224 * 224
    assert by_kind["linf"].epsilon == 4.0 / 255.0
    assert math.isclose(by_kind["l2"].epsilon, 2.0 * math.sqrt(d / ref))
    assert math.isclose(by_kind["l1"].epsilon, 75.0 * d / ref)
    assert by_kind["l0_pixel"].count == 2
    assert by_kind["patch"].count == 8
    assert by_kind["frame"].count == 2


def test_desk_threats_reference_geometry():
    by_kind = {t.kind: t for t, _ in desk_threats((3, 224, 224), 16)}
    assert by_kind["l2"].epsilon == 2.0
    assert by_kind["l1"].epsilon == 75.0
    assert by_kind["l0_pixel"].count == 100
    assert by_kind["patch"].count == 16


# ---------------------------------------------------------------- accounting


def test_robust_accuracy_counts_clean_and_unbroken():
    correct = np.array([True, True, True, False])
    success = np.array([False, False, True, True])
    assert robust_accuracy(success, correct) == 50.0
    assert robust_accuracy(np.zeros(4, bool), correct) == 75.0
    assert robust_accuracy(np.ones(4, bool), correct) == 0.0


def test_robust_accuracy_errors():
    with pytest.raises(ConfigurationError):
        robust_accuracy(np.zeros(3, bool), np.zeros(4, bool))
    with pytest.raises(ConfigurationError):
        robust_accuracy(np.zeros(0, bool), np.zeros(0, bool))


def test_worst_case_is_union():
    correct = np.array([True, True, True, True])
    s1 = np.array([True, False, False, False])
    s2 = np.array([False, True, False, False])
    assert worst_case([s1, s2], correct) == 50.0
    assert worst_case([s1, s2], correct) <= min(
        robust_accuracy(s1, correct), robust_accuracy(s2, correct)
    )
    with pytest.raises(ConfigurationError):
        worst_case([], correct)


def test_evaluation_subset_deterministic():
    a = evaluation_subset(50, 10, seed=3)
    b = evaluation_subset(50, 10, seed=3)
    assert torch.equal(a, b)
    assert len(set(a.tolist())) == 10
    assert a.max() < 50
    assert not torch.equal(a, evaluation_subset(50, 10, seed=4))
    assert evaluation_subset(5, 10, seed=0).shape[0] == 5
    with pytest.raises(ConfigurationError):
        evaluation_subset(0, 10, seed=0)


# ---------------------------------------------------------------- rendering


def _toy_report():
    rep = RobustnessReport(
        model_names=("resnet-a", "vit-b", "broken"),
        threat_kinds=("linf", "patch"),
        points=4,
        seed=0,
    )
    correct = np.array([True, True, True, False])
    for name, (clean, linf, patch) in {
        "resnet-a": (75.0, 50.0, 25.0),
        "vit-b": (75.0, 25.0, 50.0),
    }.items():
        rep.clean[name] = clean
        rep.correct[name] = correct
        rep.cells[(name, "linf")] = CellResult(
            robust_accuracy=linf, mean_best_loss=0.1,
            success=np.array([False, True, False, False]),
        )
        rep.cells[(name, "patch")] = CellResult(
            robust_accuracy=patch, mean_best_loss=0.2,
            success=np.array([False, False, True, False]),
        )
        rep.worst[name] = min(linf, patch)
    rep.errors["broken"] = "unreadable checkpoint"
    return rep


def test_format_table_layout():
    text = format_report(_toy_report(), fmt="table")
    lines = text.split("\n")
    assert lines[0] == "model    | clean | linf | patch | worst-case"
    assert lines[1] == "resnet-a | 75.0 | 50.0 | 25.0 | 25.0"
    assert lines[2] == "vit-b    | 75.0 | 25.0 | 50.0 | 25.0"
    assert lines[3] == "broken   | error: unreadable checkpoint"
    assert text.endswith("\n")


def test_format_csv_layout():
    text = format_report(_toy_report(), fmt="csv")
    lines = text.split("\n")
    assert lines[0] == "model,clean,linf,patch,worst-case"
    assert lines[1] == "resnet-a,75.0,50.0,25.0,25.0"
    assert lines[2] == "vit-b,75.0,25.0,50.0,25.0"


def test_format_records_json():
    out = json.loads(format_report(_toy_report(), fmt="records"))
    assert out["points"] == 4
    assert out["threats"] == ["linf", "patch"]
    entry = out["models"]["resnet-a"]
    assert entry["clean_accuracy"] == 75.0
    assert entry["cells"]["linf"]["robust_accuracy"] == 50.0
    assert entry["cells"]["patch"]["success"] == [False, False, True, False]
    assert out["models"]["broken"] == {"error": "unreadable checkpoint"}


def test_format_missing_cell_renders_dash():
    rep = _toy_report()
    del rep.cells[("vit-b", "patch")]
    lines = format_report(rep, fmt="table").split("\n")
    assert lines[2] == "vit-b    | 75.0 | 25.0 | - | 25.0"


def test_format_rejects_unknown_format():
    with pytest.raises(ConfigurationError):
        format_report(_toy_report(), fmt="html")


def test_validate_catches_bad_accounting():
    rep = _toy_report()
    rep.validate()  # consistent as constructed
    rep.cells[("resnet-a", "linf")].robust_accuracy = 80.0  # above clean
    with pytest.raises(ConfigurationError):
        rep.validate()
    rep = _toy_report()
    rep.worst["vit-b"] = 60.0  # above the per-threat minimum
    with pytest.raises(ConfigurationError):
        rep.validate()


# ---------------------------------------------------------------- sweep loop


def _small_budget():
    return AttackBudget(iterations=4, restarts=1, queries=20,
                        pgd0_iterations=4, phase1_iters=2, phase2_iters=2,
                        keep_fraction=0.5)


def test_run_sweep_end_to_end(tmp_path, shapes96):
    live = build_model(tiny_config(), seed=0)
    saved = build_model(tiny_config(), seed=1)
    ckpt = str(tmp_path / "saved.npz")
    save_checkpoint(saved, ckpt)
    budget = _small_budget()
    cfg = SweepConfig(
        models=(("live", live), ("saved", ckpt),
                ("missing", str(tmp_path / "nope.npz"))),
        # passed out of order on purpose; the report reorders canonically
        threats=((ThreatModel("patch", 8), budget),
                 (ThreatModel("linf", 4.0 / 255.0), budget)),
        points=12,
        seed=0,
    )
    seen = []
    report = run_sweep(cfg, shapes96.images, shapes96.labels,
                       out_dir=str(tmp_path / "cells"),
                       progress=lambda n, k: seen.append((n, k)))
    assert report.threat_kinds == ("linf", "patch")
    assert report.points == 12
    assert set(seen) == {(n, k) for n in ("live", "saved")
                         for k in ("linf", "patch")}
    assert "missing" in report.errors
    for name in ("live", "saved"):
        clean = report.clean[name]
        accs = []
        for kind in ("linf", "patch"):
            cell = report.cells[(name, kind)]
            assert 0.0 <= cell.robust_accuracy <= clean + 1e-9
            assert cell.outcome_path.endswith(".npz")
            assert cell.success.shape == (12,)
            accs.append(cell.robust_accuracy)
        assert report.worst[name] <= min(accs) + 1e-9

    again = run_sweep(cfg, shapes96.images, shapes96.labels,
                      out_dir=str(tmp_path / "cells"))
    for key, cell in report.cells.items():
        assert again.cells[key].robust_accuracy == cell.robust_accuracy
        assert np.array_equal(again.cells[key].success, cell.success)
    assert again.clean == report.clean
    assert again.worst == report.worst


def test_run_sweep_reads_stored_cells(tmp_path, shapes96):
    live = build_model(tiny_config(), seed=0)
    cfg = SweepConfig(
        models=(("only", live),),
        threats=((ThreatModel("linf", 4.0 / 255.0), _small_budget()),),
        points=8,
        seed=1,
    )
    out_dir = str(tmp_path / "cells")
    first = run_sweep(cfg, shapes96.images, shapes96.labels, out_dir=out_dir)
    path = first.cells[("only", "linf")].outcome_path
    stored = AttackOutcome.load(path)
    stored.success = torch.ones_like(stored.success)
    stored.save(path)
    second = run_sweep(cfg, shapes96.images, shapes96.labels, out_dir=out_dir)
    assert second.cells[("only", "linf")].robust_accuracy == 0.0


def test_run_sweep_without_cache_dir(shapes96):
    live = build_model(tiny_config(), seed=0)
    cfg = SweepConfig(
        models=(("only", live),),
        threats=((ThreatModel("frame", 2),
                  AttackBudget(iterations=3, restarts=1)),),
        points=6,
        seed=0,
    )
    report = run_sweep(cfg, shapes96.images, shapes96.labels)
    cell = report.cells[("only", "frame")]
    assert cell.outcome_path == ""
    assert 0.0 <= cell.robust_accuracy <= report.clean["only"] + 1e-9
