"""Multi-threat robustness sweep: every configured attack against every
model, with robust accuracies, per-example worst cases, and report
rendering.

Per threat kind the sweep runs:
  linf / l2 / l1   APGD on cross-entropy and (with >= 4 classes) on the
                   scale-invariant logit-difference loss; per-example union.
  l0_pixel         white-box sparse descent first, then black-box random
                   search on the surviving examples.
  patch            two-phase greedy patch attack at both grid alignments.
  frame            border-frame APGD with restarts.

Examples already misclassified on clean input count as non-robust and are
not attacked.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks.apgd import APGDConfig, apgd
from .attacks.losses import LossSpec, loss_value
from .attacks.sparse import pgd0, sparse_random_search
from .attacks.threat import THREAT_KINDS, AttackOutcome, ThreatModel
from .errors import ConfigurationError, RobustlabError
from .models.checkpoint import load_checkpoint
from .models.handle import ModelHandle
from .patches import PatchGrid, frame_attack, greedy_patch_attack

_MARGIN = LossSpec("margin")

# column order of the report: clean first, then this fixed kind order
REPORT_KIND_ORDER = tuple(THREAT_KINDS)

# reference geometry the default budgets were stated at
_REF_DIM = 3 * 224 * 224
_REF_PIXELS = 224 * 224


@dataclass(frozen=True)
class AttackBudget:
    """Iteration/query budgets for one threat entry."""

    iterations: int = 100
    restarts: int = 1
    queries: int = 1000      # black-box budget (l0_pixel)
    pgd0_iterations: int = 100
    phase1_iters: int = 20   # greedy patch phases
    phase2_iters: int = 480
    keep_fraction: float = 0.2

    def __post_init__(self):
        if self.iterations < 1 or self.restarts < 1:
            raise ConfigurationError(
                "budget needs iterations >= 1 and restarts >= 1"
            )
        if self.queries < 1 or self.pgd0_iterations < 0:
            raise ConfigurationError(
                "budget needs queries >= 1 and pgd0_iterations >= 0"
            )
        if not 0 < self.keep_fraction <= 1:
            raise ConfigurationError(
                f"keep_fraction must be in (0,1], got {self.keep_fraction}"
            )

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "restarts": self.restarts,
            "queries": self.queries,
            "pgd0_iterations": self.pgd0_iterations,
            "phase1_iters": self.phase1_iters,
            "phase2_iters": self.phase2_iters,
            "keep_fraction": self.keep_fraction,
        }


@dataclass(frozen=True)
class SweepConfig:
    """models: (name, checkpoint path or live handle) pairs.
    threats: (ThreatModel, AttackBudget) pairs, one kind each.
    points: evaluation set size drawn from a seeded shuffle of the test
    split. worst_case_kinds: threat subset for the per-model worst case
    (default: every swept kind)."""

    models: tuple
    threats: tuple
    points: int = 200
    seed: int = 0
    worst_case_kinds: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "threats", tuple(self.threats))
        if self.points < 1:
            raise ConfigurationError(f"points must be >= 1, got {self.points}")
        if not self.models:
            raise ConfigurationError("sweep needs at least one model")
        kinds = [t.kind for t, _ in self.threats]
        if len(set(kinds)) != len(kinds):
            raise ConfigurationError(
                f"each threat kind may appear once, got {kinds}"
            )
        names = [name for name, _ in self.models]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate model names: {names}")
        if self.worst_case_kinds is not None:
            object.__setattr__(self, "worst_case_kinds",
                               tuple(self.worst_case_kinds))
            unknown = set(self.worst_case_kinds) - set(kinds)
            if unknown:
                raise ConfigurationError(
                    f"worst_case_kinds not in the sweep: {sorted(unknown)}"
                )


def desk_threats(input_size=(3, 32, 32), token_size=8):
    """The reference six-threat list with budgets rescaled to the given
    geometry: linf stays 4/255, the l2 and l1 radii shrink with sqrt(d) and
    d, the pixel count with the pixel ratio; the patch side becomes the
    token size and the frame width stays 2."""
    c, h, w = input_size
    d = c * h * w
    pixels = h * w
    budget = AttackBudget()
    threats = [
        (ThreatModel("linf", 4.0 / 255.0), budget),
        (ThreatModel("l2", 2.0 * (d / _REF_DIM) ** 0.5), budget),
        (ThreatModel("l1", 75.0 * d / _REF_DIM), budget),
        (ThreatModel("l0_pixel", max(1, round(100 * pixels / _REF_PIXELS))),
         budget),
        (ThreatModel("patch", token_size), budget),
        (ThreatModel("frame", 2), budget),
    ]
    return tuple(threats)


@dataclass
class CellResult:
    """One (model, threat) cell."""

    robust_accuracy: float
    mean_best_loss: float
    success: np.ndarray  # (N,) bool, attack success per evaluated example
    outcome_path: str = ""


@dataclass
class RobustnessReport:
    model_names: tuple
    threat_kinds: tuple  # kinds actually swept, canonical order
    points: int
    seed: int
    clean: dict = field(default_factory=dict)    # name -> float
    correct: dict = field(default_factory=dict)  # name -> (N,) bool array
    cells: dict = field(default_factory=dict)    # (name, kind) -> CellResult
    worst: dict = field(default_factory=dict)    # name -> float
    errors: dict = field(default_factory=dict)   # name -> message

    def validate(self):
        """Check the report's internal accounting."""
        for name in self.model_names:
            if name in self.errors:
                continue
            clean = self.clean[name]
            if not 0.0 <= clean <= 100.0:
                raise ConfigurationError(f"clean accuracy out of range: {clean}")
            accs = []
            for kind in self.threat_kinds:
                cell = self.cells.get((name, kind))
                if cell is None:
                    continue
                if not 0.0 <= cell.robust_accuracy <= clean + 1e-9:
                    raise ConfigurationError(
                        f"robust accuracy {cell.robust_accuracy} exceeds "
                        f"clean {clean} for {name}/{kind}"
                    )
                accs.append(cell.robust_accuracy)
            if name in self.worst and accs:
                if self.worst[name] > min(accs) + 1e-9:
                    raise ConfigurationError(
                        f"worst case {self.worst[name]} exceeds the per-threat "
                        f"minimum {min(accs)} for {name}"
                    )
        return self


def robust_accuracy(success, correct):
    """100 x (clean-correct and unattacked) / N."""
    success = np.asarray(success, dtype=bool)
    correct = np.asarray(correct, dtype=bool)
    if success.shape != correct.shape:
        raise ConfigurationError(
            f"success/correct length mismatch: {success.shape} vs {correct.shape}"
        )
    n = success.shape[0]
    if n == 0:
        raise ConfigurationError("empty evaluation set")
    return 100.0 * float(np.sum(correct & ~success)) / n


def worst_case(successes, correct):
    """Robust accuracy against the per-example union of attack successes."""
    successes = list(successes)
    if not successes:
        raise ConfigurationError("worst case needs at least one attack")
    union = np.zeros_like(np.asarray(correct, dtype=bool))
    for s in successes:
        union |= np.asarray(s, dtype=bool)
    return robust_accuracy(union, correct)


def evaluation_subset(num_total, points, seed):
    """First `points` indices of a seeded shuffle."""
    if num_total < 1:
        raise ConfigurationError("empty test split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_total)
    return torch.from_numpy(order[:min(points, num_total)].copy())


def _margin_of(handle, x, labels, chunk=256):
    vals = []
    with torch.no_grad():
        for i in range(0, x.shape[0], chunk):
            logits = handle(x[i:i + chunk])
            vals.append(loss_value(logits, labels[i:i + chunk], _MARGIN))
    return torch.cat(vals)


def _pick_by_margin(handle, labels, outcomes):
    """Per-example best of several outcomes, compared by margin loss of
    their adversarial inputs (comparable across attack objectives)."""
    outcomes = [o for o in outcomes if o is not None]
    if len(outcomes) == 1:
        out = outcomes[0]
        margin = _margin_of(handle, out.x_adv, labels)
        return out.x_adv, margin, out.success.bool(), out.queries_used
    margins = [_margin_of(handle, o.x_adv, labels) for o in outcomes]
    stacked = torch.stack(margins)
    best = stacked.argmax(dim=0)
    x = torch.stack([o.x_adv for o in outcomes])
    n = labels.shape[0]
    pick = x[best, torch.arange(n)]
    margin = stacked[best, torch.arange(n)]
    success = torch.stack([o.success.bool() for o in outcomes]).any(dim=0)
    queries = torch.stack([o.queries_used for o in outcomes]).sum(dim=0)
    return pick, margin, success, queries


def _lp_cell(handle, x, y, threat, budget, seed, num_classes):
    config = APGDConfig(iterations=budget.iterations, restarts=budget.restarts,
                        seed=seed)
    runs = [apgd(handle, x, y, threat, config, loss=LossSpec("cross_entropy"))]
    if num_classes >= 4:
        runs.append(apgd(handle, x, y, threat, config,
                         loss=LossSpec("dlr")))
    return runs


def _l0_cell(handle, x, y, threat, budget, seed):
    k = threat.count
    runs = []
    first = None
    if budget.pgd0_iterations > 0:
        first = pgd0(handle, x, y, k, budget.pgd0_iterations)
        runs.append(first)
    survivors = (~first.success.bool() if first is not None
                 else torch.ones(x.shape[0], dtype=torch.bool))
    if survivors.any():
        sub = sparse_random_search(
            handle, x[survivors], y[survivors], k, budget.queries, seed,
            stop_on_success=True,
        )
        # re-embed the survivor run into a full-batch outcome
        full_x = x.clone()
        full_x[survivors] = sub.x_adv
        success = torch.zeros(x.shape[0], dtype=torch.bool)
        success[survivors] = sub.success.bool()
        best = torch.full((x.shape[0],), -float("inf"), dtype=sub.best_loss.dtype)
        best[survivors] = sub.best_loss
        queries = torch.zeros(x.shape[0], dtype=torch.long)
        queries[survivors] = sub.queries_used
        runs.append(AttackOutcome(
            x_adv=full_x, success=success, best_loss=best,
            queries_used=queries, threat=threat,
        ))
    return runs


def _patch_cell(handle, x, y, threat, budget, seed):
    hw = tuple(x.shape[-2:])
    runs = []
    for alignment in ("aligned", "non_aligned"):
        try:
            grid = PatchGrid(hw, threat.count, alignment)
        except ConfigurationError:
            continue  # geometry too small for this alignment
        runs.append(greedy_patch_attack(
            handle, x, y, grid,
            phase1_iters=budget.phase1_iters,
            keep_fraction=budget.keep_fraction,
            phase2_iters=budget.phase2_iters,
            seed=seed, success_only=True,
        ))
    if not runs:
        raise ConfigurationError(
            f"patch side {threat.count} fits no grid alignment on {hw}"
        )
    return runs


def _frame_cell(handle, x, y, threat, budget, seed):
    return [frame_attack(handle, x, y, width=threat.count,
                         iterations=budget.iterations,
                         restarts=budget.restarts, seed=seed)]


def _run_cell(handle, x, y, threat, budget, seed, num_classes):
    if threat.kind in ("linf", "l2", "l1"):
        runs = _lp_cell(handle, x, y, threat, budget, seed, num_classes)
    elif threat.kind == "l0_pixel":
        runs = _l0_cell(handle, x, y, threat, budget, seed)
    elif threat.kind == "patch":
        runs = _patch_cell(handle, x, y, threat, budget, seed)
    else:
        runs = _frame_cell(handle, x, y, threat, budget, seed)
    return _pick_by_margin(handle, y, runs)


def _cell_key(name, threat, budget, points, seed):
    blob = json.dumps(
        [name, threat.kind, threat.epsilon, budget.to_dict(), points, seed],
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _resolve_model(ref):
    if isinstance(ref, ModelHandle):
        return ref.eval()
    return load_checkpoint(ref)


def run_sweep(config, images, labels, out_dir=None, progress=None):
    """Evaluate every model under every threat on a fixed subset of
    (images, labels).

    With out_dir set, each finished (model, threat) cell is stored as an
    outcome archive named by a content hash of its inputs; rerunning the
    same sweep loads those instead of attacking again. A model whose
    checkpoint fails to load gets an error entry and the sweep continues.
    """
    idx = evaluation_subset(images.shape[0], config.points, config.seed)
    x_eval = images[idx].detach()
    y_eval = labels[idx].detach()
    n = x_eval.shape[0]
    kinds = [t.kind for t, _ in config.threats]
    ordered_kinds = tuple(k for k in REPORT_KIND_ORDER if k in kinds)
    report = RobustnessReport(
        model_names=tuple(name for name, _ in config.models),
        threat_kinds=ordered_kinds,
        points=n,
        seed=config.seed,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    by_kind = {t.kind: (t, b) for t, b in config.threats}

    for name, ref in config.models:
        try:
            handle = _resolve_model(ref)
        except (RobustlabError, FileNotFoundError) as exc:
            report.errors[name] = str(exc)
            continue
        pred = handle.predict(x_eval)
        correct = (pred == y_eval).numpy().astype(bool)
        report.correct[name] = correct
        report.clean[name] = 100.0 * float(correct.sum()) / n
        attack_idx = torch.from_numpy(np.flatnonzero(correct))
        num_classes = handle.config.num_classes

        for kind in ordered_kinds:
            threat, budget = by_kind[kind]
            if progress is not None:
                progress(name, kind)
            path = ""
            cached = None
            if out_dir is not None:
                key = _cell_key(name, threat, budget, n, config.seed)
                path = os.path.join(out_dir, f"cell_{name}_{kind}_{key}.npz")
                if os.path.exists(path):
                    cached = AttackOutcome.load(path)
            if cached is not None:
                success_all = cached.success.bool().numpy()
                margin_att = cached.best_loss[attack_idx]
            elif attack_idx.numel() == 0:
                success_all = np.zeros(n, dtype=bool)
                margin_att = torch.zeros(0)
                if out_dir is not None:
                    _store_cell(path, x_eval, threat,
                                torch.zeros(n, dtype=torch.bool),
                                torch.full((n,), -float("inf")),
                                torch.zeros(n, dtype=torch.long))
            else:
                x_att = x_eval[attack_idx]
                y_att = y_eval[attack_idx]
                x_adv, margin_att, success_att, queries_att = _run_cell(
                    handle, x_att, y_att, threat, budget, config.seed,
                    num_classes,
                )
                success_all = np.zeros(n, dtype=bool)
                success_all[attack_idx.numpy()] = success_att.numpy()
                if out_dir is not None:
                    full_x = x_eval.clone()
                    full_x[attack_idx] = x_adv
                    full_succ = torch.from_numpy(success_all)
                    full_loss = torch.full((n,), -float("inf"),
                                           dtype=margin_att.dtype)
                    full_loss[attack_idx] = margin_att
                    full_q = torch.zeros(n, dtype=torch.long)
                    full_q[attack_idx] = queries_att
                    _store_cell(path, full_x, threat, full_succ, full_loss,
                                full_q)
            mean_loss = (float(margin_att.mean())
                         if margin_att.numel() else float("nan"))
            report.cells[(name, kind)] = CellResult(
                robust_accuracy=robust_accuracy(success_all, correct),
                mean_best_loss=mean_loss,
                success=success_all,
                outcome_path=path,
            )

        subset = (config.worst_case_kinds if config.worst_case_kinds
                  else ordered_kinds)
        if subset:
            report.worst[name] = worst_case(
                [report.cells[(name, k)].success for k in subset], correct,
            )
    return report.validate()


def _store_cell(path, x_adv, threat, success, best_loss, queries):
    AttackOutcome(
        x_adv=x_adv, success=success, best_loss=best_loss,
        queries_used=queries, threat=threat,
    ).save(path)


_KIND_LABELS = {
    "linf": "linf", "l2": "l2", "l1": "l1",
    "l0_pixel": "l0", "patch": "patch", "frame": "frame",
}


def format_report(report, fmt="table"):
    """Render a report; deterministic column order clean, linf, l2, l1,
    l0, patch, frame (plus worst-case when present), one decimal place."""
    if fmt not in ("table", "csv", "records"):
        raise ConfigurationError(
            f"format must be table, csv, or records, got {fmt!r}"
        )
    kinds = report.threat_kinds
    have_worst = bool(report.worst)
    labels = (["model", "clean"] + [_KIND_LABELS[k] for k in kinds]
              + (["worst-case"] if have_worst else []))

    def cell_values(name):
        if name in report.errors:
            return None
        vals = [report.clean[name]]
        for k in kinds:
            cell = report.cells.get((name, k))
            vals.append(None if cell is None else cell.robust_accuracy)
        if have_worst:
            vals.append(report.worst.get(name))
        return vals

    if fmt == "records":
        payload = {
            "points": report.points,
            "seed": report.seed,
            "threats": list(kinds),
            "models": {},
        }
        for name in report.model_names:
            if name in report.errors:
                payload["models"][name] = {"error": report.errors[name]}
                continue
            entry = {
                "clean_accuracy": report.clean[name],
                "worst_case": report.worst.get(name),
                "cells": {},
            }
            for k in kinds:
                cell = report.cells.get((name, k))
                if cell is None:
                    continue
                entry["cells"][k] = {
                    "robust_accuracy": cell.robust_accuracy,
                    "mean_best_loss": cell.mean_best_loss,
                    "success": [bool(s) for s in cell.success],
                    "outcome": cell.outcome_path,
                }
            payload["models"][name] = entry
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    sep = "," if fmt == "csv" else " | "
    lines = []
    width = max([len("model")] + [len(n) for n in report.model_names])
    if fmt == "csv":
        lines.append(sep.join(labels))
    else:
        lines.append(sep.join([labels[0].ljust(width)] + labels[1:]))
    for name in report.model_names:
        vals = cell_values(name)
        if vals is None:
            msg = f"error: {report.errors[name]}"
            first = name if fmt == "csv" else name.ljust(width)
            lines.append(sep.join([first, msg]))
            continue
        cells = ["-" if v is None else f"{v:.1f}" for v in vals]
        first = name if fmt == "csv" else name.ljust(width)
        lines.append(sep.join([first] + cells))
    return "\n".join(lines) + "\n"
