"""Command-line surface.

Commands: train, attack, sweep, visualize, ladder, gen-data. Configuration
comes from a YAML file (--config) overlaid on an optional named preset
(--preset); explicit flags win over both. Every command writes its
artifacts into a fresh run directory with a manifest of content hashes.

Exit codes: 0 success, 1 validation error, 2 runtime failure,
3 catastrophic-overfitting abort.
"""

import argparse
import json
import os
import sys

import torch
import yaml

from .attacks.apgd import APGDConfig, apgd
from .attacks.threat import THREAT_KINDS, ThreatModel
from .data import (DatasetSpec, generate_synthetic_dataset,
                   load_array_dataset, load_dataset, save_array_dataset,
                   split_dataset)
from .errors import (CatastrophicOverfitting, ConfigurationError,
                     RobustlabError)
from .interpret import (cls_attention_maps, perturbation_heatmap,
                        render_head_maps, xca_feature_norm_maps)
from .manifest import RunManifest, new_run_dir
from .models import ModelConfig, build_model, list_ladder, load_checkpoint
from .patches import PatchGrid, patch_loss_map, render_loss_map_pair
from .render import (load_image, map_grid_text, save_rgb_png)
from .sweep import (AttackBudget, SweepConfig, desk_threats, format_report,
                    run_sweep)
from .training import (DEFAULT_EVAL_EPSILON, PRESETS, TrainConfig,
                       adversarial_train, select_checkpoint)

_BUDGET_KEYS = ("iterations", "restarts", "queries", "pgd0_iterations",
                "phase1_iters", "phase2_iters", "keep_fraction")


def _load_config(path):
    if not path:
        return {}
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigurationError(
            f"config file {path} must hold a mapping at the top level"
        )
    return cfg


def _dataset_spec(cfg, seed=None):
    section = dict(cfg.get("dataset", {}))
    section.pop("file", None)
    if seed is not None:
        section["seed"] = seed
    try:
        return DatasetSpec.from_dict(section)
    except TypeError as exc:
        raise ConfigurationError(f"bad dataset field: {exc}") from exc


def _load_splits(cfg, seed=None):
    """Dataset resolution: an archived file when dataset.file is set,
    otherwise built from the dataset spec. Returns (splits, spec)."""
    section = cfg.get("dataset", {})
    if "file" in section:
        dataset, spec = load_array_dataset(section["file"])
        return split_dataset(dataset, spec.splits, spec.seed), spec
    spec = _dataset_spec(cfg, seed)
    return load_dataset(spec), spec


def _model_config(cfg, spec):
    section = dict(cfg.get("model", {}))
    section.setdefault("input_size", (3,) + tuple(spec.image_size))
    section.setdefault("num_classes", spec.num_classes)
    section.setdefault("embed_dim", 32)
    try:
        return ModelConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigurationError(f"bad model field: {exc}") from exc


def _train_config(args, cfg):
    fields = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {args.preset!r}, available: {sorted(PRESETS)}"
            )
        fields.update(PRESETS[args.preset])
    fields.update(cfg.get("train", {}))
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        return TrainConfig(**fields)
    except TypeError as exc:
        raise ConfigurationError(f"bad train field: {exc}") from exc


def _resolved(args, cfg, extra=None):
    out = {"config_file": dict(cfg)}
    if args.preset:
        out["preset"] = args.preset
    if extra:
        out.update(extra)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = _load_config(args.config)
    splits, dspec = _load_splits(cfg)
    tcfg = _train_config(args, cfg)
    mcfg = _model_config(cfg, dspec)
    resolved = _resolved(args, cfg, {"train": tcfg.to_dict(),
                                     "model": mcfg.to_dict(),
                                     "dataset": dspec.to_dict()})
    run = new_run_dir(args.out, "train", resolved)
    manifest = RunManifest("train", resolved, tcfg.seed, run)
    ckpt_dir = os.path.join(run, "checkpoints")
    os.makedirs(ckpt_dir)

    checkpoints, history = adversarial_train(
        mcfg, splits.train, tcfg, out_dir=ckpt_dir)
    for ckpt in checkpoints:
        manifest.add(ckpt.path)
    manifest.add(history.save(os.path.join(run, "history.jsonl")))

    eps = tcfg.at_epsilon if tcfg.at_inner_steps > 0 else DEFAULT_EVAL_EPSILON
    holdout = splits.val if len(splits.val) else splits.test
    best = select_checkpoint(checkpoints, holdout.images, holdout.labels, eps)
    selected = {"epoch": best.epoch,
                "checkpoint": os.path.relpath(best.path, run)}
    sel_path = os.path.join(run, "selected.json")
    with open(sel_path, "w") as fh:
        json.dump(selected, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add(sel_path)
    manifest.save()

    last = history.records[-1]
    print(f"run dir: {run}")
    print(f"selected epoch {best.epoch}: {best.path}")
    print(f"final holdout: clean {last.clean_accuracy:.1f}  "
          f"fgsm {last.fgsm_accuracy:.1f}  pgd2 {last.pgd2_accuracy:.1f}")
    return 0


def _threat_from(section):
    if "kind" not in section:
        raise ConfigurationError("threat needs a 'kind' field")
    kind = section["kind"]
    if kind not in THREAT_KINDS:
        raise ConfigurationError(
            f"unknown threat kind {kind!r}, expected one of {THREAT_KINDS}"
        )
    if "epsilon" not in section:
        raise ConfigurationError(
            f"threat {kind!r} needs an 'epsilon' budget (lp radius, pixel "
            f"count, patch side, or frame width)"
        )
    threat = ThreatModel(kind, section["epsilon"])
    budget_fields = {k: section[k] for k in _BUDGET_KEYS if k in section}
    return threat, AttackBudget(**budget_fields)


def cmd_attack(args):
    cfg = _load_config(args.config)
    section = dict(cfg.get("attack", {}))
    if args.checkpoint:
        section["checkpoint"] = args.checkpoint
    if args.kind:
        section["kind"] = args.kind
    if args.epsilon is not None:
        section["epsilon"] = args.epsilon
    if "checkpoint" not in section:
        raise ConfigurationError("attack needs a checkpoint (config or flag)")
    threat, budget = _threat_from(section)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    points = args.points if args.points is not None else cfg.get("points", 100)

    splits, dspec = _load_splits(cfg)
    sweep_cfg = SweepConfig(
        models=(("model", section["checkpoint"]),),
        threats=((threat, budget),),
        points=points, seed=seed,
    )
    resolved = _resolved(args, cfg, {
        "attack": {"checkpoint": section["checkpoint"],
                   "threat": {"kind": threat.kind, "epsilon": threat.epsilon},
                   "budget": budget.to_dict()},
        "points": points, "seed": seed, "dataset": dspec.to_dict(),
    })
    run = new_run_dir(args.out, "attack", resolved)
    manifest = RunManifest("attack", resolved, seed, run)
    cells = os.path.join(args.out, "cells")

    report = run_sweep(sweep_cfg, splits.test.images, splits.test.labels,
                       out_dir=cells)
    if report.errors:
        raise RobustlabError(
            f"attack failed: {report.errors['model']}"
        )
    cell = report.cells[("model", threat.kind)]
    summary = {
        "threat": {"kind": threat.kind, "epsilon": threat.epsilon},
        "points": report.points,
        "seed": seed,
        "clean_accuracy": report.clean["model"],
        "robust_accuracy": cell.robust_accuracy,
        "mean_best_loss": cell.mean_best_loss,
    }
    sum_path = os.path.join(run, "summary.json")
    with open(sum_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add(sum_path)
    rec_path = os.path.join(run, "records.json")
    with open(rec_path, "w") as fh:
        fh.write(format_report(report, "records"))
    manifest.add(rec_path)
    manifest.save()

    print(f"run dir: {run}")
    print(format_report(report, "table"), end="")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args.config)
    section = dict(cfg.get("sweep", {}))
    models = []
    for entry in section.get("models", []):
        if "name" not in entry or "checkpoint" not in entry:
            raise ConfigurationError(
                "each sweep model needs 'name' and 'checkpoint' fields"
            )
        models.append((entry["name"], entry["checkpoint"]))
    if not models:
        raise ConfigurationError("sweep needs at least one model entry")
    splits, dspec = _load_splits(cfg)
    if "threats" in section:
        threats = tuple(_threat_from(t) for t in section["threats"])
    else:
        threats = desk_threats(
            input_size=(3,) + tuple(dspec.image_size),
            token_size=section.get("token_size", 8),
        )
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    points = (args.points if args.points is not None
              else section.get("points", 200))
    sweep_cfg = SweepConfig(
        models=tuple(models), threats=threats, points=points, seed=seed,
        worst_case_kinds=(tuple(section["worst_case"])
                          if "worst_case" in section else None),
    )
    resolved = _resolved(args, cfg, {
        "models": [m[0] for m in models],
        "threats": [{"kind": t.kind, "epsilon": t.epsilon} for t, _ in threats],
        "points": points, "seed": seed, "dataset": dspec.to_dict(),
    })
    run = new_run_dir(args.out, "sweep", resolved)
    manifest = RunManifest("sweep", resolved, seed, run)
    cells = os.path.join(args.out, "cells")

    def progress(name, kind):
        print(f"  attacking {name} under {kind} ...", flush=True)

    report = run_sweep(sweep_cfg, splits.test.images, splits.test.labels,
                       out_dir=cells, progress=progress)
    for fmt, fname in (("table", "report.txt"), ("csv", "report.csv"),
                       ("records", "report.json")):
        path = os.path.join(run, fname)
        with open(path, "w") as fh:
            fh.write(format_report(report, fmt))
        manifest.add(path)
    manifest.save()

    print(f"run dir: {run}")
    print(format_report(report, "table"), end="")
    for name, msg in report.errors.items():
        print(f"note: {name} skipped: {msg}")
    return 0


def _visualize_image(args, cfg, handle):
    section = cfg.get("visualize", {})
    image_path = args.image or section.get("image")
    resolution = args.resolution or section.get("resolution")
    c, h, w = handle.config.input_size
    if resolution:
        h = w = int(resolution)
    if image_path:
        return load_image(image_path, size=(h, w)), None
    # no image given: fall back to a test sample of the configured dataset
    splits, _ = _load_splits(cfg)
    if len(splits.test) == 0:
        raise ConfigurationError("empty test split, pass an image instead")
    img = splits.test.images[0]
    if (h, w) != tuple(img.shape[-2:]):
        raise ConfigurationError(
            f"dataset sample is {tuple(img.shape[-2:])}, wanted {(h, w)}; "
            f"pass an image file for other resolutions"
        )
    return img, int(splits.test.labels[0])


def cmd_visualize(args):
    cfg = _load_config(args.config)
    section = cfg.get("visualize", {})
    ckpt = args.checkpoint or section.get("checkpoint")
    kind = args.kind or section.get("kind")
    if not ckpt:
        raise ConfigurationError("visualize needs a checkpoint (config or flag)")
    kinds = ("attention", "keynorm", "querynorm", "lossmap", "perturbation")
    if kind not in kinds:
        raise ConfigurationError(
            f"visualize kind must be one of {kinds}, got {kind!r}"
        )
    handle = load_checkpoint(ckpt)
    image, label = _visualize_image(args, cfg, handle)
    resolved = _resolved(args, cfg, {"checkpoint": ckpt, "kind": kind})
    run = new_run_dir(args.out, "visualize", resolved)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    manifest = RunManifest("visualize", resolved, seed, run)

    if kind in ("attention", "keynorm", "querynorm"):
        if kind == "attention":
            maps = cls_attention_maps(handle, image)
        else:
            which = "keys" if kind == "keynorm" else "queries"
            maps = xca_feature_norm_maps(handle, image, which)
        txt = os.path.join(run, f"{kind}_maps.txt")
        with open(txt, "w") as fh:
            fh.write(maps.text())
        manifest.add(txt)
        png = os.path.join(run, f"{kind}_maps.png")
        render_head_maps(maps, image=image, out_path=png)
        manifest.add(png)
    elif kind == "lossmap":
        if label is None:
            label = int(handle.predict(image.unsqueeze(0))[0])
        iterations = int(section.get("iterations", 100))
        token = int(section.get("token_size", handle.config.token_size))
        pair = []
        for alignment in ("aligned", "non_aligned"):
            grid = PatchGrid(tuple(image.shape[-2:]), token, alignment)
            lm = patch_loss_map(handle, image, label, grid,
                                iterations=iterations, seed=seed)
            txt = os.path.join(run, f"lossmap_{alignment}.txt")
            with open(txt, "w") as fh:
                fh.write(map_grid_text(lm.values) + "\n")
            manifest.add(txt)
            pair.append(lm)
        prefix = os.path.join(run, "lossmap")
        render_loss_map_pair(pair[0], pair[1], tuple(image.shape[-2:]),
                             out_prefix=prefix)
        manifest.add(prefix + "_aligned.png")
        manifest.add(prefix + "_shifted.png")
    else:  # perturbation
        if label is None:
            label = int(handle.predict(image.unsqueeze(0))[0])
        epsilon = float(section.get("epsilon", DEFAULT_EVAL_EPSILON))
        iterations = int(section.get("iterations", 100))
        threat = ThreatModel("linf", epsilon)
        out = apgd(handle, image.unsqueeze(0), torch.tensor([label]), threat,
                   APGDConfig(iterations=iterations, seed=seed))
        heat, rgb = perturbation_heatmap(image, out.x_adv[0])
        txt = os.path.join(run, "perturbation.txt")
        with open(txt, "w") as fh:
            fh.write(map_grid_text(heat) + "\n")
        manifest.add(txt)
        manifest.add(save_rgb_png(rgb, os.path.join(run, "perturbation.png")))
    manifest.save()
    print(f"run dir: {run}")
    return 0


def cmd_ladder(args):
    cfg = _load_config(args.config)
    section = cfg.get("ladder", {})
    dspec = _dataset_spec(cfg) if "dataset" in cfg or args.preset else None
    num_classes = (dspec.num_classes if dspec is not None
                   else int(section.get("num_classes", 10)))
    input_size = ((3,) + tuple(dspec.image_size) if dspec is not None
                  else tuple(section.get("input_size", (3, 32, 32))))
    rows = list_ladder(
        input_size=input_size,
        embed_dim=int(section.get("embed_dim", 32)),
        num_classes=num_classes,
        token_size=int(section.get("token_size", 8)),
    )
    resolved = _resolved(args, cfg, {"rows": [name for name, _ in rows]})
    run = new_run_dir(args.out, "ladder", resolved)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    manifest = RunManifest("ladder", resolved, seed, run)

    width = max(len(name) for name, _ in rows)
    lines = []
    entries = []
    for i, (name, mcfg) in enumerate(rows):
        params = build_model(mcfg, seed=0).parameter_count
        lines.append(f"{i:2d}  {name.ljust(width)}  {params / 1e6:6.2f}M")
        entries.append({"index": i, "name": name, "params": params,
                        "config": mcfg.to_dict()})
    listing = "\n".join(lines) + "\n"
    print(listing, end="")
    path = os.path.join(run, "ladder.json")
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add(path)

    if args.preset:
        splits, _ = _load_splits(cfg)
        results = []
        for i, (name, mcfg) in enumerate(rows):
            print(f"training row {i}: {name}")
            tcfg = _train_config(args, cfg)
            row_dir = os.path.join(run, f"row_{i:02d}")
            os.makedirs(row_dir)
            checkpoints, history = adversarial_train(
                mcfg, splits.train, tcfg, out_dir=row_dir)
            for ckpt in checkpoints:
                manifest.add(ckpt.path)
            manifest.add(history.save(os.path.join(row_dir, "history.jsonl")))
            last = history.records[-1]
            results.append({
                "index": i, "name": name,
                "clean_accuracy": last.clean_accuracy,
                "fgsm_accuracy": last.fgsm_accuracy,
                "pgd2_accuracy": last.pgd2_accuracy,
            })
            print(f"  clean {last.clean_accuracy:.1f}  "
                  f"fgsm {last.fgsm_accuracy:.1f}")
        rpath = os.path.join(run, "results.json")
        with open(rpath, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.add(rpath)
    manifest.save()
    print(f"run dir: {run}")
    return 0


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else None
    spec = _dataset_spec(cfg, seed)
    if spec.source != "synthetic_shapes":
        raise ConfigurationError("gen-data only generates synthetic_shapes")
    dataset = generate_synthetic_dataset(spec)
    resolved = _resolved(args, cfg, {"dataset": spec.to_dict()})
    run = new_run_dir(args.out, "gen-data", resolved)
    manifest = RunManifest("gen-data", resolved, spec.seed, run)
    path = os.path.join(run, "dataset.npz")
    save_array_dataset(dataset, spec, path)
    manifest.add(path)
    manifest.save()
    counts = torch.bincount(dataset.labels, minlength=spec.num_classes)
    print(f"run dir: {run}")
    print(f"{len(dataset)} samples, class counts {counts.tolist()}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; 1 is the validation code here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML config file")
    shared.add_argument("--seed", type=int, help="override the seed")
    shared.add_argument("--out", default="runs",
                        help="base directory for run outputs")
    shared.add_argument("--points", type=int,
                        help="evaluation set size (attack/sweep)")
    shared.add_argument("--preset", help="named training recipe")

    parser = _Parser(prog="robustlab",
                     description="attacks, architecture ladder, adversarial "
                                 "training, and robustness sweeps")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    sub.add_parser("train", parents=[shared],
                   help="train a model (plain or adversarial)")

    p_attack = sub.add_parser("attack", parents=[shared],
                              help="run one attack against one checkpoint")
    p_attack.add_argument("--checkpoint", help="model checkpoint to attack")
    p_attack.add_argument("--kind", help="threat kind")
    p_attack.add_argument("--epsilon", type=float, help="threat budget")

    sub.add_parser("sweep", parents=[shared],
                   help="evaluate models across threat models")

    p_vis = sub.add_parser("visualize", parents=[shared],
                           help="attention / norm / loss-map / perturbation "
                                "figures")
    p_vis.add_argument("--checkpoint", help="model checkpoint")
    p_vis.add_argument("--image", help="input image file")
    p_vis.add_argument("--kind",
                       help="attention | keynorm | querynorm | lossmap | "
                            "perturbation")
    p_vis.add_argument("--resolution", type=int,
                       help="resize the input to this square size")

    sub.add_parser("ladder", parents=[shared],
                   help="enumerate the architecture ladder; --preset trains "
                        "each row")

    sub.add_parser("gen-data", parents=[shared],
                   help="generate a synthetic shape dataset")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "visualize": cmd_visualize,
    "ladder": cmd_ladder,
    "gen-data": cmd_gen_data,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CatastrophicOverfitting as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    except (RobustlabError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
