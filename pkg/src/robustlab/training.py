"""Plain and adversarial training.

Two recipes are shipped as presets: a short cyclic-schedule run for ladder
comparisons and a longer cosine-with-warmup run for full adversarial
training. Single-step adversarial training is watched for catastrophic
overfitting (multi-step robustness collapsing while single-step robustness
holds) and aborts with a diagnostic when it hits.
"""

import copy
import json
import math
from dataclasses import dataclass, field, replace

import torch

from .attacks.fgsm import fgsm
from .data import augment_batch, split_dataset
from .errors import (CatastrophicOverfitting, ConfigurationError,
                     TrainingDiverged)
from .models import build_model, load_checkpoint, save_checkpoint

SCHEDULES = ("cyclic", "cosine_with_warmup")

HOLDOUT_FRACTION = 0.1

DEFAULT_EVAL_EPSILON = 4.0 / 255.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    schedule: str = "cyclic"
    peak_lr: float = 0.004
    weight_decay: float = 0.05
    warmup_epochs: int = 0
    cooldown_epochs: int = 0
    at_inner_steps: int = 0  # 0 = plain training
    at_epsilon: float = 0.0
    at_random_init: bool = False
    init_from: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(
                f"batch_size must be >= 1, got {self.batch_size}"
            )
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(
                f"schedule must be one of {SCHEDULES}, got {self.schedule!r}"
            )
        if self.peak_lr <= 0:
            raise ConfigurationError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(
                f"weight_decay must be >= 0, got {self.weight_decay}"
            )
        if self.warmup_epochs < 0 or self.cooldown_epochs < 0:
            raise ConfigurationError("warmup/cooldown epochs must be >= 0")
        if self.warmup_epochs + self.cooldown_epochs > self.epochs:
            raise ConfigurationError(
                f"warmup ({self.warmup_epochs}) + cooldown "
                f"({self.cooldown_epochs}) exceed epochs ({self.epochs})"
            )
        if self.at_inner_steps < 0:
            raise ConfigurationError(
                f"at_inner_steps must be >= 0, got {self.at_inner_steps}"
            )
        if self.at_inner_steps > 0 and self.at_epsilon <= 0:
            raise ConfigurationError(
                f"at_epsilon must be > 0 when at_inner_steps > 0, "
                f"got {self.at_epsilon}"
            )

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "schedule": self.schedule,
            "peak_lr": self.peak_lr,
            "weight_decay": self.weight_decay,
            "warmup_epochs": self.warmup_epochs,
            "cooldown_epochs": self.cooldown_epochs,
            "at_inner_steps": self.at_inner_steps,
            "at_epsilon": self.at_epsilon,
            "at_random_init": self.at_random_init,
            "init_from": self.init_from,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# short cyclic run for architecture comparisons; longer cosine run with
# warmup for the full adversarial recipe
PRESETS = {
    "ladder-short": {
        "epochs": 10, "batch_size": 128, "schedule": "cyclic",
        "peak_lr": 0.004, "weight_decay": 0.05,
        "warmup_epochs": 0, "cooldown_epochs": 0,
        "at_inner_steps": 1, "at_epsilon": 4.0 / 255.0,
        "at_random_init": False,
    },
    "plain-short": {
        "epochs": 10, "batch_size": 128, "schedule": "cyclic",
        "peak_lr": 0.004, "weight_decay": 0.05,
        "warmup_epochs": 0, "cooldown_epochs": 0,
        "at_inner_steps": 0, "at_epsilon": 0.0,
        "at_random_init": False,
    },
    "full-at": {
        "epochs": 20, "batch_size": 128, "schedule": "cosine_with_warmup",
        "peak_lr": 0.001, "weight_decay": 0.05,
        "warmup_epochs": 2, "cooldown_epochs": 1,
        "at_inner_steps": 1, "at_epsilon": 4.0 / 255.0,
        "at_random_init": False,
    },
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}, available: {sorted(PRESETS)}"
        )
    fields = dict(PRESETS[name])
    fields.update(overrides)
    return TrainConfig(**fields)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    clean_accuracy: float
    fgsm_accuracy: float
    pgd2_accuracy: float

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "clean_accuracy": self.clean_accuracy,
            "fgsm_accuracy": self.fgsm_accuracy,
            "pgd2_accuracy": self.pgd2_accuracy,
        }


@dataclass
class TrainHistory:
    """One record per completed epoch."""

    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def save(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict()) + "\n")
        return path

    @classmethod
    def load(cls, path):
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(EpochRecord(**json.loads(line)))
        return cls(records)


@dataclass
class EpochCheckpoint:
    """A per-epoch snapshot that can be rebuilt into a live model."""

    epoch: int
    config: object  # ModelConfig
    state: dict
    path: str = ""

    def build(self):
        handle = build_model(self.config, seed=0)
        handle.module.load_state_dict(self.state, strict=True)
        return handle.eval()


def learning_rate(step, total_steps, config, steps_per_epoch):
    """Per-step learning rate.

    cyclic: one triangle, 0 -> peak -> 0, hitting peak_lr at exactly one
    step (the apex).

    cosine_with_warmup: linear warmup to the peak, cosine decay to
    peak/100, then a flat cooldown at the floor; non-increasing once warmup
    ends.
    """
    peak = config.peak_lr
    if config.schedule == "cyclic":
        pos = step + 1  # 1..total_steps
        up = config.warmup_epochs * steps_per_epoch
        if up <= 0 or up > total_steps:
            up = max(1, (total_steps + 1) // 2)
        if pos <= up:
            return peak * pos / up
        return peak * (total_steps - pos) / (total_steps - up)
    warmup = config.warmup_epochs * steps_per_epoch
    cooldown = config.cooldown_epochs * steps_per_epoch
    floor = peak / 100.0
    if step < warmup:
        return peak * (step + 1) / warmup
    if step >= total_steps - cooldown:
        return floor
    span = max(1, total_steps - cooldown - warmup)
    t = (step - warmup) / span
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t))


def inner_maximization(model, batch, labels, steps, epsilon, random_init,
                       seed=0):
    """Adversarial batch for the training step: multi-step sign-gradient
    ascent inside the linf ball at epsilon. The model is put in eval mode
    for the attack and restored afterwards."""
    if steps < 1:
        raise ConfigurationError(
            f"inner maximization needs steps >= 1, got {steps}"
        )
    was_training = model.module.training
    model.eval()
    try:
        outcome = fgsm(model, batch, labels, epsilon,
                       random_init=random_init, steps=steps, seed=seed)
    finally:
        if was_training:
            model.train()
    return outcome.x_adv


def _accuracy(handle, images, labels, batch_size=256):
    hits = 0
    for i in range(0, len(labels), batch_size):
        pred = handle.predict(images[i:i + batch_size])
        hits += int((pred == labels[i:i + batch_size]).sum())
    return 100.0 * hits / max(1, len(labels))


def _attacked_accuracy(handle, images, labels, epsilon, steps, seed,
                       batch_size=256):
    hits = 0
    for i in range(0, len(labels), batch_size):
        xb, yb = images[i:i + batch_size], labels[i:i + batch_size]
        out = fgsm(handle, xb, yb, epsilon, steps=steps, seed=seed)
        pred = handle.predict(out.x_adv)
        hits += int((pred == yb).sum())
    return 100.0 * hits / max(1, len(labels))


def holdout_metrics(handle, images, labels, epsilon, seed=0):
    """Clean, single-step, and two-step robust accuracy on a holdout."""
    handle.eval()
    return (
        _accuracy(handle, images, labels),
        _attacked_accuracy(handle, images, labels, epsilon, steps=1, seed=seed),
        _attacked_accuracy(handle, images, labels, epsilon, steps=2, seed=seed),
    )


def detect_catastrophic_overfitting(history, window=3):
    """First epoch where two-step robustness collapsed under stable
    single-step robustness.

    Looks back up to `window` epochs: triggers at epoch e when the two-step
    accuracy falls more than 50% (relative) below its recent maximum, that
    maximum was at least 10 points (so noise around zero cannot trigger),
    and the single-step accuracy stayed within 10 points of its own recent
    maximum. Returns (triggered, epoch or None).
    """
    fgsm_accs = [r.fgsm_accuracy for r in history.records]
    pgd_accs = [r.pgd2_accuracy for r in history.records]
    for e in range(1, len(pgd_accs)):
        lo = max(0, e - window)
        pgd_max = max(pgd_accs[lo:e])
        fgsm_max = max(fgsm_accs[lo:e])
        if (pgd_max >= 10.0
                and pgd_accs[e] < 0.5 * pgd_max
                and fgsm_accs[e] >= fgsm_max - 10.0):
            return True, history.records[e].epoch
    return False, None


def select_checkpoint(checkpoints, images, labels, epsilon):
    """Checkpoint with the best single-step robust accuracy on the holdout;
    ties go to the later epoch."""
    if not checkpoints:
        raise ConfigurationError("no checkpoints to select from")
    if len(labels) == 0:
        raise ConfigurationError("empty holdout set")
    best, best_acc = None, -1.0
    for ckpt in checkpoints:
        handle = ckpt.build()
        acc = _attacked_accuracy(handle, images, labels, epsilon, steps=1,
                                 seed=0)
        if acc >= best_acc:
            best, best_acc = ckpt, acc
    return best


def _shuffled_batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def adversarial_train(model_config, dataset, config, out_dir=None,
                      eval_epsilon=None, co_window=3):
    """Train a model, adversarially when at_inner_steps > 0.

    Each step draws a shuffled augmented batch, replaces it by the inner
    maximization result when adversarial training is on, and applies one
    decoupled-weight-decay update at the scheduled learning rate. A tenth
    of the dataset is held out for the per-epoch metrics; checkpoints are
    snapshotted every epoch (and written under out_dir when given).

    Returns (list of EpochCheckpoint, TrainHistory). Raises
    TrainingDiverged on a non-finite loss and CatastrophicOverfitting when
    single-step adversarial training collapses.
    """
    splits = split_dataset(dataset, (1.0 - HOLDOUT_FRACTION, 0.0,
                                     HOLDOUT_FRACTION), config.seed)
    train_set, holdout = splits.train, splits.test
    if len(train_set) == 0:
        raise ConfigurationError("dataset too small to train on")
    if eval_epsilon is None:
        eval_epsilon = (config.at_epsilon if config.at_inner_steps > 0
                        else DEFAULT_EVAL_EPSILON)

    if config.init_from:
        handle = load_checkpoint(config.init_from,
                                 expected_config=model_config)
    else:
        handle = build_model(model_config, seed=config.seed)
    optimizer = torch.optim.AdamW(handle.module.parameters(),
                                  lr=config.peak_lr,
                                  weight_decay=config.weight_decay)
    generator = torch.Generator().manual_seed(config.seed)

    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    history = TrainHistory()
    checkpoints = []
    step = 0
    for epoch in range(config.epochs):
        handle.train()
        epoch_loss, epoch_batches = 0.0, 0
        for idx in _shuffled_batches(n, config.batch_size, generator):
            batch = augment_batch(train_set.images[idx], generator)
            labels = train_set.labels[idx]
            if config.at_inner_steps > 0:
                batch = inner_maximization(
                    handle, batch, labels, config.at_inner_steps,
                    config.at_epsilon, config.at_random_init,
                    seed=config.seed + step,
                )
            lr = learning_rate(step, total_steps, config, steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits = handle(batch)
            loss = torch.nn.functional.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, step, float(loss.detach()))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            epoch_batches += 1
            step += 1

        clean_acc, fgsm_acc, pgd2_acc = holdout_metrics(
            handle, holdout.images, holdout.labels, eval_epsilon,
        )
        history.append(EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / max(1, epoch_batches),
            clean_accuracy=clean_acc,
            fgsm_accuracy=fgsm_acc,
            pgd2_accuracy=pgd2_acc,
        ))
        ckpt = EpochCheckpoint(
            epoch=epoch,
            config=model_config,
            state=copy.deepcopy(handle.module.state_dict()),
        )
        if out_dir is not None:
            path = f"{out_dir}/epoch_{epoch:03d}.npz"
            save_checkpoint(handle, path)
            ckpt = replace(ckpt, path=path)
        checkpoints.append(ckpt)

        if config.at_inner_steps > 0:
            hit, at_epoch = detect_catastrophic_overfitting(history, co_window)
            if hit:
                rec = history.records[-1]
                lo = max(0, len(history.records) - 1 - co_window)
                pgd_max = max(r.pgd2_accuracy
                              for r in history.records[lo:-1])
                raise CatastrophicOverfitting(
                    at_epoch, rec.fgsm_accuracy, rec.pgd2_accuracy, pgd_max)

    handle.eval()
    return checkpoints, history
