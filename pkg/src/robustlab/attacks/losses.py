"""Per-example attack objectives.

All losses follow the convention "larger = more adversarial", so attack loops
maximize them. Every function returns one value per example, never a reduction.
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..errors import ConfigurationError

LOSS_NAMES = ("cross_entropy", "margin", "dlr")


@dataclass(frozen=True)
class LossSpec:
    """Named attack objective.

    name: one of "cross_entropy", "margin", "dlr".
    """

    name: str = "margin"

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ConfigurationError(
                f"unknown loss {self.name!r}, expected one of {LOSS_NAMES}"
            )


def _other_max(logits, labels):
    # max over wrong-class logits
    masked = logits.clone()
    masked.scatter_(1, labels.view(-1, 1), float("-inf"))
    return masked.max(dim=1).values


def margin_loss(logits, labels):
    """max_{i != y} z_i - z_y. Nonnegative iff the model misclassifies."""
    true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return _other_max(logits, labels) - true


def dlr_loss(logits, labels):
    """Logit-difference ratio: -(z_y - max_{i!=y} z_i) / (z_(1) - z_(3)).

    z_(k) is the k-th largest logit. Needs at least 4 classes so the
    denominator is not structurally tied to the numerator. A zero denominator
    (degenerate logits) yields loss 0 for that example, with a warning.
    """
    k = logits.shape[1]
    if k < 4:
        raise ConfigurationError(
            f"dlr loss needs at least 4 classes, got {k}"
        )
    true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    sorted_logits = logits.sort(dim=1, descending=True).values
    num = true - _other_max(logits, labels)
    den = sorted_logits[:, 0] - sorted_logits[:, 2]
    degenerate = den == 0
    if bool(degenerate.any()):
        warnings.warn("dlr loss: zero denominator, degenerate logits; loss set to 0")
    safe = torch.where(degenerate, torch.ones_like(den), den)
    out = -num / safe
    return torch.where(degenerate, torch.zeros_like(out), out)


def loss_value(logits, labels, spec=LossSpec("margin")):
    """Per-example value of the objective named by ``spec`` (shape (N,))."""
    if logits.ndim != 2:
        raise ConfigurationError(f"logits must be (N, K), got {tuple(logits.shape)}")
    if labels.shape[0] != logits.shape[0]:
        raise ConfigurationError(
            f"batch mismatch: {logits.shape[0]} logits vs {labels.shape[0]} labels"
        )
    if spec.name == "cross_entropy":
        return F.cross_entropy(logits, labels, reduction="none")
    if spec.name == "margin":
        return margin_loss(logits, labels)
    return dlr_loss(logits, labels)


def misclassified(logits, labels):
    """Boolean per example. Ties between the true class and the best wrong
    class count as misclassified (margin >= 0)."""
    return margin_loss(logits, labels) >= 0
