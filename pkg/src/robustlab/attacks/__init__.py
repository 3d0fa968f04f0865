from .apgd import APGDConfig, apgd, default_checkpoints
from .fgsm import fgsm
from .losses import LossSpec, loss_value, margin_loss, misclassified
from .projections import project, project_l0_pixel
from .sparse import pgd0, sparse_random_search
from .threat import AttackOutcome, ThreatModel, constraint_residual, merge_outcomes

__all__ = [
    "APGDConfig",
    "AttackOutcome",
    "LossSpec",
    "ThreatModel",
    "apgd",
    "constraint_residual",
    "default_checkpoints",
    "fgsm",
    "loss_value",
    "margin_loss",
    "merge_outcomes",
    "misclassified",
    "pgd0",
    "project",
    "project_l0_pixel",
    "sparse_random_search",
]
