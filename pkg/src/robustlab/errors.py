"""Exception types shared across the package."""


class RobustlabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RobustlabError):
    """Invalid or inconsistent configuration (model, attack, sweep, or CLI)."""


class TrainingDiverged(RobustlabError):
    """Training loss became non-finite."""

    def __init__(self, epoch, step, loss):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(
            f"non-finite training loss {loss!r} at epoch {epoch}, step {step}"
        )


class CatastrophicOverfitting(RobustlabError):
    """Single-step adversarial training collapsed (robust accuracy under a
    multi-step attack dropped sharply while single-step accuracy stayed high)."""

    def __init__(self, epoch, fgsm_acc, pgd_acc, pgd_max):
        self.epoch = epoch
        self.fgsm_acc = fgsm_acc
        self.pgd_acc = pgd_acc
        self.pgd_max = pgd_max
        super().__init__(
            f"catastrophic overfitting at epoch {epoch}: "
            f"pgd2 holdout accuracy {pgd_acc:.1f} fell more than 50% below its "
            f"running max {pgd_max:.1f} while fgsm accuracy {fgsm_acc:.1f} held"
        )
