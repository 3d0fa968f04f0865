"""Threat models and attack result records."""

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigurationError

THREAT_KINDS = ("linf", "l2", "l1", "l0_pixel", "patch", "frame")
LP_KINDS = ("linf", "l2", "l1")


@dataclass(frozen=True)
class ThreatModel:
    """Constraint family plus its budget.

    epsilon is in the kind's units: an lp radius in [0,1]-image units, a max
    perturbed pixel count for l0_pixel, a side length in pixels for patch, a
    width in pixels for frame.
    """

    kind: str
    epsilon: float

    def __post_init__(self):
        if self.kind not in THREAT_KINDS:
            raise ConfigurationError(
                f"unknown threat kind {self.kind!r}, expected one of {THREAT_KINDS}"
            )
        if self.epsilon <= 0:
            raise ConfigurationError(f"threat budget must be > 0, got {self.epsilon}")
        if self.kind in ("l0_pixel", "patch", "frame"):
            if int(self.epsilon) != self.epsilon:
                raise ConfigurationError(
                    f"{self.kind} budget must be an integer, got {self.epsilon}"
                )

    @property
    def count(self):
        """Budget as an integer (pixel count, side length, or width)."""
        return int(self.epsilon)


def perturbation_norms(x_adv, x, kind):
    """Per-example perturbation size in the given lp norm (or pixel count)."""
    delta = (x_adv - x).reshape(x.shape[0], -1)
    if kind == "linf":
        return delta.abs().amax(dim=1)
    if kind == "l2":
        return delta.norm(p=2, dim=1)
    if kind == "l1":
        return delta.abs().sum(dim=1)
    if kind == "l0_pixel":
        pix = (x_adv - x).abs().sum(dim=1)  # (N,H,W) channel-summed
        return (pix > 0).reshape(x.shape[0], -1).sum(dim=1).to(x.dtype)
    raise ConfigurationError(f"no lp norm for threat kind {kind!r}")


def constraint_residual(x_adv, x, threat, mask=None):
    """Per-example constraint violation (0 when feasible).

    Measures the lp-ball (or pixel-count) excess over the budget, the [0,1]
    box excess, and any off-mask perturbation for masked threats.
    """
    n = x.shape[0]
    box = torch.clamp(-x_adv, min=0).reshape(n, -1).amax(dim=1)
    box = torch.maximum(box, torch.clamp(x_adv - 1, min=0).reshape(n, -1).amax(dim=1))
    if threat.kind in LP_KINDS or threat.kind == "l0_pixel":
        excess = torch.clamp(
            perturbation_norms(x_adv, x, threat.kind) - threat.epsilon, min=0
        )
    else:
        excess = torch.zeros(n, dtype=x.dtype, device=x.device)
    if mask is not None:
        off = (x_adv - x).abs() * (1.0 - mask)
        excess = torch.maximum(excess, off.reshape(n, -1).amax(dim=1))
    return torch.maximum(excess, box)


@dataclass
class AttackOutcome:
    """Result of one attack run on one batch.

    x_adv: adversarial batch, same shape as the input, values in [0,1].
    success: per-example boolean, true iff the model misclassifies x_adv.
    best_loss: per-example best objective value reached.
    queries_used: per-example forward passes (black-box) or iterations (white-box).
    residual: per-example constraint violation, 0 when exactly feasible.
    loss_history: optional (steps+1, N) array of best-so-far losses.
    """

    x_adv: torch.Tensor
    success: torch.Tensor
    best_loss: torch.Tensor
    queries_used: torch.Tensor
    threat: ThreatModel
    residual: torch.Tensor = None
    loss_history: torch.Tensor = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x_adv.shape[0]
        for name in ("success", "best_loss", "queries_used"):
            v = getattr(self, name)
            if v.shape[0] != n:
                raise ConfigurationError(
                    f"AttackOutcome field {name} has length {v.shape[0]}, expected {n}"
                )
        if self.residual is None:
            self.residual = torch.zeros(n, dtype=self.x_adv.dtype)

    @property
    def success_rate(self):
        return float(self.success.float().mean())

    def records(self):
        """Per-example plain dicts for structured serialization."""
        out = []
        for i in range(self.x_adv.shape[0]):
            out.append(
                {
                    "index": i,
                    "success": bool(self.success[i]),
                    "best_loss": float(self.best_loss[i]),
                    "constraint_residual": float(self.residual[i]),
                    "queries": int(self.queries_used[i]),
                }
            )
        return out

    def save(self, path):
        """Write a single lossless archive: records plus the adversarial batch."""
        spec = (
            {"kind": self.threat.kind, "epsilon": self.threat.epsilon}
            if self.threat is not None
            else None
        )
        np.savez_compressed(
            path,
            x_adv=self.x_adv.detach().cpu().numpy(),
            success=self.success.detach().cpu().numpy(),
            best_loss=self.best_loss.detach().cpu().numpy(),
            queries_used=self.queries_used.detach().cpu().numpy(),
            residual=self.residual.detach().cpu().numpy(),
            threat=np.array(json.dumps(spec)),
        )

    @classmethod
    def load(cls, path):
        data = np.load(path, allow_pickle=False)
        spec = json.loads(str(data["threat"]))
        return cls(
            x_adv=torch.from_numpy(data["x_adv"]),
            success=torch.from_numpy(data["success"]),
            best_loss=torch.from_numpy(data["best_loss"]),
            queries_used=torch.from_numpy(data["queries_used"]),
            residual=torch.from_numpy(data["residual"]),
            threat=ThreatModel(spec["kind"], spec["epsilon"]) if spec else None,
        )


def merge_outcomes(a, b):
    """Per-example union of two attacks on the same batch under the same threat.

    Keeps the higher-loss iterate, except an unsuccessful higher-loss iterate
    never replaces a successful one; success flags are ORed. Used to combine
    restarts, loss arms, and placement grids.
    """
    if a is None:
        return b
    if b is None:
        return a
    take_b = b.best_loss > a.best_loss
    take_b = take_b & ~(a.success & ~b.success)
    take_b = take_b | (b.success & ~a.success)
    mask = take_b.view(-1, *([1] * (a.x_adv.ndim - 1)))
    return AttackOutcome(
        x_adv=torch.where(mask, b.x_adv, a.x_adv),
        success=a.success | b.success,
        best_loss=torch.where(take_b, b.best_loss, a.best_loss),
        queries_used=a.queries_used + b.queries_used,
        threat=a.threat,
        residual=torch.where(take_b, b.residual, a.residual),
    )
