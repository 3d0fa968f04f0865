"""Fast gradient sign attack and its multi-step (PGD) form."""

import torch

from ..errors import ConfigurationError
from .apgd import forward_with_grad, resolve_module
from .losses import LossSpec, misclassified
from .projections import project_linf
from .threat import AttackOutcome, ThreatModel, constraint_residual

_CE = LossSpec("cross_entropy")


def fgsm(model, batch, labels, epsilon, random_init=False, steps=1, seed=0):
    """Sign-gradient ascent on cross-entropy inside the linf ball.

    steps = 1 without random init is the classic single step
    x_adv = clamp(x + eps * sign(grad), 0, 1); steps > 1 runs PGD with step
    2*eps/steps and linf projection after every step. sign(0) = 0, so dead
    coordinates stay untouched.
    """
    if steps < 1:
        raise ConfigurationError(f"fgsm needs steps >= 1, got {steps}")
    if epsilon <= 0:
        raise ConfigurationError(f"fgsm needs epsilon > 0, got {epsilon}")
    module = resolve_module(model)
    x_nat = batch.detach()
    if random_init:
        rng = torch.Generator().manual_seed(seed)
        u = torch.rand(x_nat.shape, generator=rng, dtype=x_nat.dtype)
        x = torch.clamp(x_nat + epsilon * (2.0 * u - 1.0), 0.0, 1.0)
    else:
        x = x_nat.clone()
    step = epsilon if steps == 1 else 2.0 * epsilon / steps
    for _ in range(steps):
        _, _, grad = forward_with_grad(module, x, labels, _CE)
        x = project_linf(x + step * grad.sign(), x_nat, epsilon)
    logits, loss, _ = forward_with_grad(module, x, labels, _CE)
    threat = ThreatModel("linf", epsilon)
    n = x.shape[0]
    return AttackOutcome(
        x_adv=x,
        success=misclassified(logits, labels),
        best_loss=loss,
        queries_used=torch.full((n,), steps + 1, dtype=torch.long),
        threat=threat,
        residual=constraint_residual(x, x_nat, threat),
    )
