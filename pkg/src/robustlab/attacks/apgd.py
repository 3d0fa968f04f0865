"""Auto-PGD: projected gradient ascent with momentum and an adaptive step size.

The optimizer maximizes a per-example loss, projecting after every step. The
step is halved at scheduled checkpoints whenever fewer than rho of the
iterations since the previous checkpoint improved the best loss; on halving,
the iterate and gradient are reset to the best-so-far point. The momentum
blend is x_{k+1} = P(x_k + m*(z_{k+1} - x_k) + (1-m)*(x_k - x_{k-1})) with
z_{k+1} the plain projected ascent step; the first iteration always takes the
plain step, and momentum = 0 disables the blend entirely.

With a mask, the perturbation support is restricted to the mask and
``initial_step_fraction`` is an absolute step on [0,1] pixel values; for plain
lp threats the initial step is ``initial_step_fraction * 2 * epsilon``.
"""

from dataclasses import dataclass

import torch

from ..errors import ConfigurationError
from .losses import LossSpec, loss_value, misclassified
from .projections import project
from .threat import AttackOutcome, ThreatModel, constraint_residual, merge_outcomes


def default_checkpoints(iterations):
    """Checkpoint iterations from the standard fraction recursion
    p_0 = 0, p_1 = 0.22, p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06),
    mapped to ceil(p_j * iterations). The fractions are exact hundredths,
    so the recursion runs in integer hundredths to avoid float drift."""
    ps = [0, 22]
    while ps[-1] < 100:
        ps.append(ps[-1] + max(ps[-1] - ps[-2] - 3, 6))
    ks = []
    for p in ps[1:]:
        k = (p * iterations + 99) // 100
        if 1 <= k <= iterations and (not ks or k > ks[-1]):
            ks.append(k)
    return tuple(ks)


@dataclass(frozen=True)
class APGDConfig:
    iterations: int = 100
    initial_step_fraction: float = 1.0
    restarts: int = 1
    momentum: float = 0.75
    checkpoints: tuple = None  # None = derived from iterations
    random_init: bool = False
    seed: int = 0
    rho: float = 0.75

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("apgd needs iterations >= 1")
        if self.initial_step_fraction <= 0:
            raise ConfigurationError("initial_step_fraction must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.checkpoints is not None:
            ws = tuple(self.checkpoints)
            if any(b <= a for a, b in zip(ws, ws[1:])) or any(
                not 1 <= w <= self.iterations for w in ws
            ):
                raise ConfigurationError(
                    "checkpoints must be strictly increasing in [1, iterations]"
                )

    def schedule(self):
        if self.checkpoints is not None:
            return tuple(self.checkpoints)
        return default_checkpoints(self.iterations)


def resolve_module(model):
    """Accept a bare nn.Module or anything carrying one as .module."""
    m = model if isinstance(model, torch.nn.Module) else getattr(model, "module", None)
    if not isinstance(m, torch.nn.Module):
        raise ConfigurationError("model must be an nn.Module or a handle wrapping one")
    if m.training:
        raise ConfigurationError("attacks require the model in eval mode")
    return m


def forward_with_grad(module, x, labels, spec):
    """One forward/backward; returns detached (logits, per-example loss, grad)."""
    x = x.detach().requires_grad_(True)
    logits = module(x)
    loss = loss_value(logits, labels, spec)
    (grad,) = torch.autograd.grad(loss.sum(), x)
    return logits.detach(), loss.detach(), grad.detach()


def _expand(v, like):
    return v.view(-1, *([1] * (like.ndim - 1)))


def _direction(grad, kind, masked):
    if masked or kind == "linf":
        return grad.sign()
    flat = grad.reshape(grad.shape[0], -1)
    if kind == "l2":
        norms = flat.norm(p=2, dim=1).clamp_min(1e-12)
        return grad / _expand(norms, grad)
    # l1: sparse sign step on the top 20% of coordinates by |grad|,
    # normalized to unit l1 norm
    thresh = torch.quantile(flat.abs(), 0.8, dim=1, keepdim=True)
    keep = (flat.abs() >= thresh).to(grad.dtype)
    sparse = flat.sign() * keep
    l1n = sparse.abs().sum(dim=1).clamp_min(1.0)
    return (sparse / l1n.unsqueeze(1)).reshape(grad.shape)


def _random_start(x, threat, mask, rng):
    if mask is not None:
        u = torch.rand(x.shape, generator=rng, dtype=x.dtype)
        return x + (u - x) * mask
    n = x.shape[0]
    d = x[0].numel()
    if threat.kind == "linf":
        u = torch.rand(x.shape, generator=rng, dtype=x.dtype)
        start = x + threat.epsilon * (2.0 * u - 1.0)
    elif threat.kind == "l2":
        g = torch.randn(x.shape, generator=rng, dtype=x.dtype)
        norms = g.reshape(n, -1).norm(p=2, dim=1).clamp_min(1e-12)
        r = threat.epsilon * torch.rand(n, generator=rng, dtype=x.dtype) ** (1.0 / d)
        start = x + g * _expand(r / norms, x)
    else:  # l1: random simplex direction scaled into the ball
        e = -torch.log(
            torch.rand(x.shape, generator=rng, dtype=x.dtype).clamp_min(1e-12)
        )
        s = torch.where(
            torch.rand(x.shape, generator=rng, dtype=x.dtype) < 0.5, -1.0, 1.0
        )
        v = e * s
        l1n = v.reshape(n, -1).abs().sum(dim=1).clamp_min(1e-12)
        r = threat.epsilon * torch.rand(n, generator=rng, dtype=x.dtype) ** (1.0 / d)
        start = x + v * _expand(r / l1n, x)
    return project(start, x, threat)


def _apgd_restart(module, x_nat, labels, threat, config, mask, loss_spec,
                  success_only, seed, random_init, record_history, start=None):
    masked = mask is not None
    lp = threat if threat.kind in ("linf", "l2", "l1") else ThreatModel("linf", 1.0)
    n = x_nat.shape[0]

    def proj(p):
        if masked:
            # exact zeros off the support; content then lp/box projected
            return project(x_nat + (p - x_nat) * mask, x_nat, lp)
        return project(p, x_nat, lp)

    rng = torch.Generator().manual_seed(seed)
    if random_init:
        x = _random_start(x_nat, lp, mask, rng)
    elif start is not None:
        x = proj(start.detach())
    else:
        x = x_nat.clone()

    if masked:
        step0 = config.initial_step_fraction
    else:
        step0 = config.initial_step_fraction * 2.0 * threat.epsilon
    step = torch.full((n,), step0, dtype=x_nat.dtype)

    logits, loss, grad = forward_with_grad(module, x, labels, loss_spec)
    if masked:
        grad = grad * mask
    now = misclassified(logits, labels)
    best = loss.clone()
    x_best = x.clone()
    grad_best = grad.clone()
    succ_best = now.clone()
    queries = torch.ones(n, dtype=torch.long)
    active = ~now if success_only else torch.ones(n, dtype=torch.bool)
    history = [best.clone()] if record_history else None

    x_prev = x.clone()
    improve = torch.zeros(n, dtype=x_nat.dtype)
    ckpts = set(config.schedule())
    prev_ckpt = 0

    for i in range(1, config.iterations + 1):
        sv = _expand(step, x)
        z = proj(x + sv * _direction(grad, lp.kind, masked))
        if i == 1 or config.momentum == 0:
            x_new = z
        else:
            x_new = proj(
                x
                + config.momentum * (z - x)
                + (1.0 - config.momentum) * (x - x_prev)
            )
        av = _expand(active.to(x.dtype), x)
        x_new = x_new * av + x * (1.0 - av)
        x_prev, x = x, x_new

        logits, loss, g = forward_with_grad(module, x, labels, loss_spec)
        if masked:
            g = g * mask
        grad = torch.where(av.bool(), g, grad)
        queries += active.long()
        now = misclassified(logits, labels)

        improved = (loss > best) & active
        improve = improve + improved.to(improve.dtype)
        iv = _expand(improved.to(x.dtype), x).bool()
        x_best = torch.where(iv, x, x_best)
        grad_best = torch.where(iv, grad, grad_best)
        succ_best = torch.where(improved, now, succ_best)
        best = torch.where(improved, loss, best)
        if success_only:
            newly = now & active
            nv = _expand(newly.to(x.dtype), x).bool()
            x_best = torch.where(nv, x, x_best)
            best = torch.where(newly, loss, best)
            succ_best = succ_best | newly
            active = active & ~now
        if record_history:
            history.append(best.clone())

        if i in ckpts:
            window = i - prev_ckpt
            stall = (improve < config.rho * window) & active
            if bool(stall.any()):
                step = torch.where(stall, step * 0.5, step)
                stv = _expand(stall.to(x.dtype), x).bool()
                x = torch.where(stv, x_best, x)
                x_prev = torch.where(stv, x_best, x_prev)
                grad = torch.where(stv, grad_best, grad)
            improve = torch.zeros_like(improve)
            prev_ckpt = i

    return AttackOutcome(
        x_adv=x_best,
        success=succ_best,
        best_loss=best,
        queries_used=queries,
        threat=threat,
        residual=constraint_residual(x_best, x_nat, threat, mask),
        loss_history=torch.stack(history) if record_history else None,
    )


def apgd(model, batch, labels, threat, config=APGDConfig(), mask=None,
         loss=LossSpec("margin"), success_only=False, record_history=False,
         start=None):
    """Run APGD on a batch; returns the best-loss iterate per example.

    mask restricts the perturbation support (broadcastable to the batch shape,
    e.g. (1,1,H,W) or (N,1,H,W)); off-mask pixels are never touched. Without a
    mask the threat must be an lp kind; with one, patch/frame threats are
    accepted and the content is free in [0,1] on the support. Restarts beyond
    the first always use random initialization; best loss is merged per
    example across restarts. With success_only=True an example freezes at its
    first misclassifying iterate. ``start`` warm-starts the first restart from
    a given iterate (projected onto the feasible set) instead of the batch.
    """
    module = resolve_module(model)
    if batch.ndim < 2:
        raise ConfigurationError("batch must have a leading example dimension")
    if mask is not None:
        mask = mask.to(batch.dtype)
        try:
            torch.broadcast_shapes(mask.shape, batch.shape)
        except RuntimeError:
            raise ConfigurationError(
                f"mask shape {tuple(mask.shape)} is not broadcastable to "
                f"batch shape {tuple(batch.shape)}"
            ) from None
    elif threat.kind not in ("linf", "l2", "l1"):
        raise ConfigurationError(
            f"threat kind {threat.kind!r} requires a mask (patch/frame support)"
        )
    out = None
    for r in range(config.restarts):
        res = _apgd_restart(
            module, batch.detach(), labels, threat, config, mask, loss,
            success_only, config.seed + 7919 * r,
            config.random_init or r > 0,
            record_history and config.restarts == 1,
            start=start if r == 0 else None,
        )
        out = merge_outcomes(out, res)
    return out
