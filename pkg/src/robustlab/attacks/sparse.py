"""Pixel-sparse attacks: white-box PGD with an l0 projection, and a black-box
random search over k-pixel supports with extreme-valued colors."""

import torch

from ..errors import ConfigurationError
from .apgd import forward_with_grad, resolve_module
from .losses import LossSpec, loss_value
from .projections import l0_pixel_keep_mask
from .threat import AttackOutcome, ThreatModel, constraint_residual

_MARGIN = LossSpec("margin")


def pgd0(model, batch, labels, k, iterations, step_size=0.25):
    """Gradient ascent on margin loss with an l0-pixel projection each step.

    Each iteration takes a box-clamped step along the max-normalized gradient,
    then keeps only the k largest-magnitude pixels of the perturbation. With
    k >= H*W the projection is vacuous and this is plain box-constrained PGD.
    """
    if k < 1:
        raise ConfigurationError(f"pgd0 needs k >= 1, got {k}")
    if iterations < 1:
        raise ConfigurationError(f"pgd0 needs iterations >= 1, got {iterations}")
    module = resolve_module(model)
    x_nat = batch.detach()
    n = x_nat.shape[0]
    x = x_nat.clone()
    _, loss, grad = forward_with_grad(module, x, labels, _MARGIN)
    best = loss.clone()
    x_best = x.clone()
    for _ in range(iterations):
        gmax = grad.abs().reshape(n, -1).amax(dim=1).clamp_min(1e-12)
        ghat = grad / gmax.view(-1, *([1] * (x.ndim - 1)))
        stepped = torch.clamp(x + step_size * ghat, 0.0, 1.0)
        keep = l0_pixel_keep_mask(stepped - x_nat, k)
        x = torch.where(keep, stepped, x_nat)
        _, loss, grad = forward_with_grad(module, x, labels, _MARGIN)
        improved = loss > best
        iv = improved.view(-1, *([1] * (x.ndim - 1)))
        x_best = torch.where(iv, x, x_best)
        best = torch.where(improved, loss, best)
    threat = ThreatModel("l0_pixel", k)
    return AttackOutcome(
        x_adv=x_best,
        success=best >= 0,  # margin at the returned iterate
        best_loss=best,
        queries_used=torch.full((n,), iterations + 1, dtype=torch.long),
        threat=threat,
        residual=constraint_residual(x_best, x_nat, threat),
    )


def _paint(x_nat, positions, colors):
    """Place colors at the support pixels. positions (N,k) flat indices,
    colors (N,k,C) in {0,1}."""
    n, c = x_nat.shape[0], x_nat.shape[1]
    x = x_nat.reshape(n, c, -1).clone()
    idx = positions.unsqueeze(1).expand(n, c, positions.shape[1])
    x.scatter_(2, idx, colors.permute(0, 2, 1))
    return x.reshape(x_nat.shape)


def _sample_positions(n_pick, blocked, rng):
    """Per example, n_pick distinct positions not in ``blocked`` (N,HW bool)."""
    scores = torch.rand(blocked.shape, generator=rng)
    scores = scores.masked_fill(blocked, 2.0)
    return scores.argsort(dim=1)[:, :n_pick]


def sparse_random_search(model, batch, labels, k, query_budget, seed,
                         stop_on_success=False):
    """Black-box search over k-pixel supports colored at channel extremes.

    Keeps the best candidate seen; each step resamples a fraction of the
    support (positions and {0,1} colors), accepting the candidate only if it
    strictly increases margin loss. The resampled fraction starts at 1/2 and
    halves every 10% of the budget. Uses forward passes only.
    """
    if k < 1:
        raise ConfigurationError(f"needs k >= 1, got {k}")
    if query_budget < 1:
        raise ConfigurationError(f"needs query_budget >= 1, got {query_budget}")
    module = resolve_module(model)
    x_nat = batch.detach()
    n, c, h, w = x_nat.shape
    hw = h * w
    if k > hw:
        raise ConfigurationError(f"k = {k} exceeds pixel count {hw}")
    rng = torch.Generator().manual_seed(seed)

    none_blocked = torch.zeros(n, hw, dtype=torch.bool)
    positions = _sample_positions(k, none_blocked, rng)
    colors = (torch.rand((n, k, c), generator=rng) < 0.5).to(x_nat.dtype)

    with torch.no_grad():
        x = _paint(x_nat, positions, colors)
        logits = module(x)
    best = loss_value(logits, labels, _MARGIN)
    x_best = x
    queries = torch.ones(n, dtype=torch.long)
    active = best < 0 if stop_on_success else torch.ones(n, dtype=torch.bool)

    for t in range(1, query_budget):
        if not bool(active.any()):
            break
        frac = 0.5 * 0.5 ** int(10 * t // query_budget)
        n_res = max(1, min(k, round(frac * k)))
        # which slots to resample this step (same count for every example)
        slot_scores = torch.rand((n, k), generator=rng)
        res_slots = slot_scores.argsort(dim=1)[:, :n_res]
        kept = torch.ones(n, k, dtype=torch.bool)
        kept.scatter_(1, res_slots, False)
        blocked = torch.zeros(n, hw, dtype=torch.bool)
        blocked.scatter_(1, positions, True)
        blocked.scatter_(1, positions.masked_select(~kept).view(n, n_res), False)
        fresh_pos = _sample_positions(n_res, blocked, rng)
        fresh_col = (torch.rand((n, n_res, c), generator=rng) < 0.5).to(x_nat.dtype)

        cand_pos = positions.scatter(1, res_slots, fresh_pos)
        cand_col = colors.scatter(
            1, res_slots.unsqueeze(2).expand(n, n_res, c), fresh_col
        )
        with torch.no_grad():
            x = _paint(x_nat, cand_pos, cand_col)
            logits = module(x)
        loss = loss_value(logits, labels, _MARGIN)
        queries += active.long()

        accept = (loss > best) & active
        av = accept.view(-1, 1, 1, 1)
        x_best = torch.where(av, x, x_best)
        best = torch.where(accept, loss, best)
        positions = torch.where(accept.unsqueeze(1), cand_pos, positions)
        colors = torch.where(accept.view(-1, 1, 1), cand_col, colors)
        if stop_on_success:
            active = active & (best < 0)

    threat = ThreatModel("l0_pixel", k)
    return AttackOutcome(
        x_adv=x_best,
        success=best >= 0,  # margin at the returned iterate
        best_loss=best,
        queries_used=queries,
        threat=threat,
        residual=constraint_residual(x_best, x_nat, threat),
    )
