"""Euclidean projections onto the constraint sets used by the attacks.

All projections are exact:
  linf  coordinate clamp against ball and box (separable, exact).
  l2    radial scaling onto the ball, then box clamp.
  l1    joint projection onto {||d||_1 <= eps} intersected with the box,
        via the piecewise-linear Lagrangian: d(lam) = clamp(soft_threshold(d, lam), box)
        with lam located exactly by sorting the breakpoints of ||d(lam)||_1.
  l0    per-pixel top-k by channel l2 magnitude, row-major tie-break.

Inputs may carry a leading batch dimension; projections are vectorized over it.
"""

import torch

from ..errors import ConfigurationError
from .threat import ThreatModel  # noqa: F401  (re-export for callers)


def _flatten(x):
    return x.reshape(x.shape[0], -1)


def project_linf(point, center, eps):
    lo = torch.clamp(center - eps, min=0.0)
    hi = torch.clamp(center + eps, max=1.0)
    return torch.minimum(torch.maximum(point, lo), hi)


def project_l2(point, center, eps):
    delta = point - center
    norms = _flatten(delta).norm(p=2, dim=1)
    scale = torch.where(
        norms > eps, eps / norms.clamp_min(1e-12), torch.ones_like(norms)
    )
    scale = scale.view(-1, *([1] * (delta.ndim - 1)))
    return torch.clamp(center + delta * scale, 0.0, 1.0)


def _l1_box_threshold(d, hi, eps):
    """Exact Lagrange multiplier for projecting d onto {||v||_1 <= eps, 0 <= v_i*s_i <= hi_i}.

    d, hi are (N, D) with hi >= 0 the per-coordinate magnitude bound in the
    direction sign(d). The projected magnitude per coordinate is
    c_i(lam) = clamp(|d_i| - lam, 0, hi_i); g(lam) = sum_i c_i is piecewise
    linear and nonincreasing with breakpoints at |d_i| and |d_i| - hi_i.
    Returns lam >= 0 with g(lam) = eps (or 0 when already feasible).
    """
    mag = d.abs()
    # breakpoints; values <= 0 act like 0 (g is evaluated at lam >= 0 only)
    bp = torch.cat([mag, mag - hi], dim=1).clamp_min(0.0)
    bp, _ = torch.sort(bp, dim=1)  # ascending
    g_at = lambda lam: torch.clamp(mag - lam.unsqueeze(1), min=0.0).minimum(hi).sum(1)
    n, m = bp.shape
    # g at the largest breakpoint is 0 <= eps; binary-search the first
    # breakpoint index where g(bp) <= eps, then solve linearly on the segment.
    lo = torch.zeros(n, dtype=torch.long, device=d.device)
    hi_idx = torch.full((n,), m - 1, dtype=torch.long, device=d.device)
    while bool((lo < hi_idx).any()):
        mid = (lo + hi_idx) // 2
        val = g_at(bp.gather(1, mid.unsqueeze(1)).squeeze(1))
        go_right = val > eps
        lo = torch.where(go_right, mid + 1, lo)
        hi_idx = torch.where(go_right, hi_idx, mid)
    right = bp.gather(1, lo.unsqueeze(1)).squeeze(1)
    left = torch.where(
        lo > 0, bp.gather(1, (lo - 1).clamp_min(0).unsqueeze(1)).squeeze(1),
        torch.zeros_like(right),
    )
    g_left, g_right = g_at(left), g_at(right)
    # linear interpolation on [left, right]; flat segments give slope 0
    slope = torch.where(
        right > left, (g_right - g_left) / (right - left), torch.zeros_like(right)
    )
    lam = torch.where(
        slope < 0, left + (eps - g_left) / torch.where(slope < 0, slope, -torch.ones_like(slope)),
        left,
    )
    return lam.clamp_min(0.0)


def project_l1(point, center, eps):
    """Joint projection of point onto the l1 ball around center and the [0,1] box."""
    shape = point.shape
    d = _flatten(point - center)
    c = _flatten(center)
    # magnitude bound in the direction of d: moving toward 0 is always allowed
    hi = torch.where(d >= 0, 1.0 - c, c)
    hi = hi.clamp_min(0.0)
    feas_mag = torch.minimum(d.abs(), hi)  # box-clamped magnitudes
    norms = feas_mag.sum(dim=1)
    lam = torch.zeros_like(norms)
    need = norms > eps
    if bool(need.any()):
        lam[need] = _l1_box_threshold(d[need], hi[need], eps)
    out_mag = torch.clamp(d.abs() - lam.unsqueeze(1), min=0.0).minimum(hi)
    out = c + torch.sign(d) * out_mag
    return out.reshape(shape).clamp(0.0, 1.0)


def project(point, center, threat):
    """Project point onto the threat's lp ball around center, intersected with [0,1].

    Accepts a single example or a leading batch dimension. center must lie in
    the box, so the result is always feasible.
    """
    if not isinstance(threat, ThreatModel) or threat.kind not in ("linf", "l2", "l1"):
        kind = getattr(threat, "kind", threat)
        raise ConfigurationError(f"project() handles linf/l2/l1 threats, got {kind!r}")
    if point.shape != center.shape:
        raise ConfigurationError(
            f"point shape {tuple(point.shape)} != center shape {tuple(center.shape)}"
        )
    squeeze = point.ndim == 1 or (point.ndim == 3 and threat.kind != "linf")
    if squeeze:
        point, center = point.unsqueeze(0), center.unsqueeze(0)
    if threat.kind == "linf":
        out = project_linf(point, center, threat.epsilon)
    elif threat.kind == "l2":
        out = project_l2(point, center, threat.epsilon)
    else:
        out = project_l1(point, center, threat.epsilon)
    return out.squeeze(0) if squeeze else out


def l0_pixel_keep_mask(delta, k):
    """(N,1,H,W) boolean mask of the k pixels with largest channel-l2 magnitude.

    Ties broken by row-major pixel position (earlier positions win).
    """
    if k <= 0:
        raise ConfigurationError(f"pixel budget k must be >= 1, got {k}")
    n, _, h, w = delta.shape
    if k >= h * w:
        return torch.ones(n, 1, h, w, dtype=torch.bool, device=delta.device)
    mag = delta.pow(2).sum(dim=1).reshape(n, -1)  # squared l2 per pixel
    # stable argsort on -mag: descending magnitude, row-major among ties
    order = torch.argsort(-mag, dim=1, stable=True)
    keep = torch.zeros_like(mag, dtype=torch.bool)
    keep.scatter_(1, order[:, :k], True)
    return keep.reshape(n, 1, h, w)


def project_l0_pixel(delta, k):
    """Keep the k pixels of delta with largest channel-l2 magnitude, zero the rest.

    delta is (C,H,W) or (N,C,H,W). Ties broken by row-major pixel position
    (earlier positions win). k >= H*W leaves delta unchanged.
    """
    single = delta.ndim == 3
    if single:
        delta = delta.unsqueeze(0)
    keep = l0_pixel_keep_mask(delta, k)
    out = delta * keep.to(delta.dtype)
    return out.squeeze(0) if single else out
