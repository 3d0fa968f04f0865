"""Token-grid geometry, per-position patch loss maps, greedy patch attacks,
and adversarial frames.

Patch content is constrained only to [0,1] inside its mask (no lp budget);
everything runs through masked APGD on the margin loss with absolute step
size, warm-started from the clean image content.
"""

import math
from dataclasses import dataclass

import torch

from .attacks.apgd import APGDConfig, apgd
from .attacks.losses import LossSpec, loss_value, misclassified
from .attacks.threat import AttackOutcome, ThreatModel, merge_outcomes
from .errors import ConfigurationError
from .render import normalize_pair, save_gray_png, upsample_nearest

ALIGNMENTS = ("aligned", "non_aligned")
_MARGIN = LossSpec("margin")


@dataclass(frozen=True)
class PatchGrid:
    """Patch placement grid over an image tokenized at token_size.

    aligned placements tile the token grid disjointly; non_aligned ones sit
    at the interior token corners, offset by (p/2, p/2), so each covers a
    quarter of four contiguous tokens.
    """

    image_size: tuple
    token_size: int
    alignment: str = "aligned"

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        h, w = self.image_size
        p = self.token_size
        if p < 1:
            raise ConfigurationError("token_size must be >= 1")
        if h % p or w % p:
            raise ConfigurationError(
                f"image {h}x{w} not divisible by token_size {p}"
            )
        if self.alignment not in ALIGNMENTS:
            raise ConfigurationError(
                f"alignment must be one of {ALIGNMENTS}, got {self.alignment!r}"
            )
        if self.alignment == "non_aligned":
            if p % 2:
                raise ConfigurationError(
                    f"non_aligned grid needs an even token_size, got {p}"
                )
            if h // p < 2 or w // p < 2:
                raise ConfigurationError(
                    "non_aligned grid needs at least a 2x2 token grid"
                )

    @property
    def shape(self):
        h, w = self.image_size
        n = self.token_size
        if self.alignment == "aligned":
            return (h // n, w // n)
        return (h // n - 1, w // n - 1)

    @property
    def count(self):
        return self.shape[0] * self.shape[1]


@dataclass(frozen=True)
class Placement:
    """One patch rectangle: rows [top, top+size), cols [left, left+size)."""

    top: int
    left: int
    size: int

    def __post_init__(self):
        if self.size < 1 or self.top < 0 or self.left < 0:
            raise ConfigurationError(f"bad placement {self}")

    def check_inside(self, image_size):
        h, w = image_size
        if self.top + self.size > h or self.left + self.size > w:
            raise ConfigurationError(
                f"placement {self} falls outside image {h}x{w}"
            )

    def mask(self, image_size):
        """(1,1,H,W) float mask of the patch support."""
        self.check_inside(image_size)
        m = torch.zeros(1, 1, *image_size)
        m[..., self.top:self.top + self.size, self.left:self.left + self.size] = 1.0
        return m


def enumerate_placements(grid):
    """All placements of the grid in row-major order."""
    rows, cols = grid.shape
    p = grid.token_size
    off = 0 if grid.alignment == "aligned" else p // 2
    return [
        Placement(top=i * p + off, left=j * p + off, size=p)
        for i in range(rows)
        for j in range(cols)
    ]


@dataclass(frozen=True)
class FrameMask:
    """Border frame of the given width around the image."""

    image_size: tuple
    width: int

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        h, w = self.image_size
        if self.width < 0:
            raise ConfigurationError("frame width must be >= 0")
        if self.width >= min(h, w) / 2:
            raise ConfigurationError(
                f"frame width {self.width} too large for image {h}x{w}"
            )

    @property
    def pixel_count(self):
        h, w = self.image_size
        v = self.width
        return h * w - (h - 2 * v) * (w - 2 * v)

    def mask(self):
        """(1,1,H,W) float mask of the frame support."""
        h, w = self.image_size
        v = self.width
        m = torch.ones(1, 1, h, w)
        m[..., v:h - v, v:w - v] = 0.0
        return m


@dataclass
class LossMap:
    """Best margin loss per placement of one grid for one image."""

    grid: PatchGrid
    values: torch.Tensor  # shape = grid.shape
    iterations: int


def _patch_apgd_config(iterations, seed, restarts=1):
    return APGDConfig(
        iterations=iterations,
        initial_step_fraction=0.5,  # absolute step on pixel values
        restarts=restarts,
        seed=seed,
    )


def _masked_attack(model, batch, labels, masks, iterations, seed, threat,
                   start=None, restarts=1, success_only=False):
    """Masked APGD on margin loss; masks is (N,1,H,W) per example."""
    return apgd(
        model, batch, labels, threat,
        config=_patch_apgd_config(iterations, seed, restarts),
        mask=masks, loss=_MARGIN, success_only=success_only, start=start,
    )


def _clean_outcome(model, batch, labels, threat):
    with torch.no_grad():
        logits = model.module(batch) if hasattr(model, "module") else model(batch)
    margin = loss_value(logits, labels, _MARGIN)
    return AttackOutcome(
        x_adv=batch.clone(),
        success=misclassified(logits, labels),
        best_loss=margin,
        queries_used=torch.ones(batch.shape[0], dtype=torch.long),
        threat=threat,
    )


def patch_loss_map(model, image, label, grid, iterations=100, seed=0,
                   chunk=32):
    """Best margin loss of a patch at every placement of the grid.

    Runs independent masked APGD attacks, one per placement, on a single
    image. iterations = 0 skips optimization and fills the map with the clean
    margin loss. Placements are batched in chunks to bound memory.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.shape[0] != 1:
        raise ConfigurationError("patch_loss_map expects a single image")
    label = torch.as_tensor(label).reshape(1)
    h, w = image.shape[-2:]
    if (h, w) != grid.image_size:
        raise ConfigurationError(
            f"image {h}x{w} does not match grid {grid.image_size}"
        )
    placements = enumerate_placements(grid)
    threat = ThreatModel("patch", grid.token_size)
    if iterations == 0:
        clean = _clean_outcome(model, image, label, threat).best_loss[0]
        values = torch.full(grid.shape, float(clean))
        return LossMap(grid=grid, values=values, iterations=0)
    losses = []
    for lo in range(0, len(placements), chunk):
        part = placements[lo:lo + chunk]
        masks = torch.cat([p.mask((h, w)) for p in part], dim=0)
        batch = image.expand(len(part), -1, -1, -1)
        labs = label.expand(len(part))
        out = _masked_attack(
            model, batch, labs, masks, iterations, seed + lo, threat
        )
        losses.append(out.best_loss)
    values = torch.cat(losses).reshape(grid.shape)
    return LossMap(grid=grid, values=values, iterations=iterations)


def _greedy_over_placements(model, batch, labels, placements, threat,
                            phase1_iters, keep_fraction, phase2_iters, seed,
                            success_only):
    n = batch.shape[0]
    hw = batch.shape[-2:]
    per_placement = []
    for idx, pl in enumerate(placements):
        out = _masked_attack(
            model, batch, labels, pl.mask(hw), phase1_iters, seed + idx, threat
        )
        per_placement.append(out)
    loss_mat = torch.stack([o.best_loss for o in per_placement])  # (P, N)
    queries = sum(o.queries_used for o in per_placement)

    keep = max(1, math.ceil(keep_fraction * len(placements)))
    # loss descending; stable sort keeps row-major placement order on ties
    order = torch.argsort(-loss_mat, dim=0, stable=True)
    kept = order[:keep]  # (keep, N) placement indices per example

    if phase2_iters == 0:
        final = None
        for idx, o in enumerate(per_placement):
            used = (kept == idx).any(dim=0)
            if not bool(used.any()):
                continue
            final = merge_outcomes(final, _restrict(o, used, batch))
        final.queries_used = queries
        return final

    final = None
    for idx in sorted(set(kept.flatten().tolist())):
        sel = (kept == idx).any(dim=0)
        pl = placements[idx]
        sub = torch.nonzero(sel, as_tuple=False).squeeze(1)
        out = _masked_attack(
            model, batch[sub], labels[sub], pl.mask(hw), phase2_iters,
            seed + 100003 + idx, threat,
            start=per_placement[idx].x_adv[sub], success_only=success_only,
        )
        queries[sub] += out.queries_used
        full = _scatter(out, sub, batch, threat)
        final = merge_outcomes(final, full)
    final.queries_used = queries
    return final


def _restrict(outcome, used, batch):
    """Mask an outcome down to the examples in ``used`` (others dropped to
    clean inputs with -inf loss so merge ignores them)."""
    neg = torch.full_like(outcome.best_loss, float("-inf"))
    uv = used.view(-1, *([1] * (batch.ndim - 1)))
    return AttackOutcome(
        x_adv=torch.where(uv, outcome.x_adv, batch),
        success=outcome.success & used,
        best_loss=torch.where(used, outcome.best_loss, neg),
        queries_used=torch.zeros_like(outcome.queries_used),
        threat=outcome.threat,
        residual=outcome.residual * used.to(outcome.residual.dtype),
    )


def _scatter(outcome, sub, batch, threat):
    """Embed a sub-batch outcome into the full batch (missing examples get
    clean inputs with -inf loss so merge ignores them)."""
    n = batch.shape[0]
    x = batch.clone()
    x[sub] = outcome.x_adv
    success = torch.zeros(n, dtype=torch.bool)
    success[sub] = outcome.success
    loss = torch.full((n,), float("-inf"), dtype=outcome.best_loss.dtype)
    loss[sub] = outcome.best_loss
    queries = torch.zeros(n, dtype=torch.long)
    residual = torch.zeros(n, dtype=outcome.residual.dtype)
    residual[sub] = outcome.residual
    return AttackOutcome(
        x_adv=x, success=success, best_loss=loss, queries_used=queries,
        threat=threat, residual=residual,
    )


def greedy_patch_attack(model, batch, labels, grid, phase1_iters=20,
                        keep_fraction=0.2, phase2_iters=480, seed=0,
                        success_only=False):
    """Two-phase patch attack over one placement grid.

    Phase 1 runs short masked APGD at every placement; the top
    ceil(keep_fraction * count) placements per example by phase-1 loss are
    refined for phase2_iters more iterations at fixed locations, warm-started
    from their phase-1 content. Returns the per-example best over refined
    placements; success is the union over placements.
    """
    placements = enumerate_placements(grid)
    threat = ThreatModel("patch", grid.token_size)
    return _greedy_over_placements(
        model, batch, labels, placements, threat, phase1_iters, keep_fraction,
        phase2_iters, seed, success_only,
    )


def fixed_position_patch_attack(model, batch, labels, placement, iterations,
                                restarts=1, seed=0):
    """Masked APGD at one fixed placement; restarts beyond the first use
    random patch content."""
    hw = batch.shape[-2:]
    placement.check_inside(hw)
    threat = ThreatModel("patch", placement.size)
    return _masked_attack(
        model, batch, labels, placement.mask(hw), iterations, seed, threat,
        restarts=restarts,
    )


def frame_attack(model, batch, labels, width=2, iterations=100, restarts=5,
                 seed=0):
    """Adversarial frame: masked APGD on the border pixels, best over
    restarts. width = 0 means an empty support, returning clean inputs."""
    hw = tuple(batch.shape[-2:])
    fm = FrameMask(hw, width)
    if width == 0:
        return _clean_outcome(model, batch, labels, threat=None)
    threat = ThreatModel("frame", width)
    return _masked_attack(
        model, batch, labels, fm.mask(), iterations, seed, threat,
        restarts=restarts,
    )


def render_loss_map_pair(aligned, non_aligned, image_size, out_prefix=None):
    """Render two loss maps with a shared intensity scale.

    Both maps are normalized jointly (so their brightnesses are comparable),
    then upsampled to the image resolution with nearest-neighbor so each
    placement shows as a uniform cell. Returns the two (H,W) arrays; when
    out_prefix is given also writes <prefix>_aligned.png and
    <prefix>_shifted.png.
    """
    a, b = normalize_pair(aligned.values, non_aligned.values)
    a = upsample_nearest(a, image_size)
    b = upsample_nearest(b, image_size)
    if out_prefix is not None:
        save_gray_png(a, f"{out_prefix}_aligned.png")
        save_gray_png(b, f"{out_prefix}_shifted.png")
    return a, b
