"""Interpretability artifacts: per-head CLS attention maps, XCA key/query
feature-norm maps, signed perturbation heatmaps, and a grid-structure
statistic for perturbations of token-based models.

All numeric maps stay at token-grid resolution; rendering upsamples with
nearest-neighbor so the grid structure stays visible.
"""

import numpy as np
import torch
from dataclasses import dataclass

from .errors import ConfigurationError
from .render import (diverging_rgb, map_grid_text, save_rgb_png,
                     upsample_nearest)

MAP_SOURCES = ("cls_attention", "xca_key_norm", "xca_query_norm")


@dataclass
class HeadMapSet:
    """One 2D map per head of a single block.

    maps has shape (heads, gh, gw) where (gh, gw) is the token grid of the
    input the maps were extracted from. block is the index of the source
    block (always the deepest one here).
    """

    maps: torch.Tensor
    source: str
    block: int

    def __post_init__(self):
        if self.source not in MAP_SOURCES:
            raise ConfigurationError(
                f"unknown map source {self.source!r}, expected one of {MAP_SOURCES}"
            )
        if self.maps.ndim != 3:
            raise ConfigurationError(
                f"head maps must be (heads, gh, gw), got shape {tuple(self.maps.shape)}"
            )

    @property
    def num_heads(self):
        return self.maps.shape[0]

    @property
    def grid(self):
        return tuple(self.maps.shape[1:])

    def text(self):
        """Structured text form: one block per head, blank-line separated."""
        chunks = [f"# source: {self.source}  block: {self.block}"]
        for h in range(self.num_heads):
            chunks.append(f"# head {h}")
            chunks.append(map_grid_text(self.maps[h]))
        return "\n".join(chunks) + "\n"


def _single_image_batch(image):
    if image.ndim == 3:
        return image.unsqueeze(0)
    if image.ndim == 4 and image.shape[0] == 1:
        return image
    raise ConfigurationError(
        f"expected one image (C,H,W), got shape {tuple(image.shape)}"
    )


def _token_grid(config, image):
    p = config.token_size
    h, w = image.shape[-2:]
    if h % p or w % p:
        raise ConfigurationError(
            f"input {h}x{w} not divisible by token size {p}"
        )
    return h // p, w // p


def cls_attention_maps(model, image):
    """Attention of the CLS query to the image tokens, one map per head of
    the last attention block.

    The CLS-to-CLS mass is dropped, so each map sums to at most 1. The maps
    carry the spatial token grid of the image.
    """
    if model.config.family != "vit":
        raise ConfigurationError(
            f"CLS attention maps need family vit, got {model.config.family!r}"
        )
    batch = _single_image_batch(image)
    gh, gw = _token_grid(model.config, batch)
    attn = model.capture_attention(batch)  # (1, heads, T, T), T = 1 + gh*gw
    row = attn[0, :, 0, 1:]  # CLS query, image-token keys
    maps = row.reshape(-1, gh, gw)
    block = sum(model.config.stage_blocks) - 1
    return HeadMapSet(maps=maps, source="cls_attention", block=block)


def xca_feature_norm_maps(model, image, which="keys"):
    """Per-token feature norms of the last XCA block's keys or queries.

    For every head, takes the l2 norm of each token's key (or query) vector
    over the feature dimension and lays the values out on the token grid.
    Works at any input resolution divisible by the token size.
    """
    if model.config.family != "xcit":
        raise ConfigurationError(
            f"feature-norm maps need family xcit, got {model.config.family!r}"
        )
    if which not in ("keys", "queries"):
        raise ConfigurationError(
            f"which must be 'keys' or 'queries', got {which!r}"
        )
    batch = _single_image_batch(image)
    gh, gw = _token_grid(model.config, batch)
    q, k = model.capture_qk(batch)  # each (1, heads, T, head_dim)
    chosen = k if which == "keys" else q
    norms = chosen[0].norm(dim=-1)  # (heads, T)
    maps = norms.reshape(-1, gh, gw)
    source = "xca_key_norm" if which == "keys" else "xca_query_norm"
    block = sum(model.config.stage_blocks) - 1
    return HeadMapSet(maps=maps, source=source, block=block)


def perturbation_heatmap(original, adversarial):
    """Signed perturbation map, summed over color channels, plus a rendered
    diverging-color image.

    Zero difference renders white; negative values shade toward blue and
    positive toward red, at full saturation for the largest magnitude. The
    scale is symmetric about zero, so negating the perturbation swaps the
    two colors exactly.
    """
    if original.shape != adversarial.shape:
        raise ConfigurationError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(adversarial.shape)}"
        )
    orig = original.squeeze(0) if original.ndim == 4 else original
    adv = adversarial.squeeze(0) if adversarial.ndim == 4 else adversarial
    if orig.ndim != 3:
        raise ConfigurationError(
            f"expected one image (C,H,W), got shape {tuple(original.shape)}"
        )
    heat = (adv - orig).sum(dim=0)
    return heat, diverging_rgb(heat)


@dataclass(frozen=True)
class GridDiscontinuity:
    """Perturbation jump sizes at token boundaries vs inside tokens."""

    boundary: float
    interior: float

    @property
    def ratio(self):
        if self.interior == 0:
            return float("inf") if self.boundary > 0 else 1.0
        return self.boundary / self.interior


def grid_discontinuity_statistic(perturbation, token_size):
    """How much more a perturbation jumps across token boundaries than
    between neighboring pixels inside a token.

    For every horizontally or vertically adjacent pixel pair, the jump is
    the l2 norm (over channels) of the difference of the two perturbation
    vectors. Pairs straddling a token boundary are averaged separately from
    the rest. A ratio well above 1 indicates the perturbation inherited the
    token grid.
    """
    d = perturbation.squeeze(0) if perturbation.ndim == 4 else perturbation
    if d.ndim != 3:
        raise ConfigurationError(
            f"expected one perturbation (C,H,W), got shape {tuple(perturbation.shape)}"
        )
    p = int(token_size)
    if p < 1:
        raise ConfigurationError(f"token size must be >= 1, got {token_size}")
    h, w = d.shape[-2:]
    boundary, interior = [], []
    # vertical neighbors: rows r and r+1 straddle a boundary iff (r+1) % p == 0
    jump_v = (d[:, 1:, :] - d[:, :-1, :]).norm(dim=0)  # (h-1, w)
    rows = torch.arange(h - 1)
    v_boundary = ((rows + 1) % p == 0)
    boundary.append(jump_v[v_boundary].reshape(-1))
    interior.append(jump_v[~v_boundary].reshape(-1))
    jump_h = (d[:, :, 1:] - d[:, :, :-1]).norm(dim=0)  # (h, w-1)
    cols = torch.arange(w - 1)
    h_boundary = ((cols + 1) % p == 0)
    boundary.append(jump_h[:, h_boundary].reshape(-1))
    interior.append(jump_h[:, ~h_boundary].reshape(-1))
    boundary = torch.cat(boundary)
    interior = torch.cat(interior)
    if boundary.numel() == 0 or interior.numel() == 0:
        raise ConfigurationError(
            f"token size {p} leaves no boundary/interior pixel pairs in a "
            f"{h}x{w} image"
        )
    return GridDiscontinuity(
        boundary=float(boundary.mean()), interior=float(interior.mean())
    )


def _normalize_map(m):
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.full(tuple(m.shape), 0.5)
    return ((m - lo) / (hi - lo)).numpy()


def render_head_maps(map_set, image=None, out_path=None):
    """Figure-style panel row: original image leftmost (when given), then
    one grayscale panel per head, left to right.

    Each head map is min-max normalized on its own and upsampled to the
    image resolution (or 8x the grid without an image). Returns the
    (H, W', 3) float array; writes a PNG when out_path is set.
    """
    gh, gw = map_set.grid
    if image is not None:
        img = image.squeeze(0) if image.ndim == 4 else image
        size = tuple(img.shape[-2:])
    else:
        img = None
        size = (gh * 8, gw * 8)
    panels = []
    if img is not None:
        arr = img.detach().cpu().numpy()
        arr = np.transpose(arr, (1, 2, 0))
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        panels.append(np.clip(arr, 0.0, 1.0))
    for h in range(map_set.num_heads):
        flat = upsample_nearest(_normalize_map(map_set.maps[h]), size)
        panels.append(np.repeat(flat[:, :, None], 3, axis=2))
    gap = np.ones((size[0], 2, 3))
    row = []
    for i, p in enumerate(panels):
        if i:
            row.append(gap)
        row.append(p)
    out = np.concatenate(row, axis=1)
    if out_path is not None:
        save_rgb_png(out, out_path)
    return out
