"""Small rendering helpers shared by loss maps, attention maps, and
perturbation heatmaps. Pure numpy plus PNG output via Pillow."""

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def _to_numpy(values):
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def normalize_pair(a, b):
    """Joint min-max normalization of two arrays to [0,1]; a degenerate
    (constant) pair maps to 0.5 everywhere."""
    a, b = _to_numpy(a).astype(np.float64), _to_numpy(b).astype(np.float64)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return np.full_like(a, 0.5), np.full_like(b, 0.5)
    return (a - lo) / (hi - lo), (b - lo) / (hi - lo)


def upsample_nearest(values, size):
    """Nearest-neighbor upsample of a 2D array to (H, W)."""
    t = torch.as_tensor(_to_numpy(values), dtype=torch.float32)
    t = t.unsqueeze(0).unsqueeze(0)
    out = F.interpolate(t, size=size, mode="nearest")
    return out.squeeze(0).squeeze(0).numpy()


def diverging_rgb(values):
    """Signed 2D map -> (H,W,3) float RGB: zero white, negative blue,
    positive red, full saturation at max |value|."""
    v = _to_numpy(values).astype(np.float64)
    peak = np.abs(v).max()
    if peak == 0:
        return np.ones(v.shape + (3,))
    s = v / peak
    rgb = np.ones(v.shape + (3,))
    pos = np.clip(s, 0, None)
    neg = np.clip(-s, 0, None)
    # red channel survives positive values, blue survives negative ones
    rgb[..., 1] -= pos + neg
    rgb[..., 2] -= pos
    rgb[..., 0] -= neg
    return np.clip(rgb, 0.0, 1.0)


def save_gray_png(values, path):
    """Save a [0,1] 2D array as an 8-bit grayscale PNG."""
    arr = np.clip(_to_numpy(values), 0.0, 1.0)
    Image.fromarray((arr * 255).round().astype(np.uint8), mode="L").save(path)
    return path


def save_rgb_png(values, path):
    """Save a [0,1] (H,W,3) array as an 8-bit RGB PNG."""
    arr = np.clip(_to_numpy(values), 0.0, 1.0)
    Image.fromarray((arr * 255).round().astype(np.uint8), mode="RGB").save(path)
    return path


def save_image_png(image, path):
    """Save a (C,H,W) [0,1] tensor as a PNG (grayscale or RGB)."""
    arr = _to_numpy(image)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
        if arr.shape[2] == 1:
            return save_gray_png(arr[..., 0], path)
        return save_rgb_png(arr, path)
    return save_gray_png(arr, path)


def load_image(path, size=None):
    """Load an image file as a (3,H,W) float tensor in [0,1]."""
    img = Image.open(path).convert("RGB")
    if size is not None:
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def map_grid_text(values):
    """Structured text form of a 2D map: one row per line, tab-separated."""
    v = _to_numpy(values)
    return "\n".join("\t".join(f"{x:.6g}" for x in row) for row in v)
