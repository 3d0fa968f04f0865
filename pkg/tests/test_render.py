"""Rendering helpers: normalization, upsampling, PNG round trips."""

import numpy as np
import torch

from robustlab.render import (
    diverging_rgb,
    load_image,
    map_grid_text,
    normalize_pair,
    save_gray_png,
    save_image_png,
    save_rgb_png,
    upsample_nearest,
)


def test_normalize_pair_joint_scale():
    a = torch.tensor([[0.0, 2.0]])
    b = torch.tensor([[4.0, 8.0]])
    na, nb = normalize_pair(a, b)
    assert na.tolist() == [[0.0, 0.25]]
    assert nb.tolist() == [[0.5, 1.0]]


def test_normalize_pair_degenerate_maps_to_half():
    a = torch.full((2, 2), 3.0)
    b = torch.full((3, 3), 3.0)
    na, nb = normalize_pair(a, b)
    assert (na == 0.5).all() and (nb == 0.5).all()
    assert na.shape == (2, 2) and nb.shape == (3, 3)


def test_upsample_nearest_blocky():
    v = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    up = upsample_nearest(v, (4, 4))
    assert up.shape == (4, 4)
    assert (up[:2, :2] == 1.0).all()
    assert (up[2:, 2:] == 4.0).all()


def test_diverging_rgb_extremes():
    v = np.array([[1.0, -1.0, 0.0, 0.5]])
    rgb = diverging_rgb(v)
    assert rgb.shape == (1, 4, 3)
    assert tuple(rgb[0, 0]) == (1.0, 0.0, 0.0)    # strongest positive: red
    assert tuple(rgb[0, 1]) == (0.0, 0.0, 1.0)    # strongest negative: blue
    assert tuple(rgb[0, 2]) == (1.0, 1.0, 1.0)    # zero: white
    assert tuple(rgb[0, 3]) == (1.0, 0.5, 0.5)    # halfway to red
    assert (diverging_rgb(np.zeros((2, 2))) == 1.0).all()


def test_gray_png_roundtrip(tmp_path):
    values = np.linspace(0.0, 1.0, 64).reshape(8, 8)
    path = save_gray_png(values, str(tmp_path / "gray.png"))
    img = load_image(path)
    assert img.shape == (3, 8, 8)
    # grayscale loads with equal channels, 8-bit quantization error only
    assert torch.equal(img[0], img[1])
    assert (img[0] - torch.tensor(values, dtype=torch.float32)).abs().max() < 1 / 255


def test_rgb_png_roundtrip(tmp_path):
    g = torch.Generator().manual_seed(0)
    arr = torch.rand(6, 5, 3, generator=g).numpy()
    path = save_rgb_png(arr, str(tmp_path / "rgb.png"))
    img = load_image(path)
    assert img.shape == (3, 6, 5)
    back = img.permute(1, 2, 0).numpy()
    assert np.abs(back - arr).max() < 1 / 255


def test_save_image_png_handles_layouts(tmp_path):
    rgb = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(1))
    p1 = save_image_png(rgb, str(tmp_path / "a.png"))
    assert load_image(p1).shape == (3, 8, 8)
    gray = torch.rand(1, 8, 8, generator=torch.Generator().manual_seed(2))
    save_image_png(gray, str(tmp_path / "b.png"))
    flat = torch.rand(8, 8, generator=torch.Generator().manual_seed(3))
    save_image_png(flat, str(tmp_path / "c.png"))
    assert load_image(str(tmp_path / "c.png")).shape == (3, 8, 8)


def test_load_image_resizes(tmp_path):
    arr = np.zeros((8, 8), dtype=np.float64)
    path = save_gray_png(arr, str(tmp_path / "small.png"))
    img = load_image(path, size=(16, 24))
    assert img.shape == (3, 16, 24)


def test_map_grid_text_layout():
    text = map_grid_text(torch.tensor([[0.5, 1.0], [0.1234567, 2.0]]))
    lines = text.split("\n")
    assert lines[0] == "0.5\t1"
    assert lines[1].startswith("0.123457")  # six significant digits
    assert len(lines) == 2
