"""Patch grids, frames, loss maps, and the patch/frame attacks."""

import math

import pytest
import torch

from robustlab.attacks.losses import LossSpec, loss_value, misclassified
from robustlab.errors import ConfigurationError
from robustlab.patches import (
    FrameMask,
    PatchGrid,
    Placement,
    enumerate_placements,
    fixed_position_patch_attack,
    frame_attack,
    greedy_patch_attack,
    patch_loss_map,
    render_loss_map_pair,
)

from conftest import linear_probe, rand_batch

MARGIN = LossSpec("margin")


def _margin(model, x, y):
    with torch.no_grad():
        return loss_value(model(x), y, MARGIN)


# ---------------------------------------------------------------- geometry


def test_grid_counts_at_full_resolution():
    aligned = PatchGrid((224, 224), 16, "aligned")
    shifted = PatchGrid((224, 224), 16, "non_aligned")
    assert aligned.shape == (14, 14) and aligned.count == 196
    assert shifted.shape == (13, 13) and shifted.count == 169
    assert len(enumerate_placements(aligned)) == 196
    assert len(enumerate_placements(shifted)) == 169


def test_grid_counts_small():
    assert PatchGrid((32, 32), 8, "aligned").count == 16
    assert PatchGrid((32, 32), 8, "non_aligned").count == 9


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        PatchGrid((32, 32), 0)
    with pytest.raises(ConfigurationError):
        PatchGrid((32, 30), 8)
    with pytest.raises(ConfigurationError):
        PatchGrid((32, 32), 8, "diagonal")
    with pytest.raises(ConfigurationError):
        PatchGrid((32, 32), 7, "non_aligned")  # odd token size
    with pytest.raises(ConfigurationError):
        PatchGrid((8, 8), 8, "non_aligned")  # single token


def test_aligned_placements_tile_disjointly():
    grid = PatchGrid((32, 32), 8, "aligned")
    total = torch.zeros(1, 1, 32, 32)
    for pl in enumerate_placements(grid):
        total += pl.mask((32, 32))
    assert torch.equal(total, torch.ones_like(total))


def test_non_aligned_placements_cover_four_quarters():
    grid = PatchGrid((32, 32), 8, "non_aligned")
    for pl in enumerate_placements(grid):
        m = pl.mask((32, 32))[0, 0]
        overlaps = []
        for i in range(4):
            for j in range(4):
                a = m[8 * i:8 * i + 8, 8 * j:8 * j + 8].sum().item()
                if a:
                    overlaps.append(a)
        # a shifted patch covers exactly one quarter of four tokens
        assert sorted(overlaps) == [16.0, 16.0, 16.0, 16.0]


def test_placements_row_major_order():
    grid = PatchGrid((32, 32), 8, "aligned")
    pls = enumerate_placements(grid)
    assert (pls[0].top, pls[0].left) == (0, 0)
    assert (pls[1].top, pls[1].left) == (0, 8)
    assert (pls[4].top, pls[4].left) == (8, 0)
    shifted = enumerate_placements(PatchGrid((32, 32), 8, "non_aligned"))
    assert (shifted[0].top, shifted[0].left) == (4, 4)


def test_placement_validation():
    with pytest.raises(ConfigurationError):
        Placement(top=-1, left=0, size=4)
    with pytest.raises(ConfigurationError):
        Placement(top=0, left=0, size=0)
    with pytest.raises(ConfigurationError):
        Placement(top=30, left=0, size=4).check_inside((32, 32))
    m = Placement(top=2, left=3, size=4).mask((16, 16))
    assert m.shape == (1, 1, 16, 16)
    assert m.sum().item() == 16.0
    assert m[0, 0, 2:6, 3:7].min().item() == 1.0


def test_frame_mask_pixel_count():
    fm = FrameMask((224, 224), 2)
    assert fm.pixel_count == 1776
    assert fm.mask().sum().item() == 1776.0
    for h, w, v in [(32, 32, 2), (16, 24, 3), (8, 8, 1)]:
        fm = FrameMask((h, w), v)
        assert fm.mask().sum().item() == float(fm.pixel_count)
    assert FrameMask((32, 32), 0).pixel_count == 0


def test_frame_mask_validation():
    with pytest.raises(ConfigurationError):
        FrameMask((32, 32), -1)
    with pytest.raises(ConfigurationError):
        FrameMask((32, 32), 16)  # nothing left inside


# ---------------------------------------------------------------- loss maps


def test_loss_map_shape_and_floor():
    model = linear_probe((3, 8, 8), 3, seed=0)
    x = rand_batch(1, (3, 8, 8), seed=1)
    y = torch.tensor([0])
    grid = PatchGrid((8, 8), 4, "aligned")
    lm = patch_loss_map(model, x, y, grid, iterations=8, seed=0)
    assert lm.values.shape == grid.shape == (2, 2)
    assert lm.iterations == 8
    clean = _margin(model, x, y)[0]
    # the clean content is the starting point, so no cell falls below it
    assert (lm.values >= clean - 1e-6).all()


def test_loss_map_zero_iterations_is_clean_margin():
    model = linear_probe((3, 8, 8), 3, seed=0)
    x = rand_batch(1, (3, 8, 8), seed=2)
    y = torch.tensor([1])
    grid = PatchGrid((8, 8), 4, "aligned")
    lm = patch_loss_map(model, x, y, grid, iterations=0)
    clean = float(_margin(model, x, y)[0])
    assert lm.iterations == 0
    assert torch.allclose(lm.values, torch.full((2, 2), clean))


def test_loss_map_accepts_chw_image():
    model = linear_probe((3, 8, 8), 3, seed=0)
    x = rand_batch(1, (3, 8, 8), seed=3)[0]
    grid = PatchGrid((8, 8), 4, "aligned")
    lm = patch_loss_map(model, x, 0, grid, iterations=2)
    assert lm.values.shape == (2, 2)


def test_loss_map_rejects_batch_and_size_mismatch():
    model = linear_probe((3, 8, 8), 3, seed=0)
    grid = PatchGrid((8, 8), 4, "aligned")
    with pytest.raises(ConfigurationError):
        patch_loss_map(model, rand_batch(2, (3, 8, 8), seed=0),
                       torch.tensor([0, 1]), grid)
    with pytest.raises(ConfigurationError):
        patch_loss_map(model, rand_batch(1, (3, 16, 16), seed=0),
                       torch.tensor([0]), grid)


# ---------------------------------------------------------------- attacks


def _support(x_adv, x):
    """(N,H,W) bool map of changed pixels."""
    return (x_adv - x).abs().sum(dim=1) > 0


def test_fixed_position_attack_stays_inside_placement():
    model = linear_probe((3, 8, 8), 3, seed=4)
    x = rand_batch(4, (3, 8, 8), seed=5)
    y = torch.tensor([0, 1, 2, 0])
    pl = Placement(top=2, left=2, size=4)
    out = fixed_position_patch_attack(model, x, y, pl, iterations=12, seed=0)
    off = 1.0 - pl.mask((8, 8))
    assert torch.equal((out.x_adv - x) * off, torch.zeros_like(x))
    assert out.x_adv.min() >= 0.0 and out.x_adv.max() <= 1.0
    assert torch.allclose(out.best_loss, _margin(model, out.x_adv, y),
                          atol=1e-6)
    adv_wrong = misclassified(model(out.x_adv), y)
    assert torch.equal(out.success, adv_wrong)


def test_fixed_position_attack_rejects_outside_placement():
    model = linear_probe((3, 8, 8), 3, seed=4)
    x = rand_batch(2, (3, 8, 8), seed=5)
    y = torch.tensor([0, 1])
    with pytest.raises(ConfigurationError):
        fixed_position_patch_attack(model, x, y, Placement(6, 6, 4),
                                    iterations=4)


def test_greedy_attack_confined_to_one_placement():
    model = linear_probe((3, 8, 8), 3, seed=6)
    x = rand_batch(4, (3, 8, 8), seed=7)
    y = torch.tensor([1, 2, 0, 1])
    grid = PatchGrid((8, 8), 4, "aligned")
    out = greedy_patch_attack(model, x, y, grid, phase1_iters=4,
                              keep_fraction=0.5, phase2_iters=8, seed=0)
    masks = [pl.mask((8, 8))[0, 0].bool() for pl in enumerate_placements(grid)]
    sup = _support(out.x_adv, x)
    for i in range(4):
        assert any((sup[i] & ~m).sum() == 0 for m in masks)
    assert out.x_adv.min() >= 0.0 and out.x_adv.max() <= 1.0
    assert (out.queries_used > 0).all()
    assert torch.allclose(out.best_loss, _margin(model, out.x_adv, y),
                          atol=1e-6)


def test_greedy_phase1_only_matches_fixed_position_attacks():
    model = linear_probe((3, 8, 8), 3, seed=8)
    x = rand_batch(3, (3, 8, 8), seed=9)
    y = torch.tensor([0, 2, 1])
    grid = PatchGrid((8, 8), 4, "aligned")
    iters = 6
    out = greedy_patch_attack(model, x, y, grid, phase1_iters=iters,
                              keep_fraction=1.0, phase2_iters=0, seed=3)
    per = [
        fixed_position_patch_attack(model, x, y, pl, iterations=iters,
                                    seed=3 + idx)
        for idx, pl in enumerate(enumerate_placements(grid))
    ]
    best = torch.stack([o.best_loss for o in per]).max(dim=0).values
    assert torch.allclose(out.best_loss, best, atol=1e-6)
    any_success = torch.stack([o.success for o in per]).any(dim=0)
    assert torch.equal(out.success, any_success)


def test_frame_attack_confined_to_border():
    model = linear_probe((3, 8, 8), 3, seed=10)
    x = rand_batch(3, (3, 8, 8), seed=11)
    y = torch.tensor([0, 1, 2])
    out = frame_attack(model, x, y, width=1, iterations=10, restarts=2, seed=0)
    inside = 1.0 - FrameMask((8, 8), 1).mask()
    assert torch.equal((out.x_adv - x) * inside, torch.zeros_like(x))
    assert out.x_adv.min() >= 0.0 and out.x_adv.max() <= 1.0
    assert torch.allclose(out.best_loss, _margin(model, out.x_adv, y),
                          atol=1e-6)


def test_frame_attack_zero_width_returns_clean():
    model = linear_probe((3, 8, 8), 3, seed=10)
    x = rand_batch(3, (3, 8, 8), seed=12)
    y = torch.tensor([0, 1, 2])
    out = frame_attack(model, x, y, width=0, iterations=10)
    assert torch.equal(out.x_adv, x)
    assert torch.equal(out.best_loss, _margin(model, x, y))
    assert torch.equal(out.success, misclassified(model(x), y))


def test_frame_attack_deterministic():
    model = linear_probe((3, 8, 8), 3, seed=10)
    x = rand_batch(2, (3, 8, 8), seed=13)
    y = torch.tensor([1, 0])
    a = frame_attack(model, x, y, width=1, iterations=8, restarts=2, seed=5)
    b = frame_attack(model, x, y, width=1, iterations=8, restarts=2, seed=5)
    assert torch.equal(a.x_adv, b.x_adv)
    assert torch.equal(a.best_loss, b.best_loss)


# ---------------------------------------------------------------- rendering


def test_render_loss_map_pair_shared_scale(tmp_path):
    grid_a = PatchGrid((16, 16), 4, "aligned")
    grid_s = PatchGrid((16, 16), 4, "non_aligned")
    model = linear_probe((3, 16, 16), 3, seed=14)
    x = rand_batch(1, (3, 16, 16), seed=15)
    y = torch.tensor([0])
    lm_a = patch_loss_map(model, x, y, grid_a, iterations=3, seed=0)
    lm_s = patch_loss_map(model, x, y, grid_s, iterations=3, seed=0)
    prefix = str(tmp_path / "map")
    a, b = render_loss_map_pair(lm_a, lm_s, (16, 16), out_prefix=prefix)
    assert a.shape == (16, 16) and b.shape == (16, 16)
    lo = min(a.min().item(), b.min().item())
    hi = max(a.max().item(), b.max().item())
    assert lo >= 0.0 and hi <= 1.0
    assert math.isclose(hi, 1.0, abs_tol=1e-6)
    # nearest upsampling keeps each cell uniform
    assert (a[0:4, 0:4] == a[0, 0]).all()
    assert (tmp_path / "map_aligned.png").exists()
    assert (tmp_path / "map_shifted.png").exists()
