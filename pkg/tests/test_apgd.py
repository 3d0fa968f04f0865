"""APGD: checkpoint schedule, best-loss tracking, FGSM equivalence, and the
analytic linear-model optimum."""

import pytest
import torch
import torch.nn as nn

from conftest import linear_probe, rand_batch
from robustlab.attacks.apgd import APGDConfig, apgd, default_checkpoints
from robustlab.attacks.fgsm import fgsm
from robustlab.attacks.losses import LossSpec, margin_loss
from robustlab.attacks.threat import ThreatModel, perturbation_norms
from robustlab.errors import ConfigurationError

SHAPE = (3, 4, 4)


def _toy_mlp(num_classes, seed):
    torch.manual_seed(seed)
    d = 3 * 4 * 4
    return nn.Sequential(
        nn.Flatten(), nn.Linear(d, 24), nn.Tanh(), nn.Linear(24, num_classes)
    ).eval()


def test_default_checkpoints_at_100():
    # exact fraction recursion: 0.22, 0.41, 0.57, 0.70, 0.80, 0.87, 0.93, 0.99
    assert default_checkpoints(100) == (22, 41, 57, 70, 80, 87, 93, 99)


@pytest.mark.parametrize("n", [1, 2, 5, 10, 25, 50, 300])
def test_default_checkpoints_properties(n):
    ks = default_checkpoints(n)
    assert all(1 <= k <= n for k in ks)
    assert all(b > a for a, b in zip(ks, ks[1:]))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        APGDConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        APGDConfig(momentum=1.0)
    with pytest.raises(ConfigurationError):
        APGDConfig(initial_step_fraction=0.0)
    with pytest.raises(ConfigurationError):
        APGDConfig(restarts=0)
    with pytest.raises(ConfigurationError):
        APGDConfig(iterations=10, checkpoints=(3, 3, 7))
    with pytest.raises(ConfigurationError):
        APGDConfig(iterations=10, checkpoints=(5, 12))
    assert APGDConfig(iterations=10, checkpoints=(3, 7)).schedule() == (3, 7)


def test_best_loss_history_monotone():
    config = APGDConfig(iterations=30)
    instances = 0
    for seed in range(20):
        kind = ("linf", "l2", "l1")[seed % 3]
        eps = {"linf": 0.08, "l2": 0.5, "l1": 4.0}[kind]
        model = (linear_probe(SHAPE, 4, seed) if seed % 2
                 else _toy_mlp(4, seed))
        batch = rand_batch(4, SHAPE, seed=100 + seed)
        labels = torch.randint(0, 4, (4,),
                               generator=torch.Generator().manual_seed(seed))
        out = apgd(model, batch, labels, ThreatModel(kind, eps), config,
                   record_history=True)
        hist = out.loss_history
        assert hist.shape[0] == config.iterations + 1
        assert bool((hist[1:] >= hist[:-1] - 1e-7).all())
        assert torch.allclose(hist[-1], out.best_loss)
        instances += 1
    assert instances == 20


def test_best_point_realizes_best_loss():
    # margin of the returned iterate equals the reported best loss
    model = _toy_mlp(4, 3)
    batch = rand_batch(6, SHAPE, seed=3)
    labels = torch.randint(0, 4, (6,), generator=torch.Generator().manual_seed(9))
    out = apgd(model, batch, labels, ThreatModel("linf", 0.06),
               APGDConfig(iterations=25))
    with torch.no_grad():
        m = margin_loss(model(out.x_adv), labels)
    assert torch.allclose(m, out.best_loss, atol=1e-6)
    assert bool(((m >= 0) == out.success).all())


@pytest.mark.parametrize("kind,eps", [("linf", 0.05), ("l2", 0.4), ("l1", 3.0)])
def test_feasibility(kind, eps):
    model = _toy_mlp(5, 11)
    batch = rand_batch(5, SHAPE, seed=11, lo=0.0, hi=1.0)
    labels = torch.randint(0, 5, (5,), generator=torch.Generator().manual_seed(1))
    out = apgd(model, batch, labels, ThreatModel(kind, eps),
               APGDConfig(iterations=20, random_init=True))
    assert float(out.residual.max()) <= 1e-5
    norms = perturbation_norms(out.x_adv, batch, kind)
    assert float(norms.max()) <= eps * (1 + 1e-5)
    assert float(out.x_adv.min()) >= 0.0 and float(out.x_adv.max()) <= 1.0


def test_deterministic():
    model = _toy_mlp(4, 5)
    batch = rand_batch(4, SHAPE, seed=5)
    labels = torch.randint(0, 4, (4,), generator=torch.Generator().manual_seed(2))
    config = APGDConfig(iterations=15, restarts=2, seed=123)
    a = apgd(model, batch, labels, ThreatModel("linf", 0.05), config)
    b = apgd(model, batch, labels, ThreatModel("linf", 0.05), config)
    assert torch.equal(a.x_adv, b.x_adv)
    assert torch.equal(a.best_loss, b.best_loss)


def test_restarts_never_hurt():
    model = _toy_mlp(4, 6)
    batch = rand_batch(8, SHAPE, seed=6)
    labels = torch.randint(0, 4, (8,), generator=torch.Generator().manual_seed(3))
    threat = ThreatModel("l2", 0.6)
    one = apgd(model, batch, labels, threat, APGDConfig(iterations=15, seed=7))
    three = apgd(model, batch, labels, threat,
                 APGDConfig(iterations=15, restarts=3, seed=7))
    assert bool((three.best_loss >= one.best_loss - 1e-7).all())


def test_fgsm_bit_exact_single_step():
    # 1 iteration, zero momentum, half step fraction reproduces the classic
    # single step exactly, bit for bit, on convex-objective targets
    for seed, eps in [(0, 0.05), (1, 4.0 / 255.0), (2, 0.2)]:
        model = linear_probe(SHAPE, 5, seed)
        batch = rand_batch(16, SHAPE, seed=50 + seed)
        labels = torch.randint(0, 5, (16,),
                               generator=torch.Generator().manual_seed(seed))
        ref = fgsm(model, batch, labels, eps)
        out = apgd(model, batch, labels, ThreatModel("linf", eps),
                   APGDConfig(iterations=1, momentum=0.0,
                              initial_step_fraction=0.5),
                   loss=LossSpec("cross_entropy"))
        assert torch.equal(out.x_adv, ref.x_adv), seed


def test_linear_linf_optimum_at_sign_corner():
    # binary linear model: the margin maximum over the linf ball sits at
    # x + eps * sign(w_other - w_true) with value margin(x) + eps*||dw||_1
    eps = 0.1
    for seed in range(5):
        model = linear_probe(SHAPE, 2, 200 + seed)
        w = model[1].weight.detach()
        batch = rand_batch(6, SHAPE, seed=300 + seed, lo=0.3, hi=0.7)
        labels = torch.randint(0, 2, (6,),
                               generator=torch.Generator().manual_seed(seed))
        out = apgd(model, batch, labels, ThreatModel("linf", eps),
                   APGDConfig(iterations=20))
        flat = batch.reshape(6, -1)
        with torch.no_grad():
            clean_all = margin_loss(model(batch), labels)
        for i in range(6):
            y = int(labels[i])
            dw = w[1 - y] - w[y]
            clean = clean_all[i]
            optimum = float(clean) + eps * float(dw.abs().sum())
            assert abs(float(out.best_loss[i]) - optimum) <= 1e-5
            corner = (flat[i] + eps * dw.sign()).reshape(SHAPE)
            assert float((out.x_adv[i] - corner).abs().max()) <= 1e-6


def test_linear_linf_upper_bound_multiclass():
    # no feasible point can beat max_i [margin_i(x) + eps*||w_i - w_y||_1]
    eps = 0.07
    model = linear_probe(SHAPE, 5, 9)
    w = model[1].weight.detach()
    batch = rand_batch(8, SHAPE, seed=9, lo=0.2, hi=0.8)
    labels = torch.randint(0, 5, (8,), generator=torch.Generator().manual_seed(4))
    out = apgd(model, batch, labels, ThreatModel("linf", eps),
               APGDConfig(iterations=30, restarts=2))
    with torch.no_grad():
        logits = model(batch)
    for i in range(8):
        y = int(labels[i])
        bound = max(
            float(logits[i, j] - logits[i, y])
            + eps * float((w[j] - w[y]).abs().sum())
            for j in range(5) if j != y
        )
        assert float(out.best_loss[i]) <= bound + 1e-5


def test_success_only_freezes_at_first_hit():
    model = _toy_mlp(4, 21)
    batch = rand_batch(10, SHAPE, seed=21)
    labels = torch.randint(0, 4, (10,),
                           generator=torch.Generator().manual_seed(5))
    out = apgd(model, batch, labels, ThreatModel("linf", 0.3),
               APGDConfig(iterations=40), success_only=True)
    with torch.no_grad():
        m = margin_loss(model(out.x_adv), labels)
    assert bool((m[out.success] >= -1e-6).all())
    # frozen examples stop consuming iterations
    if bool(out.success.any()):
        assert int(out.queries_used[out.success].min()) < 41


def test_mask_requires_patchlike_threat():
    model = _toy_mlp(4, 2)
    batch = rand_batch(2, SHAPE, seed=2)
    labels = torch.zeros(2, dtype=torch.long)
    with pytest.raises(ConfigurationError):
        apgd(model, batch, labels, ThreatModel("patch", 2),
             APGDConfig(iterations=2))
    bad_mask = torch.ones(1, 1, 9, 9)
    with pytest.raises(ConfigurationError):
        apgd(model, batch, labels, ThreatModel("patch", 2),
             APGDConfig(iterations=2), mask=bad_mask)


def test_masked_attack_respects_support():
    model = _toy_mlp(4, 13)
    batch = rand_batch(4, SHAPE, seed=13)
    labels = torch.randint(0, 4, (4,), generator=torch.Generator().manual_seed(6))
    mask = torch.zeros(1, 1, 4, 4)
    mask[..., 1:3, 1:3] = 1.0
    out = apgd(model, batch, labels, ThreatModel("patch", 2),
               APGDConfig(iterations=10, random_init=True), mask=mask)
    off = (out.x_adv - batch) * (1 - mask)
    assert float(off.abs().max()) == 0.0
    assert float(out.x_adv.min()) >= 0.0 and float(out.x_adv.max()) <= 1.0
