import csv
import math

import numpy as np
import pytest
import torch

from dnarecon.geometry import GeometryConfig, radon_forward
from dnarecon.losses import (
    K1,
    K2,
    PSNR_CAP_DB,
    GeneratorTerms,
    LossWeights,
    MetricsReport,
    adversarial_loss_g,
    critic_objective,
    generator_objective,
    generator_terms,
    gradient_penalty,
    mse_loss,
    psnr,
    rmse,
    sinogram_consistency_loss,
    ssim,
    ssim_per_image,
    ssim_value,
    structural_loss,
    windowed_ssim,
)
from dnarecon.tensor_core import grad_check
from dnarecon.training import AdamState, TrainConfig, adam_step

from oracles import mse_loop, ssim_global


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_q, w.lambda_p, w.lambda_r, w.lambda_gp) == (5e-3, 0.1, 1.0, 10.0)
    for bad in (-1.0, math.nan, math.inf):
        with pytest.raises(ValueError):
            LossWeights(lambda_p=bad)


# -- mse ---------------------------------------------------------------------


def test_mse_examples():
    x = torch.rand(2, 1, 4, 4)
    assert float(mse_loss(x, x)) == 0
    assert float(mse_loss(torch.tensor([[[[1.0, 0.0]]]]), torch.zeros(1, 1, 1, 2))) == 0.5
    with pytest.raises(ValueError, match="shape"):
        mse_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_mse_matches_loop():
    rng = np.random.default_rng(0)
    y, x = rng.random((2, 3, 1, 5, 5))
    assert float(mse_loss(torch.as_tensor(y), torch.as_tensor(x))) == pytest.approx(mse_loop(y, x), abs=1e-12)


# -- ssim --------------------------------------------------------------------


def test_ssim_constants():
    assert (K1, K2) == (0.01, 0.03)


def test_ssim_identity_is_exactly_one():
    x = torch.rand(3, 1, 16, 16)
    assert torch.all(ssim_per_image(x, x) == 1.0)
    assert float(ssim(x, x)) == 1.0


def test_ssim_constant_half_vs_its_complement():
    x = torch.full((1, 1, 8, 8), 0.5, dtype=torch.float64)
    assert float(ssim(x, 1 - x)) == 1.0


def test_ssim_two_by_two_case():
    Y = [[0.0, 0.0], [1.0, 1.0]]
    X = [[0.0, 0.0], [0.0, 0.0]]
    want = ssim_global(Y, X)
    # by hand: mu_y = 0.5, var_y = 0.25, everything else zero
    assert want == pytest.approx((1e-4 * 9e-4) / ((0.25 + 1e-4) * (0.25 + 9e-4)), rel=1e-12)
    got = float(ssim(torch.tensor(Y, dtype=torch.float64), torch.tensor(X, dtype=torch.float64)))
    assert abs(got - want) <= 1e-6
    got32 = float(ssim(torch.tensor(Y), torch.tensor(X)))
    assert abs(got32 - want) <= 1e-6


def test_ssim_random_pairs_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        y, x = rng.random((2, 7, 9))
        assert float(ssim(torch.as_tensor(y), torch.as_tensor(x))) == pytest.approx(ssim_global(y, x), abs=1e-12)
    y, x = rng.random((2, 3, 6, 6))
    per = ssim_per_image(torch.as_tensor(y), torch.as_tensor(x))
    np.testing.assert_allclose(per.numpy(), [ssim_global(a, b) for a, b in zip(y, x)], atol=1e-12)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    x = torch.as_tensor(rng.random((4, 1, 12, 12)))
    for scale in (1e-3, 1e-2, 0.1, 0.5):
        y = (x + scale * torch.as_tensor(rng.normal(size=x.shape))).clamp(0, 1)
        assert abs(float(ssim(x, y)) - float(ssim(y, x))) <= 1e-7
        assert float(ssim(x, y)) < 1.0


def test_ssim_shape_error():
    with pytest.raises(ValueError):
        ssim(torch.zeros(4, 4), torch.zeros(4, 5))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_grad_check(seed):
    gen = torch.Generator().manual_seed(seed)
    y, x = torch.rand(2, 2, 1, 6, 6, generator=gen)
    assert grad_check(ssim, [y, x], seed=seed) <= 1e-2


def test_structural_loss():
    x = torch.rand(1, 1, 8, 8)
    assert float(structural_loss(x, x)) == 0.0
    c = torch.full((1, 1, 8, 8), 0.3)
    assert float(structural_loss(c, c.clone())) == 0.0
    y = torch.rand(1, 1, 8, 8)
    assert float(structural_loss(y, x)) == pytest.approx(1 - float(ssim(y, x)), abs=1e-7)


def test_windowed_ssim_is_separate_and_bounded():
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    assert windowed_ssim(x, x).shape == (2,)
    assert float(windowed_ssim(x, x).mean()) == pytest.approx(1.0, abs=1e-12)
    y = (x + 0.1 * torch.randn_like(x)).clamp(0, 1)
    assert torch.all((windowed_ssim(x, y) >= -1) & (windowed_ssim(x, y) < 1))
    assert ssim_value(x[0, 0], y[0, 0], windowed=True) != ssim_value(x[0, 0], y[0, 0])


# -- adversarial and sinogram terms -----------------------------------------


def test_adversarial_loss_examples():
    assert float(adversarial_loss_g(torch.zeros(2))) == 0
    s = torch.tensor([1.0, 3.0], requires_grad=True)
    loss = adversarial_loss_g(s)
    assert float(loss.detach()) == -2.0
    loss.backward()
    assert torch.equal(s.grad, torch.full((2,), -0.5))


def test_sinogram_consistency_examples():
    geo = GeometryConfig(16, 4)
    img = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    sino = radon_forward(img, geo)
    assert float(sinogram_consistency_loss(img, sino, geo)) == 0
    assert float(sinogram_consistency_loss(torch.zeros_like(img), sino, geo)) == pytest.approx(float((sino**2).mean()))
    with pytest.raises(ValueError):
        sinogram_consistency_loss(img, sino[..., :3, :], geo)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sinogram_consistency_grad_check(seed):
    geo = GeometryConfig(16, 4)
    gen = torch.Generator().manual_seed(seed)
    img = torch.rand(1, 1, 16, 16, generator=gen)
    sino = torch.rand(1, 1, 4, 16, generator=gen)
    # the loss is quadratic, so a central difference is exact at any step; a
    # large step keeps float32 cancellation out of the reference
    assert grad_check(lambda i, s: sinogram_consistency_loss(i, s, geo), [img, sino], eps=0.1, seed=seed) <= 1e-2


# -- gradient penalty --------------------------------------------------------


def linear_critic(a):
    return lambda x: (x * a).flatten(1).sum(1)


@pytest.mark.parametrize("seed", range(5))
def test_linear_critic_penalty_closed_form(seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64) * (0.05 + 0.1 * seed)
    want = (float(a.norm()) - 1) ** 2
    for draw in range(3):
        real, fake = torch.rand(2, 4, 1, 8, 8, generator=gen, dtype=torch.float64)
        gp = gradient_penalty(linear_critic(a), real, fake, torch.Generator().manual_seed(draw))
        assert abs(float(gp) - want) <= 1e-5


def test_zero_critic_penalty_is_one_and_nonnegative():
    real, fake = torch.rand(2, 3, 1, 8, 8)
    assert float(gradient_penalty(lambda x: 0 * x.flatten(1).sum(1), real, fake)) == 1.0
    critic = lambda x: torch.tanh(x.flatten(1)).pow(2).sum(1)  # noqa: E731
    assert float(gradient_penalty(critic, real, fake).detach()) >= 0


def test_penalty_interpolates_with_per_item_eps():
    seen = []

    def spy(x):
        seen.append(x.detach().clone())
        return x.flatten(1).sum(1)

    real, fake = torch.ones(3, 1, 2, 2, dtype=torch.float64), torch.zeros(3, 1, 2, 2, dtype=torch.float64)
    gradient_penalty(spy, real, fake, torch.Generator().manual_seed(0))
    x = seen[0]
    eps = x[:, 0, 0, 0]
    assert torch.all((eps > 0) & (eps < 1)) and len(set(eps.tolist())) == 3
    assert torch.equal(x, eps.view(3, 1, 1, 1).expand_as(x))  # one eps per item


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_penalty_grad_check(seed):
    gen = torch.Generator().manual_seed(seed)
    real, fake = torch.rand(2, 2, 1, 4, 4, generator=gen)
    w = torch.randn(16, 5, generator=gen) * 0.5
    v = torch.randn(5, generator=gen)

    def gp(w, v):
        critic = lambda x: torch.tanh(x.flatten(1) @ w) @ v  # noqa: E731
        return gradient_penalty(critic, real, fake, torch.Generator().manual_seed(seed))

    assert grad_check(gp, [w, v], seed=seed) <= 1e-2


# -- objectives --------------------------------------------------------------


def test_critic_objective_examples():
    z = torch.zeros(())
    s = torch.tensor([0.7, 0.7])
    assert float(critic_objective(s, s, s, z)) == 0
    assert float(critic_objective(torch.tensor([1.0]), torch.tensor([0.0]), torch.tensor([0.0]), z)) == -2
    assert float(critic_objective(s, s, s, torch.tensor(0.3), lambda_gp=10)) == pytest.approx(3.0)
    lower = critic_objective(s, s - 0.1, s, z)
    assert float(lower) < float(critic_objective(s, s, s, z))


def make_terms(seed):
    gen = torch.Generator().manual_seed(seed)
    return GeneratorTerms(*torch.rand(8, generator=gen, dtype=torch.float64))


def test_generator_objective_structure():
    t = make_terms(0)
    zero = LossWeights(0, 0, 0, 0)
    assert float(generator_objective(t, zero)) == pytest.approx(float(t.mse1 + t.mse2), abs=1e-15)
    w = LossWeights(0.2, 0.3, 0.4)
    want = 0.2 * (t.adv1 + t.adv2) + 0.3 * (2 - t.ssim1 - t.ssim2) + 0.4 * (t.sino1 + t.sino2) + t.mse1 + t.mse2
    assert float(generator_objective(t, w)) == pytest.approx(float(want), abs=1e-14)


@pytest.mark.parametrize("name", ["lambda_q", "lambda_p", "lambda_r"])
def test_generator_objective_is_affine_in_each_weight(name):
    t = make_terms(1)
    vals = [float(generator_objective(t, LossWeights(**{name: lam}))) for lam in (0.0, 1.0, 2.0, 5.0)]
    slope = vals[1] - vals[0]
    assert vals[2] == pytest.approx(vals[0] + 2 * slope) and vals[3] == pytest.approx(vals[0] + 5 * slope)


def test_generator_objective_zero_for_perfect_reconstruction():
    geo = GeometryConfig(16, 4)
    truth = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    sino = radon_forward(truth, geo)
    terms = generator_terms(truth, sino, truth, truth, geo)
    assert float(generator_objective(terms, LossWeights(0, 0, 0))) == 0
    assert float(generator_objective(terms, LossWeights(0, 1.0, 1.0))) == 0


def test_generator_objective_descends_under_one_adam_step():
    # tiny affine "generator": x -> w * fbp-like input + b; the critic is frozen
    geo = GeometryConfig(16, 4)
    drops = []
    for seed in range(5):
        gen = torch.Generator().manual_seed(seed)
        truth = torch.rand(3, 1, 16, 16, generator=gen)
        sino = radon_forward(truth, geo)
        noisy = truth + 0.2 * torch.randn(truth.shape, generator=gen)
        params = {"w": torch.ones(1, 1, 16, 16, requires_grad=True), "b": torch.zeros(1, 1, 16, 16, requires_grad=True)}
        critic_w = torch.randn(256, generator=gen) * 0.01

        def objective():
            g1 = noisy * params["w"] + params["b"]
            g2 = 0.5 * (g1 + noisy)
            scores = lambda x: x.flatten(1) @ critic_w  # noqa: E731
            return generator_objective(generator_terms(truth, sino, g1, g2, geo, scores(g1), scores(g2)), LossWeights())

        before = objective()
        grads = dict(zip(params, torch.autograd.grad(before, list(params.values()))))
        cfg = TrainConfig(lr=1e-3)
        with torch.no_grad():
            adam_step(params, grads, AdamState.for_params(params), cfg)
        drops.append(float(before.detach()) - float(objective().detach()))
    assert np.mean(drops) > 0


# -- metrics -----------------------------------------------------------------


def test_rmse_psnr_examples():
    x = np.random.default_rng(3).random((8, 8))
    assert rmse(x, x) == 0 and psnr(x, x) == math.inf
    assert rmse(x + 0.1, x) == pytest.approx(0.1, abs=1e-12)
    assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(4))


def test_rmse_psnr_against_loop():
    rng = np.random.default_rng(4)
    y, x = rng.random((2, 10, 10))
    e = math.sqrt(mse_loop(y, x))
    assert abs(rmse(y, x) - e) <= 1e-6
    assert abs(psnr(y, x) - 20 * math.log10(1 / e)) <= 1e-6


def test_metrics_report_csv_against_hand_computation(tmp_path):
    truth = [np.full((4, 4), 0.5) for _ in range(3)]
    preds = [truth[0] + 0.1, truth[1] - 0.2, truth[2].copy()]
    rep = MetricsReport.evaluate(preds, truth, ids=["a", "b", "c"])
    path = tmp_path / "r.csv"
    rep.to_csv(path)
    rows = list(csv.reader(open(path, newline="")))
    assert rows[0] == ["image_id", "ssim", "psnr_db", "rmse"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "c", "mean±std"]
    # rmse 0.1, 0.2, 0; psnr 20, 13.9794, capped 99
    rm = [0.1, 0.2, 0.0]
    ps = [20.0, 20 * math.log10(5), PSNR_CAP_DB]
    mean_r = sum(rm) / 3
    std_r = math.sqrt(sum((v - mean_r) ** 2 for v in rm) / 3)
    mean_p = sum(ps) / 3
    std_p = math.sqrt(sum((v - mean_p) ** 2 for v in ps) / 3)
    for row, r, p in zip(rows[1:4], rm, ps):
        assert float(row[3]) == pytest.approx(r, abs=1e-6) and float(row[2]) == pytest.approx(p, abs=1e-6)
    m, s = rows[4][3].split("±")
    assert float(m) == pytest.approx(mean_r, abs=1e-6) and float(s) == pytest.approx(std_r, abs=1e-6)
    m, s = rows[4][2].split("±")
    assert float(m) == pytest.approx(mean_p, abs=1e-6) and float(s) == pytest.approx(std_p, abs=1e-6)


def test_metrics_report_identical_images():
    imgs = [np.random.default_rng(i).random((8, 8)) for i in range(3)]
    rep = MetricsReport.evaluate(imgs, imgs)
    assert rep.ssim == [1.0] * 3 and rep.rmse == [0.0] * 3
    assert rep.mean()["psnr_db"] == PSNR_CAP_DB
    with pytest.raises(ValueError):
        MetricsReport.evaluate(imgs[:2], imgs)
