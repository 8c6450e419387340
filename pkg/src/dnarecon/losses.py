"""Generator and critic objectives, plus SSIM/PSNR/RMSE evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import GeometryConfig, radon_forward
from .tensor_core import as_tensor

K1 = 0.01
K2 = 0.03
PSNR_CAP_DB = 99.0


@dataclass
class LossWeights:
    """Balance of the generator objective terms and the gradient-penalty weight."""

    lambda_q: float = 5e-3  # adversarial
    lambda_p: float = 0.1  # structural (1 - SSIM)
    lambda_r: float = 1.0  # sinogram consistency
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name in ("lambda_q", "lambda_p", "lambda_r", "lambda_gp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(Y, X) -> torch.Tensor:
    """Squared error summed over pixels, divided by batch size times W times H."""
    Y, X = as_tensor(Y), as_tensor(X)
    _same_shape(Y, X, "mse_loss")
    return ((Y - X) ** 2).mean()


def _image_stats(t: torch.Tensor) -> torch.Tensor:
    # [..., H, W] -> [M, H*W]
    return t.reshape(-1, t.shape[-2] * t.shape[-1])


def ssim_per_image(Y, X, R: float = 1.0, k1: float = K1, k2: float = K2) -> torch.Tensor:
    """Global-statistics SSIM of each image in ``[..., H, W]``.

    Means, (population) variances and covariance are taken over the whole
    image; ``C1 = (k1 R)^2`` and ``C2 = (k2 R)^2``.
    """
    Y, X = as_tensor(Y), as_tensor(X)
    _same_shape(Y, X, "ssim")
    y, x = _image_stats(Y), _image_stats(X)
    mu_y, mu_x = y.mean(dim=1), x.mean(dim=1)
    dy, dx = y - mu_y[:, None], x - mu_x[:, None]
    var_y, var_x = (dy * dy).mean(dim=1), (dx * dx).mean(dim=1)
    cov = (dy * dx).mean(dim=1)
    c1, c2 = (k1 * R) ** 2, (k2 * R) ** 2
    return ((2 * mu_y * mu_x + c1) * (2 * cov + c2)) / ((mu_y**2 + mu_x**2 + c1) * (var_y + var_x + c2))


def ssim(Y, X, R: float = 1.0, k1: float = K1, k2: float = K2) -> torch.Tensor:
    """Mean global SSIM over the batch."""
    return ssim_per_image(Y, X, R, k1, k2).mean()


def windowed_ssim(Y, X, R: float = 1.0, window: int = 8, k1: float = K1, k2: float = K2) -> torch.Tensor:
    """SSIM with statistics from ``window x window`` mean pooling (reporting only)."""
    Y, X = as_tensor(Y), as_tensor(X)
    _same_shape(Y, X, "windowed_ssim")
    y = Y.reshape(-1, 1, *Y.shape[-2:])
    x = X.reshape(-1, 1, *X.shape[-2:])
    pool = lambda t: F.avg_pool2d(t, window, stride=1)  # noqa: E731
    mu_y, mu_x = pool(y), pool(x)
    var_y = pool(y * y) - mu_y**2
    var_x = pool(x * x) - mu_x**2
    cov = pool(y * x) - mu_y * mu_x
    c1, c2 = (k1 * R) ** 2, (k2 * R) ** 2
    s = ((2 * mu_y * mu_x + c1) * (2 * cov + c2)) / ((mu_y**2 + mu_x**2 + c1) * (var_y + var_x + c2))
    return s.mean(dim=(1, 2, 3))


def structural_loss(Y, X) -> torch.Tensor:
    return 1.0 - ssim(Y, X)


def adversarial_loss_g(scores) -> torch.Tensor:
    """Generator loss ``-mean(D(G(s)))``."""
    return -as_tensor(scores).mean()


def sinogram_consistency_loss(img_batch, sino_batch, geo: GeometryConfig) -> torch.Tensor:
    """MSE between the measured sinograms and projections of the reconstructions."""
    img_batch, sino_batch = as_tensor(img_batch), as_tensor(sino_batch)
    synth = radon_forward(img_batch, geo)
    _same_shape(synth, sino_batch, "sinogram_consistency_loss")
    return ((synth - sino_batch) ** 2).mean()


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """``mean((||grad_x D(x_hat)||_2 - 1)^2)`` at random points between real and fake images.

    One ``eps ~ U(0, 1)`` per item; ``x_hat = eps * real + (1 - eps) * fake``.
    The result stays differentiable with respect to the critic's parameters.
    """
    _same_shape(real_batch, fake_batch, "gradient_penalty")
    b = real_batch.shape[0]
    eps = torch.rand((b,) + (1,) * (real_batch.dim() - 1), generator=rng, dtype=torch.float64).to(real_batch.dtype)
    x_hat = (eps * real_batch.detach() + (1 - eps) * fake_batch.detach()).requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.reshape(b, -1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_objective(real_scores, fake1_scores, fake2_scores, gp, lambda_gp: float = 10.0) -> torch.Tensor:
    """Critic loss to minimise: both generators' fake scores minus twice the real score, plus the penalty."""
    return (
        as_tensor(fake1_scores).mean()
        + as_tensor(fake2_scores).mean()
        - 2 * as_tensor(real_scores).mean()
        + lambda_gp * as_tensor(gp)
    )


@dataclass
class GeneratorTerms:
    mse1: torch.Tensor
    mse2: torch.Tensor
    ssim1: torch.Tensor
    ssim2: torch.Tensor
    sino1: torch.Tensor
    sino2: torch.Tensor
    adv1: torch.Tensor
    adv2: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in self.__dataclass_fields__}


def generator_terms(
    truth: torch.Tensor,
    sino: torch.Tensor,
    g1_img: torch.Tensor,
    g2_img: torch.Tensor,
    geo: GeometryConfig,
    g1_scores: torch.Tensor | None = None,
    g2_scores: torch.Tensor | None = None,
) -> GeneratorTerms:
    zero = g1_img.new_zeros(())
    return GeneratorTerms(
        mse1=mse_loss(truth, g1_img),
        mse2=mse_loss(truth, g2_img),
        ssim1=ssim(truth, g1_img),
        ssim2=ssim(truth, g2_img),
        sino1=sinogram_consistency_loss(g1_img, sino, geo),
        sino2=sinogram_consistency_loss(g2_img, sino, geo),
        adv1=adversarial_loss_g(g1_scores) if g1_scores is not None else zero,
        adv2=adversarial_loss_g(g2_scores) if g2_scores is not None else zero,
    )


def generator_objective(terms: GeneratorTerms, weights: LossWeights) -> torch.Tensor:
    """Weighted sum: adversarial, structural (1 - SSIM) and sinogram terms for both generators plus both MSEs."""
    return (
        weights.lambda_q * (terms.adv1 + terms.adv2)
        + weights.lambda_p * ((1 - terms.ssim1) + (1 - terms.ssim2))
        + weights.lambda_r * (terms.sino1 + terms.sino2)
        + terms.mse2
        + terms.mse1
    )


# --------------------------------------------------------------------------
# evaluation metrics


def rmse(Y, X) -> float:
    Y, X = np.asarray(Y, dtype=np.float64), np.asarray(X, dtype=np.float64)
    if Y.shape != X.shape:
        raise ValueError(f"rmse: shape mismatch {Y.shape} vs {X.shape}")
    return float(np.sqrt(np.mean((Y - X) ** 2)))


def psnr(Y, X, peak: float = 1.0) -> float:
    """``20 log10(peak / rmse)`` in dB; ``inf`` for identical images."""
    e = rmse(Y, X)
    return math.inf if e == 0 else 20.0 * math.log10(peak / e)


def ssim_value(Y, X, R: float = 1.0, windowed: bool = False) -> float:
    Y = torch.as_tensor(np.asarray(Y, dtype=np.float64))
    X = torch.as_tensor(np.asarray(X, dtype=np.float64))
    s = windowed_ssim(Y, X, R) if windowed else ssim_per_image(Y, X, R)
    return float(s.mean())


@dataclass
class MetricsReport:
    """Per-image SSIM / PSNR / RMSE with dataset mean and standard deviation."""

    image_ids: list[str] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)

    @classmethod
    def evaluate(cls, preds: Sequence, truths: Sequence, ids: Sequence[str] | None = None, windowed_ssim: bool = False):
        if len(preds) != len(truths):
            raise ValueError(f"{len(preds)} predictions for {len(truths)} ground-truth images")
        ids = [str(i) for i in range(len(preds))] if ids is None else [str(i) for i in ids]
        rep = cls()
        for i, p, t in zip(ids, preds, truths):
            rep.add(i, p, t, windowed_ssim)
        return rep

    def add(self, image_id: str, pred, truth, windowed: bool = False) -> None:
        self.image_ids.append(image_id)
        self.ssim.append(ssim_value(truth, pred, windowed=windowed))
        self.psnr.append(psnr(truth, pred))
        self.rmse.append(rmse(truth, pred))

    def _capped_psnr(self) -> np.ndarray:
        return np.minimum(np.asarray(self.psnr, dtype=np.float64), PSNR_CAP_DB)

    def mean(self) -> dict[str, float]:
        return {
            "ssim": float(np.mean(self.ssim)),
            "psnr_db": float(np.mean(self._capped_psnr())),
            "rmse": float(np.mean(self.rmse)),
        }

    def std(self) -> dict[str, float]:
        return {
            "ssim": float(np.std(self.ssim)),
            "psnr_db": float(np.std(self._capped_psnr())),
            "rmse": float(np.std(self.rmse)),
        }

    def to_csv(self, path) -> None:
        """Columns image_id, ssim, psnr_db, rmse; the last row holds ``mean±std``."""
        psnr_capped = self._capped_psnr()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "ssim", "psnr_db", "rmse"])
            for i, s, p, r in zip(self.image_ids, self.ssim, psnr_capped, self.rmse):
                w.writerow([i, f"{s:.6f}", f"{p:.6f}", f"{r:.6f}"])
            m, sd = self.mean(), self.std()
            w.writerow(
                ["mean±std"] + [f"{m[k]:.6f}±{sd[k]:.6f}" for k in ("ssim", "psnr_db", "rmse")]
            )
