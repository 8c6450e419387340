"""scikit-learn style wrappers: projector, analytic FBP and the trainable DNA reconstructor."""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_paired, check_positive_int, check_sinograms
from .backprojection import fbp_reconstruct
from .geometry import GeometryConfig, radon_forward
from .losses import LossWeights, psnr
from .networks import DNA, DNAConfig, PAPER_CRITIC_CHANNELS, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_loop


def _mean_psnr(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean([min(psnr(t, p), 99.0) for p, t in zip(pred, truth)]))


class RadonProjector(TransformerMixin, BaseEstimator):
    """Images ``[M, N, N]`` to sinograms ``[M, V, N]``; ``inverse_transform`` is analytic FBP."""

    def __init__(self, num_views: int = 16, angular_span: float = math.pi, supersample: int = 2):
        self.num_views = num_views
        self.angular_span = angular_span
        self.supersample = supersample

    def fit(self, X, y=None):
        X = check_images(X)
        check_positive_int(self.num_views, "num_views")
        self.geometry_ = GeometryConfig(X.shape[1], self.num_views, self.angular_span, supersample=self.supersample)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "geometry_")
        X = check_images(X, self.geometry_.image_size)
        return radon_forward(torch.from_numpy(X), self.geometry_).numpy()

    def inverse_transform(self, X):
        check_is_fitted(self, "geometry_")
        X = check_sinograms(X, self.geometry_)
        return fbp_reconstruct(torch.from_numpy(X), self.geometry_).numpy()


class FBPReconstructor(RegressorMixin, BaseEstimator):
    """Analytic filtered backprojection; ``fit`` only records the geometry."""

    def __init__(self, num_views: int = 16, angular_span: float = math.pi, supersample: int = 2):
        self.num_views = num_views
        self.angular_span = angular_span
        self.supersample = supersample

    def fit(self, X, y):
        y = check_images(y)
        self.geometry_ = GeometryConfig(y.shape[1], self.num_views, self.angular_span, supersample=self.supersample)
        X = check_sinograms(X, self.geometry_)
        check_paired(X, y)
        return self

    def predict(self, X):
        check_is_fitted(self, "geometry_")
        X = check_sinograms(X, self.geometry_)
        return fbp_reconstruct(torch.from_numpy(X), self.geometry_).numpy()

    def score(self, X, y, sample_weight=None):
        """Mean PSNR (dB, peak 1) of the reconstructions of ``X`` against ``y``."""
        y = check_images(y, self.geometry_.image_size)
        return _mean_psnr(self.predict(X), y)


class DNAReconstructor(RegressorMixin, BaseEstimator):
    """Trainable few-view reconstructor: learned filtration, point-wise backprojection, two U-nets.

    ``fit(X, y)`` takes sinograms ``X[M, V, N]`` and ground-truth images
    ``y[M, N, N]``. The training loop re-synthesises sinograms from ``y``
    on every batch, so ``X`` must be the matching projections; it is checked
    for shape and pairing only. ``predict`` returns the second generator's
    images.
    """

    def __init__(
        self,
        num_views: int = 16,
        angular_span: float = math.pi,
        supersample: int = 2,
        branches: int = 23,
        merge: str = "mean",
        filter_channels=(1, 8, 8, 1),
        unet_width: int = 36,
        cardinality: int = 4,
        critic_channels=PAPER_CRITIC_CHANNELS,
        critic_hidden: int = 1024,
        batch_size: int = 10,
        lr: float = 1e-4,
        beta1: float = 0.5,
        beta2: float = 0.9,
        critic_updates: int = 4,
        max_iterations: int = 1000,
        lambda_q: float = 5e-3,
        lambda_p: float = 0.1,
        lambda_r: float = 1.0,
        lambda_gp: float = 10.0,
        seed: int = 0,
        out_dir=None,
    ):
        self.num_views = num_views
        self.angular_span = angular_span
        self.supersample = supersample
        self.branches = branches
        self.merge = merge
        self.filter_channels = filter_channels
        self.unet_width = unet_width
        self.cardinality = cardinality
        self.critic_channels = critic_channels
        self.critic_hidden = critic_hidden
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.critic_updates = critic_updates
        self.max_iterations = max_iterations
        self.lambda_q = lambda_q
        self.lambda_p = lambda_p
        self.lambda_r = lambda_r
        self.lambda_gp = lambda_gp
        self.seed = seed
        self.out_dir = out_dir

    def _model_config(self, n: int) -> DNAConfig:
        return DNAConfig(
            image_size=n,
            num_views=check_positive_int(self.num_views, "num_views"),
            angular_span=float(self.angular_span),
            supersample=check_positive_int(self.supersample, "supersample"),
            branches=check_positive_int(self.branches, "branches"),
            merge=self.merge,
            filter_channels=tuple(self.filter_channels),
            unet_width=check_positive_int(self.unet_width, "unet_width"),
            cardinality=check_positive_int(self.cardinality, "cardinality"),
            critic_channels=tuple(self.critic_channels),
            critic_hidden=check_positive_int(self.critic_hidden, "critic_hidden"),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            critic_updates=self.critic_updates,
            max_iterations=self.max_iterations,
            seed=self.seed,
            loss_weights=LossWeights(self.lambda_q, self.lambda_p, self.lambda_r, self.lambda_gp),
        )

    def fit(self, X, y):
        y = check_images(y)
        config = self._model_config(y.shape[1])
        X = check_sinograms(X, config.geometry)
        check_paired(X, y)
        model = DNA(config, seed=self.seed)
        result = train_loop(y, model, self._train_config(), self.out_dir)
        self.model_ = model
        self.history_ = result.history
        self.n_iter_ = result.iteration
        return self

    def _check_input(self, X) -> torch.Tensor:
        check_is_fitted(self, "model_")
        return torch.from_numpy(check_sinograms(X, self.model_.geo))

    def reconstruct(self, X, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(fbp, g1, g2)`` image stacks for sinograms ``X``."""
        sino = self._check_input(X)
        parts = []
        with torch.no_grad():
            for s in range(0, len(sino), batch_size):
                parts.append([t[:, 0].numpy() for t in self.model_(sino[s : s + batch_size])])
        return tuple(np.concatenate(p) for p in zip(*parts))

    def predict(self, X):
        return self.reconstruct(X)[2]

    def score(self, X, y, sample_weight=None):
        """Mean PSNR (dB, peak 1) of the reconstructions of ``X`` against ``y``."""
        y = check_images(y, self.model_.geo.image_size)
        return _mean_psnr(self.predict(X), y)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_)

    @classmethod
    def from_checkpoint(cls, path) -> "DNAReconstructor":
        model, _ = load_checkpoint(path)
        c = model.config
        est = cls(
            num_views=c.num_views,
            angular_span=c.angular_span,
            supersample=c.supersample,
            branches=c.branches,
            merge=c.merge,
            filter_channels=c.filter_channels,
            unet_width=c.unet_width,
            cardinality=c.cardinality,
            critic_channels=c.critic_channels,
            critic_hidden=c.critic_hidden,
        )
        est.model_ = model
        return est
