"""Learned point-wise backprojection and the analytic FBP baseline."""

from __future__ import annotations

import torch
from torch import nn

from .filtration import ramp_filter
from .geometry import GeometryConfig, _check_sinogram, circle_mask, radon_adjoint
from .tensor_core import as_tensor

MERGES = ("mean", "channels")


def bp_param_count(branches: int, image_size: int, num_views: int) -> int:
    """Trainable values in a point-wise backprojection layer (weights and biases)."""
    for name, v in (("branches", branches), ("image_size", image_size), ("num_views", num_views)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    return 2 * branches * image_size * num_views


class PointwiseBackprojection(nn.Module):
    """Point-wise fully-connected backprojection with ``branches`` parallel mappings.

    Every filtered sample ``f[v, d]`` is expanded into a length-``N`` ray
    profile ``f[v, d] * weights[c, v, :] + biases[c, v, :]`` laid down image
    column ``d``; each view's smear is rotated to its angle and the views are
    summed. Branch images are averaged (``merge="mean"``) or returned as
    separate channels (``merge="channels"``).
    """

    def __init__(self, geo: GeometryConfig, branches: int = 23, merge: str = "mean"):
        super().__init__()
        if merge not in MERGES:
            raise ValueError(f"merge must be one of {MERGES}, got {merge!r}")
        if branches < 1:
            raise ValueError("branches must be >= 1")
        self.geo = geo
        self.branches = branches
        self.merge = merge
        shape = (branches, geo.num_views, geo.image_size)
        self.weights = nn.Parameter(torch.ones(shape))
        self.biases = nn.Parameter(torch.zeros(shape))

    @property
    def out_channels(self) -> int:
        return self.branches if self.merge == "channels" else 1

    def reset_parameters(self, generator: torch.Generator | None = None, noise: float = 0.01) -> None:
        with torch.no_grad():
            self.weights.copy_(1.0 + noise * torch.randn(self.weights.shape, generator=generator))
            self.biases.zero_()

    def set_identity(self) -> None:
        with torch.no_grad():
            self.weights.fill_(1.0)
            self.biases.zero_()

    def forward(self, filtered: torch.Tensor) -> torch.Tensor:
        return pointwise_backproject(filtered, self)


def pointwise_backproject(filtered, layer: PointwiseBackprojection) -> torch.Tensor:
    """Backproject ``filtered[B, 1, V, N]`` to ``[B, out_channels, N, N]``.

    The result is scaled by ``angular_span / num_views``. With the mean merge
    the branch average is taken over the per-view ray profiles before
    rotating, which is the same linear map as averaging the rotated branch
    images.
    """
    geo = layer.geo
    filtered = as_tensor(filtered)
    if filtered.dim() != 4 or filtered.shape[1] != 1:
        raise ValueError(f"filtered sinograms must be [B, 1, V, N], got {tuple(filtered.shape)}")
    _check_sinogram(filtered, geo)
    op = geo.operator()
    f = filtered[:, :, :, None, :]  # [B, 1, V, 1, N_d]
    if layer.merge == "mean":
        w = layer.weights.mean(dim=0)[None, None, :, :, None]  # [1, 1, V, N, 1]
        b = layer.biases.mean(dim=0)[None, None, :, :, None]
    else:
        w = layer.weights[None, :, :, :, None]  # [1, C, V, N, 1]
        b = layer.biases[None, :, :, :, None]
    smears = f * w + b  # row i of view v: ray position i, column d: detector d
    return op.apply_adjoint(smears) * geo.view_weight


def fbp_reconstruct(sino, geo: GeometryConfig) -> torch.Tensor:
    """Analytic filtered backprojection of ``sino[..., V, N]`` into ``[..., N, N]``."""
    sino = as_tensor(sino)
    _check_sinogram(sino, geo)
    return circle_mask(radon_adjoint(ramp_filter(sino), geo) * geo.view_weight)
