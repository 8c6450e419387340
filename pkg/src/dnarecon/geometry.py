"""Parallel-beam geometry and the rotate-and-sum Radon projector."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .tensor_core import SparseOperator, as_tensor, splat_operator


@dataclass(frozen=True)
class GeometryConfig:
    """Equally spaced parallel-beam views over ``angular_span``.

    The detector grid coincides with the image columns, so ``num_detectors``
    must equal ``image_size``. ``supersample`` sets the sub-pixel sampling of
    the rotations inside the projector; 1 gives plain bilinear rotation,
    which aliases badly near 45 degrees.
    """

    image_size: int
    num_views: int
    angular_span: float = math.pi
    num_detectors: int | None = None
    supersample: int = 2

    def __post_init__(self):
        if self.num_detectors is None:
            object.__setattr__(self, "num_detectors", self.image_size)
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.num_views < 1:
            raise ValueError(f"num_views must be >= 1, got {self.num_views}")
        if self.num_detectors != self.image_size:
            raise ValueError(
                f"num_detectors ({self.num_detectors}) must equal image_size ({self.image_size})"
            )
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        if not (self.angular_span > 0 and math.isfinite(self.angular_span)):
            raise ValueError("angular_span must be a positive finite number of radians")

    @property
    def angles(self) -> tuple[float, ...]:
        step = self.angular_span / self.num_views
        return tuple(i * step for i in range(self.num_views))

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_detectors)

    @property
    def view_weight(self) -> float:
        """Angular quadrature weight ``angular_span / num_views``."""
        return self.angular_span / self.num_views

    def operator(self) -> SparseOperator:
        """Image -> per-view splatted copies; its adjoint is rotate-and-sum."""
        return splat_operator(self.image_size, self.angles, self.supersample)


@lru_cache(maxsize=16)
def _mask(n: int) -> np.ndarray:
    centre = (n - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return ((rr - centre) ** 2 + (cc - centre) ** 2 <= (n / 2.0) ** 2).astype(np.float64)


def circle_mask_array(n: int) -> np.ndarray:
    """Boolean-valued float mask of the inscribed circle (radius ``n / 2``)."""
    return _mask(n).copy()


def circle_mask(img):
    """Zero pixels whose centre lies farther than ``N / 2`` from the image centre.

    Accepts numpy arrays or tensors of shape ``[..., N, N]`` and returns the
    same kind.
    """
    n = img.shape[-1]
    if img.shape[-2] != n:
        raise ValueError(f"circle_mask expects square images, got {tuple(img.shape[-2:])}")
    # select rather than multiply: x * 0 keeps the sign of negative x
    inside = _mask(n) > 0
    if isinstance(img, torch.Tensor):
        return torch.where(torch.as_tensor(inside), img, torch.zeros((), dtype=img.dtype))
    arr = np.asarray(img)
    return np.where(inside, arr, np.zeros((), dtype=arr.dtype))


def _check_image(img: torch.Tensor, geo: GeometryConfig) -> None:
    n = geo.image_size
    if img.dim() < 2 or tuple(img.shape[-2:]) != (n, n):
        raise ValueError(f"image must end in ({n}, {n}), got {tuple(img.shape)}")


def _check_sinogram(sino: torch.Tensor, geo: GeometryConfig) -> None:
    if sino.dim() < 2 or tuple(sino.shape[-2:]) != geo.sinogram_shape:
        raise ValueError(
            f"sinogram must end in {geo.sinogram_shape} (views, detectors), got {tuple(sino.shape)}"
        )


def radon_forward(img, geo: GeometryConfig) -> torch.Tensor:
    """Project ``img[..., N, N]`` to ``[..., num_views, N]``.

    Row ``v`` holds the column sums of the image carried into the frame of
    view ``v`` by the transpose of ``rotate_bilinear(., angles[v])``. Using the
    transpose (a bilinear splat) conserves projected mass exactly and makes
    :func:`radon_adjoint` a literal rotate-and-sum of smeared rows.
    """
    img = as_tensor(img)
    _check_image(img, geo)
    rotated = geo.operator().apply(img)
    return rotated.sum(dim=-2)


def smear(sino: torch.Tensor, n: int) -> torch.Tensor:
    """Copy each detector value down its image column: ``[..., V, N] -> [..., V, N, N]``."""
    return sino.unsqueeze(-2).expand(*sino.shape[:-1], n, sino.shape[-1])


def radon_adjoint(sino, geo: GeometryConfig) -> torch.Tensor:
    """Exact transpose of :func:`radon_forward` (unscaled backprojection).

    Each row is smeared down the image columns, rotated by its view angle with
    :func:`~dnarecon.tensor_core.rotate_bilinear` and summed over views.
    """
    sino = as_tensor(sino)
    _check_sinogram(sino, geo)
    return geo.operator().apply_adjoint(smear(sino, geo.image_size))
