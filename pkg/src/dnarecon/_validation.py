"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from .geometry import GeometryConfig


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_stack(X, name: str, trailing: tuple[int, int] | None = None) -> np.ndarray:
    """Coerce ``X`` to a float32 ``[M, a, b]`` stack (a single 2-D array becomes ``M = 1``)."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be [M, H, W], got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if trailing is not None and arr.shape[1:] != tuple(trailing):
        raise ValueError(f"{name} have trailing shape {arr.shape[1:]}, expected {tuple(trailing)}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contain non-finite values")
    return arr


def check_images(X, n: int | None = None) -> np.ndarray:
    arr = check_stack(X, "images", None if n is None else (n, n))
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"images must be square, got {arr.shape[1:]}")
    return arr


def check_sinograms(X, geo: GeometryConfig) -> np.ndarray:
    return check_stack(X, "sinograms", geo.sinogram_shape)


def check_paired(X, y) -> None:
    if len(X) != len(y):
        raise ValueError(f"{len(X)} sinograms but {len(y)} images")
