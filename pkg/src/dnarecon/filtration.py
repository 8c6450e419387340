"""Sinogram filtration: the fixed Fourier ramp and the learnable 1-D conv stack."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensor_core import as_tensor, conv1d, dft_1d, idft_1d, next_pow2


def padded_length(n_detectors: int) -> int:
    """Filter length: twice the row length, rounded up to a power of two."""
    return next_pow2(2 * n_detectors)


@lru_cache(maxsize=32)
def _ramp_response(length: int) -> np.ndarray:
    return np.abs(np.fft.fftfreq(length))


def ramp_response(length: int) -> np.ndarray:
    """``|frequency|`` in cycles per detector bin on a length-``length`` DFT grid."""
    return _ramp_response(length).copy()


def ramp_kernel(length: int, taps: int | None = None, zero_dc: bool = False) -> np.ndarray:
    """Spatial ramp kernel, centred, of odd size ``taps`` (default ``length - 1``).

    Entry ``k`` is tap offset ``k - taps // 2`` of the circular impulse response
    of :func:`ramp_response`. ``zero_dc`` shifts the centre tap so the truncated
    kernel keeps the ramp's zero response to constants.
    """
    h = np.fft.ifft(_ramp_response(length)).real
    taps = length - 1 if taps is None else taps
    if taps % 2 != 1 or taps > length:
        raise ValueError(f"taps must be odd and <= {length}, got {taps}")
    half = taps // 2
    k = np.array([h[i % length] for i in range(-half, half + 1)])
    if zero_dc:
        k[half] -= k.sum()
    return k


class _RampFilter(torch.autograd.Function):
    # zero-pad -> |f| -> crop; the ramp is real and even, so the operator is its own transpose

    @staticmethod
    def forward(ctx, sino):
        return _apply_ramp(sino, True)

    @staticmethod
    def backward(ctx, grad):
        return _RampFilter.apply(grad)


def _apply_ramp(sino: torch.Tensor, crop: bool) -> torch.Tensor:
    n = sino.shape[-1]
    length = padded_length(n)
    padded = F.pad(sino, (0, length - n))
    resp = torch.as_tensor(_ramp_response(length), dtype=sino.dtype)
    out = idft_1d(dft_1d(padded) * resp).real.to(sino.dtype)
    return out[..., :n].contiguous() if crop else out


def ramp_filter(sino, crop: bool = True) -> torch.Tensor:
    """Ramp-filter every row of ``sino[..., V, N_d]``.

    Rows are zero-padded to :func:`padded_length`, multiplied by ``|f|`` in the
    DFT domain and cropped back to ``N_d``. ``crop=False`` returns the full
    padded-length rows (forward only), which is where the filter's zero DC
    gain is exact.
    """
    sino = as_tensor(sino)
    if not crop:
        return _apply_ramp(sino, False)
    return _RampFilter.apply(sino)


def round_to_odd(x: float) -> int:
    return 2 * int(x // 2) + 1


class FilterStack(nn.Module):
    """Learnable 1-D convolution stack applied to each sinogram row.

    Layers are ``channels[i] -> channels[i + 1]`` convolutions with kernel
    length ``round_to_odd(n_detectors / 4)`` and "same" zero padding. Hidden
    layers use ReLU; a layer flagged in ``residual`` adds its input back
    (requires equal channel counts). With ``global_residual`` the stack
    predicts a correction that is added to the input row.
    """

    def __init__(
        self,
        n_detectors: int,
        channels: Sequence[int] = (1, 8, 8, 1),
        residual: Sequence[bool] | None = None,
        global_residual: bool = True,
        kernel_size: int | None = None,
    ):
        super().__init__()
        channels = tuple(channels)
        if channels[0] != 1 or channels[-1] != 1 or len(channels) < 2:
            raise ValueError("filter stack must map 1 channel to 1 channel")
        if residual is None:
            residual = tuple(a == b and 0 < i < len(channels) - 2 for i, (a, b) in enumerate(zip(channels, channels[1:])))
        if len(residual) != len(channels) - 1:
            raise ValueError("need one residual flag per layer")
        for i, flag in enumerate(residual):
            if flag and channels[i] != channels[i + 1]:
                raise ValueError(f"layer {i} is flagged residual but maps {channels[i]} -> {channels[i + 1]} channels")
        self.n_detectors = n_detectors
        self.channels = channels
        self.residual = tuple(bool(r) for r in residual)
        self.global_residual = global_residual
        self.kernel_size = round_to_odd(n_detectors / 4) if kernel_size is None else kernel_size
        k = self.kernel_size
        self.weights = nn.ParameterList(
            nn.Parameter(torch.empty(co, ci, k)) for ci, co in zip(channels, channels[1:])
        )
        self.biases = nn.ParameterList(nn.Parameter(torch.zeros(co)) for co in channels[1:])
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            last = len(self.weights) - 1
            for i, (w, b) in enumerate(zip(self.weights, self.biases)):
                fan_in = w.shape[1] * w.shape[2]
                std = (2.0 / fan_in) ** 0.5 if i < last else 1e-3 / fan_in**0.5
                w.copy_(torch.randn(w.shape, generator=generator) * std)
                b.zero_()

    def set_identity(self) -> None:
        """Make the stack an exact identity (needs the global residual)."""
        if not self.global_residual:
            raise ValueError("an identity initialisation needs global_residual=True")
        with torch.no_grad():
            for w, b in zip(self.weights, self.biases):
                w.zero_()
                b.zero_()

    def forward(self, sino: torch.Tensor) -> torch.Tensor:
        return learned_filter(sino, self)


def learned_filter(sino, stack: FilterStack) -> torch.Tensor:
    """Apply ``stack`` to every row of ``sino[B, 1, V, N_d]`` (or ``[..., V, N_d]``)."""
    sino = as_tensor(sino)
    n = sino.shape[-1]
    if n != stack.n_detectors:
        raise ValueError(f"filter stack built for {stack.n_detectors} detectors, sinogram has {n}")
    rows = sino.reshape(-1, 1, n)
    pad = stack.kernel_size // 2
    h = rows
    last = len(stack.weights) - 1
    for i, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        z = conv1d(h, w, b, stride=1, zero_pad=pad)
        if i < last:
            z = torch.relu(z)
        h = h + z if stack.residual[i] else z
    if stack.global_residual:
        h = rows + h
    return h.reshape(sino.shape)
