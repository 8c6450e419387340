"""Differentiable primitives shared by the whole reconstruction pipeline.

Tensors are plain :class:`torch.Tensor` objects. Convolutions delegate to
``torch.nn.functional``; the CT-specific linear operators (bilinear rotation
and everything built on it) are sparse matrices wrapped in autograd
functions whose backward pass is the explicit transpose.
"""

from __future__ import annotations

import math
import warnings
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float32


def as_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Convert array-likes to a tensor, keeping tensors (and their graph) intact."""
    if isinstance(x, torch.Tensor):
        if dtype is not None and x.dtype != dtype:
            return x.to(dtype)
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = torch.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
    return torch.as_tensor(arr, dtype=dtype)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return t


# --------------------------------------------------------------------------
# convolutions


def _check_rank(t: torch.Tensor, rank: int, name: str) -> None:
    if t.dim() != rank:
        raise ValueError(f"{name} must have rank {rank}, got shape {tuple(t.shape)}")


def conv1d(x, w, b=None, stride: int = 1, zero_pad: int = 0) -> torch.Tensor:
    """Cross-correlation of ``x[B, C, L]`` with ``w[C_out, C, K]``."""
    _check_rank(x, 3, "conv1d input")
    _check_rank(w, 3, "conv1d kernel")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv1d channel mismatch: input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    if stride < 1:
        raise ValueError("conv1d stride must be >= 1")
    if w.shape[2] > x.shape[2] + 2 * zero_pad:
        raise ValueError(
            f"conv1d kernel length {w.shape[2]} exceeds padded input length {x.shape[2] + 2 * zero_pad}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv1d bias must have shape ({w.shape[0]},), got {tuple(b.shape)}")
    return F.conv1d(x, w, b, stride=stride, padding=zero_pad)


def conv2d(x, w, b=None, stride: int = 1, zero_pad: int = 0, groups: int = 1) -> torch.Tensor:
    """Cross-correlation of ``x[B, C, H, W]`` with ``w[C_out, C/groups, K, K]``."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(w, 4, "conv2d kernel")
    if w.shape[1] * groups != x.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {w.shape[1] * groups} (groups={groups})"
        )
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    kh, kw = w.shape[2:]
    if kh > x.shape[2] + 2 * zero_pad or kw > x.shape[3] + 2 * zero_pad:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {x.shape[2] + 2 * zero_pad}x{x.shape[3] + 2 * zero_pad}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv2d bias must have shape ({w.shape[0]},), got {tuple(b.shape)}")
    return F.conv2d(x, w, b, stride=stride, padding=zero_pad, groups=groups)


def conv2d_transpose(x, w, b=None, stride: int = 2, output_size: Sequence[int] | None = None) -> torch.Tensor:
    """Adjoint of ``conv2d(., w, stride=stride, zero_pad=K // 2)``.

    ``w`` has the forward-conv layout ``[C_in_fwd, C_out_fwd, K, K]`` seen from
    this op, i.e. the same tensor passed to :func:`conv2d`. Spatial size is
    multiplied by ``stride`` exactly.
    """
    _check_rank(x, 4, "conv2d_transpose input")
    _check_rank(w, 4, "conv2d_transpose kernel")
    if w.shape[0] != x.shape[1]:
        raise ValueError(
            f"conv2d_transpose channel mismatch: input has {x.shape[1]} channels, kernel expects {w.shape[0]}"
        )
    k = w.shape[2]
    if k % 2 != 1:
        raise ValueError("conv2d_transpose requires an odd kernel size")
    target = (x.shape[2] * stride, x.shape[3] * stride)
    if output_size is not None:
        output_size = tuple(int(s) for s in output_size[-2:])
        if any(s % stride for s in output_size) or output_size != target:
            raise ValueError(
                f"conv2d_transpose target size {output_size} is not {stride}x the input size {tuple(x.shape[2:])}"
            )
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"conv2d_transpose bias must have shape ({w.shape[1]},), got {tuple(b.shape)}")
    return F.conv_transpose2d(x, w, b, stride=stride, padding=k // 2, output_padding=stride - 1)


# --------------------------------------------------------------------------
# discrete Fourier transform


def dft_1d(x) -> torch.Tensor:
    """Forward DFT over the last axis, sum convention ``X[k] = sum_n x[n] exp(-2 pi i k n / L)``."""
    x = as_tensor(x)
    return torch.fft.fft(x, dim=-1, norm="backward")


def idft_1d(X) -> torch.Tensor:
    """Inverse of :func:`dft_1d` (carries the ``1/L`` factor)."""
    return torch.fft.ifft(as_tensor(X), dim=-1, norm="backward")


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


# --------------------------------------------------------------------------
# sparse linear operators


class SparseOperator:
    """A fixed sparse matrix ``A`` acting on the flattened trailing axes of a tensor.

    ``apply(x)`` maps ``x[..., n_in]`` to ``[..., n_out]``; its VJP is ``A^T``.
    """

    def __init__(self, matrix: sp.spmatrix, in_shape: tuple[int, ...], out_shape: tuple[int, ...]):
        self.matrix = sp.csr_matrix(matrix)
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        if self.matrix.shape != (math.prod(out_shape), math.prod(in_shape)):
            raise ValueError("operator matrix does not match the declared shapes")
        self._torch: dict[torch.dtype, tuple[torch.Tensor, torch.Tensor]] = {}

    def _mats(self, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
        if dtype not in self._torch:
            fwd = _to_torch_csr(self.matrix, dtype)
            adj = _to_torch_csr(self.matrix.T.tocsr(), dtype)
            self._torch[dtype] = (fwd, adj)
        return self._torch[dtype]

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return _SparseApply.apply(x, self, False)

    def apply_adjoint(self, y: torch.Tensor) -> torch.Tensor:
        return _SparseApply.apply(y, self, True)


def _to_torch_csr(m: sp.csr_matrix, dtype: torch.dtype) -> torch.Tensor:
    m = m.tocsr()
    m.sort_indices()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # "sparse CSR support is in beta"
        return torch.sparse_csr_tensor(
            torch.from_numpy(m.indptr.astype(np.int64)),
            torch.from_numpy(m.indices.astype(np.int64)),
            torch.from_numpy(m.data).to(dtype),
            size=m.shape,
        )


def _sparse_matmul(mat: torch.Tensor, x: torch.Tensor, in_shape, out_shape) -> torch.Tensor:
    lead = x.shape[: x.dim() - len(in_shape)]
    if tuple(x.shape[len(lead):]) != tuple(in_shape):
        raise ValueError(f"operator expects trailing shape {tuple(in_shape)}, got {tuple(x.shape)}")
    flat = x.reshape(-1, math.prod(in_shape))
    out = torch.sparse.mm(mat, flat.T.contiguous()).T
    return out.reshape(*lead, *out_shape)


class _SparseApply(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, op: SparseOperator, transpose: bool):
        ctx.op = op
        ctx.transpose = transpose
        fwd, adj = op._mats(x.dtype)
        if transpose:
            return _sparse_matmul(adj, x, op.out_shape, op.in_shape)
        return _sparse_matmul(fwd, x, op.in_shape, op.out_shape)

    @staticmethod
    def backward(ctx, grad):
        # The VJP of a linear map is its transpose; routing through apply keeps it twice differentiable.
        return _SparseApply.apply(grad, ctx.op, not ctx.transpose), None, None


# --------------------------------------------------------------------------
# bilinear rotation


def _snap(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < tol, r, v)


def rotation_matrix(n: int, theta: float, supersample: int = 1) -> sp.csr_matrix:
    """Sparse ``(n*n, n*n)`` bilinear rotation about the centre ``(n - 1) / 2``.

    Output pixel ``(r, c)`` samples the input at the coordinate obtained by
    rotating ``(c - cx, r - cy)`` by ``-theta``; samples outside the grid read 0.
    With ``supersample = s > 1`` each output pixel averages an ``s x s`` grid
    of such samples spread over its footprint (anti-aliased rotation).
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    centre = (n - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    out_idx = (rr * n + cc).astype(np.int64).ravel()
    cos, sin = math.cos(theta), math.sin(theta)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    share = 1.0 / supersample**2

    rows, cols, vals = [], [], []
    for oy in offsets:
        for ox in offsets:
            x, y = cc + ox - centre, rr + oy - centre
            xs = _snap(cos * x + sin * y + centre)
            ys = _snap(-sin * x + cos * y + centre)
            x0, y0 = np.floor(xs), np.floor(ys)
            fx, fy = xs - x0, ys - y0
            for dy, dx, wgt in (
                (0, 0, (1 - fy) * (1 - fx)),
                (0, 1, (1 - fy) * fx),
                (1, 0, fy * (1 - fx)),
                (1, 1, fy * fx),
            ):
                sy, sx = (y0 + dy).ravel(), (x0 + dx).ravel()
                wv = wgt.ravel() * share
                ok = (sy >= 0) & (sy < n) & (sx >= 0) & (sx < n) & (wv != 0)
                rows.append(out_idx[ok])
                cols.append((sy[ok] * n + sx[ok]).astype(np.int64))
                vals.append(wv[ok])
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )
    return m.tocsr()


@lru_cache(maxsize=64)
def rotation_operator(n: int, thetas: tuple[float, ...], supersample: int = 1) -> SparseOperator:
    """Stacked rotations: maps ``[..., n, n]`` to ``[..., len(thetas), n, n]``."""
    mats = [rotation_matrix(n, t, supersample) for t in thetas]
    return SparseOperator(sp.vstack(mats).tocsr(), (n, n), (len(thetas), n, n))


@lru_cache(maxsize=64)
def splat_operator(n: int, thetas: tuple[float, ...], supersample: int = 1) -> SparseOperator:
    """Per-view transposed rotations: maps ``[..., n, n]`` to ``[..., len(thetas), n, n]``.

    Block ``v`` is ``rotation_matrix(n, thetas[v], supersample).T``, a bilinear
    splat that conserves mass for every pixel whose footprint stays on the
    grid. The adjoint of this operator rotates each view by ``thetas[v]`` and
    sums.
    """
    mats = [rotation_matrix(n, t, supersample).T for t in thetas]
    return SparseOperator(sp.vstack(mats).tocsr(), (n, n), (len(thetas), n, n))


def rotate_bilinear(img, theta: float) -> torch.Tensor:
    """Rotate ``img[..., N, N]`` by ``theta`` radians about the image centre."""
    img = as_tensor(img)
    n = img.shape[-1]
    if img.shape[-2] != n:
        raise ValueError(f"rotate_bilinear expects square images, got {tuple(img.shape[-2:])}")
    op = rotation_operator(n, (float(theta),))
    return op.apply(img).squeeze(-3)


# --------------------------------------------------------------------------
# gradient verification


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-3,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd VJPs and central finite differences.

    ``fn`` may return any shape; it is reduced to a scalar with a fixed random
    cotangent. The error for each input is ``max|g - g_fd| / max|g_fd|`` and
    the worst over all inputs is returned. Every input element is perturbed.
    """
    inputs = [x.detach().clone() for x in inputs]
    for x in inputs:
        check_finite(x, "grad_check input")
    gen = torch.Generator().manual_seed(seed)

    probe = fn(*inputs)
    cot = torch.randn(probe.shape, generator=gen, dtype=torch.float64).to(probe.dtype)

    def scalar(*args):
        out = fn(*args)
        check_finite(out, "grad_check intermediate")
        return (out * cot).sum()

    leaves = [x.clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(scalar(*leaves), leaves, allow_unused=True)

    # no torch.no_grad() here: fn may differentiate internally (gradient penalty);
    # the perturbed inputs do not require grad, so no graph is kept otherwise
    worst = 0.0
    for i, x in enumerate(inputs):
        g = torch.zeros_like(x) if grads[i] is None else grads[i].detach()
        fd = torch.zeros_like(x)
        flat = x.view(-1)
        fd_flat = fd.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + eps
            up = scalar(*inputs).item()
            flat[j] = orig - eps
            down = scalar(*inputs).item()
            flat[j] = orig
            fd_flat[j] = (up - down) / (2 * eps)
        scale = fd.abs().max().item()
        err = (g - fd).abs().max().item()
        worst = max(worst, err / scale if scale > 0 else err)
    return worst
