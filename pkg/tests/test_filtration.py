import numpy as np
import pytest
import torch

from dnarecon.backprojection import fbp_reconstruct
from dnarecon.filtration import (
    FilterStack,
    learned_filter,
    padded_length,
    ramp_filter,
    ramp_kernel,
    ramp_response,
    round_to_odd,
)
from dnarecon.geometry import GeometryConfig, circle_mask, radon_adjoint, radon_forward
from dnarecon.losses import psnr
from dnarecon.tensor_core import grad_check

from oracles import disk_image, ramp_filter_naive


def test_padded_length_is_power_of_two_at_least_twice():
    assert [padded_length(n) for n in (8, 16, 17, 64, 100)] == [16, 32, 64, 128, 256]


def test_ramp_response_zero_dc():
    r = ramp_response(16)
    assert r[0] == 0 and r[8] == 0.5 and np.array_equal(r[1:8], r[:8:-1])


def test_zero_row_stays_zero():
    assert torch.count_nonzero(ramp_filter(torch.zeros(3, 16))) == 0


def test_constant_row_has_zero_mean_over_the_filter_length():
    row = torch.full((1, 64), 2.5, dtype=torch.float64)
    full = ramp_filter(row, crop=False)
    assert full.shape[-1] == padded_length(64)
    assert abs(float(full.mean())) <= 1e-4


@pytest.mark.xfail(strict=True, reason="zero padding lets the ramp leak negative lobes outside the crop: cropped mean ~0.013 per unit")
def test_constant_row_cropped_mean_below_1e4():
    row = torch.ones(1, 64, dtype=torch.float64)
    assert abs(float(ramp_filter(row).mean())) <= 1e-4


@pytest.mark.parametrize("n,pos", [(8, 0), (16, 5), (32, 31), (64, 20)])
def test_delta_row_matches_naive_dft(n, pos):
    row = np.zeros(n)
    row[pos] = 1.0
    got = ramp_filter(torch.as_tensor(row)).numpy()
    np.testing.assert_allclose(got, ramp_filter_naive(row, padded_length(n)), atol=1e-4)
    got32 = ramp_filter(torch.as_tensor(row, dtype=torch.float32)).numpy()
    np.testing.assert_allclose(got32, ramp_filter_naive(row, padded_length(n)), atol=1e-4)


def test_random_rows_match_naive_dft():
    rows = np.random.default_rng(0).normal(size=(3, 16))
    got = ramp_filter(torch.as_tensor(rows)).numpy()
    for g, r in zip(got, rows):
        np.testing.assert_allclose(g, ramp_filter_naive(r, 32), atol=1e-10)


def test_linearity():
    x, y = torch.randn(2, 4, 32, dtype=torch.float64)
    assert torch.allclose(ramp_filter(3 * x - 0.5 * y), 3 * ramp_filter(x) - 0.5 * ramp_filter(y), atol=1e-5)


def test_ramp_is_self_adjoint():
    x, y = torch.randn(2, 5, 24, dtype=torch.float64)
    assert float((ramp_filter(x) * y).sum()) == pytest.approx(float((x * ramp_filter(y)).sum()), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ramp_grad_check(seed):
    x = torch.randn(2, 16, generator=torch.Generator().manual_seed(seed))
    assert grad_check(ramp_filter, [x], seed=seed) <= 1e-2


def test_ramp_kernel_is_centred_impulse_response():
    k = ramp_kernel(32, 9)
    h = np.fft.ifft(ramp_response(32)).real
    assert k[4] == h[0] and k[5] == h[1] and k[3] == h[-1]
    assert abs(ramp_kernel(32, 9, zero_dc=True).sum()) < 1e-15
    with pytest.raises(ValueError):
        ramp_kernel(32, 8)


# -- learned filter ----------------------------------------------------------


def test_round_to_odd_and_default_kernel_length():
    assert [round_to_odd(x) for x in (16 / 4, 64 / 4, 256 / 4, 5.0)] == [5, 17, 65, 5]
    assert FilterStack(64).kernel_size == 17


def test_identity_stack_passes_input_through():
    stack = FilterStack(32)
    stack.set_identity()
    x = torch.randn(2, 1, 6, 32)
    assert torch.equal(learned_filter(x, stack), x)


def test_identity_needs_global_residual():
    with pytest.raises(ValueError):
        FilterStack(32, global_residual=False).set_identity()


def test_single_layer_ramp_kernel_matches_ramp_on_impulses():
    n = 64
    stack = FilterStack(n, channels=(1, 1), global_residual=False).double()
    with torch.no_grad():
        stack.weights[0].copy_(torch.as_tensor(ramp_kernel(padded_length(n), stack.kernel_size)).view(1, 1, -1))
    rows = torch.zeros(1, 1, 3, n, dtype=torch.float64)
    for v, pos in enumerate((24, 32, 40)):
        rows[0, 0, v, pos] = 1.0
    half = stack.kernel_size // 2
    err = (learned_filter(rows, stack) - ramp_filter(rows))[..., half:-half].abs().max()
    # what is left is the ramp's tail beyond the truncated taps, about 1/(pi^2 (K/2 + 1)^2)
    assert float(err.detach()) <= 5e-3


def test_filter_stack_shape_and_errors():
    stack = FilterStack(16, channels=(1, 4, 4, 4, 1))
    assert stack.residual == (False, True, True, False)
    assert learned_filter(torch.randn(3, 1, 5, 16), stack).shape == (3, 1, 5, 16)
    with pytest.raises(ValueError, match="detectors"):
        learned_filter(torch.randn(1, 1, 5, 20), stack)
    with pytest.raises(ValueError, match="residual"):
        FilterStack(16, channels=(1, 4, 1), residual=(True, False))
    with pytest.raises(ValueError, match="1 channel"):
        FilterStack(16, channels=(2, 4, 1))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_learned_filter_grad_check(seed):
    gen = torch.Generator().manual_seed(seed)
    stack = FilterStack(16, channels=(1, 3, 3, 1)).double()
    stack.reset_parameters(gen)
    with torch.no_grad():
        stack.weights[-1].normal_(0, 0.3, generator=gen)
        for b in stack.biases:
            b.normal_(0, 0.3, generator=gen)
    x = torch.randn(1, 1, 2, 16, generator=gen, dtype=torch.float64)
    params = [p.detach() for p in stack.parameters()]
    # 64-bit with a small step: the hidden ReLUs are piecewise linear, and a
    # 1e-3 float32 step lands on a kink for some of the pre-activations
    err = grad_check(lambda x, *ps: learned_filter(x, _Rebind(stack, ps)), [x, *params], eps=1e-6, seed=seed)
    assert err <= 1e-2


class _Rebind:
    """A view of a FilterStack whose tensors are supplied by the caller (for grad_check)."""

    def __init__(self, stack, tensors):
        k = len(stack.weights)
        self.n_detectors = stack.n_detectors
        self.kernel_size = stack.kernel_size
        self.residual = stack.residual
        self.global_residual = stack.global_residual
        self.weights = list(tensors[:k])
        self.biases = list(tensors[k:])


def test_fbp_beats_unfiltered_backprojection_by_6db():
    n = 64
    geo = GeometryConfig(n, 180)
    disk = disk_image(n, n / 4)
    sino = radon_forward(torch.as_tensor(disk), geo)
    fbp = fbp_reconstruct(sino, geo).numpy()
    bp = circle_mask(radon_adjoint(sino, geo)).numpy()
    scale = (bp * disk).sum() / (bp * bp).sum()  # best possible scaling of the blurred image
    # measured: 24.6 dB vs 11.3 dB
    assert psnr(disk, fbp) - psnr(disk, scale * bp) >= 6.0
