import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import circular_shift_ref, conv2d_ref, mse_ref
from shiftgan import shiftops
from shiftgan.errors import ContractError
from shiftgan.networks import GeneratorSpec, build_generator
from shiftgan.shiftops import (CIRCULAR, OVERLAP_CROP, overlap_crops, probe_shift_invariance,
                               sample_shift, shift, shift_loss)


def _conv(padding_mode, seed=0):
    torch.manual_seed(seed)
    conv = nn.Conv2d(3, 3, 3, padding=1, padding_mode=padding_mode, bias=True).double()
    return conv


def test_shift_identity():
    img = torch.rand(3, 4, 5)
    assert torch.equal(shift(img, (0, 0)), img)
    out, valid = shift(img, (0, 0), OVERLAP_CROP)
    assert torch.equal(out, img) and torch.all(valid == 1)


def test_two_element_wrap():
    assert shift(torch.tensor([[[1.0, 2.0]]]), (1, 0)).flatten().tolist() == [2.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.data())
def test_circular_shift_is_invertible_and_matches_oracle(h, w, data):
    i = data.draw(st.integers(-(w - 1), w - 1))
    j = data.draw(st.integers(-(h - 1), h - 1))
    img = torch.from_numpy(np.random.default_rng(h * 31 + w).uniform(-1, 1, size=(2, h, w)))
    out = shift(img, (i, j))
    assert np.array_equal(out.numpy(), circular_shift_ref(img.numpy(), i, j))
    assert torch.equal(shift(out, (-i, -j)), img)


def test_overlap_shift_marks_band():
    img = torch.arange(12.0).view(1, 3, 4)
    out, valid = shift(img, (1, 2), OVERLAP_CROP)
    assert valid.tolist() == [[0, 0, 0, 0], [0, 0, 0, 0], [0, 1, 1, 1]]
    assert out[0, 2, 1:].tolist() == img[0, 0, :3].tolist()


def test_shift_rejects_large_offsets():
    with pytest.raises(ContractError):
        shift(torch.zeros(1, 3, 4), (4, 0))
    with pytest.raises(ContractError):
        shift(torch.zeros(1, 3, 4), (0, -3), OVERLAP_CROP)


@pytest.mark.parametrize("offset", [(1, 1), (3, 2), (-2, 1), (0, -3)])
def test_overlap_crops_are_shifted_views(offset):
    region = torch.rand(2, 12, 11)
    base, shifted, overlap = overlap_crops(region, offset, size=(8, 8))
    moved, valid = shift(base, offset, OVERLAP_CROP)
    assert torch.equal(valid, overlap)
    assert torch.equal(moved * overlap, shifted * overlap)


def test_sample_shift_k2_singleton():
    rng = np.random.default_rng(0)
    assert {sample_shift(2, rng) for _ in range(100)} == {(1, 1)}


def test_sample_shift_uniform_k4():
    rng = np.random.default_rng(123)
    draws = np.array([sample_shift(4, rng) for _ in range(100_000)])
    for axis in range(2):
        freq = np.bincount(draws[:, axis], minlength=4)[1:] / len(draws)
        assert set(np.unique(draws[:, axis])) == {1, 2, 3}
        assert np.all(np.abs(freq - 1 / 3) < 0.01)


def test_sample_shift_deterministic_and_validated():
    a = [sample_shift(4, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_shift(4, np.random.default_rng(5)) for _ in range(3)]
    assert a == b
    with pytest.raises(ContractError):
        sample_shift(1, np.random.default_rng(0))


@pytest.mark.parametrize("policy", [CIRCULAR, OVERLAP_CROP])
def test_shift_loss_identity_is_zero(policy):
    x = torch.rand(2, 3, 9, 9)
    assert shift_loss(lambda t: t, x, (2, 1), policy).item() == 0.0


def test_shift_loss_constant_map_circular_is_zero():
    const = torch.rand(1, 3, 1, 1)
    g = lambda t: const.expand(t.shape[0], 3, *t.shape[-2:])  # noqa: E731
    assert shift_loss(g, torch.rand(2, 3, 7, 8), (3, 2), CIRCULAR).item() == 0.0


def test_shift_loss_circular_conv_vanishes():
    conv = _conv("circular")
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        assert shift_loss(conv, x, (1, 3), CIRCULAR).item() < 1e-6


def test_shift_loss_zero_padded_conv_matches_oracle():
    conv = _conv("zeros")
    x = np.random.default_rng(4).uniform(-1, 1, size=(3, 6, 6))
    i, j = 2, 1
    w, b = conv.weight.detach().numpy(), conv.bias.detach().numpy()
    shifted_out = circular_shift_ref(conv2d_ref(x, w, b, "zeros"), i, j)
    out_of_shifted = conv2d_ref(circular_shift_ref(x, i, j), w, b, "zeros")
    expected = mse_ref(shifted_out, out_of_shifted)
    with torch.no_grad():
        got = shift_loss(conv, torch.from_numpy(x).unsqueeze(0), (i, j), CIRCULAR).item()
    assert expected > 0
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_shift_loss_overlap_matches_oracle():
    conv = _conv("zeros", seed=1)
    region = np.random.default_rng(5).uniform(-1, 1, size=(3, 10, 10))
    i, j, c = 3, 2, 7
    w, b = conv.weight.detach().numpy(), conv.bias.detach().numpy()
    base = region[:, j:j + c, i:i + c]
    moved = region[:, :c, :c]
    out_base = conv2d_ref(base, w, b, "zeros")
    out_moved = conv2d_ref(moved, w, b, "zeros")
    diffs = [(out_base[ch, y - j, x - i] - out_moved[ch, y, x]) ** 2
             for ch in range(3) for y in range(j, c) for x in range(i, c)]
    expected = sum(diffs) / len(diffs)
    with torch.no_grad():
        got = shift_loss(conv, torch.from_numpy(region), (i, j), OVERLAP_CROP, size=(c, c)).item()
    assert got == pytest.approx(expected, rel=1e-9)


def test_shift_loss_empty_overlap():
    with pytest.raises(ContractError):
        shift_loss(lambda t: t, torch.rand(1, 8, 8), (4, 0), OVERLAP_CROP, size=(4, 4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 3), st.sampled_from([CIRCULAR, OVERLAP_CROP]))
def test_shift_loss_nonnegative(seed, i, j, policy):
    torch.manual_seed(seed)
    conv = nn.Conv2d(3, 3, 3, padding=1)
    with torch.no_grad():
        assert shift_loss(conv, torch.rand(1, 3, 8, 8), (i, j), policy).item() >= 0


def test_shift_loss_gradient_matches_finite_differences(tiny_translator):
    from oracles import central_difference_grad

    x = torch.from_numpy(np.random.default_rng(6).uniform(-1, 1, size=(1, 1, 8, 8)))
    params = list(tiny_translator.parameters())
    assert sum(p.numel() for p in params) <= 100

    def loss():
        return shift_loss(tiny_translator, x, (1, 2), CIRCULAR)

    tiny_translator.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.flatten() for p in params])
    numeric = torch.cat([g.flatten() for g in central_difference_grad(loss, params)])
    assert float((analytic - numeric).norm() / numeric.norm()) < 1e-3


def test_probe_control_and_k_multiples():
    g = build_generator(GeneratorSpec(base_width=4, n_residual=1, padding="circular"), seed=3)
    x = torch.rand(3, 16, 16) * 2 - 1
    result = probe_shift_invariance(g, x, 8, axis="x")
    disc = dict(zip(result.shifts, result.discrepancies))
    assert disc[0] == 0.0
    assert disc[4] < 1e-5 and disc[8] < 1e-5
    assert min(disc[d] for d in (1, 2, 3, 5, 6, 7)) > disc[4]
    assert len(result.outputs) == 9
    assert result.to_csv().splitlines()[0] == "shift,axis,policy,discrepancy"


def test_probe_y_axis_and_overlap():
    g = build_generator(GeneratorSpec(base_width=4, n_residual=1, padding="circular"), seed=3)
    x = torch.rand(3, 16, 16) * 2 - 1
    res_y = probe_shift_invariance(g, x, 4, axis="y")
    assert res_y.discrepancies[4] < 1e-5
    res_o = probe_shift_invariance(g, x, 4, axis="x", policy=OVERLAP_CROP)
    assert res_o.discrepancies[0] == 0.0
    assert all(d >= 0 for d in res_o.discrepancies)
    with pytest.raises(ContractError):
        probe_shift_invariance(g, x, 16)


def test_unknown_policy():
    with pytest.raises(ContractError):
        shiftops.check_policy("mirror")
