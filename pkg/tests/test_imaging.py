import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image as PILImage

from oracles import warp_ref
from shiftgan.errors import ContractError, FormatError
from shiftgan.imaging import (DomainDataset, flow_to_tensor, load_image, read_flo,
                              render_synthetic_sequence, save_image, warp, write_flo)
from shiftgan.metrics import temporal_error


def _write_png(path, arr, mode=None):
    PILImage.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


def test_load_image_endpoints(tmp_path):
    _write_png(tmp_path / "g.png", [[0, 255, 128]])
    img = load_image(tmp_path / "g.png")
    assert img.shape == (1, 1, 3)
    assert img[0, 0, 0].item() == -1.0
    assert img[0, 0, 1].item() == 1.0
    assert img[0, 0, 2].item() == pytest.approx(128 / 127.5 - 1, abs=1e-7)


def test_load_image_rgb_shape(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3))
    _write_png(tmp_path / "c.png", arr)
    img = load_image(tmp_path / "c.png")
    assert img.shape == (3, 5, 7)
    np.testing.assert_allclose(img.permute(1, 2, 0).numpy(), arr / 127.5 - 1, atol=1e-6)


def test_load_image_rejects_rgba_and_missing(tmp_path):
    _write_png(tmp_path / "a.png", np.zeros((2, 2, 4)), mode="RGBA")
    with pytest.raises(FormatError):
        load_image(tmp_path / "a.png")
    with pytest.raises(OSError):
        load_image(tmp_path / "missing.png")


def test_load_image_monotone_affine(tmp_path):
    _write_png(tmp_path / "ramp.png", [list(range(256))])
    vals = load_image(tmp_path / "ramp.png")[0, 0].numpy().astype(np.float64)
    assert np.all(np.diff(vals) > 0)
    np.testing.assert_allclose(np.diff(vals), 1 / 127.5, atol=1e-6)


def test_save_load_round_trip(tmp_path):
    arr = np.random.default_rng(1).integers(0, 256, size=(4, 6, 3))
    _write_png(tmp_path / "in.png", arr)
    img = load_image(tmp_path / "in.png")
    save_image(img, tmp_path / "out.png")
    assert np.array_equal(np.asarray(PILImage.open(tmp_path / "out.png")), arr)


def _flo_bytes(magic, w, h, payload):
    return struct.pack("<f", magic) + struct.pack("<ii", w, h) + struct.pack(f"<{len(payload)}f", *payload)


def test_read_flo_documented_layout(tmp_path):
    (tmp_path / "a.flo").write_bytes(_flo_bytes(202021.25, 2, 1, [1, 0, 0, 2]))
    flow = read_flo(tmp_path / "a.flo")
    assert flow.shape == (1, 2, 2)
    assert flow[0, 0].tolist() == [1, 0]
    assert flow[0, 1].tolist() == [0, 2]
    assert (tmp_path / "a.flo").read_bytes()[:4] == b"PIEH"


def test_read_flo_bad_magic_and_truncation(tmp_path):
    (tmp_path / "m.flo").write_bytes(_flo_bytes(0.0, 2, 1, [1, 0, 0, 2]))
    with pytest.raises(FormatError):
        read_flo(tmp_path / "m.flo")
    (tmp_path / "t.flo").write_bytes(_flo_bytes(202021.25, 2, 1, [1, 0, 0]))
    with pytest.raises(FormatError):
        read_flo(tmp_path / "t.flo")
    (tmp_path / "h.flo").write_bytes(b"PIEH")
    with pytest.raises(FormatError):
        read_flo(tmp_path / "h.flo")


def test_flo_round_trip_random_4x3(tmp_path):
    flow = np.random.default_rng(2).standard_normal((3, 4, 2)).astype(np.float32)
    write_flo(flow, tmp_path / "a.flo")
    again = read_flo(tmp_path / "a.flo")
    write_flo(again, tmp_path / "b.flo")
    assert (tmp_path / "a.flo").read_bytes() == (tmp_path / "b.flo").read_bytes()
    assert np.array_equal(again, flow)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_round_trip_property(tmp_path_factory, flow):
    d = tmp_path_factory.mktemp("flo")
    write_flo(flow, d / "a.flo")
    write_flo(read_flo(d / "a.flo"), d / "b.flo")
    assert (d / "a.flo").read_bytes() == (d / "b.flo").read_bytes()


def test_warp_zero_flow_identity():
    img = torch.rand(3, 5, 6) * 2 - 1
    assert torch.equal(warp(img, torch.zeros(2, 5, 6)), img)


def test_warp_integer_translation_clamps():
    row = torch.tensor([[[1.0, 2.0, 3.0, 4.0]]])
    flow = torch.zeros(2, 1, 4)
    flow[0] = 1
    assert warp(row, flow).flatten().tolist() == [2.0, 3.0, 4.0, 4.0]


def test_warp_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    img = rng.uniform(-1, 1, size=(2, 5, 5))
    flow = rng.uniform(-2.5, 2.5, size=(2, 5, 5))
    out = warp(torch.from_numpy(img), torch.from_numpy(flow)).numpy()
    np.testing.assert_allclose(out, warp_ref(img, flow), atol=1e-6)


def test_warp_shape_mismatch():
    with pytest.raises(ContractError):
        warp(torch.zeros(3, 4, 4), torch.zeros(2, 4, 5))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(-7, 7), st.integers(-7, 7), st.integers(0, 2**31))
def test_warp_integer_flow_is_clamped_translation(h, w, dx, dy, seed):
    img = torch.from_numpy(np.random.default_rng(seed).uniform(-1, 1, size=(2, h, w)))
    flow = torch.zeros(2, h, w, dtype=torch.float64)
    flow[0], flow[1] = dx, dy
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    expected = img.numpy()[:, ys][:, :, xs]
    assert np.array_equal(warp(img, flow).numpy(), expected)


def test_static_sequence():
    frames, flows, masks = render_synthetic_sequence("noise", 3, (0, 0), size=(8, 8))
    assert all(torch.equal(f, frames[0]) for f in frames)
    assert all(torch.count_nonzero(f) == 0 for f in flows)
    assert all(torch.all(m == 1) for m in masks)


@pytest.mark.parametrize("pattern", ["noise", "checker", "stripes", "shapes"])
def test_moving_sequence_construction(pattern):
    frames, flows, masks = render_synthetic_sequence(pattern, 4, (1, 0), size=(10, 12), strict=True)
    for t in range(3):
        assert torch.equal(frames[t + 1], torch.roll(frames[t], -1, dims=-1))
        assert torch.all(flows[t][0] == -1) and torch.all(flows[t][1] == 0)
        warped = warp(frames[t + 1], flows[t])
        # seam: column 0 samples x = -1, which is clamped
        assert torch.equal(warped[..., 1:], frames[t][..., 1:])
        assert masks[t][:, 0].sum() == 0 and masks[t][:, 1:].min() == 1


def test_rendered_sequence_has_zero_temporal_error_off_seam():
    frames, flows, masks = render_synthetic_sequence("noise", 5, (2, -1), size=(12, 12), strict=True)
    assert temporal_error(frames, flows, masks).e_temporal < 1e-6


def test_render_requires_two_frames():
    with pytest.raises(ContractError):
        render_synthetic_sequence("noise", 1, (1, 0))


def _make_dataset(root, n=4, size=8, with_flow=True):
    rng = np.random.default_rng(0)
    for k in range(n):
        _write_png(_mk(root / "trainA") / f"{k:03d}.png", rng.integers(0, 256, size=(size, size, 3)))
        _write_png(_mk(root / "semA") / f"{k:03d}.png", rng.integers(0, 3, size=(size, size)), mode="L")
    if with_flow:
        for k in range(n - 1):
            write_flo(np.zeros((size, size, 2), np.float32), root / "flow" / f"{k:03d}.flo")


def _mk(path):
    path.mkdir(parents=True, exist_ok=True)
    return path


def test_domain_dataset_layout_and_sampling(tmp_path):
    _make_dataset(tmp_path)
    a = DomainDataset(tmp_path, "trainA", seed=7, num_classes=3)
    b = DomainDataset(tmp_path, "trainA", seed=7, num_classes=3)
    assert len(a) == 4 and a.has_labels and a.has_flow
    assert [a.sample_index() for _ in range(20)] == [b.sample_index() for _ in range(20)]
    assert a.labels(0).shape == (8, 8) and int(a.labels(0).max()) < 3
    assert a.flow(0).shape == (2, 8, 8)
    assert torch.all(a.mask(0) == 1)


def test_domain_dataset_flow_size_mismatch(tmp_path):
    _make_dataset(tmp_path, with_flow=False)
    write_flo(np.zeros((5, 8, 2), np.float32), tmp_path / "flow" / "000.flo")
    with pytest.raises(FormatError):
        DomainDataset(tmp_path).flow(0)


def test_flow_to_tensor_layout():
    arr = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
    t = flow_to_tensor(arr)
    assert t.shape == (2, 2, 3)
    assert t[0, 1, 2] == arr[1, 2, 0] and t[1, 1, 2] == arr[1, 2, 1]
