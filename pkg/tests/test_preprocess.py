import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqsort.dicom import group_series, read_dicom
from seqsort.preprocess import (
    build_datapoint,
    dump_datapoint,
    normalize_minmax,
    read_pgm,
    resize_bilinear,
    select_three,
    stack_channels,
    write_pgm,
)

from fixtures import write_mr


def _series(tmp_path, images, **kw):
    metas = [read_dicom(write_mr(tmp_path / f"im{i}.dcm", "1.5.1", i + 1, pixels=img, z=i, **kw))
             for i, img in enumerate(images)]
    (record,) = group_series(metas)
    return record


@pytest.mark.parametrize("n,expected", [(7, (0, 3, 6)), (1, (0, 0, 0)), (2, (0, 0, 1)), (4, (0, 1, 3))])
def test_select_three_indices(tmp_path, n, expected):
    record = _series(tmp_path, [np.full((2, 2), i, np.uint16) for i in range(n)])
    picked = select_three(record)
    assert tuple(record.members.index(m) for m in picked) == expected


def test_resize_constant():
    out = resize_bilinear(np.full((37, 53), 4.25), 256)
    assert out.shape == (256, 256)
    assert np.all(out == 4.25)


def test_resize_identity_at_native_size():
    img = np.random.default_rng(0).random((256, 256))
    assert np.array_equal(resize_bilinear(img, 256), img)


def _bilinear_reference(img, out_h, out_w, i, j):
    """Scalar evaluation of the half-pixel-centre bilinear formula."""
    h, w = img.shape
    y = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
    x = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def test_resize_two_by_two_ramp():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = resize_bilinear(img, 256)
    assert np.all(np.diff(out, axis=1) >= 0)
    assert out[:, 0].max() == 0.0 and out[:, -1].min() == 1.0
    rng = np.random.default_rng(3)
    for i, j in rng.integers(0, 256, size=(50, 2)):
        assert out[i, j] == pytest.approx(_bilinear_reference(img, 256, 256, i, j), abs=1e-12)


def test_resize_matches_reference_on_random_image():
    img = np.random.default_rng(1).random((7, 11))
    out = resize_bilinear(img, (13, 5))
    ref = np.array([[_bilinear_reference(img, 13, 5, i, j) for j in range(5)] for i in range(13)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_minmax(np.array([[10, 20], [30, 20]])), [[0.0, 0.5], [1.0, 0.5]])
    assert not normalize_minmax(np.full((3, 3), 7.0)).any()
    x = np.array([[0.0, 0.25], [1.0, 0.5]])
    np.testing.assert_array_equal(normalize_minmax(x), x)


def test_constant_series_gives_zeros(tmp_path):
    record = _series(tmp_path, [np.full((6, 5), 300, np.uint16)] * 3)
    dp = build_datapoint(record, None, size=32)
    assert dp.pixels.shape == (32, 32, 3) and not dp.pixels.any()


def test_single_image_channels_identical(tmp_path):
    img = np.random.default_rng(0).integers(0, 4000, (9, 7)).astype(np.uint16)
    dp = build_datapoint(_series(tmp_path, [img]), None, size=32)
    assert np.array_equal(dp.pixels[..., 0], dp.pixels[..., 1])
    assert np.array_equal(dp.pixels[..., 0], dp.pixels[..., 2])


def test_channels_normalized_independently(tmp_path):
    ramp = np.arange(30, dtype=np.uint16).reshape(5, 6)
    images = [ramp * 3 + 10, ramp[::-1] * 50, ramp.T.copy().reshape(5, 6) + 1000]
    dp = build_datapoint(_series(tmp_path, images), None, size=16, dtype=np.float64)
    for c, img in enumerate(images):
        # scalar reference: resize the min-max scaled image, then rescale to [0, 1]
        ref = resize_bilinear((img - img.min()) / float(img.max() - img.min()), 16)
        ref = (ref - ref.min()) / (ref.max() - ref.min())
        np.testing.assert_allclose(dp.pixels[..., c], ref, atol=1e-12)
        assert dp.pixels[..., c].min() == 0.0 and dp.pixels[..., c].max() == 1.0


@settings(max_examples=30, deadline=None)
@given(a=st.integers(1, 40), b=st.integers(-2000, 2000), seed=st.integers(0, 2**16))
def test_affine_intensity_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    images = [rng.integers(0, 1000, (9, 12)).astype(np.float64) for _ in range(3)]
    base = stack_channels(images, 24)
    moved = stack_channels([a * img + b for img in images], 24)
    assert np.array_equal(base, moved)


def test_channel_independence():
    rng = np.random.default_rng(5)
    images = [rng.random((10, 10)) for _ in range(3)]
    before = stack_channels(images, 16)
    images[1] = rng.random((10, 10))
    after = stack_channels(images, 16)
    assert np.array_equal(before[..., 0], after[..., 0]) and np.array_equal(before[..., 2], after[..., 2])
    assert not np.array_equal(before[..., 1], after[..., 1])


def test_range_and_finiteness():
    images = [np.random.default_rng(s).standard_normal((20, 15)) * 1e6 for s in range(3)]
    x = stack_channels(images, 64)
    assert np.isfinite(x).all() and x.min() >= 0 and x.max() <= 1


def test_pgm_round_trip_and_dump(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.dtype == np.uint8 and back.shape == (3, 4)
    assert back[0, 0] == 0 and back[-1, -1] == 255
    record = _series(tmp_path, [np.eye(4, dtype=np.uint16) * 9] * 2)
    paths = dump_datapoint(build_datapoint(record, None, size=16), tmp_path / "dump", "s")
    assert [p.name for p in paths] == ["s_first.pgm", "s_middle.pgm", "s_last.pgm"]
