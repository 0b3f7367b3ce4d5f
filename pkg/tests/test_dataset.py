import json
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqsort.dataset import (
    AugmentSpec,
    OversampleSpec,
    SplitSpec,
    augment,
    derive_rng,
    largest_remainder,
    oversample,
    partition,
    split_manifest,
    write_split_manifest,
)
from seqsort.dicom import Vendor
from seqsort.errors import ConfigError, InsufficientStudies, InsufficientStudiesWarning
from seqsort.labeling import ADMISSIBLE
from seqsort.preprocess import Datapoint

LABELS = sorted(ADMISSIBLE, key=lambda lb: (lb.sequence.index, lb.plane.index))
A, B, C = LABELS[0], LABELS[5], LABELS[11]


def dp(study, label=A, vendor=Vendor.VendorA, pixels=None, tag=""):
    if pixels is None:
        pixels = np.zeros((4, 4, 3), np.float32)
    return Datapoint(pixels, label, study, vendor, f"{study}/{tag}")


def studies(n, label=A, prefix="s"):
    return [dp(f"{prefix}{i}", label) for i in range(n)]


def split_studies(splits):
    return [{d.study_instance_uid for d in s} for s in splits]


# ---------------------------------------------------------------------------
# partition


def test_largest_remainder_oracle():
    # 10 x (0.64, 0.16, 0.20) = (6.4, 1.6, 2.0): floors 6/1/2, the leftover goes to the 0.6 remainder
    assert largest_remainder(10, (0.64, 0.16, 0.20)) == [6, 2, 2]
    assert largest_remainder(25, (0.64, 0.16, 0.20)) == [16, 4, 5]
    assert largest_remainder(7, (0.5, 0.5, 0.0)) == [4, 3, 0]


def test_partition_25_studies():
    tr, va, te = partition(studies(25), SplitSpec(seed=3))
    assert (len(tr), len(va), len(te)) == (16, 4, 5)


def test_partition_10_studies():
    tr, va, te = partition(studies(10), SplitSpec(seed=1))
    assert (len(tr), len(va), len(te)) == (6, 2, 2)


@pytest.mark.parametrize("seed", range(10))
def test_shared_study_lands_together(seed):
    data = studies(12) + [dp("s3", A, tag="second"), dp("s7", A, tag="second")]
    splits = partition(data, SplitSpec(seed=seed))
    for s in splits:
        ids = [d.study_instance_uid for d in s]
        assert ids.count("s3") in (0, 2) and ids.count("s7") in (0, 2)


def test_partition_deterministic_and_seed_sensitive():
    data = studies(30)
    a = split_manifest(*partition(data, SplitSpec(seed=5)))
    b = split_manifest(*partition(data, SplitSpec(seed=5)))
    c = split_manifest(*partition(data, SplitSpec(seed=6)))
    assert a == b and a != c


def test_multi_label_study_uses_rarest_stratum():
    data = studies(20, A) + studies(3, B, prefix="b") + [dp("b0", A, tag="extra")]
    tr, va, te = partition(data, SplitSpec(seed=0))
    # b0 carries A and B; B is rarer, so the B stratum owns 3 studies: 2/0/1 under largest remainder
    b_split = [sum(1 for d in s if d.label == B) for s in (tr, va, te)]
    assert sum(b_split) == 3
    assert b_split == [2, 0, 1]


def test_small_stratum_goes_to_train_with_warning():
    data = studies(10, A) + studies(2, B, prefix="b")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tr, va, te = partition(data, SplitSpec(seed=0))
    assert any(issubclass(w.category, InsufficientStudiesWarning) for w in caught)
    assert {d.study_instance_uid for d in tr} >= {"b0", "b1"}


def test_partition_errors():
    with pytest.raises(InsufficientStudies):
        partition(studies(2), SplitSpec())
    with pytest.raises(ValueError):
        partition([dp("x", None)] + studies(5), SplitSpec())
    with pytest.raises(ConfigError):
        SplitSpec(0.5, 0.5, 0.5)


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(1, 15), min_size=1, max_size=6), seed=st.integers(0, 2**63 - 1))
def test_partition_properties(counts, seed):
    data = []
    for k, n in enumerate(counts):
        data += studies(n, LABELS[k], prefix=f"L{k}_")
    if len({d.study_instance_uid for d in data}) < 3:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        splits = partition(data, SplitSpec(seed=seed))
    ids = split_studies(splits)
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, splits)) == len(data)
    for k, n in enumerate(counts):
        got = [sum(1 for d in s if d.label == LABELS[k]) for s in splits]
        if n >= 3:
            for g, f in zip(got, (0.64, 0.16, 0.20)):
                assert abs(g - n * f) <= 1


def test_split_manifest_file(tmp_path):
    tr, va, te = partition(studies(10), SplitSpec(seed=2))
    write_split_manifest(tmp_path / "split.json", tr, va, te)
    m = json.loads((tmp_path / "split.json").read_text())
    assert Counter(m.values()) == {"train": 6, "val": 2, "test": 2}


# ---------------------------------------------------------------------------
# oversampling


def test_oversample_class_example():
    data = studies(100, A) + studies(10, B, prefix="b")
    out = oversample(data, OversampleSpec(4.0, 2.0, seed=1))
    counts = Counter(d.label for d in out)
    assert counts == {A: 100, B: 25}
    assert all(any(o is d for d in data) for o in out)


def test_oversample_boundary_noop():
    data = studies(40, A) + studies(10, B, prefix="b")
    assert oversample(data, OversampleSpec(4.0, 2.0)) == data


def test_oversample_vendor_example():
    data = [dp(f"a{i}", A, Vendor.VendorA) for i in range(200)] + [dp(f"b{i}", A, Vendor.VendorB) for i in range(60)]
    out = oversample(data, OversampleSpec(4.0, 2.0))
    assert Counter(d.vendor for d in out) == {Vendor.VendorA: 200, Vendor.VendorB: 100}


def test_oversample_round_robin_covers_every_original():
    minority = studies(10, B, prefix="b")
    out = oversample(studies(100, A) + minority, OversampleSpec(4.0, 2.0, seed=9))
    extra = Counter(d.source_series for d in out if d.label == B)
    # 25 copies over 10 originals: each appears 2 or 3 times
    assert sorted(set(extra.values())) == [2, 3]


@settings(max_examples=30, deadline=None)
@given(profile=st.lists(st.tuples(st.integers(0, 4), st.integers(0, 2), st.integers(1, 40)), min_size=1, max_size=8),
       seed=st.integers(0, 1000))
def test_oversample_ratio_properties(profile, seed):
    vendors = (Vendor.VendorA, Vendor.VendorB, Vendor.VendorC)
    data = []
    for k, (li, vi, n) in enumerate(profile):
        data += [dp(f"p{k}_{i}", LABELS[li], vendors[vi]) for i in range(n)]
    out = oversample(data, OversampleSpec(4.0, 2.0, seed=seed))
    lc, vc = Counter(d.label for d in out), Counter(d.vendor for d in out)
    assert max(lc.values()) <= 4.0 * min(lc.values())
    assert max(vc.values()) <= 2.0 * min(vc.values())
    assert out[: len(data)] == data
    ids = {id(d) for d in data}
    assert all(id(d) in ids for d in out)


def test_oversample_empty():
    with pytest.raises(ValueError):
        oversample([], OversampleSpec())


# ---------------------------------------------------------------------------
# augmentation


def _random_dp(seed=0, size=32):
    px = np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)
    return dp("s", A, pixels=px)


def test_identity_augmentation_is_bitwise():
    d = _random_dp()
    out = augment(d, AugmentSpec.identity(), derive_rng(1, 2, 3))
    assert np.array_equal(out.pixels, d.pixels) and out.pixels.dtype == d.pixels.dtype


def test_channel_shuffle_only_permutes():
    d = _random_dp()
    spec = AugmentSpec(0.0, (1.0, 1.0), 0.0, (1.0, 1.0), 0.0, 4, 0.0, True)
    seen = set()
    for s in range(20):
        out = augment(d, spec, derive_rng(s)).pixels
        perm = tuple(next(j for j in range(3) if np.array_equal(out[..., k], d.pixels[..., j])) for k in range(3))
        assert sorted(perm) == [0, 1, 2]
        seen.add(perm)
    assert len(seen) > 1


def test_augment_deterministic_and_in_range():
    d = _random_dp(3)
    spec = AugmentSpec()
    a = augment(d, spec, derive_rng(7, 1, 0))
    b = augment(d, spec, derive_rng(7, 1, 0))
    c = augment(d, spec, derive_rng(7, 2, 0))
    assert np.array_equal(a.pixels, b.pixels) and not np.array_equal(a.pixels, c.pixels)
    assert a.pixels.shape == d.pixels.shape and a.label == d.label and a.vendor == d.vendor
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_pure_rotation_of_symmetric_disc():
    # a centred disc is unchanged by a small rotation apart from edge interpolation
    size = 41
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    disc = (np.hypot(yy, xx) < 12).astype(np.float64)
    d = dp("s", A, pixels=np.repeat(disc[..., None], 3, axis=2))
    spec = AugmentSpec(0.0, (1.0, 1.0), 15.0, (1.0, 1.0), 0.0, 4, 0.0, False)
    out = augment(d, spec, derive_rng(4)).pixels
    assert np.abs(out[..., 0] - disc).sum() / disc.sum() < 0.1
    assert np.array_equal(out[..., 0], out[..., 1])


def test_deform_displacement_is_bounded():
    # a horizontal ramp moved by at most deform_max_px changes each value by at most that many steps
    size = 48
    ramp = np.tile(np.arange(size, dtype=np.float64) / size, (size, 1))
    d = dp("s", A, pixels=np.repeat(ramp[..., None], 3, axis=2))
    spec = AugmentSpec(0.0, (1.0, 1.0), 0.0, (1.0, 1.0), 0.0, 4, 3.0, False)
    out = augment(d, spec, derive_rng(11)).pixels
    inner = slice(4, size - 4)
    assert np.abs(out[inner, inner, 0] - ramp[inner, inner]).max() <= 3.0 / size + 1e-12


def test_augment_spec_validation():
    with pytest.raises(ConfigError):
        AugmentSpec(contrast_gamma_range=(1.4, 0.7))
    with pytest.raises(ConfigError):
        AugmentSpec(noise_sigma_max=-0.1)
    with pytest.raises(ConfigError):
        OversampleSpec(class_max_ratio=0.5)
