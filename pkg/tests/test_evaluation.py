import csv
import json

import numpy as np
import pytest

from seqsort.dicom import Vendor
from seqsort.errors import EmptySplit, InvalidClass, VersionMismatch
from seqsort.evaluation import (
    Accuracy,
    evaluate,
    grad_cam,
    heat_mass_fraction,
    predict,
    predict_many,
    report_from_indices,
    write_gradcam,
    write_report,
)
from seqsort.labeling import PLANES, SEQUENCES, JointLabel, PlaneClass, SequenceClass
from seqsort.nn.model import init_params, zero_params
from seqsort.preprocess import Datapoint, read_pgm

SIZE = 32


def _dp(seed=0, label=JointLabel(SequenceClass.CineBSSFP, PlaneClass.ShortAxis), vendor=Vendor.VendorA):
    px = np.random.default_rng(seed).random((SIZE, SIZE, 3)).astype(np.float32)
    return Datapoint(px, label, f"st{seed}", vendor, f"st{seed}/1")


@pytest.fixture(scope="module")
def params():
    p = init_params(np.random.default_rng(3), input_size=SIZE, dtype=np.float64)
    # nonzero running stats so infer mode is a generic affine map
    for k in p.state:
        p.state[k][...] = np.random.default_rng(len(k)).uniform(0.5, 1.5, p.state[k].shape)
    return p


def test_table_arithmetic():
    assert Accuracy(1546, 1602).percent_text() == "96.50"
    assert Accuracy(1520, 1602).percent_text() == "94.88"
    assert str(Accuracy(1546, 1602)) == "1546/1602 (96.50)"
    assert Accuracy(1, 8).percent_text() == "12.50"
    assert Accuracy(1, 3).percent == pytest.approx(100 / 3)


def test_injected_fixture_reproduces_table_row():
    n = 1602
    seq_true = np.zeros(n, int)
    plane_true = np.zeros(n, int)
    seq_pred = seq_true.copy()
    plane_pred = plane_true.copy()
    seq_pred[:56] = 1  # 1546 sequence hits
    plane_pred[56:82] = 1  # 26 extra plane misses -> 1520 jointly correct
    r = report_from_indices(seq_true, seq_pred, plane_true, plane_pred)
    assert r.seq_accuracy.percent_text() == "96.50"
    assert r.combined_accuracy == Accuracy(1520, 1602)
    assert r.combined_accuracy.percent_text() == "94.88"


def test_perfect_predictor():
    rng = np.random.default_rng(0)
    st, pt = rng.integers(0, 17, 50), rng.integers(0, 10, 50)
    r = report_from_indices(st, st, pt, pt)
    assert r.combined_accuracy.percent_text() == "100.00"
    assert np.count_nonzero(r.seq_confusion - np.diag(np.diag(r.seq_confusion))) == 0
    assert all(a.correct == a.total for a in r.per_class_plane.values())


def test_identities_on_random_predictions():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        st, sp = rng.integers(0, 17, n), rng.integers(0, 17, n)
        pt, pp = rng.integers(0, 10, n), rng.integers(0, 10, n)
        r = report_from_indices(st, sp, pt, pp)
        assert np.trace(r.seq_confusion) == r.seq_accuracy.correct
        assert np.trace(r.plane_confusion) == r.plane_accuracy.correct
        assert r.seq_confusion.sum() == n == r.plane_confusion.sum()
        for name, acc in r.per_class_seq.items():
            assert r.seq_confusion[SequenceClass(name).index].sum() == acc.total
        assert r.combined_accuracy.correct <= min(r.seq_accuracy.correct, r.plane_accuracy.correct)


def test_report_is_order_invariant():
    rng = np.random.default_rng(1)
    st, sp, pt, pp = rng.integers(0, 17, 30), rng.integers(0, 17, 30), rng.integers(0, 10, 30), rng.integers(0, 10, 30)
    vendors = rng.choice(["VendorA", "VendorB"], 30)
    perm = rng.permutation(30)
    a = report_from_indices(st, sp, pt, pp, vendors).to_json()
    b = report_from_indices(st[perm], sp[perm], pt[perm], pp[perm], vendors[perm]).to_json()
    assert a == b


def test_by_vendor_breakdown():
    r = report_from_indices([0, 0, 1], [0, 1, 1], [2, 2, 2], [2, 2, 3], [Vendor.VendorA, Vendor.VendorB, Vendor.VendorB])
    assert r.by_vendor["VendorA"]["combined"] == Accuracy(1, 1)
    assert r.by_vendor["VendorB"]["sequence"] == Accuracy(1, 2)
    assert r.by_vendor["VendorB"]["combined"] == Accuracy(0, 2)


def test_empty_and_mismatched():
    with pytest.raises(EmptySplit):
        report_from_indices([], [], [], [])
    with pytest.raises(ValueError):
        report_from_indices([0], [0, 1], [0], [0])


def test_zero_network_predicts_index_zero():
    p = zero_params(SIZE)
    pred = predict(p, _dp())
    np.testing.assert_allclose(pred.seq_probs, 1 / 17)
    np.testing.assert_allclose(pred.plane_probs, 1 / 10)
    assert pred.seq_pred is SEQUENCES[0] and pred.plane_pred is PLANES[0]


def test_probabilities_sum_to_one(params):
    for pred in predict_many(params, [_dp(s) for s in range(5)]):
        assert abs(pred.seq_probs.sum() - 1) < 1e-6 and abs(pred.plane_probs.sum() - 1) < 1e-6
        assert pred.seq_pred is SEQUENCES[int(np.argmax(pred.seq_probs))]


def test_label_table_guard(params):
    other = params.copy()
    other.labels = {"sequence": other.labels["sequence"][::-1], "plane": other.labels["plane"]}
    with pytest.raises(VersionMismatch):
        predict(other, _dp())


def test_evaluate_and_write(tmp_path, params):
    dps = [_dp(s) for s in range(6)]
    report = evaluate(params, dps)
    assert report.seq_accuracy.total == 6
    paths = write_report(report, tmp_path)
    data = json.loads(paths[0].read_text())
    assert data["tie_break"] == "lowest class index" and data["combined"]["total"] == 6
    rows = list(csv.reader(paths[1].open()))
    assert len(rows) == 18 and rows[0][1] == SEQUENCES[0].value
    assert sum(int(v) for row in rows[1:] for v in row[1:]) == 6
    with pytest.raises(EmptySplit):
        evaluate(params, [])


def test_grad_cam_contract(params):
    for head, k in (("sequence", 4), ("plane", 9)):
        cam = grad_cam(params, _dp(), head, k)
        assert cam.heat.shape == (SIZE, SIZE)
        assert cam.heat.min() >= 0 and cam.heat.max() <= 1
        assert cam.heat.max() in (0.0, 1.0)


def test_zero_network_gives_zero_map():
    cam = grad_cam(zero_params(SIZE), _dp(), "sequence", 0)
    assert not cam.heat.any()


def test_grad_cam_logit_shift_invariance(params):
    shifted = params.copy()
    shifted.weights["head_seq.b"] += 3.5
    a = grad_cam(params, _dp(2), "sequence", 5).heat
    b = grad_cam(shifted, _dp(2), "sequence", 5).heat
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_grad_cam_matches_finite_difference_weights(params):
    # the channel weights are spatial means of d(logit)/d(features); check that gradient numerically
    from seqsort.nn import layers as L
    from seqsort.nn.model import backward, forward

    dp = _dp(4)
    x = dp.pixels[None].astype(np.float64)
    s, p, cache = forward(params, x)
    ds = np.zeros_like(s)
    ds[0, 2] = 1
    grad = backward(params, cache, ds, np.zeros_like(p), to_features=True)

    def logit_from_features(feats):
        h, _ = L.maxpool2_forward(feats)
        h = h.reshape(1, -1)
        w, st = params.weights, params.state
        for i in (1, 2):
            h, _ = L.dense_forward(h, w[f"dense{i}.w"], w[f"dense{i}.b"])
            h, _ = L.batchnorm_forward(h, w[f"bnd{i}.gamma"], w[f"bnd{i}.beta"], st[f"bnd{i}.mean"].copy(),
                                       st[f"bnd{i}.var"].copy(), False)
            h, _ = L.relu_forward(h)
        return (h @ w["head_seq.w"] + w["head_seq.b"])[0, 2]

    feats = cache["features"].copy()
    assert logit_from_features(feats) == pytest.approx(s[0, 2], abs=1e-9)
    rng = np.random.default_rng(0)
    for _ in range(10):
        idx = tuple(int(rng.integers(0, n)) for n in feats.shape)
        up, down = feats.copy(), feats.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        numeric = (logit_from_features(up) - logit_from_features(down)) / 2e-6
        assert numeric == pytest.approx(grad[idx], abs=1e-6)


def test_invalid_class(params):
    with pytest.raises(InvalidClass):
        grad_cam(params, _dp(), "sequence", 17)
    with pytest.raises(InvalidClass):
        grad_cam(params, _dp(), "plane", -1)
    with pytest.raises(InvalidClass):
        grad_cam(params, _dp(), "vendor", 0)


def test_heat_mass_fraction():
    heat = np.zeros((4, 4))
    heat[1, 1], heat[3, 3] = 3.0, 1.0
    mask = np.zeros((4, 4), bool)
    mask[:2, :2] = True
    assert heat_mass_fraction(heat, mask) == 0.75
    assert heat_mass_fraction(np.zeros((4, 4)), mask) == 0.0


def test_write_gradcam(tmp_path, params):
    dp = _dp()
    cam = grad_cam(params, dp, "plane", 0)
    raw, overlay = write_gradcam(cam, dp, tmp_path, "x")
    assert read_pgm(raw).shape == (SIZE, SIZE) and read_pgm(overlay).shape == (SIZE, SIZE)
