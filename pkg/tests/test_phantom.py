import json

import numpy as np
import pytest

from seqsort.errors import ConfigError
from seqsort.labeling import ADMISSIBLE, JointLabel, PlaneClass, SequenceClass
from seqsort.phantom import DEFAULT_CLASSES, IMAGE_DIR, PhantomSpec, disc_mask, generate, load_pgm_datapoints
from seqsort.pipeline import datapoints_from_manifest, ingest, load_manifest, manifest_rows


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    rows = generate(PhantomSpec(slices_per_series=(8, 8), seed=11, secondary_captures=2), out)
    return out, rows


def test_default_classes():
    assert len(DEFAULT_CLASSES) == 20 and len(set(DEFAULT_CLASSES)) == 20
    assert all(c in ADMISSIBLE for c in DEFAULT_CLASSES)
    assert len({c.sequence for c in DEFAULT_CLASSES}) == 8


def test_counts(tree):
    out, rows = tree
    files = [p for p in (out / IMAGE_DIR).rglob("*.dcm") if not p.name.startswith("secondary")]
    assert len(rows) == 200 and len(files) == 1600
    assert all(len(r["files"]) == 8 for r in rows)
    assert json.loads((out / "manifest.json").read_text()) == rows


def test_ingest_matches_ground_truth(tree):
    out, rows = tree
    result = ingest(out / IMAGE_DIR)
    assert result.errors == [] and len(result.secondary) == 2
    got = {r["series_key"]: r for r in manifest_rows(result, out)}
    assert set(got) == {r["series_key"] for r in rows}
    for row in rows:
        g = got[row["series_key"]]
        assert (g["sequence"], g["plane"], g["vendor"]) == (row["sequence"], row["plane"], row["vendor"])
        assert g["files"] == row["files"]


def test_same_seed_same_bytes(tmp_path):
    spec = PhantomSpec(classes=DEFAULT_CLASSES[:3], studies_per_class=2, image_size=(24, 20), seed=4)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    other = generate(PhantomSpec(classes=DEFAULT_CLASSES[:3], studies_per_class=2, image_size=(24, 20), seed=5),
                     tmp_path / "c")
    assert other != json.loads((tmp_path / "a" / "manifest.json").read_text())


def test_pgm_triplet_format(tmp_path):
    spec = PhantomSpec(classes=DEFAULT_CLASSES[:2], studies_per_class=3, write_format="pgm_triplet", seed=1)
    rows = generate(spec, tmp_path)
    assert all(len(r["files"]) == 3 and r["files"][0].endswith("first.pgm") for r in rows)
    dps = load_pgm_datapoints(tmp_path, rows, size=32)
    assert len(dps) == 6 and dps[0].pixels.shape == (32, 32, 3)
    rows2, root = load_manifest(tmp_path / "manifest.json")
    again = datapoints_from_manifest(rows2, root, size=32)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(dps, again))


def test_invalid_specs():
    with pytest.raises(ConfigError):
        PhantomSpec(classes=(JointLabel(SequenceClass.B0Map, PlaneClass.Axial),))
    with pytest.raises(ConfigError):
        PhantomSpec(slices_per_series=(5, 3))
    with pytest.raises(ConfigError):
        PhantomSpec(write_format="png")


@pytest.fixture(scope="module")
def datapoints(tree):
    out, _ = tree
    rows, root = load_manifest(out / "manifest.json")
    return datapoints_from_manifest(rows, root, size=32, dtype=np.float64)


def _by_class(dps):
    groups = {}
    for d in dps:
        groups.setdefault(d.label, []).append(d.pixels.ravel())
    return {k: np.stack(v) for k, v in groups.items()}


def test_class_means_separable(datapoints):
    groups = _by_class(datapoints)
    means = {k: v.mean(axis=0) for k, v in groups.items()}
    # pooled per-pixel within-class standard deviation
    within = np.sqrt(np.mean([v.var(axis=0).mean() for v in groups.values()]))
    keys = list(means)
    gaps = [np.linalg.norm(means[a] - means[b]) for i, a in enumerate(keys) for b in keys[i + 1:]]
    assert min(gaps) > 10 * within


def test_linear_probe_above_floor(datapoints):
    # one-vs-rest ridge regression in closed form; 7 studies per class to fit, 3 to score
    labels = sorted({d.label for d in datapoints}, key=lambda lb: (lb.sequence.index, lb.plane.index))
    index = {lb: i for i, lb in enumerate(labels)}
    seen: dict = {}
    fit, score = [], []
    for d in datapoints:
        k = seen[d.label] = seen.get(d.label, 0) + 1
        (fit if k <= 7 else score).append(d)

    def design(items):
        x = np.stack([d.pixels.ravel() for d in items])
        return np.hstack([x, np.ones((len(x), 1))])

    x, y = design(fit), np.eye(len(labels))[[index[d.label] for d in fit]]
    w = np.linalg.solve(x.T @ x + 0.1 * np.eye(x.shape[1]), x.T @ y)
    pred = (design(score) @ w).argmax(axis=1)
    acc = np.mean(pred == [index[d.label] for d in score])
    assert acc > 0.8


def test_disc_mask_geometry():
    m = disc_mask(128)
    assert m[64, 64] and not m[0, 0]
    # area of a radius 0.42 disc inside the [-1, 1] square
    assert m.mean() == pytest.approx(np.pi * 0.42**2 / 4, rel=0.03)
