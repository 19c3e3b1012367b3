import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.neighbors import NearestNeighbors

from adensemble import data as D
from adensemble.archive import WeightArchive
from adensemble.errors import DataError, IngestionError, SmoteError, SplitError

TABLE1 = (896, 64, 3200, 2240)


def _labels(counts):
    return np.repeat(np.arange(len(counts)), counts)


# ---------------------------------------------------------------- codec and ingestion

@pytest.mark.parametrize("grey", [False, True])
def test_netpbm_binary_round_trip(tmp_path, rng, grey):
    img = rng.integers(0, 256, (5, 7) if grey else (5, 7, 3), dtype=np.uint8)
    path = tmp_path / ("a.pgm" if grey else "a.ppm")
    D.write_netpbm(path, img)
    back = D.read_netpbm(path)
    assert back.shape == (5, 7, 3)
    np.testing.assert_array_equal(back, np.repeat(img[:, :, None], 3, 2) if grey else img)


def test_netpbm_ascii_with_comments(tmp_path):
    (tmp_path / "a.pgm").write_text("P2\n# comment\n2 2\n# another\n15\n0 15\n5 10\n")
    np.testing.assert_array_equal(D.read_netpbm(tmp_path / "a.pgm")[:, :, 0], [[0, 255], [85, 170]])
    (tmp_path / "b.ppm").write_text("P3 1 1 255 10 20 30")
    np.testing.assert_array_equal(D.read_netpbm(tmp_path / "b.ppm")[0, 0], [10, 20, 30])


def test_pillow_formats(tmp_path, rng):
    from PIL import Image
    img = rng.integers(0, 256, (4, 6, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "a.png")
    np.testing.assert_array_equal(D.read_image(tmp_path / "a.png"), img)


def _tree(root, counts, rng):
    for name, n in counts.items():
        (root / name).mkdir(parents=True)
        for i in range(n):
            D.write_netpbm(root / name / f"{i}.ppm", rng.integers(0, 256, (6, 5, 3), dtype=np.uint8))


def test_ingest_layout_sorted_classes(tmp_path, rng):
    _tree(tmp_path, {"VMD": 4, "MID": 2, "ND": 3, "MOD": 1}, rng)
    s = D.ingest_directory(tmp_path)
    assert s.class_names == ("MID", "MOD", "ND", "VMD")
    assert s.histogram() == {"MID": 2, "MOD": 1, "ND": 3, "VMD": 4}
    assert all(im.dtype == np.uint8 and im.shape == (6, 5, 3) for im in s.images)


def test_ingest_single_class_and_duplicates(tmp_path, rng):
    _tree(tmp_path, {"ND": 1}, rng)
    (tmp_path / "ND" / "copy.ppm").write_bytes((tmp_path / "ND" / "0.ppm").read_bytes())
    s = D.ingest_directory(tmp_path)
    assert s.class_names == ("ND",) and len(s) == 2
    np.testing.assert_array_equal(s.images[0], s.images[1])


def test_ingest_errors(tmp_path, rng):
    _tree(tmp_path, {"A": 2}, rng)
    (tmp_path / "A" / "broken.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x01")
    s = D.ingest_directory(tmp_path)
    assert len(s) == 2 and len(s.errors) == 1 and "broken.ppm" in s.errors[0][0]
    (tmp_path / "B").mkdir()
    with pytest.raises(IngestionError, match="B"):
        D.ingest_directory(tmp_path)
    with pytest.raises(IngestionError):
        D.ingest_directory(tmp_path / "missing")


def test_write_image_tree_round_trip(tmp_path):
    toy = D.make_toy_dataset((3, 2, 2, 1), size=8)
    D.write_image_tree(toy, tmp_path)
    back = D.ingest_directory(tmp_path)
    np.testing.assert_array_equal(back.labels, toy.labels)
    for a, b in zip(back.images, toy.images):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- resize and normalize

def test_resize_examples():
    assert D.resize_bilinear(np.zeros((208, 176, 3))).shape == (176, 176, 3)
    assert np.all(D.resize_bilinear(np.full((9, 13, 3), 77.0), (5, 4)) == 77)
    out = D.resize_bilinear(np.array([[0.0, 100], [100, 200]]), (3, 3))
    assert out[1, 1] == 100


def test_resize_matches_hand_formula(rng):
    # half-pixel centres: output i maps to (i + 0.5) * H_in / H_out - 0.5
    img = rng.random((4, 5))
    out = D.resize_bilinear(img, (7, 3))
    for i in range(7):
        for j in range(3):
            sy = min(max((i + 0.5) * 4 / 7 - 0.5, 0), 3)
            sx = min(max((j + 0.5) * 5 / 3 - 0.5, 0), 4)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, 3), min(x0 + 1, 4)
            fy, fx = sy - y0, sx - x0
            ref = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                   + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
            assert abs(out[i, j] - ref) < 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3)),
              elements=st.floats(0, 255)),
       st.integers(1, 12), st.integers(1, 12))
def test_resize_stays_in_source_range(img, h, w):
    out = D.resize_bilinear(img, (h, w))
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9


def test_normalize_and_encode():
    imgs = [np.full((2, 2, 3), 255, np.uint8), np.zeros((2, 2, 3), np.uint8),
            np.arange(12, dtype=np.uint8).reshape(2, 2, 3)]
    s = D.LabeledImageSet(imgs, [1, 0, 3], ("MID", "MOD", "ND", "VMD"))
    X, Y = D.normalize_and_encode(s)
    assert X.dtype == np.float32 and X[0].max() == 1.0 and X[1].max() == 0.0
    np.testing.assert_array_equal(Y[0], [0, 1, 0, 0])
    raw = np.stack(imgs).astype(np.float64)
    assert abs(X.mean() - raw.mean() / 255) < 1e-6


def test_normalize_rejects_out_of_range():
    s = D.LabeledImageSet([np.full((2, 2, 3), 300.0)], [0], ("A",))
    with pytest.raises(DataError):
        D.normalize_and_encode(s)


# ---------------------------------------------------------------- splitting

@pytest.mark.parametrize("counts,expected", [
    (TABLE1, (4608, 512, 1280)),
    ((3200,) * 4, (9216, 1024, 2560)),
])
def test_split_counts(counts, expected):
    tr, va, te = D.split_indices(_labels(counts))
    assert (len(tr), len(va), len(te)) == expected


def test_split_small_class_arithmetic():
    tr, va, te = D.split_indices(_labels((10,)))
    assert (len(tr), len(va), len(te)) == (7, 1, 2)


def test_split_partition_stratified_and_deterministic():
    labels = np.random.default_rng(0).permutation(_labels(TABLE1))
    tr, va, te = D.split_indices(labels)
    assert len(np.intersect1d(tr, va)) == len(np.intersect1d(tr, te)) == len(np.intersect1d(va, te)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([tr, va, te])), np.arange(len(labels)))
    for part, frac in ((te, 0.2), (va, 0.08)):
        want = np.array(TABLE1) * frac
        assert np.all(np.abs(np.bincount(labels[part], minlength=4) - want) <= 1)
    again = D.split_indices(labels)
    for a, b in zip((tr, va, te), again):
        np.testing.assert_array_equal(a, b)
    other = D.split_indices(labels, D.SplitSpec(seed=7))
    assert not np.array_equal(te, other[2])


def test_flat_split_interpretation():
    tr, va, te = D.split_indices(_labels((3200,) * 4), D.SplitSpec.flat(0.7, 0.1, 0.2))
    assert (len(tr), len(va), len(te)) == (8960, 1280, 2560)


def test_split_errors():
    with pytest.raises(SplitError, match="MOD"):
        D.split_indices(_labels((10, 4)), class_names=("MID", "MOD"))
    with pytest.raises(SplitError):
        D.SplitSpec(test_fraction=1.0)


def test_split_nested_returns_aligned_pairs(rng):
    X = np.arange(50)
    Y = D.one_hot(_labels((25, 25)), 2)
    (xt, yt), (xv, yv), (xs, ys) = D.split_nested(X, Y)
    assert len(xt) + len(xv) + len(xs) == 50
    np.testing.assert_array_equal(D.as_labels(yt), (xt >= 25).astype(int))


# ---------------------------------------------------------------- SMOTE

def test_smote_sample_endpoints(rng):
    a, b = rng.random(6), rng.random(6)
    np.testing.assert_array_equal(D.smote_sample(a, b, 0.0), a)
    np.testing.assert_array_equal(D.smote_sample(a, b, 1.0), b)
    np.testing.assert_allclose(D.smote_sample(a, b, 0.5), (a + b) / 2)


def test_nearest_neighbors_matches_sklearn(rng):
    X = rng.standard_normal((120, 9))
    ours = D.nearest_neighbors(X, 5)
    _, ref = NearestNeighbors(n_neighbors=6).fit(X).kneighbors(X)
    np.testing.assert_array_equal(ours, ref[:, 1:])


@pytest.fixture(scope="module")
def table1_smote():
    rng = np.random.default_rng(3)
    labels = _labels(TABLE1)
    X = (rng.random((len(labels), 12)) + labels[:, None] * 0.3).astype(np.float32)
    out = D.smote(X, labels, D.SmoteConfig(k_neighbors=5, seed=42), return_parents=True)
    return X, labels, out


def test_smote_table1_histogram(table1_smote):
    X, labels, (Xs, Ys, mask, parents) = table1_smote
    assert np.bincount(Ys).tolist() == [3200] * 4 and len(Ys) == 12_800
    assert mask.sum() == sum(3200 - c for c in TABLE1) == 6400
    assert not mask[Ys == 2].any()  # the majority class gets no synthetic rows
    np.testing.assert_array_equal(Xs[:len(X)], X)
    assert np.all(mask[len(X):]) and not mask[:len(X)].any()


def test_smote_synthetic_rows_are_convex(table1_smote):
    X, labels, (Xs, Ys, mask, parents) = table1_smote
    syn = Xs[mask].astype(np.float64)
    a, b = X[parents[:, 0]].astype(np.float64), X[parents[:, 1]].astype(np.float64)
    for i in range(len(syn)):
        assert np.all(syn[i] >= np.minimum(a[i], b[i])) and np.all(syn[i] <= np.maximum(a[i], b[i]))
    assert np.all(labels[parents[:, 0]] == Ys[mask]) and np.all(labels[parents[:, 1]] == Ys[mask])
    assert np.all(parents[:, 0] != parents[:, 1])


def test_smote_neighbors_are_same_class_knn(table1_smote):
    X, labels, (_, Ys, mask, parents) = table1_smote
    for c in (0, 1, 3):
        members = np.flatnonzero(labels == c)
        _, ref = NearestNeighbors(n_neighbors=6).fit(X[members]).kneighbors(X[members])
        knn = {int(members[i]): set(members[ref[i, 1:]].tolist()) for i in range(len(members))}
        rows = parents[labels[parents[:, 0]] == c]
        assert all(int(j) in knn[int(i)] for i, j in rows)


def test_smote_deterministic_and_seed_sensitive(rng):
    X = rng.random((40, 5))
    y = _labels((30, 10))
    a = D.smote(X, y, D.SmoteConfig(seed=42))
    b = D.smote(X, y, D.SmoteConfig(seed=42))
    c = D.smote(X, y, D.SmoteConfig(seed=1))
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


def test_smote_onehot_and_image_shapes(rng):
    X = rng.random((14, 3, 3, 3)).astype(np.float32)
    Y = D.one_hot(_labels((8, 6)), 2)
    Xs, Ys, mask = D.smote(X, Y)
    assert Xs.shape == (16, 3, 3, 3) and Xs.dtype == np.float32
    assert Ys.shape == (16, 2) and Ys[mask].argmax(1).tolist() == [1, 1]


def test_smote_class_smaller_than_k(rng):
    with pytest.raises(SmoteError, match="k_neighbors"):
        D.smote(rng.random((14, 2)), _labels((10, 4)))


# ---------------------------------------------------------------- prepare

@pytest.fixture(scope="module")
def small_set():
    return D.make_toy_dataset((28, 8, 40, 32), size=16, seed=1)


def test_prepare_no_smote(small_set):
    p = D.prepare(small_set, size=16, scenario="no-smote")
    assert p.histogram() == {"MID": 28, "MOD": 8, "ND": 40, "VMD": 32}
    assert not p.synthetic.any()
    assert p.X.dtype == np.float32 and 0 <= p.X.min() and p.X.max() <= 1


def test_prepare_smote_before_split_leaks_into_test(small_set):
    p = D.prepare(small_set, size=16, scenario="smote", smote_cfg=D.SmoteConfig(k_neighbors=3))
    assert set(p.histogram().values()) == {40}
    assert p.synthetic[p.split == 2].any()


def test_prepare_smote_after_split_keeps_test_real(small_set):
    p = D.prepare(small_set, size=16, scenario="smote", smote_order="after-split",
                  smote_cfg=D.SmoteConfig(k_neighbors=3))
    assert not p.synthetic[p.split != 0].any()
    assert len(set(p.histogram("train").values())) == 1
    base = D.prepare(small_set, size=16, scenario="no-smote")
    assert p.histogram("test") == base.histogram("test")


def test_prepared_archive_round_trip(small_set):
    p = D.prepare(small_set, size=16, scenario="smote", smote_cfg=D.SmoteConfig(k_neighbors=3))
    q = D.PreparedData.from_archive(WeightArchive.from_bytes(p.to_archive().to_bytes()))
    np.testing.assert_array_equal(q.X, p.X)
    np.testing.assert_array_equal(q.synthetic, p.synthetic)
    np.testing.assert_array_equal(q.split, p.split)
    assert q.class_names == p.class_names and q.meta == p.meta


def test_toy_fixture_is_deterministic():
    a, b = D.make_toy_dataset(), D.make_toy_dataset()
    assert len(a) == 400 and a.histogram() == {n: 100 for n in D.TOY_CLASS_NAMES}
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
