import math

import numpy as np
import pytest
from scipy import stats

from concutmix.dataset import (
    ClassCensus,
    ClassSampler,
    Dataset,
    SamplerKind,
    build_longtailed,
    class_probabilities,
    load_dataset,
    longtailed_counts,
    make_synthetic_source,
    save_dataset,
    split_per_class,
)


def _balanced(num_classes, per_class, seed=0):
    return make_synthetic_source(num_classes, per_class, (2, 2, 1), seed=seed)


def _spreadsheet_counts(n_max, num_classes, r):
    # independent recomputation: per-class ratio r ** (1/(|Y|-1)) applied i times
    step = r ** (1.0 / (num_classes - 1))
    out = []
    for i in range(num_classes):
        value = n_max / step ** i
        whole = int(value)
        out.append(max(1, whole + (1 if value - whole >= 0.5 else 0)))
    return out


def test_longtailed_counts_cifar10_shape():
    counts = longtailed_counts(500, 10, 100)
    assert counts == _spreadsheet_counts(500, 10, 100)
    assert counts == [500, 300, 180, 108, 65, 39, 23, 14, 8, 5]


def test_longtailed_counts_identity():
    assert longtailed_counts(37, 6, 1) == [37] * 6


def test_longtailed_counts_cifar100_endpoints():
    counts = longtailed_counts(5000, 100, 100)
    assert max(counts) == 5000 and min(counts) == 50
    assert ClassCensus(tuple(counts)).imbalance_factor == 100


def test_longtailed_rejects_sub_one_tail():
    with pytest.raises(ValueError, match="fewer than one sample"):
        longtailed_counts(10, 5, 50)


def test_build_longtailed_census_and_determinism():
    src = _balanced(10, 500)
    a = build_longtailed(src, 100, seed=3)
    b = build_longtailed(src, 100, seed=3)
    assert a.census.counts == (500, 300, 180, 108, 65, 39, 23, 14, 8, 5)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert all(x >= y for x, y in zip(a.census.counts, a.census.counts[1:]))


def test_build_longtailed_is_a_subset_of_the_source():
    src = _balanced(3, 20)
    lt = build_longtailed(src, 4, seed=0)
    flat = {tuple(img.ravel()) for img in src.images}
    assert all(tuple(img.ravel()) in flat for img in lt.images)


def test_build_longtailed_requires_balanced_source():
    src = _balanced(3, 20)
    with pytest.raises(ValueError, match="balanced"):
        build_longtailed(build_longtailed(src, 2, 0), 2, 0)


def test_synthetic_source_counts_and_determinism():
    a = make_synthetic_source(4, 10, (8, 8, 3), seed=7)
    b = make_synthetic_source(4, 10, (8, 8, 3), seed=7)
    assert len(a) == 40
    assert a.census.counts == (10, 10, 10, 10)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synthetic_source_is_learnable_by_nearest_centroid():
    ds = make_synthetic_source(4, 25, (8, 8, 3), class_separation=4.0, seed=1)
    x = ds.images.reshape(len(ds), -1).astype(float)
    centroids = np.stack([x[ds.labels == c].mean(axis=0) for c in range(4)])
    dists = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
    assert (dists.argmin(axis=1) == ds.labels).all()


@pytest.mark.parametrize("shape", [(0, 8, 3), (8, 0, 3), (8, 8, 0)])
def test_synthetic_source_rejects_empty_shape(shape):
    with pytest.raises(ValueError):
        make_synthetic_source(2, 3, shape)


def test_split_per_class():
    val, rest = split_per_class(_balanced(3, 10), 4)
    assert val.census.counts == (4, 4, 4)
    assert rest.census.counts == (6, 6, 6)


def test_dataset_file_roundtrip(tmp_path):
    ds = build_longtailed(make_synthetic_source(3, 6, (3, 2, 2), seed=2), 3, seed=0)
    path = tmp_path / "d.ltds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:5] == b"LTDS1"
    assert len(raw) == 5 + 5 * 4 + len(ds) * (4 + 3 * 2 * 2 * 4)
    back = load_dataset(path)
    assert back.num_classes == 3
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.images.tobytes() == ds.images.tobytes()


def test_dataset_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ltds"
    path.write_bytes(b"XXXXX" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        load_dataset(path)


def test_census_invariants():
    with pytest.raises(ValueError):
        ClassCensus((3, 0))
    assert ClassCensus((90, 10)).imbalance_factor == 9


@pytest.mark.parametrize("kind, p0", [
    (SamplerKind.BALANCED, 0.5),
    (SamplerKind.RANDOM, 0.9),
    (SamplerKind.REVERSED, 0.1),  # (1/90) / (1/90 + 1/10)
])
def test_class_probabilities_two_classes(kind, p0):
    probs = class_probabilities(kind, ClassCensus((90, 10)))
    assert math.isclose(probs[0], p0, rel_tol=1e-12)


def _labels(counts):
    return np.repeat(np.arange(len(counts)), counts)


@pytest.mark.parametrize("kind", list(SamplerKind))
def test_sampler_chi_square(kind):
    counts = (90, 10, 30)
    sampler = ClassSampler(kind, _labels(counts), 3, np.random.default_rng(0))
    idx = sampler.draw(20_000)
    observed = np.bincount(_labels(counts)[idx], minlength=3)
    expected = class_probabilities(kind, ClassCensus(counts)) * len(idx)
    assert stats.chisquare(observed, expected).pvalue > 1e-3


def test_random_sampler_is_uniform_over_samples():
    labels = _labels((6, 2))
    sampler = ClassSampler("random", labels, 2, np.random.default_rng(1))
    observed = np.bincount(sampler.draw(40_000), minlength=8)
    assert stats.chisquare(observed).pvalue > 1e-3


def test_sampler_determinism_and_next_index():
    labels = _labels((5, 3))
    a = ClassSampler("balanced", labels, 2, np.random.default_rng(4))
    b = ClassSampler("balanced", labels, 2, np.random.default_rng(4))
    assert [a.next_index() for _ in range(20)] == [b.next_index() for _ in range(20)]


def test_dataset_length_mismatch():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1, 1)), np.zeros(3, dtype=int), 2)
