import numpy as np
import pytest

from chainfl.datasets import (
    BlobSpec,
    blob_centers,
    draw_client_sizes,
    load_csv,
    make_blobs,
    partition,
    pool_size_for,
)
from chainfl.errors import InvalidInputError


def test_blob_centers_are_equidistant():
    spec = BlobSpec(n_classes=4, n_features=6, center_scale=2.5)
    c = blob_centers(spec, np.random.default_rng(0))
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    off = d[~np.eye(4, dtype=bool)]
    assert np.allclose(off, 2.5 * np.sqrt(2), atol=1e-12)


def test_make_blobs_balanced_and_seeded():
    spec = BlobSpec()
    a = make_blobs(400, spec, np.random.default_rng(1))
    b = make_blobs(400, spec, np.random.default_rng(1))
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [100] * 4


def test_load_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,label\n0.5,1.0,0\n-1,2,2\n\n")
    ds = load_csv(path)
    assert ds.features.tolist() == [[0.5, 1.0], [-1.0, 2.0]]
    assert ds.labels.tolist() == [0, 2]


@pytest.mark.parametrize(
    "body, match",
    [
        ("", "empty"),
        ("a,label\n", "no data"),
        ("a,label\n1,2,3\n", "columns"),
        ("a,label\nx,1\n", ":2"),
        ("a,label\n1,0.5\n", "class index"),
    ],
)
def test_load_csv_errors(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(InvalidInputError, match=match):
        load_csv(path)


def test_client_sizes_in_range_and_spread():
    sizes = draw_client_sizes(30, 40, 120, np.random.default_rng(0))
    assert len(sizes) == 30 and min(sizes) >= 40 and max(sizes) <= 120
    assert min(sizes) < max(sizes)
    assert draw_client_sizes(3, 5, 5, np.random.default_rng(0)) == [5, 5, 5]


def test_partition_is_disjoint_and_sized():
    sizes = [20, 35, 50]
    pool = make_blobs(pool_size_for(sizes, 0.2), BlobSpec(), np.random.default_rng(2))
    part = partition(pool, sizes, 0.2, np.random.default_rng(3))
    assert [c.size for c in part.clients] == sizes
    rows = np.concatenate([c.features for c in part.clients] + [part.holdout.features])
    assert len({r.tobytes() for r in rows}) == len(rows)
    assert part.holdout.size == round(pool.size * 0.2)


def test_partition_label_skew_concentrates_classes():
    sizes = [40] * 4
    # a roomy pool, so no class runs dry before its client is served
    pool = make_blobs(1000, BlobSpec(), np.random.default_rng(4))
    part = partition(pool, sizes, 0.2, np.random.default_rng(5), label_skew=0.75)
    for k, shard in enumerate(part.clients):
        assert np.mean(shard.labels == k) >= 0.75


def test_partition_too_small_pool():
    pool = make_blobs(50, BlobSpec(), np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        partition(pool, [30, 30], 0.2, np.random.default_rng(0))
