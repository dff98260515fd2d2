import numpy as np
import pytest

from hyperpose.analysis import REPORT_COLUMNS, cluster_report, collect_weights, kmeans, project_2d, report_csv
from hyperpose.config import desk_model
from hyperpose.model import HyperPoseModel


def blobs(seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [8, 0], [0, 8], [8, 8]], dtype=float)
    return centers[np.repeat(np.arange(4), 25)] + rng.normal(scale=0.3, size=(100, 2))


def test_pca_of_planar_data_preserves_distances():
    rng = np.random.default_rng(1)
    plane = rng.normal(size=(30, 2)) * [3.0, 1.0]
    basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    X = plane @ basis.T + 5.0
    uv = project_2d(X)
    d_in = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d_out = np.linalg.norm(uv[:, None] - uv[None], axis=-1)
    assert np.allclose(d_in, d_out, atol=1e-9)


def test_pca_sign_convention_and_rank_one_padding():
    X = np.outer(np.arange(5.0), [1.0, -3.0, 0.5])
    uv = project_2d(X)
    assert uv.shape == (5, 2)
    assert np.allclose(uv[:, 1], 0.0, atol=1e-9)
    assert np.array_equal(project_2d(-X), project_2d(-X))
    assert np.allclose(np.abs(uv[:, 0]), np.abs(project_2d(-X)[:, 0]))


def test_pca_needs_two_samples():
    with pytest.raises(ValueError):
        project_2d(np.ones((1, 4)))
    with pytest.raises(ValueError):
        project_2d(np.ones((3, 2)), method="umap")


def test_kmeans_sse_never_increases():
    trace = []
    kmeans(np.random.default_rng(2).normal(size=(300, 3)), 5, seed=1, trace=trace)
    assert len(trace) >= 2
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_kmeans_translation_invariant():
    pts = blobs()
    a = kmeans(pts, 4, seed=3)
    b = kmeans(pts + [100.0, -50.0], 4, seed=3)
    assert np.array_equal(a.labels, b.labels)
    assert np.allclose(a.centroids + [100.0, -50.0], b.centroids)


def test_kmeans_identical_points():
    res = kmeans(np.ones((10, 2)), 1)
    assert np.all(res.labels == 0) and np.allclose(res.centroids, [[1.0, 1.0]])
    res = kmeans(np.ones((10, 2)), 3)
    assert res.labels.shape == (10,)


def test_kmeans_argument_checks():
    with pytest.raises(ValueError):
        kmeans(np.ones((3, 2)), 0)
    with pytest.raises(ValueError):
        kmeans(np.ones((3, 2)), 4)


def test_kmeans_is_seeded():
    pts = np.random.default_rng(4).normal(size=(80, 2))
    assert np.array_equal(kmeans(pts, 4, seed=7).labels, kmeans(pts, 4, seed=7).labels)


@pytest.fixture(scope="module")
def tiny_model():
    return HyperPoseModel(desk_model(), rng=0)


def test_collect_weights_sources(tiny_model, small_samples):
    both = collect_weights(tiny_model, small_samples[:3])
    pos = collect_weights(tiny_model, small_samples[:3], "pos")
    ori = collect_weights(tiny_model, small_samples[:3], "ori")
    assert len(both) == 3
    assert both[0].vector.size == pos[0].vector.size + ori[0].vector.size
    assert np.array_equal(both[0].vector[: pos[0].vector.size], pos[0].vector)
    assert both[0].X == small_samples[0].pose.x[0]
    with pytest.raises(ValueError):
        collect_weights(tiny_model, small_samples, "head")


def test_cluster_report_csv(tiny_model, small_samples):
    rows = cluster_report(small_samples, tiny_model, K=3, seed=0)
    text = report_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == len(small_samples) + 1
    assert all(len(line.split(",")) == 7 for line in lines)
    assert {r.pos_cluster for r in rows} <= {0, 1, 2}
    assert report_csv(cluster_report(small_samples, tiny_model, K=3, seed=0)) == text


def test_tsne_projection_if_available():
    pytest.importorskip("sklearn")
    uv = project_2d(blobs(), method="tsne", seed=0)
    assert uv.shape == (100, 2)
