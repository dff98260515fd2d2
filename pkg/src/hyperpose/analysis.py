"""Clustering of generated regression weights against camera positions.

The pipeline mirrors the usual qualitative study of a hypernetwork: collect the
per-image head weights, embed them in 2D, cluster the embedding, and set that
beside a clustering of the camera (X, Y) positions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from . import tensor as T
from .config import DataConfig
from .data import PoseSample
from .model import HyperPoseModel
from .training import prepare_batch

WEIGHT_SOURCES = ("pos", "ori", "both")
PROJECTIONS = ("pca", "tsne")
REPORT_COLUMNS = ("id", "X", "Y", "pos_cluster", "proj_u", "proj_v", "weight_cluster")


@dataclass
class WeightRecord:
    id: str
    vector: np.ndarray
    X: float
    Y: float


def collect_weights(model: HyperPoseModel, samples: Sequence[PoseSample], weights: str = "both",
                    data_cfg: DataConfig | None = None, batch_size: int = 32) -> list[WeightRecord]:
    """One record per sample holding the generated head weights, flattened."""
    if weights not in WEIGHT_SOURCES:
        raise ValueError(f"weights must be one of {WEIGHT_SOURCES}, got {weights!r}")
    records = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            images, _, _ = prepare_batch(chunk, model, data_cfg, training=False)
            out = model.forward(images, training=False)
            parts = []
            if weights in ("pos", "both"):
                parts.append(out.weights["position"].flatten())
            if weights in ("ori", "both"):
                parts.append(out.weights["orientation"].flatten())
            flat = np.concatenate(parts, axis=1)
            for s, vec in zip(chunk, flat):
                records.append(WeightRecord(s.ref, vec, float(s.pose.x[0]), float(s.pose.x[1])))
    return records


class KMeansResult(NamedTuple):
    labels: np.ndarray
    centroids: np.ndarray


def _sse(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    labels, d2 = _kernels.assign(points, centroids)
    return labels, d2, float(d2.sum())


def _plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    for _ in range(1, k):
        _, d2 = _kernels.assign(points, np.array(centroids))
        total = d2.sum()
        if total <= 0.0:
            # Every point already coincides with a centroid.
            centroids.append(points[rng.integers(n)])
            continue
        centroids.append(points[rng.choice(n, p=d2 / total)])
    return np.array(centroids, dtype=np.float64)


def kmeans(points, K: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8,
           trace: list | None = None) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops when no centroid moves by more than ``tol`` or after ``max_iter``
    iterations.  A cluster that empties is re-seeded at the point farthest
    from its centroid.  If ``trace`` is a list, the within-cluster SSE after
    each assignment step is appended to it.
    """
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) < K:
        raise ValueError(f"need at least K={K} points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus(pts, K, rng)
    labels, d2, sse = _sse(pts, centroids)
    for _ in range(max_iter):
        if trace is not None:
            trace.append(sse)
        new = centroids.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = pts[members].mean(axis=0)
            else:
                far = int(np.argmax(d2))
                new[k] = pts[far]
                d2[far] = 0.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels, d2, sse = _sse(pts, centroids)
        if shift < tol:
            break
    if trace is not None:
        trace.append(sse)
    return KMeansResult(labels, centroids)


def project_2d(vectors, method: str = "pca", seed: int = 0) -> np.ndarray:
    """Embed row vectors in the plane.

    ``pca`` projects onto the top two principal axes, each oriented so its
    largest-magnitude loading is positive.  ``tsne`` needs scikit-learn.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("project_2d needs at least 2 samples as rows of a 2D array")
    if method == "pca":
        Xc = X - X.mean(axis=0)
        _, _, vt = np.linalg.svd(Xc, full_matrices=False)
        axes = vt[:2]
        for a in axes:
            if a[np.argmax(np.abs(a))] < 0:
                a *= -1.0
        out = Xc @ axes.T
        if out.shape[1] < 2:
            out = np.hstack([out, np.zeros((len(X), 2 - out.shape[1]))])
        return out
    if method == "tsne":
        try:
            from sklearn.manifold import TSNE
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise ImportError("t-SNE projection needs scikit-learn (pip install hyperpose[tsne])") from exc
        perplexity = float(min(30, max(1, len(X) - 1)))
        return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(X)
    raise ValueError(f"method must be one of {PROJECTIONS}, got {method!r}")


@dataclass
class ClusterRow:
    id: str
    X: float
    Y: float
    pos_cluster: int
    proj_u: float
    proj_v: float
    weight_cluster: int


def cluster_report(samples: Sequence[PoseSample], model: HyperPoseModel, K: int = 4, seed: int = 0,
                   proj: str = "pca", weights: str = "both", data_cfg: DataConfig | None = None) -> list[ClusterRow]:
    """Cluster camera positions and the 2D embedding of generated weights."""
    records = collect_weights(model, samples, weights, data_cfg)
    xy = np.array([[r.X, r.Y] for r in records])
    pos_labels = kmeans(xy, K, seed).labels
    uv = project_2d(np.stack([r.vector for r in records]), proj, seed)
    w_labels = kmeans(uv, K, seed).labels
    return [
        ClusterRow(r.id, r.X, r.Y, int(pl), float(u), float(v), int(wl))
        for r, pl, (u, v), wl in zip(records, pos_labels, uv, w_labels)
    ]


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def report_csv(rows: Sequence[ClusterRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(rows: Sequence[ClusterRow], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(report_csv(rows), encoding="utf-8")
    return path
