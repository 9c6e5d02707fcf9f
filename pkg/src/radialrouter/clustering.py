"""Semantic grouping of training queries.

Raw frozen embeddings are projected to 2-D with an exact (O(m^2) per
iteration) t-SNE, clustered with k-means++, and the resulting groups drive
in-group/out-group sampling for the query-query contrastive loss. Grouping
runs once, before training, and is immutable afterwards.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError

PCA_TARGET_DIM = 50  # pre-reduction applied when the encoder width exceeds it


@dataclass
class SemanticGroups:
    assignment: dict[str, int]          # query id -> group id in [1, N]
    centroids: np.ndarray               # (N, projection_dim)
    n_groups: int
    projection_dim: int = 2
    metadata: dict = field(default_factory=dict)
    coordinates: dict[str, list[float]] | None = None  # projected 2-D points;
                                                       # plotting is external

    def group(self, query_id: str) -> int:
        return self.assignment[query_id]

    def members(self, group_id: int) -> list[str]:
        return [qid for qid, g in self.assignment.items() if g == group_id]

    def save(self, path) -> None:
        payload = {"assignment": self.assignment,
                   "centroids": self.centroids.tolist(),
                   "n_groups": self.n_groups,
                   "projection_dim": self.projection_dim,
                   "metadata": self.metadata}
        if self.coordinates is not None:
            payload["coordinates"] = self.coordinates
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SemanticGroups":
        payload = json.loads(Path(path).read_text())
        coords = payload.get("coordinates")
        return cls(assignment={str(k): int(v)
                               for k, v in payload["assignment"].items()},
                   centroids=np.asarray(payload["centroids"], dtype=np.float64),
                   n_groups=int(payload["n_groups"]),
                   projection_dim=int(payload["projection_dim"]),
                   metadata=payload.get("metadata", {}),
                   coordinates=coords)


def _pca_reduce(x: np.ndarray, target: int) -> np.ndarray:
    x = x - x.mean(axis=0)
    # full SVD is fine at desk scale; sign convention keeps runs reproducible
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:target]
    signs = np.sign(comps[np.arange(comps.shape[0]),
                          np.abs(comps).argmax(axis=1)])
    signs[signs == 0] = 1.0
    return x @ (comps * signs[:, None]).T


def _perplexity_probabilities(sq_dists: np.ndarray, perplexity: float,
                              tol: float = 1e-5, max_steps: int = 50) -> np.ndarray:
    """Per-row conditional probabilities with entropy matched to
    log(perplexity) by binary search over the Gaussian precision."""
    m = sq_dists.shape[0]
    target = np.log(perplexity)
    P = np.zeros((m, m))
    for i in range(m):
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        d = np.delete(sq_dists[i], i)
        for _ in range(max_steps):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                h, p = 0.0, np.zeros_like(w)
            else:
                p = w / total
                h = float(np.log(total) + beta * (d * p).sum())
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        row = np.insert(p, i, 0.0)
        P[i] = row
    return P


def tsne_project(embeddings: np.ndarray, perplexity: float = 30.0,
                 iterations: int = 1000, seed: int = 0) -> np.ndarray:
    """Exact t-SNE to 2-D; deterministic for a fixed seed."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise DimensionError("t-SNE needs at least 4 embedding rows")
    m = x.shape[0]
    rng = np.random.default_rng(seed)
    max_perp = (m - 1) / 3.0
    if perplexity >= max_perp:
        clamped = max(1.0, max_perp - 1e-9)
        warnings.warn(f"perplexity {perplexity} clamped to {clamped:.2f} "
                      f"for {m} points")
        perplexity = clamped
    if x.shape[1] > PCA_TARGET_DIM:
        x = _pca_reduce(x, PCA_TARGET_DIM)

    sq = np.sum(x * x, axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    off_diag = ~np.eye(m, dtype=bool)
    if (D[off_diag] == 0.0).any():  # identical rows give a degenerate q-distribution
        x = x + rng.normal(0.0, 1e-8, size=x.shape)
        sq = np.sum(x * x, axis=1)
        D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)

    P = _perplexity_probabilities(D, perplexity)
    P = (P + P.T) / (2.0 * m)
    P = np.maximum(P, 1e-12)

    y = rng.standard_normal((m, 2)) * 1e-4
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    exaggeration = 4.0
    eta = max(50.0, m / (4.0 * exaggeration))  # N-scaled rate; 500 diverges at desk scale
    min_gain = 0.01
    exaggeration_until = min(100, iterations)
    P_run = P * exaggeration

    for it in range(iterations):
        if it == exaggeration_until:
            P_run = P
        sq_y = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(
            sq_y[:, None] + sq_y[None, :] - 2.0 * (y @ y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        PQ = (P_run - Q) * num
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ y)
        momentum = 0.5 if it < 20 else 0.8
        gains = np.where(np.sign(grad) != np.sign(velocity),
                         gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, min_gain)
        velocity = momentum * velocity - eta * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    if not np.isfinite(y).all():
        raise ValidationError("t-SNE produced non-finite coordinates")
    return y


def kmeans(points: np.ndarray, n_clusters: int, seed: int = 0,
           max_iter: int = 300, ids: list[str] | None = None) -> SemanticGroups:
    """Lloyd's algorithm with k-means++ seeding; group ids are 1-based.

    Empty clusters are re-seeded to the point farthest from its centroid;
    inertia is checked to be non-increasing across iterations.
    """
    pts = np.asarray(points, dtype=np.float64)
    m = pts.shape[0]
    if n_clusters > m:
        raise ConfigError(f"cannot form {n_clusters} clusters from {m} points")
    if ids is None:
        ids = [str(i) for i in range(m)]
    rng = np.random.default_rng(seed)

    centroids = np.empty((n_clusters, pts.shape[1]))
    centroids[0] = pts[rng.integers(m)]
    closest = np.full(m, np.inf)
    for k in range(1, n_clusters):
        dist = np.sum((pts - centroids[k - 1]) ** 2, axis=1)
        closest = np.minimum(closest, dist)
        total = closest.sum()
        if total <= 0:
            centroids[k] = pts[rng.integers(m)]
        else:
            centroids[k] = pts[rng.choice(m, p=closest / total)]

    labels = np.zeros(m, dtype=int)
    prev_inertia = np.inf
    for _ in range(max_iter):
        dists = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(m), new_labels].sum())
        if inertia > prev_inertia + 1e-9:
            raise AssertionError("k-means inertia increased")
        for k in range(n_clusters):
            members = pts[new_labels == k]
            if len(members) == 0:
                farthest = int(dists[np.arange(m), new_labels].argmax())
                centroids[k] = pts[farthest]
                new_labels[farthest] = k
            else:
                centroids[k] = members.mean(axis=0)
        if (new_labels == labels).all() and inertia < np.inf and \
                abs(prev_inertia - inertia) < 1e-12:
            labels = new_labels
            break
        labels = new_labels
        prev_inertia = inertia

    dists = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    inertia = float(dists[np.arange(m), labels].sum())
    assignment = {qid: int(lbl) + 1 for qid, lbl in zip(ids, labels)}
    return SemanticGroups(assignment=assignment, centroids=centroids,
                          n_groups=n_clusters,
                          projection_dim=pts.shape[1],
                          metadata={"seed": seed, "inertia": inertia,
                                    "max_iter": max_iter})


def semantic_groups(ids: list[str], embeddings: np.ndarray, n_groups: int,
                    perplexity: float = 30.0, iterations: int = 1000,
                    seed: int = 0) -> SemanticGroups:
    """t-SNE projection followed by k-means; the full grouping pipeline."""
    coords = tsne_project(embeddings, perplexity=perplexity,
                          iterations=iterations, seed=seed)
    groups = kmeans(coords, n_groups, seed=seed, ids=ids)
    groups.metadata.update({"perplexity": perplexity, "iterations": iterations,
                            "n_groups": n_groups, "seed": seed})
    groups.coordinates = {qid: [float(x), float(y)]
                          for qid, (x, y) in zip(ids, coords)}
    return groups


def sample_contrastive_pair(batch_ids: list[str], groups: SemanticGroups,
                            anchor_id: str, h: int,
                            rng: np.random.Generator):
    """Pick one in-group positive and up to H out-group negatives from the
    batch, uniformly without replacement. Returns None when the batch holds
    no in-group partner (the contrastive term is skipped for this anchor)."""
    if anchor_id not in batch_ids:
        raise ValidationError(f"anchor {anchor_id!r} not in batch")
    anchor_group = groups.group(anchor_id)
    in_group = [q for q in batch_ids
                if q != anchor_id and groups.group(q) == anchor_group]
    out_group = [q for q in batch_ids if groups.group(q) != anchor_group]
    if not in_group or not out_group:
        return None
    positive = in_group[int(rng.integers(len(in_group)))]
    if len(out_group) <= h:
        negatives = list(out_group)
    else:
        idx = rng.choice(len(out_group), size=h, replace=False)
        negatives = [out_group[int(i)] for i in idx]
    return positive, negatives
