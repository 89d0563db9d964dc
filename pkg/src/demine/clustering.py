"""DBSCAN grouping of found mines (Euclidean metric, neighborhood includes self).

At the scale this tool works at (a few hundred mines) the O(n^2)
neighborhood search is fine and keeps the implementation dependency-free.
With min_pts=1 every point is core, so the clusters are exactly the
connected components of the eps-distance graph and there is no noise.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class ParamsMismatchError(ValueError):
    """Incremental update called with different parameters than the base run."""


@dataclass(frozen=True)
class ClusteringParams:
    eps: float
    min_pts: int = 1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")


@dataclass
class Cluster:
    member_indices: tuple[int, ...]
    points: np.ndarray  # (k, 2)
    center: np.ndarray  # (2,) centroid

    def __len__(self) -> int:
        return len(self.member_indices)


@dataclass
class ClusteringResult:
    clusters: list[Cluster]
    noise: list[int]
    params: ClusteringParams
    points: np.ndarray  # the full input, kept for incremental updates


def dbscan(points: np.ndarray, params: ClusteringParams) -> tuple[list[Cluster], list[int]]:
    """Cluster 2D points; returns (clusters, noise indices).

    Core points have >= min_pts neighbors within eps (counting themselves);
    clusters are maximal density-connected sets. Border points attach to the
    cluster of their nearest core neighbor (coordinate-lexicographic
    tie-break), which keeps membership independent of input order. Clusters
    are ordered by smallest member index.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return [], []
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")

    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    neighbors = dist <= params.eps
    core = neighbors.sum(axis=1) >= params.min_pts

    labels = np.full(n, -1, dtype=int)
    cluster_id = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != -1:
            continue
        queue = deque([seed])
        labels[seed] = cluster_id
        while queue:
            q = queue.popleft()
            if not core[q]:
                continue
            for nb in np.flatnonzero(neighbors[q]):
                if labels[nb] == -1 and core[nb]:
                    labels[nb] = cluster_id
                    queue.append(nb)
        cluster_id += 1

    # Border points: nearest core neighbor within eps decides the cluster.
    core_idx = np.flatnonzero(core)
    for i in range(n):
        if labels[i] != -1 or not len(core_idx):
            continue
        within = core_idx[dist[i, core_idx] <= params.eps]
        if not len(within):
            continue  # noise
        d = dist[i, within]
        best = d.min()
        ties = within[d == best]
        if len(ties) > 1:
            order = np.lexsort((pts[ties, 1], pts[ties, 0]))
            ties = ties[order]
        labels[i] = labels[ties[0]]

    noise = [int(i) for i in np.flatnonzero(labels == -1)]
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        if lab != -1:
            groups.setdefault(int(lab), []).append(i)
    members = sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])
    clusters = [
        Cluster(
            member_indices=tuple(g),
            points=pts[g],
            center=pts[g].mean(axis=0),
        )
        for g in members
    ]
    return clusters, noise


def run_dbscan(points: np.ndarray, params: ClusteringParams) -> ClusteringResult:
    clusters, noise = dbscan(points, params)
    return ClusteringResult(
        clusters=clusters,
        noise=noise,
        params=params,
        points=np.asarray(points, dtype=float).reshape(-1, 2).copy(),
    )


def incremental_recluster(
    previous: ClusteringResult,
    new_points: np.ndarray,
    params: ClusteringParams | None = None,
) -> ClusteringResult:
    """Recluster after new finds; equivalent to a fresh run on the union.

    The contract is equivalence, not speed: a full recompute is performed.
    """
    if params is not None and params != previous.params:
        raise ParamsMismatchError(
            f"params {params} differ from the base run's {previous.params}"
        )
    new = np.asarray(new_points, dtype=float).reshape(-1, 2)
    union = np.vstack([previous.points, new]) if len(new) else previous.points
    return run_dbscan(union, previous.params)
