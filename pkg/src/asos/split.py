"""Spatially consistent train/val/test split.

Per category: DBSCAN (``min_samples=1``, i.e. single-linkage at ``eps``)
groups nearby samples, oversized groups are broken up with k-means, and
whole clusters are dealt greedily to the subset with the largest deficit.
"""
import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from sklearn.cluster import DBSCAN, KMeans

SUBSETS = ("train", "val", "test")
EARTH_RADIUS = 6_371_008.8  # meters


@dataclass
class SplitAssignment:
    subset: Dict[str, str] = field(default_factory=dict)
    cluster: Dict[str, str] = field(default_factory=dict)
    # first-stage (density) cluster, before k-means subdivision
    dbscan_cluster: Dict[str, str] = field(default_factory=dict)

    def ids(self, subset):
        return [k for k, v in self.subset.items() if v == subset]

    def counts(self):
        return {s: sum(v == s for v in self.subset.values()) for s in SUBSETS}

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "subset", "cluster_id", "dbscan_cluster_id"])
            for sid in sorted(self.subset):
                w.writerow([sid, self.subset[sid], self.cluster[sid], self.dbscan_cluster[sid]])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                sid = row["sample_id"]
                if row["subset"] not in SUBSETS:
                    raise ValueError(f"{path}: unknown subset {row['subset']!r} for {sid}")
                out.subset[sid] = row["subset"]
                out.cluster[sid] = row["cluster_id"]
                out.dbscan_cluster[sid] = row.get("dbscan_cluster_id", row["cluster_id"])
        return out


def _project(coords, crs):
    """Coordinates in meters for k-means (local equirectangular for lon/lat)."""
    if crs == "planar":
        return coords
    lat0 = np.deg2rad(coords[:, 1].mean())
    x = np.deg2rad(coords[:, 0]) * math.cos(lat0) * EARTH_RADIUS
    y = np.deg2rad(coords[:, 1]) * EARTH_RADIUS
    return np.column_stack([x, y])


def density_clusters(coords, eps, crs="planar"):
    """Connected components of the ``eps``-neighbourhood graph."""
    coords = np.asarray(coords, dtype=np.float64)
    if crs == "geographic":
        # haversine expects (lat, lon) in radians
        X = np.deg2rad(coords[:, ::-1])
        db = DBSCAN(eps=eps / EARTH_RADIUS, min_samples=1, metric="haversine", algorithm="ball_tree")
    else:
        X = coords
        db = DBSCAN(eps=eps, min_samples=1)
    return db.fit_predict(X)


def greedy_assign(sizes, fractions, n_total, preassigned=None):
    """Deal clusters (largest first) to the subset with the largest remaining deficit.

    ``sizes`` must already be in dealing order. Ties go to the earlier subset.
    """
    target = np.asarray(fractions, dtype=np.float64) * n_total
    filled = np.zeros(len(fractions))
    if preassigned is not None:
        filled += preassigned
    out = []
    for size in sizes:
        k = int(np.argmax(target - filled))
        filled[k] += size
        out.append(k)
    return out


def spatial_split(samples, eps=10_000.0, max_cluster_size="auto", fractions=(0.8, 0.1, 0.1),
                  seed=0, min_cluster_size=5) -> SplitAssignment:
    """Assign every sample to train/val/test so that no cluster straddles subsets.

    Parameters
    ----------
    samples : sequence of RasterSample
    eps : float
        DBSCAN neighbourhood radius in meters (great-circle for geographic
        coordinates, Euclidean for planar ones).
    max_cluster_size : "auto", int or None
        Clusters larger than this are subdivided by k-means into
        ``ceil(size / (max_cluster_size / 2))`` parts. ``"auto"`` uses 5 % of
        the category's sample count (at least ``2 * min_cluster_size``);
        None disables subdivision.
    fractions : (train, val, test)
    seed : int
        Seeds k-means and tie shuffling.
    min_cluster_size : int
        Clusters with fewer samples go to train unconditionally.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("spatial_split: no samples")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")

    rng = np.random.default_rng(seed)
    result = SplitAssignment()
    by_cat: Dict[str, list] = {}
    for s in samples:
        by_cat.setdefault(s.category, []).append(s)

    for cat in sorted(by_cat):
        group = sorted(by_cat[cat], key=lambda s: s.id)
        _split_category(cat, group, eps, max_cluster_size, fractions, rng, seed, min_cluster_size, result)
    return result


def _split_category(cat, group, eps, max_cluster_size, fractions, rng, seed, min_cluster_size, result):
    crss = {s.crs for s in group}
    if len(crss) != 1:
        raise ValueError(f"category {cat}: mixed coordinate systems {sorted(crss)}")
    crs = crss.pop()
    n = len(group)
    coords = np.array([s.location for s in group], dtype=np.float64)
    first = density_clusters(coords, eps, crs)

    if max_cluster_size == "auto":
        # floor keeps k-means pieces at or above the small-cluster threshold
        limit = max(0.05 * n, 2 * min_cluster_size)
    elif max_cluster_size is None:
        limit = math.inf
    else:
        limit = float(max_cluster_size)

    final = np.empty(n, dtype=object)
    projected = _project(coords, crs)
    for c in np.unique(first):
        idx = np.flatnonzero(first == c)
        if len(idx) > limit:
            k = min(len(idx), math.ceil(len(idx) / (limit / 2)))
            km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(projected[idx])
            sub = km.labels_
        else:
            sub = np.zeros(len(idx), dtype=int)
        for i, j in zip(idx, sub):
            final[i] = f"{cat}:{c}.{j}"

    ids, sizes = np.unique(final.astype(str), return_counts=True)
    subset_of = {}
    if len(ids) == 1:
        warnings.warn(f"category {cat}: a single spatial cluster covers all {n} samples; all go to train",
                      stacklevel=3)
        subset_of[ids[0]] = "train"
    else:
        small = sizes < min_cluster_size
        forced = int(sizes[small].sum())
        for cid in ids[small]:
            subset_of[cid] = "train"
        big_ids, big_sizes = ids[~small], sizes[~small]
        # random tie order among equal sizes, then largest first
        perm = rng.permutation(len(big_ids))
        order = perm[np.argsort(-big_sizes[perm], kind="stable")]
        picks = greedy_assign(big_sizes[order], fractions, n, preassigned=np.array([forced, 0, 0]))
        for cid, k in zip(big_ids[order], picks):
            subset_of[cid] = SUBSETS[k]

    for s, cid, c0 in zip(group, final, first):
        result.subset[s.id] = subset_of[cid]
        result.cluster[s.id] = cid
        result.dbscan_cluster[s.id] = f"{cat}:{c0}"
