"""Agglomerative hierarchical clustering on a condensed distance matrix.

Uses the nearest-neighbor-chain algorithm, valid for single, complete and
average linkage because all three are reducible: a merge never brings two
other clusters closer together.  Cluster distances are maintained in place
in a working copy of the condensed matrix via the Lance-Williams update
rules, so the working memory beyond the matrix copy is O(n).

The merge list is canonicalized after the chain finishes: merges are
stably sorted by height (reducibility guarantees a child merge never has a
larger height than its parent, so this preserves dependencies) and node
ids are reassigned so that merge k creates node n + k.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dissimilarity import CondensedMatrix, condensed_index
from .errors import ClusterError

LINKAGES = ("single", "complete", "average")


@dataclass
class Dendrogram:
    """Merge tree: leaves are 0..n-1, merge k creates node n + k.

    ``merges`` has one row per merge: (left, right, height, size) with
    left < right, sorted by non-decreasing height.
    """

    n: int
    merges: np.ndarray

    def __post_init__(self):
        self.merges = np.asarray(self.merges, dtype=np.float64)
        if self.merges.shape != (self.n - 1, 4):
            raise ClusterError(
                f"expected {self.n - 1} merges of 4 fields, got {self.merges.shape}"
            )

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]


@dataclass
class Partition:
    """Flat cluster labels per leaf, plus a per-cluster atypical flag."""

    labels: np.ndarray
    k: int
    atypical: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.atypical is None:
            self.atypical = np.zeros(self.k, dtype=bool)
        self.atypical = np.asarray(self.atypical, dtype=bool)
        if self.atypical.shape != (self.k,):
            raise ClusterError("atypical flags must have one entry per cluster")
        present = np.unique(self.labels)
        if not np.array_equal(present, np.arange(self.k)):
            raise ClusterError(f"labels must cover exactly 0..{self.k - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def _row_gather(d, offsets, n, x, out) -> None:
    """Fill ``out`` with distances from node x to every other slot."""
    if x > 0:
        out[:x] = d[offsets[:x] + x]
    out[x] = np.inf
    if x < n - 1:
        start = offsets[x] + x + 1
        out[x + 1 :] = d[start : start + (n - 1 - x)]


def _row_scatter(d, offsets, n, x, row) -> None:
    """Write distances from node x back into the condensed storage."""
    if x > 0:
        d[offsets[:x] + x] = row[:x]
    if x < n - 1:
        start = offsets[x] + x + 1
        d[start : start + (n - 1 - x)] = row[x + 1 :]


def agglomerate(matrix: CondensedMatrix, linkage: str = "complete") -> Dendrogram:
    """Cluster a condensed distance matrix bottom-up.

    Linkage is one of "single", "complete", "average" (min / max /
    size-weighted mean of cross-cluster distances).  Nearest-neighbor ties
    resolve toward the smaller slot index, and the chain prefers staying
    on its previous node, which makes the result deterministic.
    """
    if linkage not in LINKAGES:
        raise ClusterError(f"unknown linkage {linkage!r}")
    n = matrix.n
    if n < 2:
        raise ClusterError("need at least two observations")
    d = np.array(matrix.data, dtype=np.float64, copy=True)
    if not np.isfinite(d).all():
        raise ClusterError("distance matrix has non-finite entries")

    idx = np.arange(n, dtype=np.int64)
    offsets = n * idx - (idx * (idx + 1)) // 2 - idx - 1
    size = np.ones(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    chain = np.empty(n + 1, dtype=np.int64)
    chain_len = 0
    row_x = np.empty(n, dtype=np.float64)
    row_y = np.empty(n, dtype=np.float64)
    raw = np.empty((n - 1, 3), dtype=np.float64)  # rep_a, rep_b, height

    for m in range(n - 1):
        if chain_len == 0:
            chain[0] = int(np.argmax(active))
            chain_len = 1
        while True:
            x = int(chain[chain_len - 1])
            _row_gather(d, offsets, n, x, row_x)
            row_x[~active] = np.inf
            y = int(np.argmin(row_x))
            dmin = row_x[y]
            if chain_len > 1:
                prev = int(chain[chain_len - 2])
                if row_x[prev] == dmin:
                    y = prev
            if chain_len > 1 and y == chain[chain_len - 2]:
                break
            chain[chain_len] = y
            chain_len += 1
        chain_len -= 2

        # merge x and y at height dmin; the smaller slot keeps the cluster
        _row_gather(d, offsets, n, x, row_x)
        _row_gather(d, offsets, n, y, row_y)
        if linkage == "single":
            new_row = np.minimum(row_x, row_y)
        elif linkage == "complete":
            new_row = np.maximum(row_x, row_y)
        else:
            new_row = (size[x] * row_x + size[y] * row_y) / (size[x] + size[y])
        keep, drop = (x, y) if x < y else (y, x)
        raw[m, 0] = keep
        raw[m, 1] = drop
        raw[m, 2] = dmin
        size[keep] += size[drop]
        active[drop] = False
        _row_scatter(d, offsets, n, keep, new_row)

    return Dendrogram(n=n, merges=_canonicalize(n, raw))


def _canonicalize(n: int, raw: np.ndarray) -> np.ndarray:
    """Sort merges by height and relabel nodes so merge k creates n + k.

    The raw records identify each cluster by a slot index; slot s always
    contains leaf s, so a union-find over leaves recovers the clusters in
    sorted order.
    """
    order = np.argsort(raw[:, 2], kind="stable")
    parent = np.arange(n, dtype=np.int64)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    node_id = np.arange(n, dtype=np.int64)
    csize = np.ones(n, dtype=np.int64)
    merges = np.empty((n - 1, 4), dtype=np.float64)
    for k, ridx in enumerate(order):
        ra = find(int(raw[ridx, 0]))
        rb = find(int(raw[ridx, 1]))
        ida, idb = int(node_id[ra]), int(node_id[rb])
        left, right = (ida, idb) if ida < idb else (idb, ida)
        total = csize[ra] + csize[rb]
        parent[ra] = rb
        node_id[rb] = n + k
        csize[rb] = total
        merges[k] = (left, right, raw[ridx, 2], total)
    return merges


def cut(dendrogram: Dendrogram, k: int | None = None,
        height: float | None = None) -> Partition:
    """Flatten a dendrogram into clusters, by count or by height.

    Cutting at a height keeps every merge with height <= h; cutting by k
    severs the k - 1 highest merges (the last k - 1 in canonical order).
    Cluster ids are assigned by ascending smallest member leaf.
    """
    n = dendrogram.n
    if (k is None) == (height is None):
        raise ClusterError("specify exactly one of k or height")
    if k is not None:
        if not 1 <= k <= n:
            raise ClusterError(f"k must be in [1, {n}], got {k}")
        applied = n - k
    else:
        if height < 0:
            raise ClusterError("height must be >= 0")
        applied = int(np.searchsorted(dendrogram.heights, height, side="right"))

    parent = np.arange(n + applied, dtype=np.int64)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for m in range(applied):
        left, right = int(dendrogram.merges[m, 0]), int(dendrogram.merges[m, 1])
        parent[find(left)] = n + m
        parent[find(right)] = n + m

    roots = np.fromiter((find(i) for i in range(n)), dtype=np.int64, count=n)
    # first occurrence order == ascending smallest leaf within cluster
    _, first_pos, labels = np.unique(roots, return_index=True, return_inverse=True)
    relabel = np.empty(len(first_pos), dtype=np.int64)
    relabel[np.argsort(first_pos, kind="stable")] = np.arange(len(first_pos))
    return Partition(labels=relabel[labels], k=len(first_pos))


def flag_atypical(partition: Partition, min_fraction: float) -> Partition:
    """Mark clusters holding fewer than min_fraction of all leaves atypical."""
    if not 0.0 <= min_fraction < 1.0:
        raise ClusterError("min_fraction must be in [0, 1)")
    sizes = partition.cluster_sizes
    atypical = sizes < min_fraction * len(partition)
    return Partition(labels=partition.labels.copy(), k=partition.k, atypical=atypical)


def write_dendrogram_csv(dendrogram: Dendrogram, path,
                         config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["merge_index", "left", "right", "height", "size"])
        for m, (left, right, h, s) in enumerate(dendrogram.merges):
            writer.writerow([m, int(left), int(right), repr(float(h)), int(s)])


def read_dendrogram_csv(path) -> tuple[Dendrogram, str | None]:
    config_hash = None
    rows = []
    with open(path, "r", newline="") as fh:
        first = fh.readline()
        if first.startswith("# config_hash="):
            config_hash = first.strip().split("=", 1)[1]
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                rows.append((int(row[1]), int(row[2]), float(row[3]), int(row[4])))
    merges = np.array(rows, dtype=np.float64)
    return Dendrogram(n=len(rows) + 1, merges=merges), config_hash


def write_partition_csv(partition: Partition, meter_ids, path,
                        config_hash: str | None = None) -> None:
    if len(meter_ids) != len(partition):
        raise ClusterError("meter_ids length != partition size")
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["meter_id", "cluster", "atypical"])
        for mid, label in zip(meter_ids, partition.labels):
            writer.writerow([mid, int(label), int(partition.atypical[label])])


def read_partition_csv(path) -> tuple[Partition, list[str], str | None]:
    config_hash = None
    meter_ids: list[str] = []
    labels: list[int] = []
    flags: dict[int, bool] = {}
    with open(path, "r", newline="") as fh:
        first = fh.readline()
        if first.startswith("# config_hash="):
            config_hash = first.strip().split("=", 1)[1]
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if not row:
                continue
            meter_ids.append(row[0])
            label = int(row[1])
            labels.append(label)
            flags[label] = bool(int(row[2]))
    k = max(labels) + 1 if labels else 0
    atypical = np.array([flags.get(c, False) for c in range(k)], dtype=bool)
    return Partition(labels=np.array(labels), k=k, atypical=atypical), meter_ids, config_hash
