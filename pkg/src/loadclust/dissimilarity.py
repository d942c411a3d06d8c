"""Pairwise Euclidean dissimilarity matrices, stored condensed.

The N x N matrix is symmetric with a zero diagonal, so only the upper
triangle is kept: entry (i, j) with i < j lives at
``n*i - i*(i+1)/2 + (j - i - 1)``.  Large populations can be built
directly into a memory-mapped file with the same layout.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import MatrixError

MAGIC = b"QCDM"
FORMAT_VERSION = 1
_KIND_CODES = {"AC": 0, "PAC": 1, "QC": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_HEADER = struct.Struct("<4sBBQ")  # magic, version, kind, n


def condensed_index(n: int, i: int, j: int) -> int:
    """Flat index of pair (i, j), i != j, in a condensed matrix of size n."""
    if i == j:
        raise MatrixError("no condensed entry for the diagonal")
    if i > j:
        i, j = j, i
    return n * i - (i * (i + 1)) // 2 + (j - i - 1)


@dataclass
class CondensedMatrix:
    n: int
    data: np.ndarray
    kind: str
    meter_ids: list[str]

    def __post_init__(self):
        expected = self.n * (self.n - 1) // 2
        if len(self.data) != expected:
            raise MatrixError(
                f"condensed data length {len(self.data)} != n(n-1)/2 = {expected}"
            )
        if len(self.meter_ids) != self.n:
            raise MatrixError("meter_ids length != n")
        self._id_index = {m: i for i, m in enumerate(self.meter_ids)}

    def get(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        return float(self.data[condensed_index(self.n, i, j)])

    def get_by_id(self, id_a: str, id_b: str) -> float:
        return self.get(self._id_index[id_a], self._id_index[id_b])


def euclidean(u, v) -> float:
    """Euclidean distance between two feature vectors of equal length."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise MatrixError(f"length mismatch: {u.shape} vs {v.shape}")
    diff = u - v
    return float(np.sqrt(diff @ diff))


def _feature_matrix(features) -> tuple[np.ndarray, str, list[str]]:
    features = list(features)
    if len(features) < 2:
        raise MatrixError("need at least two feature vectors")
    kind = features[0].kind
    width = len(features[0])
    for fv in features:
        if fv.kind != kind:
            raise MatrixError(f"mixed feature kinds: {kind} vs {fv.kind}")
        if len(fv) != width:
            raise MatrixError("inconsistent feature vector lengths")
    stacked = np.vstack([fv.values for fv in features])
    if not np.isfinite(stacked).all():
        raise MatrixError("non-finite feature values")
    return stacked, kind, [fv.meter_id for fv in features]


def build_matrix(
    features,
    threads: int = 1,
    standardize: bool = False,
    mmap_path=None,
) -> CondensedMatrix:
    """Condensed Euclidean distance matrix over a list of feature vectors.

    Rows are processed in blocks that may run on several threads; each
    entry is produced by one fixed vectorized reduction, so the result is
    bit-identical for any thread count.  ``standardize`` z-scores each
    feature dimension first (off by default).  With ``mmap_path`` the
    matrix is written straight into a disk-backed file of the standard
    layout instead of RAM.
    """
    stacked, kind, meter_ids = _feature_matrix(features)
    if standardize:
        mean = stacked.mean(axis=0)
        sd = stacked.std(axis=0)
        sd[sd == 0.0] = 1.0
        stacked = (stacked - mean) / sd
    n = stacked.shape[0]
    total = n * (n - 1) // 2

    if mmap_path is not None:
        _write_header(mmap_path, kind, n, total)
        data = np.memmap(mmap_path, dtype="<f8", mode="r+",
                         offset=_HEADER.size, shape=(total,))
    else:
        data = np.empty(total, dtype=np.float64)

    def fill_row(i: int) -> None:
        start = condensed_index(n, i, i + 1)
        diff = stacked[i + 1 :] - stacked[i]
        data[start : start + (n - 1 - i)] = np.sqrt((diff * diff).sum(axis=1))

    rows = range(n - 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, rows))
    else:
        for i in rows:
            fill_row(i)

    if mmap_path is not None:
        data.flush()
    return CondensedMatrix(n=n, data=data, kind=kind, meter_ids=meter_ids)


def _write_header(path, kind: str, n: int, total: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, _KIND_CODES[kind], n))
        fh.truncate(_HEADER.size + total * 8)


def save_matrix(matrix: CondensedMatrix, path, config_hash: str | None = None) -> None:
    """Persist a matrix in the binary format plus a JSON sidecar of ids."""
    if isinstance(matrix.data, np.memmap) and getattr(matrix.data, "filename", None) == str(path):
        matrix.data.flush()
    else:
        _write_header(path, matrix.kind, matrix.n, len(matrix.data))
        out = np.memmap(path, dtype="<f8", mode="r+",
                        offset=_HEADER.size, shape=(len(matrix.data),))
        out[:] = matrix.data
        out.flush()
        del out
    sidecar = {"n": matrix.n, "kind": matrix.kind, "meter_ids": matrix.meter_ids}
    if config_hash:
        sidecar["config_hash"] = config_hash
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_matrix(path, mmap: bool = True) -> tuple[CondensedMatrix, str | None]:
    """Load a matrix file; returns (matrix, config_hash or None)."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise MatrixError(f"{path}: truncated header")
    magic, version, kind_code, n = _HEADER.unpack(header)
    if magic != MAGIC:
        raise MatrixError(f"{path}: not a matrix file (bad magic)")
    if version != FORMAT_VERSION:
        raise MatrixError(f"{path}: unsupported version {version}")
    if kind_code not in _KIND_NAMES:
        raise MatrixError(f"{path}: unknown kind byte {kind_code}")
    total = n * (n - 1) // 2
    if mmap:
        data = np.memmap(path, dtype="<f8", mode="r", offset=_HEADER.size, shape=(total,))
    else:
        data = np.fromfile(path, dtype="<f8", count=total, offset=_HEADER.size)
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
        meter_ids = sidecar["meter_ids"]
        config_hash = sidecar.get("config_hash")
    except FileNotFoundError:
        meter_ids = [str(i) for i in range(n)]
        config_hash = None
    return CondensedMatrix(n=n, data=data, kind=_KIND_NAMES[kind_code],
                           meter_ids=meter_ids), config_hash


def export_csv(matrix: CondensedMatrix, path, max_n: int = 2000) -> None:
    """Write the full square matrix as CSV; guarded to small populations."""
    if matrix.n > max_n:
        raise MatrixError(
            f"refusing CSV export for n={matrix.n} > {max_n} (use the binary format)"
        )
    with open(path, "w", newline="") as fh:
        fh.write("meter_id," + ",".join(matrix.meter_ids) + "\n")
        for i, mid in enumerate(matrix.meter_ids):
            row = [matrix.get(i, j) for j in range(matrix.n)]
            fh.write(mid + "," + ",".join(repr(x) for x in row) + "\n")
