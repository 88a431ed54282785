"""Point cloud containers, file codecs and exact k-nearest-neighbour queries.

A cloud is a pair of row-aligned arrays: ``locations`` (N x 3, meters) and
``features`` (N x D_f, e.g. RGB in [0, 1]).  Row index is the identity of a
point; nothing in this package reorders or drops rows.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PointCloud",
    "SparseLabels",
    "DenseLabels",
    "CloudParseError",
    "EmptyInputError",
    "load_cloud",
    "save_cloud",
    "knn_indices",
    "load_clicks",
    "save_clicks",
]

BINARY_MAGIC = b"RACPC1"


class CloudParseError(ValueError):
    """Malformed cloud file; ``line`` is 1-based for ascii input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class EmptyInputError(ValueError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    locations: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        loc = _frozen(self.locations)
        feat = np.asarray(self.features, dtype=np.float64)
        if feat.ndim == 1 and loc.ndim == 2 and feat.shape[0] == loc.shape[0]:
            feat = feat[:, None]
        feat = _frozen(feat)
        if loc.ndim != 2 or loc.shape[1] != 3:
            raise ValueError(f"locations must be N x 3, got {loc.shape}")
        if feat.ndim != 2 or feat.shape[0] != loc.shape[0]:
            raise ValueError(
                f"features must have {loc.shape[0]} rows, got shape {feat.shape}"
            )
        if loc.shape[0] < 1:
            raise ValueError("a cloud needs at least one point")
        if not (np.isfinite(loc).all() and np.isfinite(feat).all()):
            raise ValueError("cloud contains non-finite values")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "features", feat)

    @property
    def n_points(self) -> int:
        return self.locations.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def as_matrix(self) -> np.ndarray:
        """The stacked ``[locations, features]`` input matrix, N x (3 + D_f)."""
        return np.concatenate([self.locations, self.features], axis=1)

    def replace(self, locations=None, features=None) -> "PointCloud":
        return PointCloud(
            self.locations if locations is None else locations,
            self.features if features is None else features,
        )

    def equals(self, other: "PointCloud") -> bool:
        """Bit-exact equality."""
        return (
            self.locations.shape == other.locations.shape
            and self.features.shape == other.features.shape
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class SparseLabels:
    """The M manually clicked points: parallel ``indices`` / ``classes``."""

    indices: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        idx = _frozen(np.asarray(self.indices, dtype=np.int64).reshape(-1), np.int64)
        cls = _frozen(np.asarray(self.classes, dtype=np.int64).reshape(-1), np.int64)
        if idx.shape != cls.shape:
            raise ValueError("indices and classes must have equal length")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("labeled point indices must be unique")
        if (idx < 0).any() or (cls < 0).any():
            raise ValueError("negative index or class in sparse labels")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "classes", cls)

    @property
    def n_labeled(self) -> int:
        return len(self.indices)

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.classes.tolist()))

    def validate(self, n_points: int, n_classes: int | None = None) -> None:
        if self.n_labeled > n_points:
            raise ValueError("more labels than points")
        if self.n_labeled and self.indices.max() >= n_points:
            raise ValueError(
                f"label index {int(self.indices.max())} out of range for N={n_points}"
            )
        if n_classes is not None and self.n_labeled and self.classes.max() >= n_classes:
            raise ValueError(
                f"class id {int(self.classes.max())} out of range for C={n_classes}"
            )


@dataclass(frozen=True, eq=False)
class DenseLabels:
    """Ground-truth class and instance id per point (evaluation only)."""

    class_per_point: np.ndarray
    instance_per_point: np.ndarray

    def __post_init__(self):
        cls = _frozen(np.asarray(self.class_per_point).reshape(-1), np.int64)
        ins = _frozen(np.asarray(self.instance_per_point).reshape(-1), np.int64)
        if cls.shape != ins.shape:
            raise ValueError("class and instance vectors differ in length")
        object.__setattr__(self, "class_per_point", cls)
        object.__setattr__(self, "instance_per_point", ins)

    def __len__(self) -> int:
        return len(self.class_per_point)

    def equals(self, other: "DenseLabels") -> bool:
        return np.array_equal(self.class_per_point, other.class_per_point) and np.array_equal(
            self.instance_per_point, other.instance_per_point
        )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("ascii-xyz", "binary"):
            raise ValueError(f"unknown cloud format {fmt!r}")
        return fmt
    return "ascii-xyz" if str(path).endswith((".xyz", ".txt")) else "binary"


def load_cloud(path, format: str | None = None) -> tuple[PointCloud, DenseLabels | None]:
    """Read a cloud file; returns ``(cloud, labels or None)``.

    ``format`` is ``"ascii-xyz"`` or ``"binary"``; when omitted, ``.xyz`` and
    ``.txt`` files are read as ascii and everything else as binary.
    """
    fmt = _infer_format(path, format)
    if fmt == "binary":
        return _load_binary(Path(path))
    return _load_ascii(Path(path))


def save_cloud(cloud: PointCloud, labels: DenseLabels | None, path, format: str | None = None) -> None:
    fmt = _infer_format(path, format)
    if labels is not None and len(labels) != cloud.n_points:
        raise ValueError("labels length differs from cloud size")
    try:
        if fmt == "binary":
            _save_binary(cloud, labels, Path(path))
        else:
            _save_ascii(cloud, labels, Path(path))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write cloud to {path}: {exc.strerror}") from exc


def _load_ascii(path: Path):
    rows = []
    ncols = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if ncols is None:
                if len(parts) < 3:
                    raise CloudParseError(
                        f"expected at least 3 columns, found {len(parts)}", lineno
                    )
                ncols = len(parts)
            elif len(parts) != ncols:
                raise CloudParseError(
                    f"expected {ncols} columns, found {len(parts)}", lineno
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise CloudParseError(f"non-numeric value in {line!r}", lineno) from None
    if not rows:
        raise EmptyInputError(f"{path} contains no points")
    data = np.array(rows, dtype=np.float64)
    # Trailing integer columns are labels only when the header says so; plain
    # ascii rows are treated as x y z + features.
    n_label_cols = _ascii_label_columns(path)
    if n_label_cols:
        labels_raw = data[:, -n_label_cols:]
        data = data[:, :-n_label_cols]
        cls = labels_raw[:, 0].astype(np.int64)
        ins = labels_raw[:, 1].astype(np.int64) if n_label_cols == 2 else np.zeros_like(cls)
        labels = DenseLabels(cls, ins)
    else:
        labels = None
    return PointCloud(data[:, :3], data[:, 3:]), labels


def _ascii_label_columns(path: Path) -> int:
    with open(path, "r") as fh:
        for raw in fh:
            line = raw.strip()
            if not line.startswith("#"):
                return 0
            if line.startswith("#labels"):
                try:
                    return int(line.split()[1])
                except (IndexError, ValueError):
                    raise CloudParseError("bad '#labels' header") from None
    return 0


def _save_ascii(cloud: PointCloud, labels: DenseLabels | None, path: Path) -> None:
    with open(path, "w") as fh:
        if labels is not None:
            fh.write("#labels 2\n")
        mat = cloud.as_matrix()
        for i in range(cloud.n_points):
            fields = [format(v, ".17g") for v in mat[i]]
            if labels is not None:
                fields += [str(labels.class_per_point[i]), str(labels.instance_per_point[i])]
            fh.write(" ".join(fields) + "\n")


def _save_binary(cloud: PointCloud, labels: DenseLabels | None, path: Path) -> None:
    header = BINARY_MAGIC + struct.pack(
        "<QQB", cloud.n_points, cloud.feature_dim, 1 if labels is not None else 0
    )
    body = cloud.as_matrix().astype("<f8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        if labels is not None:
            lab = np.stack([labels.class_per_point, labels.instance_per_point], axis=1)
            fh.write(lab.astype("<i8").tobytes(order="C"))


def _load_binary(path: Path):
    blob = path.read_bytes()
    if not blob:
        raise EmptyInputError(f"{path} is empty")
    head = len(BINARY_MAGIC) + 17
    if blob[: len(BINARY_MAGIC)] != BINARY_MAGIC or len(blob) < head:
        raise CloudParseError(f"{path}: not a binary cloud file")
    n, d, has_labels = struct.unpack("<QQB", blob[len(BINARY_MAGIC) : head])
    if n == 0:
        raise EmptyInputError(f"{path} contains no points")
    n_vals = n * (3 + d)
    expected = head + 8 * n_vals + (16 * n if has_labels else 0)
    if len(blob) != expected:
        raise CloudParseError(f"{path}: size {len(blob)} bytes, expected {expected}")
    mat = np.frombuffer(blob, dtype="<f8", count=n_vals, offset=head).reshape(n, 3 + d)
    labels = None
    if has_labels:
        lab = np.frombuffer(blob, dtype="<i8", count=2 * n, offset=head + 8 * n_vals)
        lab = lab.reshape(n, 2)
        labels = DenseLabels(lab[:, 0], lab[:, 1])
    return PointCloud(mat[:, :3], mat[:, 3:]), labels


def save_clicks(labels: SparseLabels, path) -> None:
    with open(path, "w") as fh:
        for i, c in labels.entries:
            fh.write(f"{i} {c}\n")


def load_clicks(path) -> SparseLabels:
    idx, cls = [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise CloudParseError(f"expected 'point_index class_id', got {line!r}", lineno)
            try:
                idx.append(int(parts[0]))
                cls.append(int(parts[1]))
            except ValueError:
                raise CloudParseError(f"non-integer click {line!r}", lineno) from None
    return SparseLabels(np.array(idx, dtype=np.int64), np.array(cls, dtype=np.int64))


# ---------------------------------------------------------------------------
# neighbourhoods
# ---------------------------------------------------------------------------


def knn_indices(cloud: PointCloud | np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Exact brute-force k-NN on locations, self included.

    Rows are ordered by (distance, index), so ties go to the lower index and
    the result is deterministic.
    """
    loc = cloud.locations if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = loc.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    out = np.empty((n, k), dtype=np.int64)
    cols = np.arange(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = np.zeros((stop - start, n))
        for axis in range(3):
            diff = loc[start:stop, axis, None] - loc[None, :, axis]
            d2 += diff * diff
        part = np.argpartition(d2, k - 1, axis=1)[:, :k] if k < n else np.tile(cols, (stop - start, 1))
        pd = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, pd), axis=1)
        out[start:stop] = np.take_along_axis(part, order, axis=1)
        if k < n:
            # rows whose k-th distance is shared with an unselected point need
            # the explicit (distance, index) tie-break
            kth = pd.max(axis=1, keepdims=True)
            tied = np.flatnonzero((d2 <= kth).sum(axis=1) > k)
            for r in tied:
                c = cols[d2[r] <= kth[r, 0]]
                o = np.lexsort((c, d2[r, c]))
                out[start + r] = c[o[:k]]
    return out


def default_threads() -> int:
    """Worker cap from ``RAC_THREADS`` (defaults to the CPU count)."""
    raw = os.environ.get("RAC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"RAC_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1
