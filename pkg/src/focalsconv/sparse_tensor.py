"""Sparse voxel tensor: unique sorted coordinates plus a feature matrix.

Coordinates are stored as an ``(N, 4)`` int32 array with columns
``(batch, x, y, z)``. The canonical order is lexicographic by
``(batch, z, y, x)``, which is also the order of the packed int64 keys
produced by :func:`pack_keys`, so a canonical tensor always has
ascending keys.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BoundsError, CapacityError, FormatError, ShapeError

DENSE_LIMIT = 2 ** 24

Shape3 = Tuple[int, int, int]


def _as_shape3(value, name: str = "shape") -> Shape3:
    vals = tuple(int(v) for v in np.broadcast_to(np.asarray(value), (3,)))
    if any(v <= 0 for v in vals):
        raise ShapeError(f"{name} must be positive, got {vals}")
    return vals  # type: ignore[return-value]


def pack_keys(coords: np.ndarray, spatial_shape: Sequence[int]) -> np.ndarray:
    """Pack in-bounds ``(b, x, y, z)`` rows into int64 keys ordered by (b, z, y, x)."""
    coords = np.asarray(coords, dtype=np.int64)
    X, Y, Z = (int(s) for s in spatial_shape)
    return ((coords[:, 0] * Z + coords[:, 3]) * Y + coords[:, 2]) * X + coords[:, 1]


def unpack_keys(keys: np.ndarray, spatial_shape: Sequence[int]) -> np.ndarray:
    X, Y, Z = (int(s) for s in spatial_shape)
    keys = np.asarray(keys, dtype=np.int64)
    x = keys % X
    rest = keys // X
    y = rest % Y
    rest = rest // Y
    z = rest % Z
    b = rest // Z
    return np.stack([b, x, y, z], axis=1).astype(np.int32)


def in_bounds(coords: np.ndarray, spatial_shape: Sequence[int], batch_size: Optional[int] = None) -> np.ndarray:
    coords = np.asarray(coords)
    ok = np.ones(len(coords), dtype=bool)
    for axis, extent in enumerate(spatial_shape):
        c = coords[:, axis + 1]
        ok &= (c >= 0) & (c < extent)
    ok &= coords[:, 0] >= 0
    if batch_size is not None:
        ok &= coords[:, 0] < batch_size
    return ok


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Canonical sparse voxel tensor.

    Instances are treated as immutable; use :func:`build` to construct one
    from arbitrary (unsorted, possibly duplicated) coordinates.
    """

    coords: np.ndarray
    features: np.ndarray
    spatial_shape: Shape3
    stride: Shape3 = (1, 1, 1)
    batch_size: int = 1
    _keys: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def dtype(self):
        return self.features.dtype

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            object.__setattr__(self, "_keys", pack_keys(self.coords, self.spatial_shape))
        return self._keys

    def replace_features(self, features: np.ndarray) -> "SparseTensor":
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[0] != self.n:
            raise ShapeError(f"expected {self.n} feature rows, got shape {features.shape}")
        return SparseTensor(self.coords, features, self.spatial_shape, self.stride,
                            self.batch_size, self._keys)

    def same_coords(self, other: "SparseTensor") -> bool:
        return (tuple(self.spatial_shape) == tuple(other.spatial_shape)
                and self.n == other.n
                and bool(np.array_equal(self.coords, other.coords)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensor):
            return NotImplemented
        return (self.same_coords(other)
                and tuple(self.stride) == tuple(other.stride)
                and self.batch_size == other.batch_size
                and self.features.shape == other.features.shape
                and bool(np.array_equal(self.features, other.features)))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (f"SparseTensor(n={self.n}, C={self.channels}, shape={self.spatial_shape}, "
                f"stride={self.stride}, batch={self.batch_size}, dtype={self.dtype})")


def build(coords, features, spatial_shape, batch_size: int = 1,
          stride=(1, 1, 1), dtype=None) -> SparseTensor:
    """Canonicalize coordinates and features into a :class:`SparseTensor`.

    Rows are sorted by (batch, z, y, x). Duplicate coordinates are merged by
    summing their feature rows in canonical order.
    """
    spatial_shape = _as_shape3(spatial_shape, "spatial_shape")
    stride = _as_shape3(stride, "stride")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    features = np.asarray(features)
    if dtype is not None:
        features = features.astype(dtype, copy=False)
    elif not np.issubdtype(features.dtype, np.floating):
        features = features.astype(np.float32)
    if features.ndim == 1 and len(coords) == 0:
        features = features.reshape(0, 0)
    if features.ndim != 2 or features.shape[0] != coords.shape[0]:
        raise ShapeError(f"{coords.shape[0]} coordinates but feature shape {features.shape}")
    if batch_size <= 0:
        raise ShapeError("batch_size must be positive")
    if np.abs(coords).max(initial=0) >= 2 ** 31:
        raise BoundsError("coordinate does not fit in 32 bits")
    ok = in_bounds(coords, spatial_shape, batch_size)
    if not ok.all():
        bad = coords[~ok][0].tolist()
        raise BoundsError(f"coordinate {bad} outside shape {spatial_shape} / batch {batch_size}")

    keys = pack_keys(coords, spatial_shape)
    uniq, inverse = np.unique(keys, return_inverse=True)
    if len(uniq) == len(keys):
        order = np.argsort(keys, kind="stable")
        feats = features[order]
    else:
        # accumulate in canonical (stable) order so the sum is deterministic
        order = np.argsort(keys, kind="stable")
        feats = np.zeros((len(uniq), features.shape[1]), dtype=features.dtype)
        np.add.at(feats, inverse[order], features[order])
    out_coords = unpack_keys(uniq, spatial_shape)
    return SparseTensor(out_coords, np.ascontiguousarray(feats), spatial_shape, stride,
                        int(batch_size), uniq)


def empty(channels: int, spatial_shape, batch_size: int = 1, stride=(1, 1, 1),
          dtype=np.float32) -> SparseTensor:
    return build(np.zeros((0, 4), np.int64), np.zeros((0, channels), dtype), spatial_shape,
                 batch_size, stride)


class CoordIndex:
    """Lookup from coordinate to row for a canonical tensor (binary search on keys)."""

    def __init__(self, t: SparseTensor):
        self._keys = t.keys
        self._shape = t.spatial_shape
        self._batch = t.batch_size

    def __len__(self) -> int:
        return len(self._keys)

    def lookup_many(self, coords) -> np.ndarray:
        """Rows for each coordinate, ``-1`` where absent or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
        rows = np.full(len(coords), -1, dtype=np.int64)
        ok = in_bounds(coords, self._shape, self._batch)
        if not ok.any() or len(self._keys) == 0:
            return rows
        k = pack_keys(coords[ok], self._shape)
        pos = np.searchsorted(self._keys, k)
        pos_c = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos_c] == k
        sub = np.where(hit, pos_c, -1)
        rows[ok] = sub
        return rows

    def lookup(self, coord) -> Optional[int]:
        row = int(self.lookup_many([coord])[0])
        return None if row < 0 else row

    def __contains__(self, coord) -> bool:
        return self.lookup(coord) is not None


def index(t: SparseTensor) -> CoordIndex:
    return CoordIndex(t)


def _dense_size(t_or_shape, channels: int, batch_size: int) -> int:
    X, Y, Z = t_or_shape
    return int(X) * int(Y) * int(Z) * int(channels) * int(batch_size)


def to_dense(t: SparseTensor) -> np.ndarray:
    """Materialize as ``[batch, C, X, Y, Z]``."""
    if _dense_size(t.spatial_shape, t.channels, t.batch_size) > DENSE_LIMIT:
        raise CapacityError(f"dense size of {t!r} exceeds {DENSE_LIMIT} entries")
    dense = np.zeros((t.batch_size, t.channels) + tuple(t.spatial_shape), dtype=t.dtype)
    b, x, y, z = t.coords.T
    dense[b, :, x, y, z] = t.features
    return dense


def from_dense(dense: np.ndarray, stride=(1, 1, 1)) -> SparseTensor:
    """Inverse of :func:`to_dense`; keeps voxels with any nonzero channel."""
    dense = np.asarray(dense)
    if dense.ndim != 5:
        raise ShapeError("expected [batch, C, X, Y, Z]")
    B, C = dense.shape[:2]
    active = np.any(dense != 0, axis=1)
    b, x, y, z = np.nonzero(active)
    coords = np.stack([b, x, y, z], axis=1)
    feats = dense[b, :, x, y, z]
    return build(coords, feats.reshape(len(coords), C), dense.shape[2:], B, stride, dtype=dense.dtype)


def embed(t: SparseTensor, coords_superset: SparseTensor) -> np.ndarray:
    """Feature rows of ``t`` scattered onto the coordinates of ``coords_superset``.

    Missing positions get zero rows. Raises if ``t`` has a coordinate that is
    absent from the superset.
    """
    rows = CoordIndex(coords_superset).lookup_many(t.coords)
    if (rows < 0).any():
        from .errors import AlignmentError
        raise AlignmentError("coordinates are not a subset of the target set")
    out = np.zeros((coords_superset.n, t.channels), dtype=t.dtype)
    out[rows] = t.features
    return out


# --- SVOX-CSV -----------------------------------------------------------------

def write_svox(t: SparseTensor, path_or_buf: Union[str, io.TextIOBase]) -> None:
    X, Y, Z = t.spatial_shape
    lines = [f"svox,v1,C={t.channels},shape={X}x{Y}x{Z},batch={t.batch_size}"]
    for c, f in zip(t.coords.tolist(), t.features.tolist()):
        lines.append(",".join([str(v) for v in c] + [repr(float(v)) for v in f]))
    text = "\n".join(lines) + "\n"
    if isinstance(path_or_buf, str):
        with open(path_or_buf, "w", newline="\n") as fh:
            fh.write(text)
    else:
        path_or_buf.write(text)


def _parse_header(line: str):
    parts = line.strip().split(",")
    if len(parts) != 5 or parts[0] != "svox" or parts[1] != "v1":
        raise FormatError(f"bad SVOX header: {line!r}")
    try:
        fields = dict(p.split("=", 1) for p in parts[2:])
        channels = int(fields["C"])
        shape = tuple(int(v) for v in fields["shape"].split("x"))
        batch = int(fields["batch"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad SVOX header: {line!r}") from exc
    if len(shape) != 3 or channels < 0:
        raise FormatError(f"bad SVOX header: {line!r}")
    return channels, shape, batch


def read_svox(path_or_buf, dtype=np.float32) -> SparseTensor:
    if isinstance(path_or_buf, str):
        with open(path_or_buf) as fh:
            text = fh.read()
    else:
        text = path_or_buf.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty SVOX file")
    channels, shape, batch = _parse_header(lines[0])
    ncol = 4 + channels
    coords = np.zeros((len(lines) - 1, 4), np.int64)
    feats = np.zeros((len(lines) - 1, channels), np.float64)
    for i, ln in enumerate(lines[1:]):
        cols = ln.split(",")
        if len(cols) != ncol:
            raise FormatError(f"line {i + 2}: expected {ncol} columns, got {len(cols)}")
        try:
            coords[i] = [int(v) for v in cols[:4]]
            feats[i] = [float(v) for v in cols[4:]]
        except ValueError as exc:
            raise FormatError(f"line {i + 2}: {exc}") from exc
    return build(coords, feats, shape, batch, dtype=dtype)
