"""Rulebooks: per-offset (input row, output row) pairs for sparse convolution.

Convention: weight index ``j`` enumerates kernel positions ``(kx, ky, kz)``
with ``kx, ky, kz`` in ``[0, K)`` lexicographically in ``(kz, ky, kx)``.
Output ``q`` reads input ``s * q + k - pad``. For odd kernels at stride 1 with
``pad = (K - 1) // 2`` this is ``input = output + offset`` where ``offset`` is
the centered kernel offset returned by :func:`offset_enumeration`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import CanonicalFormError, ModeError, ShapeError
from .sparse_tensor import (CoordIndex, SparseTensor, _as_shape3, in_bounds, pack_keys,
                            unpack_keys)

MODES = ("submanifold", "regular", "explicit_output")


@dataclass(frozen=True)
class KernelSpec:
    kernel_size: Tuple[int, int, int] = (3, 3, 3)
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = None  # type: ignore[assignment]
    mode: str = "submanifold"

    def __post_init__(self):
        ks = _as_shape3(self.kernel_size, "kernel_size")
        st = _as_shape3(self.stride, "stride")
        object.__setattr__(self, "kernel_size", ks)
        object.__setattr__(self, "stride", st)
        if self.padding is None:
            pad = tuple(k // 2 for k in ks)
        else:
            pad = tuple(int(p) for p in np.broadcast_to(np.asarray(self.padding), (3,)))
            if any(p < 0 for p in pad):
                raise ModeError("padding must be non-negative")
        object.__setattr__(self, "padding", pad)
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}")
        if self.mode in ("submanifold", "explicit_output"):
            if st != (1, 1, 1):
                raise ModeError(f"{self.mode} requires stride 1")
            if any(k % 2 == 0 for k in ks):
                raise ModeError(f"{self.mode} requires odd kernel sizes")
            if pad != tuple(k // 2 for k in ks):
                raise ModeError(f"{self.mode} uses implicit centered padding")

    @property
    def volume(self) -> int:
        kx, ky, kz = self.kernel_size
        return kx * ky * kz

    @property
    def center_index(self) -> int:
        kx, ky, kz = self.kernel_size
        return ((kz // 2) * ky + ky // 2) * kx + kx // 2

    def output_shape(self, spatial_shape: Sequence[int]) -> Tuple[int, int, int]:
        if self.mode != "regular":
            return tuple(int(s) for s in spatial_shape)  # type: ignore[return-value]
        out = tuple((int(n) + 2 * p - k) // s + 1
                    for n, p, k, s in zip(spatial_shape, self.padding, self.kernel_size, self.stride))
        if any(o <= 0 for o in out):
            raise ShapeError(f"kernel {self.kernel_size} too large for grid {tuple(spatial_shape)}")
        return out  # type: ignore[return-value]


def kernel_positions(spec: KernelSpec) -> np.ndarray:
    """``(|K|, 3)`` array of ``(kx, ky, kz)`` in ``[0, K)``, ordered kz-major."""
    kx, ky, kz = spec.kernel_size
    gz, gy, gx = np.meshgrid(np.arange(kz), np.arange(ky), np.arange(kx), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1).astype(np.int64)


def offset_enumeration(spec: KernelSpec) -> np.ndarray:
    """Kernel offsets ``(dx, dy, dz)`` relative to the output position.

    For odd sizes these are centered, e.g. ``{-1, 0, 1}`` per axis for K=3, and
    the zero offset sits at ``spec.center_index``.
    """
    return kernel_positions(spec) - np.asarray(spec.padding, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class KernelMap:
    spec: KernelSpec
    pairs: Tuple[np.ndarray, ...]  # per offset, (M_j, 2) int64 of (in_row, out_row)
    out_coords: np.ndarray
    n_in: int
    in_shape: Tuple[int, int, int]
    out_shape: Tuple[int, int, int]
    out_stride: Tuple[int, int, int]
    batch_size: int

    @property
    def n_out(self) -> int:
        return int(self.out_coords.shape[0])

    @property
    def n_pairs(self) -> int:
        return int(sum(len(p) for p in self.pairs))

    def pair_set(self):
        return {(j, int(i), int(o)) for j, p in enumerate(self.pairs) for i, o in p}

    def output_tensor(self, features: np.ndarray) -> SparseTensor:
        return SparseTensor(self.out_coords, features, self.out_shape, self.out_stride,
                            self.batch_size)

    def dump(self) -> str:
        """Text form ``k=<j> in=<i> out=<o>``, one pair per line."""
        lines = []
        for j, p in enumerate(self.pairs):
            for i, o in p.tolist():
                lines.append(f"k={j} in={i} out={o}")
        return "\n".join(lines) + ("\n" if lines else "")

    def __eq__(self, other) -> bool:
        if not isinstance(other, KernelMap):
            return NotImplemented
        return (self.out_shape == other.out_shape and self.n_in == other.n_in
                and np.array_equal(self.out_coords, other.out_coords)
                and len(self.pairs) == len(other.pairs)
                and all(np.array_equal(a, b) for a, b in zip(self.pairs, other.pairs)))

    __hash__ = None  # type: ignore[assignment]


def _sort_pairs(in_rows: np.ndarray, out_rows: np.ndarray) -> np.ndarray:
    order = np.lexsort((in_rows, out_rows))
    return np.stack([in_rows[order], out_rows[order]], axis=1).astype(np.int64)


def _gather_pairs(inp: SparseTensor, out_coords: np.ndarray, spec: KernelSpec) -> List[np.ndarray]:
    """For each kernel position, match every output to the input it reads (if present)."""
    idx = CoordIndex(inp)
    stride = np.asarray(spec.stride, np.int64)
    pad = np.asarray(spec.padding, np.int64)
    pairs = []
    base = out_coords.astype(np.int64)
    out_rows_all = np.arange(len(out_coords), dtype=np.int64)
    for k in kernel_positions(spec):
        src = base.copy()
        src[:, 1:] = base[:, 1:] * stride + k - pad
        rows = idx.lookup_many(src)
        hit = rows >= 0
        pairs.append(_sort_pairs(rows[hit], out_rows_all[hit]))
    return pairs


def submanifold_map(inp: SparseTensor, spec: KernelSpec) -> KernelMap:
    if spec.mode != "submanifold":
        raise ModeError(f"submanifold_map needs mode 'submanifold', got {spec.mode!r}")
    pairs = _gather_pairs(inp, inp.coords, spec)
    return KernelMap(spec, tuple(pairs), inp.coords, inp.n, inp.spatial_shape,
                     inp.spatial_shape, inp.stride, inp.batch_size)


def regular_map(inp: SparseTensor, spec: KernelSpec) -> KernelMap:
    """Map of a regular (dilating, optionally strided) sparse convolution.

    Output ``q`` is active iff some input lies at ``s*q + k - pad``. Candidate
    outputs are scattered from the inputs, so the cost is O(N * |K|) and does
    not depend on grid volume.
    """
    if spec.mode != "regular":
        raise ModeError(f"regular_map needs mode 'regular', got {spec.mode!r}")
    out_shape = spec.output_shape(inp.spatial_shape)
    out_stride = tuple(a * b for a, b in zip(inp.stride, spec.stride))
    stride = np.asarray(spec.stride, np.int64)
    pad = np.asarray(spec.padding, np.int64)
    c = inp.coords.astype(np.int64)
    cand = []
    for k in kernel_positions(spec):
        num = c[:, 1:] - k + pad
        ok = np.all(num % stride == 0, axis=1)
        q = np.concatenate([c[ok, :1], num[ok] // stride], axis=1)
        q = q[in_bounds(q, out_shape)]
        cand.append(pack_keys(q, out_shape))
    keys = np.unique(np.concatenate(cand)) if cand else np.zeros(0, np.int64)
    out_coords = unpack_keys(keys, out_shape)
    pairs = _gather_pairs(inp, out_coords, spec)
    return KernelMap(spec, tuple(pairs), out_coords, inp.n, inp.spatial_shape, out_shape,
                     out_stride, inp.batch_size)


def check_canonical(coords: np.ndarray, spatial_shape, batch_size: int) -> None:
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 4:
        raise CanonicalFormError("output coordinates must be an (N, 4) array")
    if not in_bounds(coords, spatial_shape, batch_size).all():
        raise CanonicalFormError("output coordinate out of bounds")
    keys = pack_keys(coords, spatial_shape)
    if len(keys) > 1 and not np.all(np.diff(keys) > 0):
        raise CanonicalFormError("output coordinates are not sorted and unique")


def explicit_output_map(inp: SparseTensor, out_coords, spec: KernelSpec) -> KernelMap:
    """Map onto a caller-supplied canonical output set (stride 1)."""
    if spec.mode != "explicit_output":
        raise ModeError(f"explicit_output_map needs mode 'explicit_output', got {spec.mode!r}")
    out_coords = np.asarray(out_coords, dtype=np.int32).reshape(-1, 4)
    check_canonical(out_coords, inp.spatial_shape, inp.batch_size)
    pairs = _gather_pairs(inp, out_coords, spec)
    return KernelMap(spec, tuple(pairs), out_coords, inp.n, inp.spatial_shape,
                     inp.spatial_shape, inp.stride, inp.batch_size)


def build_map(inp: SparseTensor, spec: KernelSpec, out_coords=None) -> KernelMap:
    if spec.mode == "submanifold":
        return submanifold_map(inp, spec)
    if spec.mode == "regular":
        return regular_map(inp, spec)
    return explicit_output_map(inp, out_coords, spec)
