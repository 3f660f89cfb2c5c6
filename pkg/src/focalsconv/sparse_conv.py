"""Gather-GEMM-scatter sparse convolution, its backward pass, and a dense oracle."""
from __future__ import annotations

import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .errors import AlignmentError, CapacityError, FormatError, ShapeError
from .kernel_map import KernelMap, KernelSpec, kernel_positions
from .sparse_tensor import DENSE_LIMIT, SparseTensor

_NUM_THREADS = 1


def set_num_threads(n: int) -> None:
    """Cap the worker threads used for per-offset GEMMs.

    Results do not depend on this value: products are computed per offset and
    always accumulated in offset order.
    """
    global _NUM_THREADS
    _NUM_THREADS = max(1, int(n))


def get_num_threads() -> int:
    return _NUM_THREADS


def _per_offset(fn, n_offsets: int):
    if _NUM_THREADS <= 1 or n_offsets <= 1:
        return [fn(j) for j in range(n_offsets)]
    with ThreadPoolExecutor(max_workers=_NUM_THREADS) as pool:
        return list(pool.map(fn, range(n_offsets)))


@dataclass
class ConvWeights:
    w: np.ndarray  # (|K|, C_in, C_out)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = np.asarray(self.w)
        if self.w.ndim != 3:
            raise ShapeError(f"weights must be (|K|, C_in, C_out), got {self.w.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=self.w.dtype)
            if self.bias.shape != (self.w.shape[2],):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.w.shape[2]},)")

    @property
    def c_in(self) -> int:
        return self.w.shape[1]

    @property
    def c_out(self) -> int:
        return self.w.shape[2]

    @classmethod
    def init(cls, rng: np.random.Generator, volume: int, c_in: int, c_out: int,
             bias: bool = False, dtype=np.float32) -> "ConvWeights":
        bound = 1.0 / np.sqrt(volume * c_in)
        w = rng.uniform(-bound, bound, size=(volume, c_in, c_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=c_out).astype(dtype) if bias else None
        return cls(w, b)


@dataclass
class ConvGradients:
    d_w: np.ndarray
    d_bias: Optional[np.ndarray]
    d_input: np.ndarray


def _check(inp: SparseTensor, kmap: KernelMap, weights: ConvWeights) -> None:
    if kmap.n_in != inp.n:
        raise ShapeError(f"map built for {kmap.n_in} inputs, tensor has {inp.n}")
    if weights.w.shape[0] != len(kmap.pairs):
        raise ShapeError(f"{weights.w.shape[0]} kernel weights for {len(kmap.pairs)} offsets")
    if inp.channels != weights.c_in:
        raise ShapeError(f"input has {inp.channels} channels, weights expect {weights.c_in}")


def forward(inp: SparseTensor, kmap: KernelMap, weights: ConvWeights) -> SparseTensor:
    """``out[o] += in[i] @ w[j]`` for every pair ``(i, o)`` of offset ``j``."""
    _check(inp, kmap, weights)
    x = inp.features
    dtype = np.result_type(x.dtype, weights.w.dtype)
    out = np.zeros((kmap.n_out, weights.c_out), dtype=dtype)
    if weights.bias is not None:
        out += weights.bias
    prods = _per_offset(lambda j: x[kmap.pairs[j][:, 0]] @ weights.w[j], len(kmap.pairs))
    for p, prod in zip(kmap.pairs, prods):
        if len(p):
            # out rows are unique within one offset, so fancy-index add is exact
            out[p[:, 1]] += prod
    return kmap.output_tensor(out)


def backward(inp: SparseTensor, kmap: KernelMap, weights: ConvWeights,
             d_output: np.ndarray) -> ConvGradients:
    _check(inp, kmap, weights)
    d_output = np.asarray(d_output)
    if d_output.shape != (kmap.n_out, weights.c_out):
        raise ShapeError(f"d_output shape {d_output.shape} != {(kmap.n_out, weights.c_out)}")
    x = inp.features
    dtype = np.result_type(x.dtype, weights.w.dtype, d_output.dtype)

    def per(j):
        p = kmap.pairs[j]
        g = d_output[p[:, 1]]
        return x[p[:, 0]].T @ g, g @ weights.w[j].T

    res = _per_offset(per, len(kmap.pairs))
    d_w = np.zeros(weights.w.shape, dtype=dtype)
    d_in = np.zeros(x.shape, dtype=dtype)
    for j, (p, (dw, dx)) in enumerate(zip(kmap.pairs, res)):
        d_w[j] = dw
        if len(p):
            d_in[p[:, 0]] += dx
    d_bias = d_output.sum(axis=0).astype(dtype) if weights.bias is not None else None
    return ConvGradients(d_w, d_bias, d_in)


def dense_oracle(dense_input: np.ndarray, weights: ConvWeights, spec: KernelSpec) -> np.ndarray:
    """Dense zero-padded convolution ``[B, C_in, X, Y, Z] -> [B, C_out, X', Y', Z']``.

    Uses the same read convention as the rulebooks (output ``q`` reads input
    ``s*q + k - pad``) but walks the full grid and never looks at a kernel map.
    """
    dense_input = np.asarray(dense_input)
    B, C, X, Y, Z = dense_input.shape
    if dense_input.size > DENSE_LIMIT:
        raise CapacityError("dense input exceeds capacity guard")
    if C != weights.c_in:
        raise ShapeError("channel mismatch")
    out_shape = KernelSpec(spec.kernel_size, spec.stride, spec.padding, "regular").output_shape((X, Y, Z))
    if B * weights.c_out * int(np.prod(out_shape)) > DENSE_LIMIT:
        raise CapacityError("dense output exceeds capacity guard")
    s = np.asarray(spec.stride)
    pad = np.asarray(spec.padding)
    K = np.asarray(spec.kernel_size)
    hi = np.maximum(0, s * (np.asarray(out_shape) - 1) + K - (np.array([X, Y, Z]) + pad))
    xp = np.pad(dense_input, [(0, 0), (0, 0)] + [(int(a), int(b)) for a, b in zip(pad, hi)])
    dtype = np.result_type(dense_input.dtype, weights.w.dtype)
    out = np.zeros((B, weights.c_out) + tuple(out_shape), dtype=dtype)
    Ox, Oy, Oz = out_shape
    for j, (kx, ky, kz) in enumerate(kernel_positions(spec)):
        sl = xp[:, :,
                kx:kx + s[0] * (Ox - 1) + 1:s[0],
                ky:ky + s[1] * (Oy - 1) + 1:s[1],
                kz:kz + s[2] * (Oz - 1) + 1:s[2]]
        out += np.einsum("bcxyz,cd->bdxyz", sl, weights.w[j])
    if weights.bias is not None:
        out += weights.bias[None, :, None, None, None]
    return out


# --- pointwise ops ------------------------------------------------------------

def relu(t: SparseTensor) -> SparseTensor:
    return t.replace_features(np.maximum(t.features, 0))


def relu_backward(t: SparseTensor, d_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the relu input ``t``."""
    return np.where(t.features > 0, d_out, 0).astype(d_out.dtype)


def scale_rows(t: SparseTensor, s: np.ndarray) -> SparseTensor:
    s = np.asarray(s)
    if s.shape != (t.n,):
        raise ShapeError(f"row scale shape {s.shape} != ({t.n},)")
    return t.replace_features(t.features * s[:, None])


def scale_rows_backward(t: SparseTensor, s: np.ndarray, d_out: np.ndarray):
    """Returns ``(d_t, d_s)``."""
    return d_out * np.asarray(s)[:, None], np.sum(d_out * t.features, axis=1)


def add(t1: SparseTensor, t2: SparseTensor) -> SparseTensor:
    if not t1.same_coords(t2):
        raise AlignmentError("add requires identical coordinates")
    if t1.channels != t2.channels:
        raise ShapeError("add requires identical channel counts")
    return t1.replace_features(t1.features + t2.features)


def mlp(t: SparseTensor, W: np.ndarray, b: Optional[np.ndarray] = None) -> SparseTensor:
    """Per-voxel linear map ``x @ W + b``."""
    W = np.asarray(W)
    if W.shape[0] != t.channels:
        raise ShapeError(f"MLP expects {W.shape[0]} channels, got {t.channels}")
    y = t.features @ W
    if b is not None:
        y = y + b
    return t.replace_features(y)


def mlp_backward(t: SparseTensor, W: np.ndarray, d_out: np.ndarray, has_bias: bool = True):
    """Returns ``(d_t, d_W, d_b)``."""
    d_b = d_out.sum(axis=0) if has_bias else None
    return d_out @ W.T, t.features.T @ d_out, d_b


def affine(t: SparseTensor, scale: np.ndarray, shift: np.ndarray) -> SparseTensor:
    """Per-channel ``x * scale + shift`` (stands in for batch normalization)."""
    return t.replace_features(t.features * scale + shift)


def affine_backward(t: SparseTensor, scale: np.ndarray, d_out: np.ndarray):
    """Returns ``(d_t, d_scale, d_shift)``."""
    return d_out * scale, np.sum(d_out * t.features, axis=0), d_out.sum(axis=0)


# --- FSCW1 checkpoints --------------------------------------------------------

MAGIC = b"FSCW1"
_KINDS = {"f": "f", "i": "i", "u": "u"}


def _encode_records(records: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    records = list(records)
    chunks = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.ascontiguousarray(arr)
        kind = arr.dtype.kind
        if kind not in _KINDS:
            raise FormatError(f"cannot store dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<Bc", arr.dtype.itemsize, kind.encode()))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    return b"".join(chunks)


def save_checkpoint(path: str, records: Iterable[Tuple[str, np.ndarray]]) -> None:
    """Write ordered ``(name, array)`` records to an FSCW1 file."""
    with open(path, "wb") as fh:
        fh.write(_encode_records(records))


def dumps_checkpoint(records: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    return _encode_records(records)


def loads_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if not data.startswith(MAGIC):
        raise FormatError("not an FSCW1 checkpoint")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: Dict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        width, kind = struct.unpack("<Bc", take(2))
        dtype = np.dtype(f"<{kind.decode()}{width}")
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        out[name] = np.frombuffer(take(n * width), dtype=dtype).reshape(shape).copy()
    if pos != len(data):
        raise FormatError("trailing bytes in checkpoint")
    return out


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
