"""Focal sparse convolution.

A focal layer predicts, for every input voxel, a cube of sigmoid scores (one
per kernel offset) with an auxiliary submanifold convolution. Voxels whose
center score reaches the threshold are *important* and dilate into the
offsets whose own score also reaches it; all other voxels keep their own
position only. The main convolution then runs on the union of those outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import sparse_conv
from .errors import ShapeError
from .kernel_map import (KernelMap, KernelSpec, explicit_output_map, offset_enumeration,
                         submanifold_map)
from .sparse_conv import ConvWeights
from .sparse_tensor import CoordIndex, SparseTensor, in_bounds, pack_keys, unpack_keys

SCORE_EPS = 1e-7


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def cube_spec(volume: int) -> KernelSpec:
    k = int(round(volume ** (1.0 / 3.0)))
    if k ** 3 != volume:
        raise ShapeError(f"{volume} is not a cubic kernel volume")
    return KernelSpec((k, k, k), mode="submanifold")


@dataclass
class ImportanceMap:
    values: np.ndarray  # (N, |K|) in [0, 1]
    center_index: int
    logits: Optional[np.ndarray] = None

    @property
    def center(self) -> np.ndarray:
        return self.values[:, self.center_index]


@dataclass
class FocalSelection:
    important_rows: np.ndarray  # sorted input rows
    dynamic_shapes: np.ndarray  # (len(important_rows), |K|) bool, offsets kept per row
    tau: float
    top_k_ratio: Optional[float] = None

    @property
    def n_important(self) -> int:
        return int(len(self.important_rows))

    def offsets_of(self, row: int) -> np.ndarray:
        pos = int(np.searchsorted(self.important_rows, row))
        if pos >= len(self.important_rows) or self.important_rows[pos] != row:
            return np.zeros(0, dtype=np.int64)
        return np.nonzero(self.dynamic_shapes[pos])[0]


@dataclass(frozen=True)
class GtBox:
    center: Sequence[float]
    size: Sequence[float]  # full extents (dx, dy, dz)
    yaw: float = 0.0

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ShapeError("box center and size need 3 components")
        if any(s <= 0 for s in self.size):
            raise ShapeError(f"box size must be positive, got {tuple(self.size)}")

    def to_dict(self):
        return {"center": [float(v) for v in self.center],
                "size": [float(v) for v in self.size], "yaw": float(self.yaw)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), tuple(d["size"]), float(d.get("yaw", 0.0)))


@dataclass(frozen=True)
class FocalLossSpec:
    gamma: float = 2.0
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def predict_importance(inp: SparseTensor, sub_map: KernelMap, branch_weights: ConvWeights,
                       volume: Optional[int] = None) -> ImportanceMap:
    """Cubic importance: sigmoid of an auxiliary submanifold convolution.

    ``volume`` is the number of offsets of the *main* kernel; the branch must
    emit one channel per offset. Defaults to 27.
    """
    volume = 27 if volume is None else volume
    if branch_weights.c_out != volume:
        raise ShapeError(f"importance branch emits {branch_weights.c_out} channels, need {volume}")
    logits = sparse_conv.forward(inp, sub_map, branch_weights).features
    center = cube_spec(volume).center_index
    return ImportanceMap(sigmoid(logits), center, logits)


def select_important(imp: ImportanceMap, tau: float) -> FocalSelection:
    """Rows with center score ``>= tau``; each keeps offsets scoring ``>= tau``."""
    rows = np.nonzero(imp.center >= tau)[0]
    return FocalSelection(rows, imp.values[rows] >= tau, float(tau))


def select_topk(imp: ImportanceMap, ratio: float, offset_threshold: float = 0.5) -> FocalSelection:
    """The ``ceil(ratio * N)`` highest center scores (ties favor lower rows)."""
    if not 0 < ratio <= 1:
        raise ValueError("top-k ratio must lie in (0, 1]")
    n = imp.values.shape[0]
    k = min(n, math.ceil(round(ratio * n, 9)))
    order = np.argsort(-imp.center, kind="stable")
    rows = np.sort(order[:k])
    return FocalSelection(rows, imp.values[rows] >= offset_threshold, float(offset_threshold), ratio)


def _focal_out(inp: SparseTensor, sel: FocalSelection, offsets: np.ndarray,
               restrict_to_input: bool = False):
    """Output coords plus a mask marking rows created by important dilation."""
    r, k = np.nonzero(sel.dynamic_shapes)
    cand = inp.coords[sel.important_rows[r]].astype(np.int64)
    cand[:, 1:] += offsets[k]
    cand = cand[in_bounds(cand, inp.spatial_shape, inp.batch_size)]
    if restrict_to_input and len(cand):
        cand = cand[CoordIndex(inp).lookup_many(cand) >= 0]
    dil_keys = np.unique(pack_keys(cand, inp.spatial_shape)) if len(cand) else np.zeros(0, np.int64)
    keys = np.union1d(inp.keys, dil_keys)
    imp_mask = np.isin(keys, dil_keys, assume_unique=True)
    return unpack_keys(keys, inp.spatial_shape), imp_mask


def focal_output_coords(inp: SparseTensor, sel: FocalSelection,
                        spec: KernelSpec = KernelSpec(), restrict_to_input: bool = False) -> np.ndarray:
    """Union of important dilations (grid-clipped) and all input positions.

    With ``restrict_to_input`` dilation may only land on existing input
    voxels, which reduces the output set to the inputs.
    """
    coords, _ = _focal_out(inp, sel, offset_enumeration(spec), restrict_to_input)
    return coords


@dataclass
class FocalResult:
    output: SparseTensor
    importance: ImportanceMap
    selection: FocalSelection
    kmap: KernelMap
    sub_map: KernelMap
    important_out: np.ndarray  # bool per output row: produced by important dilation
    conv_input: SparseTensor  # input to the main convolution (after attention)
    inp: SparseTensor
    branch_input: SparseTensor
    weights: ConvWeights
    branch_weights: ConvWeights
    attention: bool
    branch_is_input: bool = True

    def diagnostic(self, name: str) -> str:
        return diagnostic_line(name, self.inp.n, self.selection.n_important, self.output.n,
                               self.selection.tau)


def diagnostic_line(name: str, n_in: int, n_imp, n_out: int, tau) -> str:
    return f"layer={name} n_in={n_in} n_imp={n_imp} n_out={n_out} tau={tau}"


def focal_forward(inp: SparseTensor, weights: ConvWeights, branch_weights: ConvWeights,
                  tau: float = 0.5, attention: bool = True, kernel_size: int = 3,
                  top_k_ratio: Optional[float] = None, restrict_to_input: bool = False,
                  branch_input: Optional[SparseTensor] = None,
                  sub_map: Optional[KernelMap] = None) -> FocalResult:
    """Run one focal sparse convolution.

    ``branch_input`` (same coordinates as ``inp``) feeds the importance branch
    in place of ``inp``; the fusion variant uses it to add image features.
    """
    spec = KernelSpec((kernel_size,) * 3, mode="explicit_output")
    branch_is_input = branch_input is None
    if branch_input is None:
        branch_input = inp
    elif not branch_input.same_coords(inp):
        raise ShapeError("branch input must share the input coordinates")
    if sub_map is None:
        sub_map = submanifold_map(branch_input, cube_spec(branch_weights.w.shape[0]))
    imp = predict_importance(branch_input, sub_map, branch_weights, spec.volume)
    if top_k_ratio is not None:
        sel = select_topk(imp, top_k_ratio)
    else:
        sel = select_important(imp, tau)
    coords, imp_mask = _focal_out(inp, sel, offset_enumeration(spec), restrict_to_input)
    kmap = explicit_output_map(inp, coords, spec)
    conv_input = sparse_conv.scale_rows(inp, imp.center) if attention else inp
    out = sparse_conv.forward(conv_input, kmap, weights)
    return FocalResult(out, imp, sel, kmap, sub_map, imp_mask, conv_input, inp, branch_input,
                       weights, branch_weights, attention, branch_is_input)


@dataclass
class FocalGradients:
    d_w: np.ndarray
    d_bias: Optional[np.ndarray]
    d_branch_w: np.ndarray
    d_branch_bias: Optional[np.ndarray]
    d_input: np.ndarray
    d_branch_input: np.ndarray = field(default=None)  # type: ignore[assignment]


def focal_backward(res: FocalResult, d_output: np.ndarray,
                   d_center: Optional[np.ndarray] = None) -> FocalGradients:
    """Reverse pass of :func:`focal_forward`.

    Selection is a hard threshold and passes no gradient. The branch receives
    gradient through the attention scaling and through ``d_center`` (the
    gradient of an objective loss w.r.t. the center scores).
    When the branch consumed ``inp`` itself, its input gradient is already
    folded into ``d_input``.
    """
    g = sparse_conv.backward(res.conv_input, res.kmap, res.weights, d_output)
    a = res.importance.center
    if res.attention:
        d_x, d_a = sparse_conv.scale_rows_backward(res.inp, a, g.d_input)
    else:
        d_x, d_a = g.d_input, np.zeros(res.inp.n, dtype=g.d_input.dtype)
    if d_center is not None:
        d_a = d_a + d_center
    d_logits = np.zeros_like(res.importance.values, dtype=np.result_type(d_a.dtype, a.dtype))
    d_logits[:, res.importance.center_index] = d_a * a * (1.0 - a)
    gb = sparse_conv.backward(res.branch_input, res.sub_map, res.branch_weights, d_logits)
    d_input = d_x + gb.d_input if res.branch_is_input else d_x
    return FocalGradients(g.d_w, g.d_bias, gb.d_w, gb.d_bias, d_input, gb.d_input)


def voxel_centers(t: SparseTensor, voxel_size, origin) -> np.ndarray:
    """World-space centers ``origin + (coord + 0.5) * voxel_size * stride``."""
    vs = np.asarray(voxel_size, dtype=np.float64) * np.asarray(t.stride, dtype=np.float64)
    return np.asarray(origin, dtype=np.float64) + (t.coords[:, 1:].astype(np.float64) + 0.5) * vs


def points_in_box(points: np.ndarray, box: GtBox) -> np.ndarray:
    d = np.asarray(points, dtype=np.float64) - np.asarray(box.center, dtype=np.float64)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    hx, hy, hz = (0.5 * float(v) for v in box.size)
    return (np.abs(lx) <= hx) & (np.abs(ly) <= hy) & (np.abs(d[:, 2]) <= hz)


def voxel_targets(t: SparseTensor, boxes: Sequence[GtBox], voxel_size, origin) -> np.ndarray:
    """1 where the voxel center lies inside any (yawed) box, else 0."""
    if np.any(np.asarray(voxel_size) <= 0):
        raise ValueError("voxel_size must be positive")
    labels = np.zeros(t.n, dtype=np.int8)
    if t.n == 0:
        return labels
    centers = voxel_centers(t, voxel_size, origin)
    for box in boxes:
        labels |= points_in_box(centers, box).astype(np.int8)
    return labels


def focal_loss(scores: np.ndarray, labels: np.ndarray, spec: FocalLossSpec = FocalLossSpec()):
    """Mean focal loss ``-(1 - pt)^gamma * log(pt)`` and its gradient w.r.t. ``scores``.

    ``pt`` is the score for positives and ``1 - score`` for negatives. Scores
    are clamped to ``[eps, 1 - eps]``; clamped entries get zero gradient. The
    returned values are not scaled by ``spec.loss_weight``.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n = scores.shape[0]
    if n == 0:
        return 0.0, np.zeros(0, dtype=scores.dtype if scores.dtype.kind == "f" else np.float64)
    p = np.clip(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    pos = labels.astype(bool)
    pt = np.where(pos, p, 1.0 - p)
    g = spec.gamma
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    loss = float(np.mean(-(one_m ** g) * log_pt))
    d_pt = -(one_m ** g) / pt
    if g > 0:
        d_pt = d_pt + g * one_m ** (g - 1) * log_pt
    d_scores = np.where(pos, d_pt, -d_pt) / n
    d_scores = np.where((scores > SCORE_EPS) & (scores < 1.0 - SCORE_EPS), d_scores, 0.0)
    return loss, d_scores.astype(scores.dtype if scores.dtype.kind == "f" else np.float64)
