"""Camera-LIDAR fusion for focal convolution.

A small image stack turns an RGB image into a quarter-resolution feature map
whose width matches the sparse features. Voxel centers are mapped back through
the recorded point-cloud augmentations, projected with a 3x4 calibration
matrix and bilinearly sampled from that map. The sampled rows are summed into
the importance-branch input and into the outputs produced by important
dilation.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BoundsError, FormatError, ShapeError
from .focal_conv import FocalGradients, FocalResult, focal_backward, focal_forward, voxel_centers
from .sparse_conv import ConvWeights
from .sparse_tensor import SparseTensor

FUSION_SCOPES = ("imp", "all")


# --- dense 2-D building blocks ------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 1) -> np.ndarray:
    """``x`` is ``(H, W, C_in)``, ``w`` is ``(kh, kw, C_in, C_out)``."""
    H, W, _ = x.shape
    kh, kw, _, cout = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x, [(pad, pad), (pad, pad), (0, 0)])
    out = np.zeros((Ho, Wo, cout), dtype=np.result_type(x.dtype, w.dtype))
    for dy in range(kh):
        for dx in range(kw):
            sl = xp[dy:dy + stride * (Ho - 1) + 1:stride, dx:dx + stride * (Wo - 1) + 1:stride]
            out += sl @ w[dy, dx]
    return out


def conv2d_backward(x: np.ndarray, w: np.ndarray, d_out: np.ndarray, stride: int = 1, pad: int = 1):
    """Returns ``(d_x, d_w)``."""
    kh, kw, cin, cout = w.shape
    Ho, Wo, _ = d_out.shape
    xp = np.pad(x, [(pad, pad), (pad, pad), (0, 0)])
    d_xp = np.zeros_like(xp, dtype=np.result_type(x.dtype, d_out.dtype))
    d_w = np.zeros_like(w, dtype=np.result_type(w.dtype, d_out.dtype))
    g = d_out.reshape(-1, cout)
    for dy in range(kh):
        for dx in range(kw):
            ys = slice(dy, dy + stride * (Ho - 1) + 1, stride)
            xs = slice(dx, dx + stride * (Wo - 1) + 1, stride)
            d_w[dy, dx] = xp[ys, xs].reshape(-1, cin).T @ g
            d_xp[ys, xs] += d_out @ w[dy, dx].T
    H, W = x.shape[:2]
    return d_xp[pad:pad + H, pad:pad + W], d_w


def maxpool2x2(x: np.ndarray):
    """2x2 max pool with stride 2; returns ``(out, argmax)`` (first max wins on ties)."""
    H, W, C = x.shape
    Hp, Wp = H // 2, W // 2
    win = x[:2 * Hp, :2 * Wp].reshape(Hp, 2, Wp, 2, C).transpose(0, 2, 1, 3, 4).reshape(Hp, Wp, 4, C)
    arg = np.argmax(win, axis=2)
    return np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :], arg


def maxpool2x2_backward(x_shape, arg: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    H, W, C = x_shape
    Hp, Wp = arg.shape[:2]
    d_win = np.zeros((Hp, Wp, 4, C), dtype=d_out.dtype)
    np.put_along_axis(d_win, arg[:, :, None, :], d_out[:, :, None, :], axis=2)
    d_x = np.zeros(x_shape, dtype=d_out.dtype)
    d_x[:2 * Hp, :2 * Wp] = d_win.reshape(Hp, Wp, 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(2 * Hp, 2 * Wp, C)
    return d_x


# --- image feature stack ------------------------------------------------------

@dataclass
class ImageFeatureMap:
    data: np.ndarray  # (H // 4, W // 4, C)
    image_size: Tuple[int, int]

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


def init_image_stack(rng: np.random.Generator, out_channels: int, hidden: int = 16,
                     in_channels: int = 3, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """Parameters of the image stack, in a fixed order."""
    def conv(cin, cout):
        bound = 1.0 / math.sqrt(9 * cin)
        return rng.uniform(-bound, bound, (3, 3, cin, cout)).astype(dtype)

    p: Dict[str, np.ndarray] = OrderedDict()
    p["conv0.w"] = conv(in_channels, hidden)
    p["aff0.scale"] = np.ones(hidden, dtype)
    p["aff0.shift"] = np.zeros(hidden, dtype)
    for i in (1, 2, 3):
        p[f"conv{i}.w"] = conv(hidden, hidden)
        p[f"aff{i}.scale"] = np.ones(hidden, dtype)
        p[f"aff{i}.shift"] = np.zeros(hidden, dtype)
    bound = 1.0 / math.sqrt(hidden)
    p["mlp.w"] = rng.uniform(-bound, bound, (hidden, out_channels)).astype(dtype)
    p["mlp.b"] = rng.uniform(-bound, bound, out_channels).astype(dtype)
    return p


def extract_image_features(image: np.ndarray, params: Dict[str, np.ndarray], return_cache: bool = False):
    """conv(3x3, s2)+affine+relu, 2x2 max pool, 3 residual conv layers, 1x1 reduction."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] < 4 or image.shape[1] < 4:
        raise ShapeError(f"image must be (H>=4, W>=4, C), got {image.shape}")
    H, W = image.shape[:2]
    if image.shape[2] != params["conv0.w"].shape[2]:
        raise ShapeError("image channel count does not match the stack")
    cache = {"image": image}
    z0 = conv2d(image, params["conv0.w"], stride=2)
    a0 = z0 * params["aff0.scale"] + params["aff0.shift"]
    h0 = np.maximum(a0, 0)
    pooled, arg = maxpool2x2(h0)
    cache.update(z0=z0, a0=a0, h0=h0, arg=arg)
    x1 = pooled[:H // 4, :W // 4]
    cache["pooled_shape"] = pooled.shape
    h = x1
    for i in (1, 2, 3):
        z = conv2d(h, params[f"conv{i}.w"], stride=1)
        a = z * params[f"aff{i}.scale"] + params[f"aff{i}.shift"]
        cache[f"in{i}"], cache[f"z{i}"], cache[f"a{i}"] = h, z, a
        h = np.maximum(a, 0)
    r = h + x1
    out = r @ params["mlp.w"] + params["mlp.b"]
    cache["r"] = r
    fmap = ImageFeatureMap(out, (H, W))
    return (fmap, cache) if return_cache else fmap


def image_stack_backward(params: Dict[str, np.ndarray], cache, d_feat: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of every stack parameter given ``d`` of the feature map data."""
    g: Dict[str, np.ndarray] = OrderedDict()
    r = cache["r"]
    C = r.shape[2]
    g["mlp.w"] = r.reshape(-1, C).T @ d_feat.reshape(-1, d_feat.shape[2])
    g["mlp.b"] = d_feat.reshape(-1, d_feat.shape[2]).sum(axis=0)
    d_r = d_feat @ params["mlp.w"].T
    d_h = d_r
    d_x1 = d_r.copy()
    for i in (3, 2, 1):
        a, z, inp = cache[f"a{i}"], cache[f"z{i}"], cache[f"in{i}"]
        d_a = np.where(a > 0, d_h, 0)
        g[f"aff{i}.scale"] = np.sum(d_a * z, axis=(0, 1))
        g[f"aff{i}.shift"] = d_a.sum(axis=(0, 1))
        d_z = d_a * params[f"aff{i}.scale"]
        d_h, g[f"conv{i}.w"] = conv2d_backward(inp, params[f"conv{i}.w"], d_z, stride=1)
    d_x1 = d_x1 + d_h
    d_pooled = np.zeros(cache["pooled_shape"], dtype=d_x1.dtype)
    d_pooled[:d_x1.shape[0], :d_x1.shape[1]] = d_x1
    d_h0 = maxpool2x2_backward(cache["h0"].shape, cache["arg"], d_pooled)
    d_a0 = np.where(cache["a0"] > 0, d_h0, 0)
    g["aff0.scale"] = np.sum(d_a0 * cache["z0"], axis=(0, 1))
    g["aff0.shift"] = d_a0.sum(axis=(0, 1))
    _, g["conv0.w"] = conv2d_backward(cache["image"], params["conv0.w"], d_a0 * params["aff0.scale"], stride=2)
    return OrderedDict((k, g[k]) for k in params)


# --- geometry -----------------------------------------------------------------

@dataclass
class CalibMatrix:
    P: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(self.P)):
            raise ShapeError("calibration matrix must be finite")

    def project(self, points: np.ndarray):
        """Returns ``(u, v, depth)`` in pixels for world points ``(M, 3)``."""
        h = np.asarray(points, dtype=np.float64) @ self.P[:, :3].T + self.P[:, 3]
        depth = h[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = h[:, 0] / depth
            v = h[:, 1] / depth
        return u, v, depth


def read_calib(path: str) -> CalibMatrix:
    with open(path) as fh:
        vals = fh.read().split()
    if len(vals) != 12:
        raise FormatError(f"calibration file needs 12 values, found {len(vals)}")
    try:
        return CalibMatrix(np.array([float(v) for v in vals]))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_calib(path: str, calib: CalibMatrix) -> None:
    with open(path, "w") as fh:
        for row in calib.P:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


@dataclass
class TransformRecord:
    """Ordered augmentations applied to the point cloud.

    Entries: ``("flip", axis)``, ``("scale", factor)``, ``("rotate", angle)``
    about +Z, ``("translate", (tx, ty, tz))``.
    """
    ops: List[tuple] = field(default_factory=list)

    def __post_init__(self):
        for op in self.ops:
            kind = op[0]
            if kind == "scale" and op[1] == 0:
                raise ValueError("scale factor must be nonzero")
            if kind not in ("flip", "scale", "rotate", "translate"):
                raise ValueError(f"unknown transform {kind!r}")

    @staticmethod
    def _one(points, op, inverse):
        kind, arg = op
        p = points.copy()
        if kind == "flip":
            p[:, int(arg)] = -p[:, int(arg)]
        elif kind == "scale":
            p = p / arg if inverse else p * arg
        elif kind == "rotate":
            a = -arg if inverse else arg
            c, s = math.cos(a), math.sin(a)
            x, y = p[:, 0].copy(), p[:, 1].copy()
            p[:, 0] = c * x - s * y
            p[:, 1] = s * x + c * y
        else:
            t = np.asarray(arg, dtype=np.float64)
            p = p - t if inverse else p + t
        return p

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        for op in self.ops:
            p = self._one(p, op, False)
        return p

    def invert(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        for op in reversed(self.ops):
            p = self._one(p, op, True)
        return p


@dataclass
class BilinearSample:
    rows: np.ndarray  # (M, C), zero where invalid
    valid: np.ndarray  # (M,) bool
    idx: np.ndarray  # (M, 4, 2) feature-map (row, col) of the four taps
    weights: np.ndarray  # (M, 4), zero where invalid


def bilinear_sample(feat: np.ndarray, fx: np.ndarray, fy: np.ndarray, valid=None) -> BilinearSample:
    """Sample ``feat[(H, W, C)]`` at continuous column ``fx`` and row ``fy``.

    Points outside ``[0, W-1] x [0, H-1]`` are invalid and sample zero.
    """
    H, W, C = feat.shape
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    ok = np.isfinite(fx) & np.isfinite(fy) & (fx >= 0) & (fx <= W - 1) & (fy >= 0) & (fy <= H - 1)
    if valid is not None:
        ok &= valid
    fx0 = np.where(ok, fx, 0.0)
    fy0 = np.where(ok, fy, 0.0)
    x0 = np.minimum(np.floor(fx0).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(fy0).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = fx0 - x0
    ay = fy0 - y0
    wts = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=1)
    wts[~ok] = 0.0
    idx = np.stack([np.stack([y0, x0], 1), np.stack([y0, x1], 1),
                    np.stack([y1, x0], 1), np.stack([y1, x1], 1)], axis=1)
    taps = feat[idx[..., 0], idx[..., 1]]  # (M, 4, C)
    rows = np.einsum("mk,mkc->mc", wts.astype(feat.dtype), taps)
    return BilinearSample(rows, ok, idx, wts)


def bilinear_backward(shape, sample: BilinearSample, d_rows: np.ndarray) -> np.ndarray:
    d_feat = np.zeros(shape, dtype=d_rows.dtype)
    contrib = sample.weights[:, :, None].astype(d_rows.dtype) * d_rows[:, None, :]
    np.add.at(d_feat, (sample.idx[..., 0], sample.idx[..., 1]), contrib)
    return d_feat


def _project_sample(t: SparseTensor, voxel_size, origin, rec: Optional[TransformRecord],
                    calib: CalibMatrix, feat: ImageFeatureMap) -> BilinearSample:
    world = voxel_centers(t, voxel_size, origin)
    if rec is not None:
        world = rec.invert(world)
    u, v, depth = calib.project(world)
    front = depth > 0
    # pixel centers: pixel u lands on feature column u/4 - 0.5
    return bilinear_sample(feat.data, u / 4.0 - 0.5, v / 4.0 - 0.5, front)


def project_voxels(t: SparseTensor, voxel_size, origin, rec: Optional[TransformRecord],
                   calib: CalibMatrix, feat: ImageFeatureMap):
    """Image feature rows and validity flags for every voxel of ``t``."""
    s = _project_sample(t, voxel_size, origin, rec, calib, feat)
    return s.rows, s.valid


class ImageContext:
    """Images, calibrations and geometry needed to fuse one scene.

    Views are tried in order; each voxel takes its features from the first view
    it projects into.
    """

    def __init__(self, views: Sequence[Tuple[np.ndarray, CalibMatrix]], voxel_size, origin,
                 record: Optional[TransformRecord] = None):
        self.views = list(views)
        self.voxel_size = np.asarray(voxel_size, dtype=np.float64)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.record = record
        self._maps: List[Tuple[ImageFeatureMap, dict]] = []
        self._params = None

    def extract(self, params: Dict[str, np.ndarray]) -> None:
        self._params = params
        self._maps = [extract_image_features(img, params, return_cache=True) for img, _ in self.views]
        self._grads = [np.zeros_like(m.data) for m, _ in self._maps]

    def sample(self, t: SparseTensor):
        """Returns ``(rows, valid, token)``; ``token`` feeds :meth:`accumulate`."""
        if not self._maps:
            raise RuntimeError("call extract() before sampling")
        C = self._maps[0][0].channels
        rows = np.zeros((t.n, C), dtype=self._maps[0][0].data.dtype)
        taken = np.zeros(t.n, dtype=bool)
        token = []
        for v, ((_, calib), (fmap, _)) in enumerate(zip(self.views, self._maps)):
            s = _project_sample(t, self.voxel_size, self.origin, self.record, calib, fmap)
            use = s.valid & ~taken
            s.weights[~use] = 0.0
            rows[use] = s.rows[use]
            taken |= use
            token.append((v, s))
        return rows, taken, token

    def accumulate(self, token, d_rows: np.ndarray) -> None:
        for v, s in token:
            self._grads[v] += bilinear_backward(self._grads[v].shape, s, d_rows)

    def backward(self) -> Dict[str, np.ndarray]:
        total: Dict[str, np.ndarray] = OrderedDict((k, np.zeros_like(p)) for k, p in self._params.items())
        for (fmap, cache), d in zip(self._maps, self._grads):
            for k, g in image_stack_backward(self._params, cache, d).items():
                total[k] += g
        return total


# --- fused focal convolution --------------------------------------------------

@dataclass
class FusionResult:
    output: SparseTensor  # fused output
    focal: FocalResult
    fused_rows: np.ndarray  # bool per output row that received image features
    scope: str


def fuse_focal_forward(inp: SparseTensor, weights: ConvWeights, branch_weights: ConvWeights,
                       tau: float, image_rows: np.ndarray,
                       out_image_rows: Union[np.ndarray, Callable[[SparseTensor], np.ndarray]],
                       scope: str = "imp", attention: bool = True, **focal_kw) -> FusionResult:
    """Focal convolution with image features summed in twice.

    ``image_rows`` (``N_in x C_in``) are added to the importance-branch input.
    ``out_image_rows`` are the image features at the output coordinates, either
    as an array or as a callable receiving the (unfused) output tensor; they
    are added to rows produced by important dilation (``scope="imp"``) or to
    every row (``scope="all"``).
    """
    if scope not in FUSION_SCOPES:
        raise ValueError(f"fusion scope must be one of {FUSION_SCOPES}")
    image_rows = np.asarray(image_rows)
    if image_rows.shape != inp.features.shape:
        raise ShapeError(f"image rows {image_rows.shape} do not match input {inp.features.shape}")
    branch_in = inp.replace_features(inp.features + image_rows)
    res = focal_forward(inp, weights, branch_weights, tau, attention, branch_input=branch_in, **focal_kw)
    out = res.output
    rows = out_image_rows(out) if callable(out_image_rows) else np.asarray(out_image_rows)
    if rows.shape != out.features.shape:
        raise ShapeError(f"output image rows {rows.shape} do not match output {out.features.shape}")
    mask = res.important_out if scope == "imp" else np.ones(out.n, dtype=bool)
    fused = out.features + np.where(mask[:, None], rows, 0)
    return FusionResult(out.replace_features(fused), res, mask, scope)


def fuse_focal_backward(res: FusionResult, d_output: np.ndarray, d_center=None):
    """Returns ``(FocalGradients, d_image_rows, d_out_image_rows)``.

    ``FocalGradients.d_input`` already includes the path through the branch.
    """
    g: FocalGradients = focal_backward(res.focal, d_output, d_center)
    d_out_rows = np.where(res.fused_rows[:, None], d_output, 0)
    d_image_rows = g.d_branch_input
    g.d_input = g.d_input + g.d_branch_input
    return g, d_image_rows, d_out_rows


def paste_box_crop(image: np.ndarray, crop_region: Tuple[int, int, int, int],
                   source_crop: np.ndarray) -> np.ndarray:
    """Copy ``source_crop`` into ``image[y0:y0+h, x0:x0+w]``; region is ``(y0, x0, h, w)``."""
    y0, x0, h, w = (int(v) for v in crop_region)
    H, W = image.shape[:2]
    if y0 < 0 or x0 < 0 or h <= 0 or w <= 0 or y0 + h > H or x0 + w > W:
        raise BoundsError(f"crop region {crop_region} outside image {H}x{W}")
    source_crop = np.asarray(source_crop)
    if source_crop.shape[:2] != (h, w) or source_crop.shape[2:] != image.shape[2:]:
        raise BoundsError(f"source crop shape {source_crop.shape} does not fit region {(h, w)}")
    out = image.copy()
    out[y0:y0 + h, x0:x0 + w] = source_crop
    return out


# --- PGM / PPM ----------------------------------------------------------------

def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos


def read_pnm(path: str) -> np.ndarray:
    """Read PGM/PPM (P2, P3, P5, P6) as ``(H, W, C)`` float64 scaled to ``[0, 1]``."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r}")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    ch = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * ch
    if magic in (b"P2", b"P3"):
        vals, _ = _tokens(data, n, pos)
        arr = np.array([int(v) for v in vals], dtype=np.float64)
    else:
        pos += 1  # single whitespace after maxval
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos:pos + n * dt.itemsize]
        if len(raw) != n * dt.itemsize:
            raise FormatError("truncated PNM payload")
        arr = np.frombuffer(raw, dtype=dt).astype(np.float64)
    return arr.reshape(h, w, ch) / maxval


def write_pnm(path: str, image: np.ndarray, binary: bool = True) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, ch = img.shape
    if ch not in (1, 3):
        raise ShapeError("PNM images need 1 or 3 channels")
    q = np.rint(img * 255).astype(np.uint8)
    if binary:
        magic = b"P6" if ch == 3 else b"P5"
        with open(path, "wb") as fh:
            fh.write(magic + f"\n{w} {h}\n255\n".encode() + q.tobytes())
    else:
        magic = "P3" if ch == 3 else "P2"
        body = "\n".join(" ".join(str(v) for v in row.ravel()) for row in q)
        with open(path, "w") as fh:
            fh.write(f"{magic}\n{w} {h}\n255\n{body}\n")
