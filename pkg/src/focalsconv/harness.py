"""Voxelization, synthetic scenes, the training loop, sparsity statistics and point exports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .backbone import Backbone, BackboneSpec, StageSpec, build_backbone
from .errors import ConfigError, FormatError, NumericalError
from .focal_conv import GtBox, points_in_box, sigmoid, voxel_centers, voxel_targets
from .fusion import CalibMatrix
from .sparse_conv import load_checkpoint, save_checkpoint
from .sparse_tensor import SparseTensor, build, read_svox

log = logging.getLogger(__name__)

DEFAULT_VOXEL_SIZE = (0.05, 0.05, 0.1)
BG_INTENSITY = (0.0, 0.5)
BOX_INTENSITY = (0.5, 1.0)


# --- voxelization -------------------------------------------------------------

def voxelize(points: np.ndarray, voxel_size, origin, grid, dtype=np.float32) -> SparseTensor:
    """Bin ``M x (3 + C)`` points by ``floor((p - origin) / voxel_size)``.

    Every voxel gets the mean of all columns of its points (coordinates
    included, as in a mean voxel encoder). Points outside the grid are dropped.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 3:
        raise ConfigError(f"points must be (M, >=3), got {points.shape}")
    voxel_size = np.asarray(voxel_size, dtype=np.float64)
    if voxel_size.shape != (3,) or np.any(voxel_size <= 0):
        raise ConfigError("voxel_size must be three positive numbers")
    grid = tuple(int(g) for g in grid)
    cells = np.floor((points[:, :3] - np.asarray(origin, np.float64)) / voxel_size).astype(np.int64)
    inside = np.all((cells >= 0) & (cells < np.asarray(grid)), axis=1)
    if not inside.all():
        log.warning("voxelize: dropped %d of %d points outside the grid", int((~inside).sum()), len(points))
    cells, points = cells[inside], points[inside]
    coords = np.concatenate([np.zeros((len(cells), 1), np.int64), cells], axis=1)
    summed = build(coords, points, grid, dtype=np.float64)
    counts = build(coords, np.ones((len(points), 1)), grid, dtype=np.float64)
    return summed.replace_features((summed.features / counts.features).astype(dtype))


# --- scenes -------------------------------------------------------------------

@dataclass
class SceneBox:
    box: GtBox
    density: float  # points per voxel volume

    def to_dict(self):
        return {**self.box.to_dict(), "density": self.density}


@dataclass
class SceneSpec:
    grid: Tuple[int, int, int] = (16, 16, 16)
    voxel_size: Tuple[float, float, float] = DEFAULT_VOXEL_SIZE
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_background: int = 0
    boxes: List[SceneBox] = field(default_factory=list)
    seed: int = 0

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.grid, np.float64) * np.asarray(self.voxel_size, np.float64)

    def validate(self) -> "SceneSpec":
        if len(self.grid) != 3 or min(self.grid) <= 0:
            raise ConfigError("grid must be three positive integers")
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ConfigError("voxel_size must be three positive numbers")
        if self.n_background < 0:
            raise ConfigError("n_background must be non-negative")
        lo = np.asarray(self.origin, np.float64)
        hi = lo + self.extent
        for i, b in enumerate(self.boxes):
            if b.density < 0:
                raise ConfigError(f"box {i}: density must be non-negative")
            corners = _box_corners(b.box)
            if np.any(corners < lo) or np.any(corners > hi):
                raise ConfigError(f"box {i} leaves the world bounds")
        return self

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "voxel_size": list(self.voxel_size), "origin": list(self.origin),
                "n_background": self.n_background, "boxes": [b.to_dict() for b in self.boxes],
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            d = dict(d)
            boxes = []
            for b in d.pop("boxes", []):
                b = dict(b)
                density = float(b.pop("density"))
                boxes.append(SceneBox(GtBox.from_dict(b), density))
            return cls(grid=tuple(int(v) for v in d.pop("grid", (16, 16, 16))),
                       voxel_size=tuple(float(v) for v in d.pop("voxel_size", DEFAULT_VOXEL_SIZE)),
                       origin=tuple(float(v) for v in d.pop("origin", (0, 0, 0))),
                       boxes=boxes, **d).validate()
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid scene spec: {exc}") from exc


def _rotz(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _box_corners(box: GtBox) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], np.float64)
    local = signs * np.asarray(box.size, np.float64) / 2
    return local @ _rotz(box.yaw).T + np.asarray(box.center, np.float64)


def box_point_count(box: SceneBox, voxel_size) -> int:
    return int(round(box.density * float(np.prod(box.box.size)) / float(np.prod(voxel_size))))


def gen_scene(spec: SceneSpec) -> Tuple[np.ndarray, List[GtBox]]:
    """Points ``(x, y, z, intensity)`` and the ground-truth boxes.

    Background points are uniform over the world with low intensity; each box
    gets ``round(density * box volume / voxel volume)`` uniform interior points
    with high intensity.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo = np.asarray(spec.origin, np.float64)
    parts = []
    bg = lo + rng.uniform(size=(spec.n_background, 3)) * spec.extent
    parts.append(np.column_stack([bg, rng.uniform(*BG_INTENSITY, size=spec.n_background)]))
    for b in spec.boxes:
        n = box_point_count(b, spec.voxel_size)
        half = np.asarray(b.box.size, np.float64) / 2
        local = rng.uniform(-half, half, size=(n, 3))
        pts = local @ _rotz(b.box.yaw).T + np.asarray(b.box.center, np.float64)
        parts.append(np.column_stack([pts, rng.uniform(*BOX_INTENSITY, size=n)]))
    return np.concatenate(parts, axis=0), [b.box for b in spec.boxes]


def random_scene_spec(seed: int, grid=(16, 16, 16), n_boxes: int = 3, density: float = 0.15,
                      n_background: int = 150, voxel_size=DEFAULT_VOXEL_SIZE) -> SceneSpec:
    """Seeded scene with ``n_boxes`` yawed boxes of 5-7 x 5-7 x 4-6 voxels, kept inside the world."""
    rng = np.random.default_rng([seed, 7])
    vs = np.asarray(voxel_size, np.float64)
    ext = np.asarray(grid, np.float64) * vs
    boxes = []
    for _ in range(n_boxes):
        size = np.array([rng.uniform(5, 7), rng.uniform(5, 7), rng.uniform(4, 6)]) * vs
        r = float(np.hypot(size[0], size[1])) / 2
        if 2 * r > ext[:2].min() or size[2] > ext[2]:
            raise ConfigError(f"grid {tuple(grid)} too small for the box sizes")
        center = (rng.uniform(r, ext[0] - r), rng.uniform(r, ext[1] - r),
                  rng.uniform(size[2] / 2, ext[2] - size[2] / 2))
        boxes.append(SceneBox(GtBox(tuple(float(c) for c in center), tuple(float(s) for s in size),
                                    float(rng.uniform(-math.pi, math.pi))), density))
    return SceneSpec(grid=tuple(grid), voxel_size=tuple(voxel_size), n_background=n_background,
                     boxes=boxes, seed=seed).validate()


@dataclass
class Scene:
    tensor: SparseTensor
    boxes: List[GtBox]
    voxel_size: Tuple[float, float, float]
    origin: Tuple[float, float, float]


def scene_from_spec(spec: SceneSpec, dtype=np.float32) -> Scene:
    points, boxes = gen_scene(spec)
    t = voxelize(points, spec.voxel_size, spec.origin, spec.grid, dtype=dtype)
    return Scene(t, boxes, tuple(spec.voxel_size), tuple(spec.origin))


def sidecar_path(svox_path) -> Path:
    return Path(svox_path).with_suffix(".boxes.json")


def write_sidecar(path, scene: Scene) -> None:
    meta = {"voxel_size": list(scene.voxel_size), "origin": list(scene.origin),
            "boxes": [b.to_dict() for b in scene.boxes]}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_scene(svox_path, require_boxes: bool = False) -> Scene:
    t = read_svox(str(svox_path))
    side = sidecar_path(svox_path)
    if not side.exists():
        if require_boxes:
            raise ConfigError(f"{svox_path}: missing box sidecar {side.name}")
        return Scene(t, [], (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    try:
        meta = json.loads(side.read_text())
        return Scene(t, [GtBox.from_dict(b) for b in meta["boxes"]],
                     tuple(meta["voxel_size"]), tuple(meta["origin"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{side}: {exc}") from exc


# --- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 1
    lr: float = 1e-3
    optimizer: str = "adam"
    tau: float = 0.5
    attention: bool = True
    loss_weight: float = 1.0
    seed: int = 0
    lr_schedule: str = "constant"

    def validate(self) -> "TrainConfig":
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]")
        if self.loss_weight < 0:
            raise ConfigError("loss_weight must be non-negative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(f"invalid train config: {exc}") from exc

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1 + math.cos(math.pi * step / self.steps))
        return self.lr


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0) + (1 - self.b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= (self.lr * g).astype(params[k].dtype)


@dataclass
class Model:
    """Backbone plus the 1x1 voxel-classification head used as the task proxy."""
    backbone: Backbone
    head: "OrderedDict[str, np.ndarray]"

    def records(self):
        return self.backbone.records() + [(f"head.{k}", v) for k, v in self.head.items()]

    def save(self, path) -> None:
        save_checkpoint(str(path), self.records())

    @classmethod
    def load(cls, path) -> "Model":
        recs = load_checkpoint(str(path))
        head = OrderedDict((k[5:], recs.pop(k)) for k in list(recs) if k.startswith("head."))
        if set(head) != {"w", "b"}:
            raise FormatError(f"{path}: checkpoint carries no classification head")
        return cls(Backbone.from_records(recs), head)


def init_model(spec: BackboneSpec, seed: int, dtype=np.float32) -> Model:
    bb = build_backbone(spec, seed=seed, dtype=dtype)
    c = spec.stages[-1].out_channels
    bound = 1.0 / math.sqrt(c)
    rng = np.random.default_rng([seed, 1])
    head = OrderedDict(w=rng.uniform(-bound, bound, size=(c, 1)).astype(dtype), b=np.zeros(1, dtype))
    return Model(bb, head)


def _bce(logits: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy on logits and its gradient."""
    if len(logits) == 0:
        return 0.0, np.zeros_like(logits)
    y = labels.astype(np.float64)
    z = logits.astype(np.float64)
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return float(loss), ((sigmoid(z) - y) / len(z)).astype(logits.dtype)


def _scene_step(model: Model, scene: Scene, tau: float):
    bb = model.backbone
    res = bb.forward(scene.tensor, boxes=scene.boxes, voxel_size=scene.voxel_size,
                     origin=scene.origin, tau=tau)
    out = res.output
    z = (out.features @ model.head["w"] + model.head["b"])[:, 0]
    labels = voxel_targets(out, scene.boxes, scene.voxel_size, scene.origin)
    task, dz = _bce(z, labels)
    grads = bb.backward(dz[:, None] * model.head["w"][:, 0][None, :])
    grads["head.w"] = out.features.T @ dz[:, None]
    grads["head.b"] = np.array([dz.sum()], dtype=dz.dtype)
    return task + res.obj_loss, res, grads


def log_header(bb: Backbone) -> List[str]:
    cols = ["step", "loss", "obj_loss", "recall"]
    cols += [f"layer_{i}_n_out" for i in range(len(bb.layers))]
    cols += [f"layer_{i}_n_imp" for i, l in enumerate(bb.layers) if l.kind in ("focal", "fusion")]
    return cols


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _first_recall(diags: Sequence[dict]):
    for d in diags:
        if d["kind"] in ("focal", "fusion"):
            return d["recall"]
    return None


def train(config: TrainConfig, spec: BackboneSpec, scenes: Sequence[Scene], log_file=None,
          model: Optional[Model] = None) -> Tuple[Model, List[dict]]:
    """Jointly optimize the task proxy head and the focal objective losses.

    Step ``s`` uses scenes ``s*B .. s*B+B-1`` (cyclic). Gradients of a batch
    are summed in scene order and divided by ``B``. Returns the model and one
    metrics row per step; rows are also written as CSV to ``log_file``.
    """
    config.validate()
    if not scenes:
        raise ConfigError("training needs at least one scene")
    spec = BackboneSpec(**{**asdict(spec), "stages": [StageSpec(**asdict(s)) for s in spec.stages],
                           "tau": config.tau, "attention": config.attention,
                           "loss_weight": config.loss_weight}).validate()
    if model is None:
        model = init_model(spec, config.seed)
    else:
        model = Model(Backbone(spec, model.backbone.copy().params, model.backbone.layout),
                      OrderedDict((k, v.copy()) for k, v in model.head.items()))
    params = model.backbone.params
    flat = OrderedDict(params)
    flat.update((f"head.{k}", v) for k, v in model.head.items())
    opt = Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)
    cols = log_header(model.backbone)
    writer = None
    if log_file is not None:
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(cols)
    rows = []
    for step in range(config.steps):
        total = None
        loss = obj = 0.0
        recalls, diags = [], None
        for i in range(config.batch_size):
            scene = scenes[(step * config.batch_size + i) % len(scenes)]
            l, res, g = _scene_step(model, scene, config.tau)
            loss += l / config.batch_size
            obj += res.obj_loss / config.batch_size
            r = _first_recall(res.diagnostics)
            if r is not None:
                recalls.append(r)
            diags = diags or res.diagnostics
            total = g if total is None else OrderedDict((k, total[k] + g[k]) for k in total)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at step {step}; layers: "
                                 + "; ".join(f"{d['name']} n_out={d['n_out']}" for d in diags))
        row = OrderedDict(step=step, loss=loss, obj_loss=obj,
                          recall=float(np.mean(recalls)) if recalls else None)
        for i, d in enumerate(diags):
            row[f"layer_{i}_n_out"] = d["n_out"]
        for i, d in enumerate(diags):
            if d["kind"] in ("focal", "fusion"):
                row[f"layer_{i}_n_imp"] = d["n_imp"]
        rows.append(row)
        if writer:
            writer.writerow([_fmt(row[c]) for c in cols])
        grads = OrderedDict((k, v / config.batch_size) for k, v in total.items())
        opt.lr = config.lr_at(step)
        opt.step(flat, grads)
    return model, rows


# --- statistics and exports ----------------------------------------------------

def plain_spec(spec: BackboneSpec) -> BackboneSpec:
    stages = [StageSpec(s.out_channels, s.n_subm_blocks, s.downsample, s.block_style) for s in spec.stages]
    return BackboneSpec(**{**asdict(spec), "stages": stages})


def occupancy(t: SparseTensor, scene: Scene) -> dict:
    labels = voxel_targets(t, scene.boxes, scene.voxel_size, scene.origin)
    fg = int(labels.sum())
    return {"n": t.n, "fg": fg, "bg": t.n - fg, "fg_share": fg / t.n if t.n else 0.0}


def _probe_layer(bb: Backbone) -> Optional[str]:
    focal = bb.focal_layers()
    return focal[0].name if focal else None


def sparsity_report(bb: Backbone, scene: Scene, layer: Optional[str] = None) -> dict:
    """Per-layer counts plus foreground/background occupancy of ``bb`` and its plain twin.

    Occupancy is measured at ``layer`` (default: the first focal layer, which
    runs at stride 1) for both networks on the same scene.
    """
    res = bb.forward(scene.tensor, boxes=scene.boxes or None, voxel_size=scene.voxel_size,
                     origin=scene.origin)
    bb._tape = None
    layer = layer or _probe_layer(bb) or bb.layers[-1].name
    plain = build_backbone(plain_spec(bb.spec), dtype=bb.dtype)
    plain_res = plain.forward(scene.tensor)
    plain._tape = None
    return {"layers": res.diagnostics, "probe": layer,
            "focal": occupancy(res.layer_outputs[layer], scene),
            "plain": occupancy(plain_res.layer_outputs[layer], scene),
            "output": res.output}


def write_stats(report: dict, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["layer", "kind", "n_in", "n_imp", "n_out", "tau", "stride"])
    for d in report["layers"]:
        w.writerow([d["name"], d["kind"], d["n_in"], _fmt(d["n_imp"]), d["n_out"], _fmt(d["tau"]), d["stride"]])
    w.writerow([])
    w.writerow(["network", "probe", "n", "fg", "bg", "fg_share"])
    for net in ("focal", "plain"):
        o = report[net]
        w.writerow([net, report["probe"], o["n"], o["fg"], o["bg"], repr(float(o["fg_share"]))])


def export_points(t: SparseTensor, scene: Scene, calib: Optional[CalibMatrix] = None) -> "OrderedDict[str, np.ndarray]":
    """Voxel centers (world coordinates), their foreground label, and optional pixel coordinates."""
    xyz = voxel_centers(t, scene.voxel_size, scene.origin)
    cols = OrderedDict(x=xyz[:, 0], y=xyz[:, 1], z=xyz[:, 2],
                       fg=voxel_targets(t, scene.boxes, scene.voxel_size, scene.origin).astype(np.int64))
    if calib is not None:
        u, v, depth = calib.project(xyz)
        cols.update(u=u, v=v, depth=depth)
    return cols


def _cell(v) -> str:
    return str(int(v)) if isinstance(v, (np.integer, int)) else repr(float(v))


def write_points_csv(cols, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(list(cols))
    for row in zip(*cols.values()):
        w.writerow([_cell(v) for v in row])


def write_ply(cols, path) -> None:
    n = len(next(iter(cols.values()))) if cols else 0
    head = ["ply", "format ascii 1.0", f"element vertex {n}"]
    for k, v in cols.items():
        head.append(f"property {'int' if v.dtype.kind in 'iu' else 'double'} {k}")
    head.append("end_header")
    buf = io.StringIO()
    buf.write("\n".join(head) + "\n")
    for row in zip(*cols.values()):
        buf.write(" ".join(_cell(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_ply(path) -> "OrderedDict[str, np.ndarray]":
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply" or lines[1] != "format ascii 1.0":
        raise FormatError(f"{path}: not an ASCII PLY file")
    n, props, pos = None, [], 2
    while pos < len(lines) and lines[pos] != "end_header":
        parts = lines[pos].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[2], np.int64 if parts[1] == "int" else np.float64))
        pos += 1
    if n is None or pos == len(lines):
        raise FormatError(f"{path}: malformed PLY header")
    body = lines[pos + 1:pos + 1 + n]
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(body)}")
    table = [ln.split() for ln in body]
    if any(len(r) != len(props) for r in table):
        raise FormatError(f"{path}: vertex row has the wrong number of fields")
    return OrderedDict((name, np.array([r[i] for r in table], dtype=np.float64).astype(dt))
                       for i, (name, dt) in enumerate(props))
