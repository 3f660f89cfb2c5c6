"""VoxelNet-style sparse backbone: a stem plus four stages.

Every layer is conv -> per-channel affine -> relu. Stages after the first open
with a stride-2 regular convolution; the rest are submanifold blocks. A focal
(or fused focal) convolution can replace the last convolution of a stage.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import sparse_conv as sc
from .errors import ConfigError, StateError
from .focal_conv import FocalLossSpec, GtBox, focal_backward, focal_forward, focal_loss, voxel_targets
from .fusion import (FUSION_SCOPES, ImageContext, fuse_focal_backward, fuse_focal_forward,
                     init_image_stack)
from .kernel_map import KernelSpec, regular_map, submanifold_map
from .sparse_conv import ConvWeights
from .sparse_tensor import SparseTensor, embed

log = logging.getLogger(__name__)

BLOCK_STYLES = ("plain", "residual_pair")
SUBM3 = KernelSpec((3, 3, 3), mode="submanifold")
REG3 = KernelSpec((3, 3, 3), (1, 1, 1), (1, 1, 1), mode="regular")
DOWN3 = KernelSpec((3, 3, 3), (2, 2, 2), (1, 1, 1), mode="regular")


@dataclass
class StageSpec:
    out_channels: int
    n_subm_blocks: int
    downsample: bool
    block_style: str = "plain"
    focal_at_last_layer: bool = False
    fusion_at_last_layer: bool = False
    # stride-1 regular conv as the last layer; used as the dense-dilation reference
    regular_at_last_layer: bool = False


@dataclass
class BackboneSpec:
    stem_channels: int = 16
    stages: List[StageSpec] = field(default_factory=list)
    in_channels: int = 4
    tau: float = 0.5
    attention: bool = True
    loss_weight: float = 1.0
    gamma: float = 2.0
    importance_kernel: int = 1
    top_k_ratio: Optional[float] = None
    restrict_to_input: bool = False
    fusion_scope: str = "imp"
    image_hidden: int = 16

    def validate(self) -> "BackboneSpec":
        if len(self.stages) != 4:
            raise ConfigError(f"backbone needs exactly 4 stages, got {len(self.stages)}")
        if self.stem_channels <= 0 or self.in_channels <= 0:
            raise ConfigError("channel counts must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.top_k_ratio is not None and not 0 < self.top_k_ratio <= 1:
            raise ConfigError("top_k_ratio must lie in (0, 1]")
        if self.importance_kernel <= 0 or self.importance_kernel % 2 == 0:
            raise ConfigError("importance_kernel must be a positive odd integer")
        if self.gamma < 0 or self.loss_weight < 0:
            raise ConfigError("gamma and loss_weight must be non-negative")
        if self.fusion_scope not in FUSION_SCOPES:
            raise ConfigError(f"fusion_scope must be one of {FUSION_SCOPES}")
        c_prev = self.stem_channels
        for i, st in enumerate(self.stages, 1):
            if st.out_channels <= 0 or st.n_subm_blocks < 0:
                raise ConfigError(f"stage {i}: invalid channel or block count")
            if st.block_style not in BLOCK_STYLES:
                raise ConfigError(f"stage {i}: unknown block style {st.block_style!r}")
            if st.fusion_at_last_layer and not st.focal_at_last_layer:
                raise ConfigError(f"stage {i}: fusion requires a focal layer")
            if st.focal_at_last_layer and st.regular_at_last_layer:
                raise ConfigError(f"stage {i}: last layer cannot be both focal and regular")
            if (st.focal_at_last_layer or st.regular_at_last_layer) and st.n_subm_blocks == 0:
                raise ConfigError(f"stage {i}: replacing the last layer needs a submanifold block")
            if st.fusion_at_last_layer:
                first_is_last = not st.downsample and st.n_subm_blocks == 1 and st.block_style == "plain"
                c_in = c_prev if first_is_last else st.out_channels
                if c_in != st.out_channels:
                    raise ConfigError(f"stage {i}: fusion needs equal input/output widths")
            if not st.downsample and st.n_subm_blocks == 0 and c_prev != st.out_channels:
                raise ConfigError(f"stage {i}: empty stage cannot change width")
            c_prev = st.out_channels
        if sum(st.fusion_at_last_layer for st in self.stages) > 1:
            raise ConfigError("at most one fused focal layer is supported")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        if "preset" in d:
            name = d.pop("preset")
            focal = d.pop("focal_stages", ())
            fusion = d.pop("fusion", False)
            return preset(name, focal_stages=focal, fusion=fusion, **d)
        try:
            stages = [StageSpec(**s) for s in d.pop("stages")]
            return cls(stages=stages, **d).validate()
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid backbone config: {exc}") from exc

    @classmethod
    def from_json(cls, path: str) -> "BackboneSpec":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


_PRESETS = {
    "pvrcnn": ((16, 16, 32, 64, 64), (1, 2, 2, 2), "plain"),
    "centerpoint": ((16, 16, 32, 64, 128), (2, 2, 2, 2), "residual_pair"),
}


def preset(name: str, focal_stages: Sequence[int] = (), fusion: bool = False, **overrides) -> BackboneSpec:
    """Named layouts; ``focal_stages`` are 1-based. ``fusion`` puts the fused layer in stage 1 only."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    chans, counts, style = _PRESETS[name]
    focal_stages = set(int(s) for s in focal_stages)
    if fusion:
        focal_stages.add(1)
    if not focal_stages <= {1, 2, 3, 4}:
        raise ConfigError(f"focal stages must be within 1..4, got {sorted(focal_stages)}")
    stages = [StageSpec(out_channels=c, n_subm_blocks=n, downsample=i > 1, block_style=style,
                        focal_at_last_layer=i in focal_stages,
                        fusion_at_last_layer=fusion and i == 1)
              for i, (c, n) in enumerate(zip(chans[1:], counts), 1)]
    try:
        return BackboneSpec(stem_channels=chans[0], stages=stages, **overrides).validate()
    except TypeError as exc:
        raise ConfigError(f"invalid preset override: {exc}") from exc


# --- layers -------------------------------------------------------------------

@dataclass
class LayerDef:
    name: str
    kind: str  # subm | reg_down | reg | focal | fusion
    c_in: int
    c_out: int
    relu: bool = True


@dataclass
class ForwardResult:
    output: SparseTensor
    diagnostics: List[dict]
    obj_loss: float
    layer_outputs: "OrderedDict[str, SparseTensor]"

    def diagnostic_lines(self) -> List[str]:
        out = []
        for d in self.diagnostics:
            n_imp = "n/a" if d["n_imp"] is None else d["n_imp"]
            tau = "n/a" if d["tau"] is None else d["tau"]
            out.append(f"layer={d['name']} n_in={d['n_in']} n_imp={n_imp} n_out={d['n_out']} tau={tau}")
        return out


class Backbone:
    """Ordered layers with a flat, named parameter dictionary."""

    def __init__(self, spec: BackboneSpec, params: "OrderedDict[str, np.ndarray]", layout: list):
        self.spec = spec
        self.params = params
        self.layout = layout  # list of ("layer", LayerDef) | ("residual", [LayerDef, LayerDef])
        self._tape = None

    # -- structure --
    @property
    def layers(self) -> List[LayerDef]:
        out = []
        for kind, item in self.layout:
            out.extend(item if kind == "residual" else [item])
        return out

    def focal_layers(self) -> List[LayerDef]:
        return [l for l in self.layers if l.kind in ("focal", "fusion")]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def weights(self, name: str, bias_key: Optional[str] = None) -> ConvWeights:
        b = self.params[bias_key] if bias_key else None
        return ConvWeights(self.params[name], b)

    # -- persistence --
    def records(self):
        cfg = json.dumps(self.spec.to_dict(), sort_keys=True).encode()
        return list(self.params.items()) + [("__config__", np.frombuffer(cfg, dtype=np.uint8))]

    def save(self, path: str) -> None:
        sc.save_checkpoint(path, self.records())

    def to_bytes(self) -> bytes:
        return sc.dumps_checkpoint(self.records())

    @classmethod
    def from_records(cls, recs) -> "Backbone":
        recs = OrderedDict(recs)
        if "__config__" not in recs:
            raise ConfigError("checkpoint carries no backbone config")
        spec = BackboneSpec.from_dict(json.loads(recs.pop("__config__").tobytes().decode()))
        bb = build_backbone(spec, seed=0, dtype=next(iter(recs.values())).dtype)
        if list(recs) != list(bb.params):
            raise ConfigError("checkpoint parameters do not match its config")
        for k, v in recs.items():
            if v.shape != bb.params[k].shape:
                raise ConfigError(f"parameter {k} has shape {v.shape}, expected {bb.params[k].shape}")
            bb.params[k] = v.copy()
        return bb

    @classmethod
    def load(cls, path: str) -> "Backbone":
        return cls.from_records(sc.load_checkpoint(path))

    def copy(self) -> "Backbone":
        return Backbone(self.spec, OrderedDict((k, v.copy()) for k, v in self.params.items()), self.layout)

    # -- execution --
    def forward(self, x: SparseTensor, boxes: Optional[Sequence[GtBox]] = None, voxel_size=None,
                origin=None, image_context: Optional[ImageContext] = None, tau: Optional[float] = None) -> ForwardResult:
        if tuple(x.stride) != (1, 1, 1):
            raise ConfigError("backbone input must have stride 1")
        if x.channels != self.spec.in_channels:
            raise ConfigError(f"input has {x.channels} channels, backbone expects {self.spec.in_channels}")
        if boxes is not None and (voxel_size is None or origin is None):
            raise ConfigError("boxes need voxel_size and origin")
        x = x.replace_features(x.features.astype(self.dtype, copy=False))
        tape = _Tape(self, boxes, voxel_size, origin, image_context,
                     self.spec.tau if tau is None else float(tau))
        for kind, item in self.layout:
            if kind == "residual":
                x = tape.residual(item, x)
            else:
                x = tape.layer(item, x)
        self._tape = tape
        return ForwardResult(x, tape.diagnostics, tape.obj_loss, tape.outputs)

    def backward(self, d_output: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        """Gradients for every parameter of the last forward pass.

        Includes the objective-loss terms of focal layers when the forward pass
        received boxes.
        """
        if self._tape is None:
            raise StateError("backward called without a cached forward pass")
        tape, self._tape = self._tape, None
        return tape.backward(np.asarray(d_output))


def _layer_shape(bb_spec: BackboneSpec, ld: LayerDef, name: str, dtype, rng) -> "OrderedDict[str, np.ndarray]":
    p: Dict[str, np.ndarray] = OrderedDict()
    p[f"{name}.conv.w"] = ConvWeights.init(rng, 27, ld.c_in, ld.c_out, dtype=dtype).w
    if ld.kind in ("focal", "fusion"):
        kv = bb_spec.importance_kernel ** 3
        br = ConvWeights.init(rng, kv, ld.c_in, 27, bias=True, dtype=dtype)
        p[f"{name}.imp.w"] = br.w
        p[f"{name}.imp.b"] = br.bias
    p[f"{name}.bn.scale"] = np.ones(ld.c_out, dtype)
    p[f"{name}.bn.shift"] = np.zeros(ld.c_out, dtype)
    if ld.kind == "fusion":
        for k, v in init_image_stack(rng, ld.c_out, hidden=bb_spec.image_hidden, dtype=dtype).items():
            p[f"{name}.img.{k}"] = v
    return p


def build_backbone(spec: BackboneSpec, seed: int = 0, dtype=np.float32) -> Backbone:
    """Lay out the layers of ``spec`` and initialize weights from ``seed``.

    Convolution weights are uniform in ``+-1/sqrt(fan_in)``; affine layers
    start as the identity.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    layout = []
    layout.append(("layer", LayerDef("stem", "subm", spec.in_channels, spec.stem_channels)))
    c = spec.stem_channels
    for si, st in enumerate(spec.stages, 1):
        if st.downsample:
            layout.append(("layer", LayerDef(f"s{si}.down", "reg_down", c, st.out_channels)))
            c = st.out_channels
        for bi in range(st.n_subm_blocks):
            last = bi == st.n_subm_blocks - 1
            last_kind = "subm"
            if last and st.focal_at_last_layer:
                last_kind = "fusion" if st.fusion_at_last_layer else "focal"
            elif last and st.regular_at_last_layer:
                last_kind = "reg"
            if st.block_style == "residual_pair":
                a = LayerDef(f"s{si}.b{bi}.c0", "subm", c, st.out_channels)
                b = LayerDef(f"s{si}.b{bi}.c1", last_kind, st.out_channels, st.out_channels, relu=False)
                layout.append(("residual", [a, b]))
            else:
                layout.append(("layer", LayerDef(f"s{si}.b{bi}", last_kind, c, st.out_channels)))
            c = st.out_channels
    params: Dict[str, np.ndarray] = OrderedDict()
    for kind, item in layout:
        for ld in (item if kind == "residual" else [item]):
            params.update(_layer_shape(spec, ld, ld.name, dtype, rng))
    return Backbone(spec, params, layout)


# --- forward tape -------------------------------------------------------------

class _Tape:
    """Records one forward pass and replays it backwards."""

    def __init__(self, bb: Backbone, boxes, voxel_size, origin, image_context, tau):
        self.bb = bb
        self.p = bb.params
        self.boxes = boxes
        self.voxel_size = voxel_size
        self.origin = origin
        self.image_context = image_context
        self.tau = tau
        self.steps = []  # backward closures: d_out -> d_in
        self.grads: Dict[str, np.ndarray] = OrderedDict((k, np.zeros_like(v)) for k, v in self.p.items())
        self.diagnostics: List[dict] = []
        self.outputs: "OrderedDict[str, SparseTensor]" = OrderedDict()
        self.obj_loss = 0.0
        self.loss_spec = FocalLossSpec(bb.spec.gamma, bb.spec.loss_weight)
        self._img_used = False

    def _diag(self, ld: LayerDef, x: SparseTensor, out: SparseTensor, n_imp=None, recall=None):
        focal = ld.kind in ("focal", "fusion")
        self.diagnostics.append({"name": ld.name, "kind": ld.kind, "n_in": x.n, "n_out": out.n,
                                 "n_imp": n_imp, "tau": self.tau if focal else None,
                                 "stride": out.stride[0], "recall": recall})

    def _conv(self, ld: LayerDef, x: SparseTensor):
        """Returns the pre-affine output and its backward closure (d_pre -> d_x)."""
        name = ld.name
        w = self.bb.weights(f"{name}.conv.w")
        if ld.kind in ("subm", "reg", "reg_down"):
            spec = {"subm": SUBM3, "reg": REG3, "reg_down": DOWN3}[ld.kind]
            kmap = submanifold_map(x, spec) if ld.kind == "subm" else regular_map(x, spec)
            out = sc.forward(x, kmap, w)
            self._diag(ld, x, out)

            def back(d):
                g = sc.backward(x, kmap, w, d)
                self.grads[f"{name}.conv.w"] += g.d_w
                return g.d_input
            return out, back

        branch = self.bb.weights(f"{name}.imp.w", f"{name}.imp.b")
        s = self.bb.spec
        kw = dict(kernel_size=3, top_k_ratio=s.top_k_ratio, restrict_to_input=s.restrict_to_input)
        token_in = token_out = None
        ctx = self.image_context
        if ld.kind == "fusion" and ctx is not None:
            img_params = OrderedDict((k[len(name) + 5:], v) for k, v in self.p.items()
                                     if k.startswith(f"{name}.img."))
            ctx.extract(img_params)
            rows_in, _, token_in = ctx.sample(x)
            holder = {}

            def out_rows(o):
                r, _, holder["tok"] = ctx.sample(o)
                return r
            fres = fuse_focal_forward(x, w, branch, self.tau, rows_in, out_rows, s.fusion_scope,
                                      s.attention, **kw)
            token_out = holder["tok"]
            res = fres.focal
            out = fres.output
        else:
            if ld.kind == "fusion":
                log.warning("layer %s: no image context, running without image features", name)
            fres = None
            res = focal_forward(x, w, branch, self.tau, s.attention, **kw)
            out = res.output

        d_center = None
        recall = None
        if self.boxes is not None:
            labels = voxel_targets(x, self.boxes, self.voxel_size, self.origin)
            loss, d_scores = focal_loss(res.importance.center, labels, self.loss_spec)
            self.obj_loss += self.loss_spec.loss_weight * loss
            d_center = self.loss_spec.loss_weight * d_scores
            fg = labels.astype(bool)
            if fg.any():
                recall = float(np.mean(res.importance.center[fg] >= self.tau))
        self._diag(ld, x, out, res.selection.n_important, recall)

        def back(d):
            if fres is not None:
                g, d_rows_in, d_rows_out = fuse_focal_backward(fres, d, d_center)
                ctx.accumulate(token_in, d_rows_in)
                ctx.accumulate(token_out, d_rows_out)
                for k, v in ctx.backward().items():
                    self.grads[f"{name}.img.{k}"] += v
            else:
                g = focal_backward(res, d, d_center)
            self.grads[f"{name}.conv.w"] += g.d_w
            self.grads[f"{name}.imp.w"] += g.d_branch_w
            self.grads[f"{name}.imp.b"] += g.d_branch_bias
            return g.d_input
        return out, back

    def _block(self, ld: LayerDef, x: SparseTensor):
        pre, conv_back = self._conv(ld, x)
        scale, shift = self.p[f"{ld.name}.bn.scale"], self.p[f"{ld.name}.bn.shift"]
        a = sc.affine(pre, scale, shift)
        out = sc.relu(a) if ld.relu else a
        self.outputs[ld.name] = out

        def back(d):
            if ld.relu:
                d = sc.relu_backward(a, d)
            d_pre, d_scale, d_shift = sc.affine_backward(pre, scale, d)
            self.grads[f"{ld.name}.bn.scale"] += d_scale
            self.grads[f"{ld.name}.bn.shift"] += d_shift
            return conv_back(d_pre)
        return out, back

    def layer(self, ld: LayerDef, x: SparseTensor) -> SparseTensor:
        out, back = self._block(ld, x)
        self.steps.append(back)
        return out

    def residual(self, pair: List[LayerDef], x: SparseTensor) -> SparseTensor:
        h, back0 = self._block(pair[0], x)
        y, back1 = self._block(pair[1], h)
        skip = x.features if y.same_coords(x) else embed(x, y)
        s = y.features + skip
        out = y.replace_features(np.maximum(s, 0))
        same = y.same_coords(x)
        if not same:
            from .sparse_tensor import CoordIndex
            rows = CoordIndex(y).lookup_many(x.coords)

        def back(d):
            d_s = np.where(s > 0, d, 0)
            d_h = back1(d_s)
            d_x = back0(d_h)
            d_x = d_x + (d_s if same else d_s[rows])
            return d_x
        self.steps.append(back)
        self.outputs[pair[1].name] = out
        return out

    def backward(self, d: np.ndarray):
        for back in reversed(self.steps):
            d = back(d)
        return self.grads
