"""Acceptance criteria 1-9. Each test records one PASS/FAIL line, echoed in the session summary."""
import json
import math
import time

import numpy as np

from focalsconv import sparse_conv as sc
from focalsconv.backbone import build_backbone, preset
from focalsconv.cli import main
from focalsconv.focal_conv import (FocalLossSpec, focal_backward, focal_forward, focal_loss)
from focalsconv.fusion import (CalibMatrix, ImageContext, extract_image_features, fuse_focal_backward,
                               fuse_focal_forward, image_stack_backward, init_image_stack)
from focalsconv.harness import TrainConfig, random_scene_spec, scene_from_spec, sparsity_report, train
from focalsconv.kernel_map import KernelSpec, explicit_output_map, regular_map, submanifold_map
from focalsconv.sparse_conv import ConvWeights
from focalsconv.sparse_tensor import to_dense, unpack_keys
from helpers import ACCEPTANCE_LINES, numeric_grad, random_tensor, rel_error

SUBM = KernelSpec((3, 3, 3), mode="submanifold")
REG1 = KernelSpec((3, 3, 3), (1, 1, 1), (1, 1, 1), "regular")
REG2 = KernelSpec((3, 3, 3), (2, 2, 2), (1, 1, 1), "regular")
EXPL = KernelSpec((3, 3, 3), mode="explicit_output")


def report(n, name, ok, detail):
    line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def _random_case(rng, dtype=np.float64, max_side=16, max_c=8):
    shape = tuple(int(s) for s in rng.integers(3, max_side + 1, size=3))
    density = rng.uniform(0.005, 0.20)
    return random_tensor(rng, shape, density, channels=int(rng.integers(1, max_c + 1)), dtype=dtype)


# --- 1 ------------------------------------------------------------------------

def test_criterion_1_degeneracy():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, coords_ok, n_cases = 0.0, True, 200
    for _ in range(n_cases):
        t = _random_case(rng)
        c_out = int(rng.integers(1, 9))
        w = ConvWeights(rng.standard_normal((27, t.channels, c_out)), rng.standard_normal(c_out))
        # 1x1 branch with moderate logits keeps every score strictly inside (0, 1)
        branch = ConvWeights(rng.standard_normal((1, t.channels, 27)) * 0.5, rng.standard_normal(27) * 0.5)
        r0 = focal_forward(t, w, branch, tau=0.0, attention=False)
        reg = sc.forward(t, regular_map(t, REG1), w)
        r1 = focal_forward(t, w, branch, tau=1.0, attention=False)
        assert r1.importance.values.max() < 1.0
        sub = sc.forward(t, submanifold_map(t, SUBM), w)
        coords_ok &= np.array_equal(r0.output.coords, reg.coords) and np.array_equal(r1.output.coords, sub.coords)
        worst = max(worst, np.abs(r0.output.features - reg.features).max(initial=0),
                    np.abs(r1.output.features - sub.features).max(initial=0))
    elapsed = time.perf_counter() - start
    ok = coords_ok and worst <= 1e-6 and elapsed < 30
    report(1, "degeneracy", ok, f"{n_cases} tensors, coords exact={coords_ok}, max abs diff {worst:.2e} <= 1e-6, "
                                f"{elapsed:.1f} s < 30 s")
    assert ok


# --- 2 ------------------------------------------------------------------------

def _oracle_rel(t, kmap, w):
    dense = sc.dense_oracle(to_dense(t), w, kmap.spec if kmap.spec.mode == "regular" else REG1)
    out = sc.forward(t, kmap, w)
    b, x, y, z = out.coords.T.astype(np.int64)
    expected = dense[b, :, x, y, z]
    scale = max(np.abs(expected).max(initial=0), 1e-30)
    return float(np.abs(out.features - expected).max(initial=0) / scale)


def test_criterion_2_dense_oracle():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = {"submanifold": 0.0, "regular_s1": 0.0, "regular_s2": 0.0, "explicit": 0.0}
    per_mode = 40
    for _ in range(per_mode):
        t = _random_case(rng, dtype=np.float32)
        c_out = int(rng.integers(1, 9))
        w = ConvWeights(rng.standard_normal((27, t.channels, c_out)).astype(np.float32),
                        rng.standard_normal(c_out).astype(np.float32))
        worst["submanifold"] = max(worst["submanifold"], _oracle_rel(t, submanifold_map(t, SUBM), w))
        worst["regular_s1"] = max(worst["regular_s1"], _oracle_rel(t, regular_map(t, REG1), w))
        worst["regular_s2"] = max(worst["regular_s2"], _oracle_rel(t, regular_map(t, REG2), w))
        X, Y, Z = t.spatial_shape
        n_out = int(rng.integers(1, X * Y * Z // 4 + 2))
        keys = np.sort(rng.choice(X * Y * Z, size=min(n_out, X * Y * Z), replace=False))
        out_coords = unpack_keys(keys, t.spatial_shape)
        kmap = explicit_output_map(t, out_coords, EXPL)
        worst["explicit"] = max(worst["explicit"], _oracle_rel(t, kmap, w))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, "dense oracle", ok, f"{per_mode} cases per mode, max rel: {detail} <= 1e-5 (float32), "
                                  f"{elapsed:.1f} s < 60 s")
    assert ok


# --- 3 ------------------------------------------------------------------------

class _Errors(dict):
    """class -> {instance id: worst rel error}."""
    instance = 0

    def next(self):
        self.instance += 1


def _check(errors, cls, analytic, arr, loss, rng, entries=8):
    idx, num = numeric_grad(loss, arr, entries=entries, rng=rng)
    err = rel_error(np.asarray(analytic).reshape(-1)[idx], num)
    per = errors.setdefault(cls, {})
    per[errors.instance] = max(per.get(errors.instance, 0.0), err)


def _conv_instances(rng, errors, n):
    for i in range(n):
        t = random_tensor(rng, (6, 6, 6), rng.uniform(0.05, 0.2), channels=int(rng.integers(1, 4)))
        spec = (SUBM, REG1, REG2)[i % 3]
        kmap = submanifold_map(t, spec) if spec.mode == "submanifold" else regular_map(t, spec)
        c_out = int(rng.integers(1, 4))
        w = ConvWeights(rng.standard_normal((27, t.channels, c_out)), rng.standard_normal(c_out))
        target = rng.standard_normal((kmap.n_out, c_out))
        errors.next()
        feats = t.features.copy()

        def loss():
            return float(np.sum(sc.forward(t.replace_features(feats), kmap, w).features * target))

        g = sc.backward(t, kmap, w, target)
        _check(errors, "conv weights", g.d_w, w.w, loss, rng)
        _check(errors, "biases", g.d_bias, w.bias, loss, rng)
        _check(errors, "input features", g.d_input, feats, loss, rng)


def _focal_instances(rng, errors, n):
    tau = 0.5
    done = 0
    while done < n:
        t = random_tensor(rng, (6, 6, 6), rng.uniform(0.06, 0.15), channels=2)
        w = ConvWeights(rng.standard_normal((27, 2, 3)), rng.standard_normal(3))
        vol = (1, 27)[done % 2]
        branch = ConvWeights(rng.standard_normal((vol, 2, 27)) * 0.5, rng.standard_normal(27) * 0.3)
        res = focal_forward(t, w, branch, tau=tau, attention=True)
        # selection is a hard threshold; keep instances whose scores stay clear of it
        if np.abs(res.importance.values - tau).min() <= 1e-4:
            continue
        labels = rng.integers(0, 2, t.n)
        lspec = FocalLossSpec(gamma=2.0, loss_weight=float(rng.uniform(0.5, 1.5)))
        target = rng.standard_normal(res.output.features.shape)
        feats = t.features.copy()

        def loss():
            r = focal_forward(t.replace_features(feats), w, branch, tau=tau, attention=True)
            obj, _ = focal_loss(r.importance.center, labels, lspec)
            return float(np.sum(r.output.features * target)) + lspec.loss_weight * obj

        _, d_c = focal_loss(res.importance.center, labels, lspec)
        g = focal_backward(res, target, lspec.loss_weight * d_c)
        errors.next()
        _check(errors, "importance branch", g.d_branch_w, branch.w, loss, rng)
        _check(errors, "importance branch", g.d_branch_bias, branch.bias, loss, rng)
        _check(errors, "conv weights", g.d_w, w.w, loss, rng)
        _check(errors, "input features", g.d_input, feats, loss, rng)
        done += 1


def _image_instances(rng, errors, n):
    for _ in range(n):
        c = int(rng.integers(1, 4))
        p = init_image_stack(rng, c, hidden=3, dtype=np.float64)
        for k in p:
            if k.endswith("shift"):
                p[k] += rng.uniform(0.05, 0.2, p[k].shape)
        img = rng.uniform(size=(int(rng.integers(8, 13)), int(rng.integers(8, 13)), 3))
        fmap, cache = extract_image_features(img, p, return_cache=True)
        target = rng.standard_normal(fmap.data.shape)

        def loss():
            return float(np.sum(extract_image_features(img, p).data * target))

        grads = image_stack_backward(p, cache, target)
        errors.next()
        for k in p:
            cls = "MLP" if k.startswith("mlp") else "affine" if k.startswith("aff") else "image stack"
            _check(errors, cls, grads[k], p[k], loss, rng, entries=4)


def _pointwise_instances(rng, errors, n):
    for _ in range(n):
        t = random_tensor(rng, (5, 5, 5), 0.2, channels=3)
        W, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
        scale, shift = rng.standard_normal(4), rng.standard_normal(4)
        target = rng.standard_normal((t.n, 4))

        def loss():
            return float(np.sum(sc.affine(sc.mlp(t, W, b), scale, shift).features * target))

        h = sc.mlp(t, W, b)
        d_h, d_scale, d_shift = sc.affine_backward(h, scale, target)
        _, dW, db = sc.mlp_backward(t, W, d_h)
        errors.next()
        _check(errors, "MLP", dW, W, loss, rng)
        _check(errors, "MLP", db, b, loss, rng)
        _check(errors, "affine", d_scale, scale, loss, rng)
        _check(errors, "affine", d_shift, shift, loss, rng)


def _fusion_instances(rng, errors, n):
    calib = CalibMatrix(np.array([[8.0, 0, 16.0, 0], [0, 8.0, 16.0, 0], [0, 0, 1.0, 0]]))
    vs, origin = (0.25, 0.25, 0.25), (-1.0, -1.0, 2.0)
    done = 0
    while done < n:
        c = 2
        params = init_image_stack(rng, c, hidden=3, dtype=np.float64)
        for k in params:
            if k.endswith("shift"):
                params[k] += 0.1
            if k == "mlp.w":
                params[k] *= 3
        img = rng.uniform(size=(32, 32, 3))
        t = random_tensor(rng, (8, 8, 8), 0.05, channels=c)
        w = ConvWeights(rng.standard_normal((27, c, c)), rng.standard_normal(c))
        branch = ConvWeights(rng.standard_normal((1, c, 27)) * 0.5, np.zeros(27))
        target_seed = int(rng.integers(1 << 30))

        def run():
            ctx = ImageContext([(img, calib)], vs, origin)
            ctx.extract(params)
            rows_in, _, tok_in = ctx.sample(t)
            box = {}

            def out_rows(o):
                r, _, box["tok"] = ctx.sample(o)
                return r
            res = fuse_focal_forward(t, w, branch, 0.5, rows_in, out_rows)
            target = np.random.default_rng(target_seed).standard_normal(res.output.features.shape)
            return ctx, res, tok_in, box["tok"], target

        ctx, res, tok_in, tok_out, target = run()
        if np.abs(res.focal.importance.values - 0.5).min() <= 1e-4:
            continue

        def loss():
            return float(np.sum(run()[1].output.features * target))

        g, d_in, d_out = fuse_focal_backward(res, target)
        ctx.accumulate(tok_in, d_in)
        ctx.accumulate(tok_out, d_out)
        g_img = ctx.backward()
        errors.next()
        _check(errors, "importance branch", g.d_branch_w, branch.w, loss, rng, entries=4)
        for k in ("conv0.w", "conv3.w", "mlp.w"):
            _check(errors, "image stack" if k != "mlp.w" else "MLP", g_img[k], params[k], loss, rng, entries=3)
        done += 1


def test_criterion_3_gradients():
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    errors = _Errors()
    _conv_instances(rng, errors, 21)
    _focal_instances(rng, errors, 20)
    _image_instances(rng, errors, 20)
    _pointwise_instances(rng, errors, 20)
    _fusion_instances(rng, errors, 8)
    elapsed = time.perf_counter() - start
    worst = {k: max(v.values()) for k, v in errors.items()}
    counts = {k: len(v) for k, v in errors.items()}
    ok = all(v <= 1e-6 for v in worst.values()) and min(counts.values()) >= 20 and elapsed < 120
    detail = "; ".join(f"{k}: {counts[k]} instances, max rel {worst[k]:.1e}" for k in sorted(worst))
    report(3, "gradients", ok, f"{detail}; tol 1e-6 (float64), {elapsed:.1f} s < 120 s")
    assert ok


# --- 4 ------------------------------------------------------------------------

def test_criterion_4_sparsity_monotone():
    rng = np.random.default_rng(404)
    taus = np.round(np.linspace(0, 1, 11), 10)
    ok, n_cases = True, 50
    for _ in range(n_cases):
        t = _random_case(rng, max_c=4)
        w = ConvWeights(rng.standard_normal((27, t.channels, 2)))
        branch = ConvWeights(rng.standard_normal((1, t.channels, 27)), rng.standard_normal(27))
        counts = [focal_forward(t, w, branch, tau=float(tau), attention=False).output.n for tau in taus]
        ok &= all(a >= b for a, b in zip(counts, counts[1:]))
        ok &= counts[0] == regular_map(t, REG1).n_out and counts[-1] == t.n
    report(4, "sparsity monotonicity", ok, f"{n_cases} tensors x 11 thresholds, exact counts")
    assert ok


# --- 5 ------------------------------------------------------------------------

def test_criterion_5_focal_loss():
    rng = np.random.default_rng(505)
    worst_bce = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 200))
        p = rng.uniform(0.01, 0.99, n)
        y = rng.integers(0, 2, n)
        loss, _ = focal_loss(p, y, FocalLossSpec(gamma=0.0))
        bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        worst_bce = max(worst_bce, abs(loss - bce))
    hand, _ = focal_loss(np.array([0.5]), np.array([1]), FocalLossSpec(gamma=2.0))
    hand_err = abs(hand - 0.25 * math.log(2))
    worst_fd = 0.0
    for i in range(20):
        n = int(rng.integers(1, 50))
        p = rng.uniform(0.02, 0.98, n)
        y = rng.integers(0, 2, n)
        spec = FocalLossSpec(gamma=(0.0, 0.5, 2.0, 3.0)[i % 4])
        _, d = focal_loss(p, y, spec)
        _, num = numeric_grad(lambda: focal_loss(p, y, spec)[0], p)
        worst_fd = max(worst_fd, rel_error(d, num))
    ok = worst_bce <= 1e-12 and hand_err <= 1e-15 and worst_fd <= 1e-6
    report(5, "focal loss", ok, f"gamma=0 vs BCE max {worst_bce:.1e} <= 1e-12; hand case err {hand_err:.1e}; "
                                f"20 FD checks max rel {worst_fd:.1e} <= 1e-6")
    assert ok


# --- 6 ------------------------------------------------------------------------

LEARN_SEEDS = range(20)
LEARN_CFG = dict(steps=150, lr=1e-2, optimizer="adam", lr_schedule="cosine")


def test_criterion_6_learnability():
    spec = preset("pvrcnn", focal_stages=(1, 2, 3))
    recalls, wins, times = [], [], []
    for seed in LEARN_SEEDS:
        scene = scene_from_spec(random_scene_spec(seed, grid=(16, 16, 16)))
        start = time.perf_counter()
        model, _ = train(TrainConfig(seed=seed, **LEARN_CFG), spec, [scene])
        times.append(time.perf_counter() - start)
        rep = sparsity_report(model.backbone, scene)
        first = next(d for d in rep["layers"] if d["kind"] == "focal")
        recalls.append(first["recall"])
        wins.append(rep["focal"]["fg_share"] > rep["plain"]["fg_share"])
    n = len(recalls)
    recall_ok = sum(r >= 0.9 for r in recalls)
    ok = recall_ok == n and sum(wins) >= math.ceil(0.9 * n) and max(times) < 60
    report(6, "learnability", ok,
           f"{n} seeds, {LEARN_CFG['steps']} Adam steps; recall>=0.9 on {recall_ok}/{n} (min {min(recalls):.3f}); "
           f"focal fg share > plain on {sum(wins)}/{n} (need >= {math.ceil(0.9 * n)}); "
           f"max train time {max(times):.1f} s < 60 s")
    assert ok


# --- 7 ------------------------------------------------------------------------

def test_criterion_7_parameter_overhead():
    plain = build_backbone(preset("pvrcnn")).parameter_count()
    focal = build_backbone(preset("pvrcnn", focal_stages=(1, 2, 3))).parameter_count()
    expected = sum(27 * c + 27 for c in (16, 32, 64))
    ratio = (focal - plain) / plain
    ok = focal - plain == expected and ratio < 0.05
    report(7, "parameter overhead", ok, f"{plain} -> {focal} (+{focal - plain} = exact {expected}), "
                                        f"+{100 * ratio:.2f}% < 5%")
    assert ok


# --- 8 ------------------------------------------------------------------------

def test_criterion_8_fusion_identity():
    rng = np.random.default_rng(808)
    worst, scope_ok, n_cases = 0.0, True, 30
    for _ in range(n_cases):
        t = _random_case(rng, max_side=10, max_c=4)
        c = t.channels
        w = ConvWeights(rng.standard_normal((27, c, c)), rng.standard_normal(c))
        branch = ConvWeights(rng.standard_normal((1, c, 27)), rng.standard_normal(27))
        lidar = focal_forward(t, w, branch, 0.5, True)
        zero = fuse_focal_forward(t, w, branch, 0.5, np.zeros_like(t.features),
                                  lambda o: np.zeros_like(o.features))
        if not np.array_equal(zero.output.coords, lidar.output.coords):
            worst = math.inf
            continue
        worst = max(worst, np.abs(zero.output.features - lidar.output.features).max(initial=0))
        img = lambda o: np.random.default_rng(1).standard_normal(o.features.shape)
        imp = fuse_focal_forward(t, w, branch, 0.5, np.zeros_like(t.features), img, scope="imp")
        changed = np.any(imp.output.features != lidar.output.features, axis=1)
        scope_ok &= np.array_equal(changed, imp.focal.important_out)
    # whole network: a fusion backbone whose image head outputs zeros equals the LiDAR-only one
    spec_f = preset("pvrcnn", fusion=True, focal_stages=(1, 2, 3))
    bb_f = build_backbone(spec_f, seed=3, dtype=np.float64)
    bb_l = build_backbone(preset("pvrcnn", focal_stages=(1, 2, 3)), seed=3, dtype=np.float64)
    for k in bb_l.params:
        bb_l.params[k] = bb_f.params[k].copy()
    bb_f.params["s1.b0.img.mlp.w"][:] = 0
    bb_f.params["s1.b0.img.mlp.b"][:] = 0
    x = random_tensor(rng, (16, 16, 16), 0.05, channels=4)
    calib = CalibMatrix(np.array([[8.0, 0, 16.0, 0], [0, 8.0, 16.0, 0], [0, 0, 1.0, 0]]))
    ctx = ImageContext([(rng.uniform(size=(32, 32, 3)), calib)], (0.125,) * 3, (-1.0, -1.0, 2.0))
    out_f = bb_f.forward(x, image_context=ctx).output
    out_l = bb_l.forward(x).output
    net_diff = np.abs(out_f.features - out_l.features).max(initial=0) if out_f.same_coords(out_l) else math.inf
    worst = max(worst, net_diff)
    ok = worst <= 1e-7 and scope_ok
    report(8, "fusion identity", ok, f"{n_cases} layers + 1 backbone, zero-image max abs diff {worst:.1e} <= 1e-7; "
                                     f"'imp' scope touches only important-dilation rows: {scope_ok}")
    assert ok


# --- 9 ------------------------------------------------------------------------

def _cli_round(tmp, tag, threads):
    out = tmp / tag
    out.mkdir()
    f = ["--threads", str(threads)]
    codes = [
        main(["gen", "--spec", str(tmp / "scene.json"), "--out", str(out / "scenes_a.svox")] + f),
        main(["forward", "--config", str(tmp / "net.json"), "--in", str(tmp / "scenes" / "a.svox"),
              "--stats", str(out / "stats.csv")] + f),
        main(["train", "--config", str(tmp / "net.json"), "--train-cfg", str(tmp / "t.json"),
              "--scenes", str(tmp / "scenes"), "--out", str(out / "ck.fscw")] + f),
        main(["export", "--ckpt", str(out / "ck.fscw"), "--in", str(tmp / "scenes" / "a.svox"),
              "--ply", str(out / "o.ply"), "--csv", str(out / "o.csv"),
              "--calib", str(tmp / "calib.txt")] + f),
    ]
    assert codes == [0, 0, 0, 0]
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_criterion_9_cli_determinism(tmp_path):
    (tmp_path / "scenes").mkdir()
    (tmp_path / "scene.json").write_text(json.dumps(random_scene_spec(11).to_dict()))
    (tmp_path / "net.json").write_text(json.dumps({"preset": "centerpoint", "focal_stages": [1, 2, 3]}))
    (tmp_path / "t.json").write_text(json.dumps({"steps": 4, "lr": 0.01}))
    (tmp_path / "calib.txt").write_text("100 0 50 0\n0 100 40 0\n0 0 1 1\n")
    assert main(["gen", "--spec", str(tmp_path / "scene.json"), "--out", str(tmp_path / "scenes" / "a.svox")]) == 0
    runs = {f"{th}_{rep}": _cli_round(tmp_path, f"run_{th}_{rep}", th) for th in (1, 4) for rep in (0, 1)}
    ref = runs["1_0"]
    same = all(r == ref for r in runs.values())
    report(9, "determinism", same, f"gen/forward/train/export x threads {{1, 4}} x 2 repeats, "
                                   f"{len(ref)} files byte-identical: {same}")
    assert same
