"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a PASS/FAIL line that is printed at the end of the run.
"""
import csv
import json
import math
import time
from pathlib import Path

import numpy as np

from conftest import ACCEPTANCE
from eposenet import tensor as T
from eposenet.cli import equivariance_report, main, verify_images
from eposenet.config import load_config
from eposenet.gconv import GBatchNorm, group_conv, lift_conv
from eposenet.geom import (CameraIntrinsics, Se2Motion, image_point_action, motion_to_image,
                           normalize_angle, quat_to_matrix, se2_compose, se2_identity, se2_inverse)
from eposenet.model import (Backbone, EPoseNet, ModelConfig, TrainConfig, classical_twin, count_params,
                            pose_loss, train_epoch)
from eposenet.synth import SceneSpec, load_dataset, make_scene, render, warp_image, write_pnm
from eposenet.tensor import AdamState, Tape, Tensor
from oracles import grad_check

ROOT = Path(__file__).resolve().parents[1]


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def test_criterion_1_exact_equivariance():
    t0 = time.process_time()
    worst = {}
    for N in (4, 8):
        for dtype in ("float32", "float64"):
            cfg, _ = load_config(overrides=[f"N={N}", f"dtype={dtype}", "verify_samples=2"])
            model = EPoseNet(cfg.model_config(), seed=0)
            rep = equivariance_report(cfg, model, verify_images(cfg))
            worst[(N, dtype)] = max(s["end_to_end"] for s in rep["quarter_turns"])
    cfg, _ = load_config(overrides=["dtype=float32", "verify_samples=2"])
    classical = EPoseNet(classical_twin(cfg.model_config()), seed=0)
    cl = min(s["end_to_end"] for s in equivariance_report(cfg, classical, verify_images(cfg))["quarter_turns"])
    eq32 = max(v for (n, d), v in worst.items() if d == "float32")
    eq64 = max(v for (n, d), v in worst.items() if d == "float64")
    secs = time.process_time() - t0
    ok = eq32 <= 1e-4 and eq64 <= 1e-10 and cl > 10 * eq32 and secs <= 120
    record(1, ok, f"32-bit {eq32:.2e}, 64-bit {eq64:.2e}, classical {cl:.2e}, {secs:.0f}s")


def test_criterion_2_gradients():
    worst = {}

    def check(name, fn, arrays, rng):
        worst[name] = max(worst.get(name, 0.0), grad_check(fn, arrays, rng))

    def bn(x, g, b):
        layer = GBatchNorm(2, dtype=np.float64)
        layer.gamma, layer.beta = g, b
        return layer(x)

    for seed in range(20):
        rng = np.random.default_rng(seed)
        N = (4, 8)[seed % 2]
        check("conv2d", lambda x, w: T.conv2d(x, w, pad=1, stride=1 + seed % 2),
              [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3))], rng)
        x = (rng.permutation(48).reshape(2, 4, 6) * 0.1).astype(float)
        check("maxpool2d", lambda a: T.maxpool2d(a, 2), [x], rng)
        e = rng.standard_normal((3, 4))
        e[np.abs(e) < 1e-3] = 0.5
        check("elu", T.elu, [e], rng)
        check("linear", T.linear, [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)),
                                   rng.standard_normal(2)], rng)
        check("lift_conv", lambda a, w: lift_conv(a, w, N),
              [rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 1, 3, 3))], rng)
        check("group_conv", group_conv,
              [rng.standard_normal((1, N, 4, 4)), rng.standard_normal((1, 1, N, 3, 3))], rng)
        check("gbatchnorm", bn, [rng.standard_normal((2, 2, 4, 3, 3)), rng.uniform(0.5, 1.5, 2),
                                 rng.standard_normal(2)], rng)
        t0, q0 = rng.standard_normal((3, 3)), rng.standard_normal((3, 4))
        q0 /= np.linalg.norm(q0, axis=1, keepdims=True)
        check("pose_loss", lambda t, q, a, b: pose_loss(t, q, t0, q0, a, b),
              [rng.standard_normal((3, 3)), rng.standard_normal((3, 4)),
               rng.standard_normal(()), rng.standard_normal(())], rng)
    top = max(worst, key=worst.get)
    record(2, worst[top] <= 1e-4, f"worst relative error {worst[top]:.2e} ({top}), 20 seeds x {len(worst)} ops")


def test_criterion_3_group_laws():
    rng = np.random.default_rng(0)
    cam = CameraIntrinsics(20.0, 1.0)
    e = se2_identity()
    worst = 0.0

    def gap(a, b):
        return max(abs(normalize_angle(a.theta - b.theta)), float(np.max(np.abs(a.tvec - b.tvec))))

    def motion():
        return Se2Motion(rng.uniform(-math.pi, math.pi), tuple(rng.uniform(-3, 3, 2)))

    for _ in range(10_000):
        a, b, c = motion(), motion(), motion()
        ia, ib = motion_to_image(a, cam), motion_to_image(b, cam)
        p = rng.uniform(-20, 20, 2)
        worst = max(worst, gap(se2_compose(a, e), a), gap(se2_compose(e, a), a),
                    gap(se2_compose(a, se2_inverse(a)), e),
                    gap(se2_compose(se2_compose(a, b), c), se2_compose(a, se2_compose(b, c))),
                    gap(motion_to_image(se2_compose(a, b), cam), se2_compose(ia, ib)),
                    float(np.max(np.abs(image_point_action(se2_compose(ia, ib), p)
                                        - image_point_action(ib, image_point_action(ia, p))))))
    record(3, worst <= 1e-9, f"worst deviation {worst:.2e} over 10000 cases")


def test_criterion_4_commutation():
    scene = make_scene(SceneSpec(), 0)
    cam = CameraIntrinsics(scene.f, scene.Z0)
    rng = np.random.default_rng(0)
    n = 32
    ii, jj = np.mgrid[:n, :n]
    x, y = jj - (n - 1) / 2, (n - 1) / 2 - ii
    diffs = []
    for _ in range(100):
        base = Se2Motion(rng.uniform(-math.pi, math.pi), tuple(rng.uniform(-0.8, 0.8, 2)))
        m = Se2Motion(rng.uniform(-math.pi, math.pi), tuple(rng.uniform(-0.3, 0.3, 2)))
        mi = motion_to_image(m, cam)
        moved = render(scene, se2_compose(base, m), (n, n))
        warped = warp_image(render(scene, base, (n, n)), mi)
        c, s = math.cos(mi.theta), math.sin(mi.theta)
        col = c * x - s * y + mi.t[0] + (n - 1) / 2
        row = (n - 1) / 2 - (s * x + c * y + mi.t[1])
        inside = (row >= 2) & (row <= n - 3) & (col >= 2) & (col <= n - 3)
        diffs.append(np.abs(moved - warped)[inside].mean() / (moved.max() - moved.min()))
    record(4, max(diffs) <= 0.02, f"worst {max(diffs):.4f}, mean {np.mean(diffs):.4f} of dynamic range")


def test_criterion_5_loss_values():
    def L(t, t0, s_t, s_R, q=(1.0, 0, 0, 0)):
        return float(pose_loss(Tensor(np.array([t], float)), Tensor(np.array([q], float)), t0, q,
                               Tensor(np.array(s_t)), Tensor(np.array(s_R))).data)

    v = (L([0, 0, 0], [0, 0, 0], 0.0, 0.0), L([3, 4, 0], [0, 0, 0], 0.0, 0.0),
         L([2, 0, 0], [0, 0, 0], math.log(2), 0.0))
    st = Tensor(np.array(math.log(2.0)), requires_grad=True)
    with Tape() as tape:
        loss = pose_loss(Tensor(np.array([[2.0, 0, 0]])), Tensor(np.array([[1.0, 0, 0, 0]])),
                         [0, 0, 0], [1, 0, 0, 0], st, Tensor(np.array(0.0)))
    tape.backward(loss)
    ok = v[0] == 0.0 and v[1] == 5.0 and abs(v[2] - (1 + math.log(2))) <= 1e-9 and abs(float(st.grad)) <= 1e-9
    record(5, ok, f"values {v[0]}, {v[1]}, {v[2]:.10f}; dL/ds_t at ln L_t = {float(st.grad):.1e}")


def test_criterion_6_parameter_ratio():
    rng = np.random.default_rng(0)
    ratios = []
    for preset, widths in (("study10", (16, 16, 32, 32, 64)), ("resnet_s", (32, 64))):
        for N in (4, 8):
            cfg = ModelConfig(N=N, preset=preset, widths=widths)
            eq = count_params(Backbone(cfg, rng))[0]
            cl = count_params(Backbone(classical_twin(cfg), rng))[0]
            ratios.append((preset, N, eq / cl * N))
    worst = max(r[2] for r in ratios)
    detail = ", ".join(f"{p} N={n}: {r:.3f}/N" for p, n, r in ratios)
    record(6, worst <= 1.1, detail)


def test_criterion_7_orientation_sweep(tmp_path):
    t0 = time.process_time()
    code = main(["sweep", "--config", str(ROOT / "configs" / "sweep.txt"), "--out", str(tmp_path)])
    secs = time.process_time() - t0
    assert code == 0
    with open(tmp_path / "sweep.csv") as fh:
        acc = {int(r["N"]): float(r["acc"]) for r in csv.DictReader(fh)}
    n_train = len(load_dataset(tmp_path / "data" / "train"))
    n_test = len(load_dataset(tmp_path / "data" / "test"))
    ok = (acc[8] >= acc[1] + 0.10 and acc[1] - 0.02 <= acc[4] <= acc[8] + 0.02
          and n_train >= 200 and n_test >= 100 and secs <= 1800)
    record(7, ok, f"acc N=1 {acc[1]:.2f}, N=4 {acc[4]:.2f}, N=8 {acc[8]:.2f} "
                  f"({n_train} train / {n_test} test, {secs:.0f}s)")


def _seven_scenes(src, rng, n):
    src.mkdir()
    mats = []
    for i in range(n):
        q = rng.standard_normal(4)
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(q / np.linalg.norm(q))
        M[:3, 3] = rng.uniform(-2, 2, 3)
        (src / f"frame-{i:06d}.pose.txt").write_text("\n".join(" ".join(f"{v:.17g}" for v in r) for r in M))
        write_pnm(src / f"frame-{i:06d}.color.pgm", rng.integers(0, 256, (4, 4), dtype=np.uint8))
        mats.append(M)
    return mats


def test_criterion_8_substitutes(tmp_path):
    small = ["--set", "N=4", "--set", "widths=8,8,8,8,8", "--set", "head_width=16",
             "--set", "n_train=4", "--set", "n_test=5", "--set", "orientation_head=mlp",
             "--set", "dtype=float64"]
    # (a) metric oracle through cmd_eval with a constant predictor
    assert main(["synth-gen", "--out", str(tmp_path / "d"), *small]) == 0
    assert main(["train", "--out", str(tmp_path / "r"), "--set", f"data={tmp_path / 'd'}",
                 "--set", "epochs=1", *small]) == 0
    entries = T.load_checkpoint(tmp_path / "r" / "model.epnt")
    c_t, c_q = np.array([0.3, 0.1, 0.0]), np.array([math.cos(0.4), 0.0, 0.0, math.sin(0.4)])
    for k in ("param/head.proj_t.weight", "param/head.proj_q.weight"):
        entries[k] = np.zeros_like(entries[k])
    entries["param/head.proj_t.bias"], entries["param/head.proj_q.bias"] = c_t, c_q
    T.save_checkpoint(tmp_path / "c.epnt", entries)
    assert main(["eval", "--out", str(tmp_path / "e"), "--set", f"data={tmp_path / 'd'}",
                 "--set", f"checkpoint={tmp_path / 'c.epnt'}", *small]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    et, er = [], []
    for _, pose in load_dataset(tmp_path / "d" / "test").records:
        et.append(math.sqrt(sum((a - b) ** 2 for a, b in zip(pose.t, c_t))))
        R = quat_to_matrix(pose.q).T @ quat_to_matrix(c_q)
        er.append(math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(R) - 1) / 2)))))
    gap_a = max(abs(rep["median_t_m"] - sorted(et)[2]), abs(rep["median_r_deg"] - sorted(er)[2]),
                *(abs(s["r_err_deg"] - b) for s, b in zip(rep["per_sample"], er)))
    # (b) 7-Scenes ingestion roundtrip
    mats = _seven_scenes(tmp_path / "src", np.random.default_rng(0), 20)
    assert main(["convert-7scenes", "--out", str(tmp_path / "7s"), "--set", f"src={tmp_path / 'src'}"]) == 0
    gap_b = max(float(np.max(np.abs(quat_to_matrix(p.q) - M[:3, :3])))
                for (_, p), M in zip(load_dataset(tmp_path / "7s").records, mats))
    # (c) training sanity: 64 samples, 200 epochs
    rng = np.random.default_rng(0)
    scene = make_scene(SceneSpec(), 0)
    motions = [Se2Motion(rng.uniform(-0.3, 0.3), tuple(rng.uniform(-0.8, 0.8, 2))) for _ in range(64)]
    X = np.stack([render(scene, m, (32, 32))[None] for m in motions]).astype(np.float32)
    t_gt = np.array([[*m.t, 0.0] for m in motions])
    q_gt = np.array([[math.cos(m.theta / 2), 0, 0, math.sin(m.theta / 2)] for m in motions])
    model = EPoseNet(ModelConfig(N=4, widths=(8, 8, 8, 8, 8), head_width=32), seed=0)
    opt, tcfg = AdamState(), TrainConfig(epochs=200, batch=16, lr=1e-3)
    losses = [train_epoch(model, X, t_gt, q_gt, opt, tcfg, e)["mean_loss"] for e in range(tcfg.epochs)]
    ok = gap_a <= 1e-9 and gap_b <= 1e-9 and losses[-1] < losses[0]
    record(8, ok, f"(a) metric gap {gap_a:.1e}; (b) rotation gap {gap_b:.1e}; "
                  f"(c) loss {losses[0]:.3f} -> {losses[-1]:.3f}")


def _run_all(out: Path):
    common = ["--seed", "3", "--set", "N=4", "--set", "widths=8,8,8,8,8", "--set", "head_width=16",
              "--set", "n_train=6", "--set", "n_test=4", "--set", "epochs=2", "--set", "batch=4"]
    assert main(["synth-gen", "--out", str(out / "data"), *common]) == 0
    assert main(["train", "--out", str(out / "train"), "--set", f"data={out / 'data'}", *common]) == 0
    assert main(["eval", "--out", str(out / "eval"), "--set", f"data={out / 'data'}",
                 "--set", f"checkpoint={out / 'train' / 'model.epnt'}", *common]) == 0
    assert main(["verify-equiv", "--out", str(out / "verify"), *common, "--set", "verify_samples=1"]) == 0
    assert main(["sweep", "--out", str(out / "sweep"), "--set", f"data={out / 'data'}",
                 "--set", "sweep_N=1,4", *common]) == 0
    # config.txt echoes the output paths; compare everything relative to the run root
    root = str(out).encode()
    return {p.relative_to(out): p.read_bytes().replace(root, b"<out>")
            for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    a = _run_all(tmp_path / "a")
    b = _run_all(tmp_path / "b")
    payloads = [k for k in a if k.suffix in (".json", ".csv", ".epnt")]
    differing = [str(k) for k in a if a[k] != b.get(k)]
    ok = set(a) == set(b) and not differing and len(payloads) >= 10
    record(9, ok, f"{len(a)} files compared ({len(payloads)} JSON/CSV/checkpoint), {len(differing)} differ")
