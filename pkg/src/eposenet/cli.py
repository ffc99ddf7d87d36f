"""Command-line entry point: synth-gen, train, eval, verify-equiv, sweep, convert-7scenes."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, load_config, require
from .gconv import equivariance_error
from .geom import Frame, Se2Motion
from .metrics import evaluate
from .model import EPoseNet, count_params, load_state_entries, state_entries, train_epoch
from .synth import DatasetError, convert_7scenes, generate_dataset, load_dataset, make_scene, render
from .tensor import AdamState, ContractError, Tensor

COMMANDS = ("synth-gen", "train", "eval", "verify-equiv", "sweep", "convert-7scenes")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_path(cfg: RunConfig, key: str, split: str, command: str) -> str:
    path = getattr(cfg, key)
    if path:
        return path
    if cfg.data:
        return str(Path(cfg.data) / split)
    raise ConfigError(f"{command}: missing required key {key!r} (or 'data' holding {split}/)")


def resolve_thresh_t(cfg: RunConfig, meta: dict) -> float:
    if cfg.thresh_t != "auto":
        try:
            return float(cfg.thresh_t)
        except ValueError:
            raise ConfigError(f"thresh_t must be a number or 'auto', got {cfg.thresh_t!r}") from None
    if "scene_extent" in meta:
        return 0.1 * float(meta["scene_extent"])
    return 0.1


def _build_model(cfg: RunConfig, N: int | None = None) -> EPoseNet:
    return EPoseNet(cfg.model_config(N), seed=cfg.seed)


def _load_into(model: EPoseNet, path: str):
    try:
        entries = T.load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"{path}: checkpoint not found") from None
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    try:
        return load_state_entries(model, entries)
    except ContractError as e:
        raise ConfigError(f"{path}: {e}") from None


# -- commands ------------------------------------------------------------------

def cmd_synth_gen(cfg: RunConfig, given: set[str]) -> int:
    require(cfg, given, ["out"], "synth-gen")
    out = _out_dir(cfg)
    splits = generate_dataset(cfg.dataset_spec(), cfg.seed, out)
    for name, ds in splits.items():
        print(f"{name}: {len(ds)} records in {ds.root}")
    return 0


def train_model(cfg: RunConfig, model: EPoseNet, train_ds, out: Path, resume: str = "",
                log=print) -> list[list]:
    """Train, writing init/final checkpoints and curve.csv under ``out``."""
    X, t_gt, q_gt = train_ds.images(), train_ds.positions(), train_ds.quaternions()
    if len(X) == 0:
        raise DatasetError(f"{train_ds.root}: training set is empty")
    model.backbone.check_input(Tensor(X[:1]))
    tcfg = cfg.train_config()
    opt, start = AdamState(), 0
    if resume:
        opt, start = _load_into(model, resume)
    T.save_checkpoint(out / "init.epnt", state_entries(model, opt, start))
    rows = []
    for epoch in range(start, tcfg.epochs):
        m = train_epoch(model, X, t_gt, q_gt, opt, tcfg, epoch)
        rows.append([epoch, m["mean_loss"], m["s_t"], m["s_R"]])
        if epoch == tcfg.epochs - 1 or epoch % 10 == 0:
            log(f"epoch {epoch}: loss {m['mean_loss']:.5f} s_t {m['s_t']:.4f} s_R {m['s_R']:.4f}")
    T.save_checkpoint(out / "model.epnt", state_entries(model, opt, tcfg.epochs))
    write_csv(out / "curve.csv", ["epoch", "mean_loss", "s_t", "s_R"], rows)
    return rows


def cmd_train(cfg: RunConfig, given: set[str]) -> int:
    require(cfg, given, ["out"], "train")
    train_ds = load_dataset(_split_path(cfg, "train_data", "train", "train"))
    out = _out_dir(cfg)
    model = _build_model(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    train_model(cfg, model, train_ds, out, cfg.resume)
    print(f"wrote {out / 'model.epnt'} and {out / 'curve.csv'}")
    return 0


def eval_model(cfg: RunConfig, model: EPoseNet, test_ds) -> dict:
    X = test_ds.images()
    if len(X) == 0:
        raise DatasetError(f"{test_ds.root}: test set is empty")
    model.backbone.check_input(Tensor(X[:1]))
    t_pred, q_pred = model.predict(X)
    names = [rel for rel, _ in test_ds.records]
    return evaluate(t_pred, q_pred, test_ds.positions(), test_ds.quaternions(), names,
                    resolve_thresh_t(cfg, test_ds.meta), cfg.thresh_r_deg)


def cmd_eval(cfg: RunConfig, given: set[str]) -> int:
    require(cfg, given, ["out", "checkpoint"], "eval")
    test_ds = load_dataset(_split_path(cfg, "test_data", "test", "eval"))
    model = _build_model(cfg)
    _load_into(model, cfg.checkpoint)
    report = eval_model(cfg, model, test_ds)
    out = _out_dir(cfg)
    write_json(out / "report.json", report)
    print(f"median_t_m {report['median_t_m']:.6g} median_r_deg {report['median_r_deg']:.6g} "
          f"acc@thresh {report['acc@thresh']:.4f}")
    return 0


class _Stage:
    """Callable returning one backbone stage output for a single image."""

    def __init__(self, model: EPoseNet, index: int, name: str):
        self.model, self.index = model, index
        self.N = model.N
        self.margin = model.backbone.stage_margins[name]

    def __call__(self, x: Tensor) -> Tensor:
        xb = T.reshape(x, (1,) + x.shape)
        return self.model.backbone.stage_outputs(xb)[self.index][1].data[0]


def verify_images(cfg: RunConfig) -> np.ndarray:
    spec = cfg.dataset_spec().scene
    scene = make_scene(spec, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0xE9])
    imgs = []
    for _ in range(cfg.verify_samples):
        tx, ty = rng.uniform(-cfg.t_range, cfg.t_range, 2)
        m = Se2Motion(rng.uniform(-math.pi, math.pi), (tx, ty), Frame.SCENE)
        imgs.append(render(scene, m, (cfg.verify_size, cfg.verify_size))[None])
    return np.stack(imgs).astype(cfg.model_config().np_dtype)


def equivariance_report(cfg: RunConfig, model: EPoseNet, images: np.ndarray) -> dict:
    """Per-layer and end-to-end defects for every group step and for quarter turns.

    Group steps that are multiples of 90 degrees are exact by construction and
    are flagged PASS/FAIL against ``verify_tol``; other steps are INEXACT and
    only measured.
    """
    model.eval()
    N = model.N
    names = [name for name, _ in model.backbone.stages]
    stages = [_Stage(model, i, n) for i, n in enumerate(names)]

    def measure(r, n):
        per_layer = {}
        for st, name in zip(stages, names):
            per_layer[name] = max(equivariance_error(st, im, r, N=n, margin=st.margin) for im in images)
        return per_layer, per_layer[names[-1]]

    steps = []
    for r in range(N):
        per_layer, e2e = measure(r, N)
        exact = (4 * r) % N == 0
        status = ("PASS" if e2e <= cfg.verify_tol else "FAIL") if exact else "INEXACT"
        steps.append({"r": r, "angle_deg": 360.0 * r / N, "status": status,
                      "end_to_end": e2e, "layers": per_layer})
    quarter = []
    for q in (1, 2, 3):
        per_layer, e2e = measure(q, 4)
        quarter.append({"angle_deg": 90.0 * q, "status": "PASS" if e2e <= cfg.verify_tol else "FAIL",
                        "end_to_end": e2e, "layers": per_layer})
    return {"N": N, "preset": model.cfg.preset, "dtype": model.cfg.dtype, "tolerance": cfg.verify_tol,
            "samples": int(len(images)), "steps": steps, "quarter_turns": quarter}


def cmd_verify_equiv(cfg: RunConfig, given: set[str]) -> int:
    require(cfg, given, ["out"], "verify-equiv")
    model = _build_model(cfg)
    if cfg.checkpoint:
        _load_into(model, cfg.checkpoint)
    report = equivariance_report(cfg, model, verify_images(cfg))
    out = _out_dir(cfg)
    write_json(out / "equiv_report.json", report)
    for s in report["steps"]:
        print(f"r={s['r']} ({s['angle_deg']:g} deg): {s['status']} end-to-end {s['end_to_end']:.3g}")
    for s in report["quarter_turns"]:
        print(f"quarter {s['angle_deg']:g} deg: {s['status']} end-to-end {s['end_to_end']:.3g}")
    return 0


def cmd_sweep(cfg: RunConfig, given: set[str]) -> int:
    require(cfg, given, ["out"], "sweep")
    out = _out_dir(cfg)
    if cfg.data:
        root = Path(cfg.data)
    else:
        root = out / "data"
        generate_dataset(cfg.dataset_spec(), cfg.seed, root)
    train_ds, test_ds = load_dataset(root / "train"), load_dataset(root / "test")
    rows, summary = [], []
    for N in cfg.sweep_N:
        model = _build_model(cfg, N)
        sub = out / f"N{N}"
        sub.mkdir(exist_ok=True)
        print(f"N={N}: training {cfg.epochs} epochs")
        train_model(cfg, model, train_ds, sub, log=lambda s: print("  " + s))
        report = eval_model(cfg, model, test_ds)
        write_json(sub / "report.json", report)
        n_params, _ = count_params(model.backbone)
        rows.append([N, report["acc@thresh"], report["median_t_m"], report["median_r_deg"]])
        summary.append({"N": N, "acc@thresh": report["acc@thresh"], "median_t_m": report["median_t_m"],
                        "median_r_deg": report["median_r_deg"], "backbone_params": n_params})
        print(f"N={N}: acc {report['acc@thresh']:.4f} median_t {report['median_t_m']:.4f} "
              f"median_r {report['median_r_deg']:.3f}")
    write_csv(out / "sweep.csv", ["N", "acc", "median_t", "median_r"], rows)
    write_json(out / "sweep.json", {"rows": summary, "thresh_t_m": resolve_thresh_t(cfg, test_ds.meta),
                                    "thresh_r_deg": cfg.thresh_r_deg})
    return 0


def cmd_convert_7scenes(cfg: RunConfig, given: set[str]) -> int:
    require(cfg, given, ["src", "out"], "convert-7scenes")
    ds = convert_7scenes(cfg.src, cfg.out)
    print(f"converted {len(ds)} records into {cfg.out}")
    return 0


HANDLERS = {
    "synth-gen": cmd_synth_gen, "train": cmd_train, "eval": cmd_eval,
    "verify-equiv": cmd_verify_equiv, "sweep": cmd_sweep, "convert-7scenes": cmd_convert_7scenes,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    p = argparse.ArgumentParser(prog="eposenet", parents=[common],
                                description="Roto-translation equivariant pose regression.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "seed", 0) < 0:
            raise ConfigError("--seed must be non-negative")
        cfg, given = load_config(getattr(args, "config", None), getattr(args, "set", []),
                                 getattr(args, "seed", None), getattr(args, "out", None))
        return HANDLERS[args.command](cfg, given)
    except (ConfigError, DatasetError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
