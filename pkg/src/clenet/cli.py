"""Command-line pipeline: synth, train, eval, gradcheck, compare.

Configuration is layered: built-in defaults, then a flat `key = value`
config file, then command-line flags. Every training run echoes the fully
resolved configuration to `config.resolved` in its output directory, and
that file alone reproduces the run.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, evaluate, gradcheck, network, training
from .tensor import Rng

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "mode": "enhanced",
    "split": "holdout33",
    "epochs": 50,
    "steps": 100,
    "batch": 16,
    "lr": 0.01,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps_adam": 1e-8,
    "lambda": 1e-4,
    "lambda_s": 0.1,
    "w_rec": 1.0,
    "patch": 64,
    "pool_window": 3,
    "pool_stride": 3,
    "fusion": "mean",
    "manifest": "",
}

_TYPES = {k: type(v) for k, v in DEFAULTS.items()}


class CliError(Exception):
    pass


def load_config_file(path: str) -> dict[str, object]:
    """Parse flat `key = value` lines; `#` starts a comment."""
    out: dict[str, object] = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise CliError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        ty = _TYPES[key]
        try:
            out[key] = val if ty is str else ty(val)
        except ValueError as e:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return out


def resolve_config(file_path: str | None, flag_values: dict[str, object]) -> dict[str, object]:
    cfg = dict(DEFAULTS)
    if file_path:
        cfg.update(load_config_file(file_path))
    cfg.update({k: v for k, v in flag_values.items() if v is not None})
    return cfg


def write_resolved(cfg: dict[str, object], path: str) -> None:
    with open(path, "w", newline="\n") as f:
        for key in sorted(cfg):
            v = cfg[key]
            f.write(f"{key} = {v!r}\n" if isinstance(v, float) else f"{key} = {v}\n")


def _training_config(cfg: dict[str, object]) -> training.TrainingConfig:
    return training.TrainingConfig(
        alpha=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
        eps_adam=cfg["eps_adam"], epochs=cfg["epochs"],
        steps_per_epoch=cfg["steps"], batch_size=cfg["batch"],
        weight_decay=cfg["lambda"], lambda_s=cfg["lambda_s"],
        w_rec=cfg["w_rec"], mode=cfg["mode"], seed=cfg["seed"],
    )


def _architecture(cfg: dict[str, object]) -> network.Architecture:
    return network.Architecture(
        patch_size=cfg["patch"], pool_window=cfg["pool_window"],
        pool_stride=cfg["pool_stride"], mode=cfg["mode"],
    )


def cmd_synth(args) -> int:
    manifest = data.synth_dataset(args.seed, args.patients,
                                  args.images_per_patient, args.size, args.out)
    n = args.patients * args.images_per_patient
    print(f"wrote {n} images and {manifest}")
    return 0


def cmd_train(args) -> int:
    flags = {
        "manifest": args.manifest, "mode": args.mode, "split": args.split,
        "seed": args.seed, "epochs": args.epochs, "steps": args.steps,
        "lr": args.lr, "lambda": getattr(args, "lambda"),
        "lambda_s": args.lambda_s, "w_rec": args.w_rec, "patch": args.patch,
        "batch": args.batch, "pool_window": args.pool_window,
        "pool_stride": args.pool_stride, "beta1": None, "beta2": None,
        "eps_adam": None, "fusion": None,
    }
    cfg = resolve_config(args.config, flags)
    if not cfg["manifest"]:
        raise CliError("a manifest is required (--manifest or config file)")
    cfg["manifest"] = os.path.abspath(str(cfg["manifest"]))
    if cfg["mode"] == "baseline" and (args.lambda_s is not None or args.w_rec is not None):
        print("warning: sparsity/reconstruction weights are ignored in "
              "baseline mode", file=sys.stderr)

    dataset = data.Dataset(str(cfg["manifest"]))
    splits = training.make_splits(dataset.rows, str(cfg["split"]), int(cfg["seed"]))
    config = _training_config(cfg)
    arch = _architecture(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(cfg, os.path.join(args.out, "config.resolved"))
    for split in splits:
        split_dir = os.path.join(args.out, split.name)
        result = training.train(dataset, split, config, arch, out_dir=split_dir)
        rows = [dataset.by_id[i] for i in split.test_ids]
        test_rows = [data.ManifestRow(os.path.join(dataset.root, r.path),
                                      r.patient_id, r.site, r.label) for r in rows]
        data.write_manifest(test_rows, os.path.join(split_dir, "test_manifest.csv"))
        print(f"{split.name}: {len(result.log)} steps, "
              f"final total loss {result.log[-1].total:.6f}")
    return 0


def cmd_eval(args) -> int:
    params = network.load_checkpoint(args.model)
    dataset = data.Dataset(args.manifest)
    threads = int(os.environ.get("CLE_NET_THREADS", "1"))
    report = evaluate.evaluate_images(params, dataset, dataset.ids(),
                                      fusion=args.fusion, threads=threads)
    evaluate.emit_report(report, args.out, fmt=args.report)
    if args.dump_activations:
        _dump_activations(params, dataset, args.dump_activations)
    overall = report.overall()
    print(f"evaluated {overall.images} images: accuracy {overall.accuracy:.4f} "
          f"(95% CI {overall.ci_lo:.4f}..{overall.ci_hi:.4f}), report {args.out}")
    return 0


def _dump_activations(params, dataset, out_dir: str) -> None:
    """PGM previews of every trace stage for the first manifest image."""
    os.makedirs(out_dir, exist_ok=True)
    img = dataset.load_image(dataset.ids()[0])
    img8 = data.dynamic_compress(img)
    patches = data.extract_inscribed_patches(img8, img.fov, params.arch.patch_size)
    batch = np.stack([p.normalized() for p in patches])[:, None, :, :]
    trace = network.forward(batch, params, train=True)
    for k, (name, act) in enumerate(trace.stages().items()):
        plane = act[0, 0]
        lo, hi = float(plane.min()), float(plane.max())
        scaled = np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)
        data.write_pgm8(np.rint(255 * scaled).astype(np.uint8),
                        os.path.join(out_dir, f"{k:02d}_{name}.pgm"))


def cmd_gradcheck(args) -> int:
    import time

    t0 = time.perf_counter()
    results = gradcheck.run_all(seeds=20, sabotage_layer=args.inject_fault,
                                base_seed=args.seed)
    bad = [r for r in results if not r.ok]
    by_suite: dict[str, float] = {}
    for r in results:
        suite = r.name.split(".")[0]
        by_suite[suite] = max(by_suite.get(suite, 0.0), r.max_rel_err)
    for suite in sorted(by_suite):
        print(f"{suite:22s} max rel err {by_suite[suite]:.3e}")
    elapsed = time.perf_counter() - t0
    if bad:
        worst = max(bad, key=lambda r: r.max_rel_err)
        print(f"FAIL {worst.name} at coordinate {worst.worst_coord}: "
              f"analytic {worst.analytic!r} vs numeric {worst.numeric!r} "
              f"(rel err {worst.max_rel_err:.3e})", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed in {elapsed:.1f}s")
    return 0


def cmd_compare(args) -> int:
    evaluate.emit_comparison(args.report_a, args.report_b, args.out,
                             label_a=os.path.basename(args.report_a),
                             label_b=os.path.basename(args.report_b))
    print(f"wrote comparison {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clenet",
                                description="CNN + conv-autoencoder patch "
                                            "classification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--patients", type=int, default=3)
    s.add_argument("--images-per-patient", type=int, default=40)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train on a manifest with a split scheme")
    t.add_argument("--manifest")
    t.add_argument("--mode", choices=training.MODES)
    t.add_argument("--split", choices=training.SCHEMES)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda", type=float, dest="lambda")
    t.add_argument("--lambda-s", type=float, dest="lambda_s")
    t.add_argument("--w-rec", type=float, dest="w_rec")
    t.add_argument("--patch", type=int)
    t.add_argument("--pool-window", type=int)
    t.add_argument("--pool-stride", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--fusion", choices=evaluate.FUSIONS, default="mean")
    e.add_argument("--report", choices=("csv", "md"), default="csv")
    e.add_argument("--out", default="eval_report.csv")
    e.add_argument("--dump-activations", metavar="DIR")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", help=argparse.SUPPRESS)
    g.set_defaults(fn=cmd_gradcheck)

    c = sub.add_parser("compare", help="join two evaluation reports side by side")
    c.add_argument("--report-a", required=True)
    c.add_argument("--report-b", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, data.DataError, network.CheckpointError,
            network.ArchitectureError, training.TrainingError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
