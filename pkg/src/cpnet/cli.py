"""Command-line entry point.

Verbs: generate, train, eval, gradcheck, visualize, bench-knn.
Exit codes: 0 success, 1 validation/configuration error, 2 runtime or
numeric failure. ``CPNET_THREADS`` caps BLAS parallelism (default 1 so
repeated runs are bitwise reproducible).
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _configure_threads() -> None:
    threads = os.environ.get("CPNET_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


_CONFIG_KEYS = {
    "arch": str,
    "data": str,
    "out_dir": str,
    "lr": (int, float),
    "batch_size": int,
    "epochs": int,
    "k": int,
    "seed": int,
    "backend": str,
}
_REQUIRED_KEYS = ("arch", "data", "out_dir")


def load_config(path: str) -> dict:
    """Parse and validate an experiment config; unknown keys are rejected."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(raw) - set(_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, expected in _CONFIG_KEYS.items():
        if key in raw and not isinstance(raw[key], expected):
            raise ValueError(f"config key {key!r} has the wrong type")
    missing = [key for key in _REQUIRED_KEYS if key not in raw]
    if missing:
        raise ValueError(f"config is missing required keys: {missing}")
    if raw["arch"] not in ("cpnet", "c2d"):
        raise ValueError(f"arch must be 'cpnet' or 'c2d', got {raw['arch']!r}")
    if not os.path.isfile(raw["data"]):
        raise ValueError(f"dataset file not found: {raw['data']}")
    return raw


def cmd_generate(args) -> int:
    from .dataset import generate_toy_dataset, save_cpds

    dataset = generate_toy_dataset(args.seed)
    save_cpds(args.out, dataset)
    print(
        f"wrote {len(dataset.train_labels)} train + {len(dataset.val_labels)} val samples "
        f"to {args.out} (seed {args.seed})"
    )
    return 0


def cmd_train(args) -> int:
    from .dataset import load_cpds
    from .models import build_toy_c2d, build_toy_cpnet
    from .train import TrainConfig, history_to_csv, train

    cfg = load_config(args.config)
    config = TrainConfig(
        lr=float(cfg.get("lr", 1e-3)),
        batch_size=int(cfg.get("batch_size", 32)),
        epochs=int(cfg.get("epochs", 60)),
        k=int(cfg.get("k", 8)),
        seed=int(cfg.get("seed", 0)),
        backend=cfg.get("backend", "brute"),
    )
    config.validate()
    if args.dry_run:
        print(json.dumps({**cfg, "resolved": vars(config)}, indent=2, default=str))
        return 0
    dataset = load_cpds(cfg["data"])
    if cfg["arch"] == "cpnet":
        model = build_toy_cpnet(k=config.k, seed=config.seed, backend=config.backend)
    else:
        model = build_toy_c2d(seed=config.seed)
    history = train(model, dataset, config, log=print)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    ckpt = os.path.join(cfg["out_dir"], "checkpoint.cpt1")
    metrics = os.path.join(cfg["out_dir"], "metrics.csv")
    model.save(ckpt)
    with open(metrics, "w", encoding="utf-8") as fh:
        fh.write(history_to_csv(history))
    val_rows = [row for row in history if row["split"] == "val"]
    best = max(row["accuracy"] for row in val_rows)
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics}")
    print(f"final val accuracy (best): {best:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_cpds
    from .models import load_model
    from .train import evaluate

    if not os.path.isfile(args.checkpoint):
        raise ValueError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.isfile(args.data):
        raise ValueError(f"dataset file not found: {args.data}")
    model = load_model(args.checkpoint, backend=args.backend)
    if args.k is not None:
        model.k = args.k
    dataset = load_cpds(args.data)
    frames, labels = dataset.split(args.split)
    acc, loss = evaluate(model, frames, labels)
    print(f"{args.split} accuracy {acc:.4f} loss {loss:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.epsilon <= 0:
        raise ValueError("epsilon must be positive")
    from .gradcheck import DEFAULT_TOL, run_all

    reports = run_all(args.seed, epsilon=args.epsilon)
    width = max(len(r.group) for r in reports)
    print(f"{'group'.ljust(width)}  checked  skipped  max_err    status")
    worst = 0.0
    for r in reports:
        status = "ok" if r.max_err < DEFAULT_TOL else "FAIL"
        print(
            f"{r.group.ljust(width)}  {r.checked:7d}  {r.skipped:7d}  {r.max_err:9.2e}  {status}"
        )
        worst = max(worst, r.max_err)
    if worst >= DEFAULT_TOL:
        print(f"gradcheck FAILED: max error {worst:.3e} >= {DEFAULT_TOL}")
        return 2
    print(f"gradcheck passed: max error {worst:.3e} < {DEFAULT_TOL}")
    return 0


def cmd_visualize(args) -> int:
    import numpy as np

    from .cp import ActivationProvenance, activation_set, feature_change_heatmap
    from .dataset import load_cpds
    from .models import load_model
    from .tensor import Tensor, save_tensors

    if not os.path.isfile(args.checkpoint):
        raise ValueError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.isfile(args.data):
        raise ValueError(f"dataset file not found: {args.data}")
    model = load_model(args.checkpoint, backend=args.backend)
    if model.arch != "cpnet":
        raise ValueError("visualization needs a checkpoint with a correspondence module")
    dataset = load_cpds(args.data)
    frames, labels = dataset.split(args.split)
    if not 0 <= args.sample_index < len(frames):
        raise ValueError(f"sample index {args.sample_index} out of range [0,{len(frames)})")
    video = frames[args.sample_index : args.sample_index + 1]

    _, detail = model.forward(video.astype("float32"), mode="eval", want_detail=True)
    t, h, w = detail["dims"]
    thw = t * h * w
    before = detail["rows_before"][0]
    embedded = detail["embedded"][0]
    after = before + embedded
    heat = feature_change_heatmap(Tensor(before), Tensor(after), (t, h, w)).data
    topk = detail["topk"][0]
    prov = detail["provenance"]
    k = prov.k
    per_point = prov.argmax[0]

    hw = h * w
    sample_prov = ActivationProvenance(argmax=per_point, k=k)
    records = []
    for i in range(thw):
        ti, rem = divmod(i, hw)
        hi, wi = divmod(rem, w)
        active = activation_set(sample_prov, i)
        neighbors = []
        for j in range(k):
            nb = int(topk[i, j])
            nt, nrem = divmod(nb, hw)
            nh, nw = divmod(nrem, w)
            neighbors.append(
                {"t": nt, "h": nh, "w": nw, "active": bool(j in active)}
            )
        records.append(
            {
                "t": ti,
                "h": hi,
                "w": wi,
                "neighbors": neighbors,
                "heat": float(heat[ti, hi, wi]),
            }
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
        for ti in range(t):
            fh.write(
                json.dumps({"frame": ti, "heatmap": heat[ti].tolist()}) + "\n"
            )
    raw_path = args.out + ".tensors.cpt1"
    save_tensors(
        raw_path,
        {
            "zeta": detail["zeta"][0],
            "embedded": embedded,
            "before": before,
            "topk": topk.astype(np.float32),
        },
    )
    print(f"wrote {len(records)} anchor records + {t} frame heatmaps to {args.out}")
    print(f"raw pair outputs: {raw_path}")
    return 0


def cmd_bench(args) -> int:
    from .bench import rows_to_csv, run_bench

    sizes = [int(s) for s in args.sizes.split(",") if s]
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    for b in backends:
        if b not in ("brute", "tree"):
            raise ValueError(f"unknown backend {b!r}")
    rows, ratios = run_bench(
        sizes, backends, channels=args.c, k=args.k, seed=args.seed, repeats=args.repeats
    )
    csv_text = rows_to_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        print(f"wrote {args.out}")
    else:
        print(csv_text, end="")
    for backend, rs in ratios.items():
        pretty = ", ".join(f"{r:.2f}x" for r in rs)
        print(f"{backend}: growth ratios per size doubling: {pretty}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpnet", description=__doc__, exit_on_error=False
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the toy dataset", exit_on_error=False)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train from a JSON config", exit_on_error=False)
    p.add_argument("--config", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", exit_on_error=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--backend", choices=("brute", "tree"), default="brute")
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit", exit_on_error=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("visualize", help="dump correspondence records", exit_on_error=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--sample-index", type=int, default=0)
    p.add_argument("--backend", choices=("brute", "tree"), default="brute")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("bench-knn", help="time the grouping backends", exit_on_error=False)
    p.add_argument("--sizes", default="512,1024,2048")
    p.add_argument("--backends", default="brute,tree")
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except argparse.ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
