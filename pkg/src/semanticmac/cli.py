"""Command-line entry points.

Exit codes: 0 success, 2 configuration/input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ABLATIONS, ConfigError, TrainConfig, apply_ablation, load_config, merge, parse_override
from .diagnostics import modality_ablation_traversal, parse_subset, pr_distribution_curve, representation_sets, subset_name
from .frontend import ManifestError, SyntheticConfig, load_manifest, save_manifest, synthesize_dataset, write_smft
from .training import Checkpoint, average_reports, batch_rows, encode_samples, evaluate, run_inference, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST_NAME = "manifest.jsonl"
CHECKPOINT_NAME = "checkpoint.safetensors"

log = logging.getLogger("semanticmac")


def _manifest_path(data: str) -> Path:
    path = Path(data)
    return path / MANIFEST_NAME if path.is_dir() else path


def _load_data(data: Optional[str]):
    if not data:
        raise ConfigError("--data is required")
    path = _manifest_path(data)
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    return load_manifest(path)


def _build_config(args) -> TrainConfig:
    overrides: dict = {}
    for text in args.set or []:
        overrides = merge(overrides, parse_override(text))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "fixed_frames", None) is not None:
        overrides["fixed_frames"] = args.fixed_frames
    if getattr(args, "dump_pseudo_labels", False):
        overrides["dump_pseudo_labels"] = True
    config = load_config(args.config or "desk", overrides)
    for name in getattr(args, "ablate", None) or []:
        config = apply_ablation(config, name)
    return config


def _checkpoint_path(text: str) -> Path:
    path = Path(text)
    return path / CHECKPOINT_NAME if path.is_dir() else path


def _load_checkpoint(args) -> Checkpoint:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    path = _checkpoint_path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}")
    return Checkpoint.load(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_history(path: Path, history: Sequence[Dict[str, float]]) -> None:
    keys: List[str] = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys or ["epoch"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _ensure_history(out: Path) -> None:
    # single-shot commands get a one-row history mirroring metrics.json
    if (out / "history.csv").exists() or not (out / "metrics.json").exists():
        return
    metrics = json.loads((out / "metrics.json").read_text())
    _write_history(out / "history.csv", [{"step": 0, **metrics}])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synthesize(args) -> int:
    signal = {"text": 1.0, "audio": 1.0, "vision": 1.0}
    for item in args.signal or []:
        mod, _, value = item.partition("=")
        if mod not in signal:
            raise ConfigError(f"--signal expects text|audio|vision=<float>, got {item!r}")
        signal[mod] = float(value)
    cfg = SyntheticConfig(
        samples=args.samples,
        task_kind=args.task,
        seed=args.seed or 0,
        frame_range=(args.min_frames, args.max_frames),
        multilabel=args.multilabel,
        signal=signal,
        noise_std=args.noise,
        use_splits=not args.no_splits,
    )
    manifest = synthesize_dataset(cfg)
    out = _out_dir(args)
    save_manifest(manifest, out / MANIFEST_NAME, external=args.external)
    counts = {s: len(manifest.split(s)) for s in ("train", "valid", "test")}
    _write_json(out / "config.json", {"synthetic": {**cfg.__dict__, "frame_range": list(cfg.frame_range)}})
    _write_json(out / "metrics.json", {f"samples_{k}": float(v) for k, v in counts.items()})
    print(f"wrote {len(manifest.records)} samples to {out / MANIFEST_NAME}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _build_config(args)
    manifest = _load_data(args.data)
    out = _out_dir(args)
    _write_json(out / "config.json", config.to_dict())
    result = train(manifest, config, out_dir=out)
    result.checkpoint.save(out / CHECKPOINT_NAME)
    _write_history(out / "history.csv", result.history)
    metrics = {"best_epoch": float(result.best_epoch)}
    if result.history:
        best = result.history[result.best_epoch - 1]
        metrics.update({k: v for k, v in best.items() if k.startswith("valid_")})
    if manifest.split("test"):
        for k, v in evaluate(result.checkpoint, manifest, "test").items():
            metrics[f"test_{k}"] = v
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({k: round(v, 4) for k, v in metrics.items()}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = _load_data(args.data)
    out = _out_dir(args)
    if args.runs <= 1:
        ckpt = _load_checkpoint(args)
        _write_json(out / "config.json", ckpt.config.to_dict())
        report = evaluate(ckpt, manifest, args.split, fixed_frames=args.fixed_frames)
        _write_json(out / "metrics.json", report)
        print(json.dumps({k: round(v, 4) for k, v in report.items()}))
        return EXIT_OK
    # repeated runs: retrain with consecutive seeds and average
    config = _load_checkpoint(args).config if args.checkpoint else _build_config(args)
    base_seed = config.seed if args.seed is None else args.seed
    reports, history = [], []
    for i in range(args.runs):
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": base_seed + i})
        result = train(manifest, cfg)
        report = evaluate(result.checkpoint, manifest, args.split, fixed_frames=args.fixed_frames)
        reports.append(report)
        history.append({"run": float(i), "seed": float(base_seed + i), **report})
    _write_json(out / "config.json", {**config.to_dict(), "seed": base_seed, "runs": args.runs})
    _write_json(out / "metrics.json", average_reports(reports))
    _write_history(out / "history.csv", history)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    manifest = _load_data(args.data)
    ckpt = _load_checkpoint(args)
    out = _out_dir(args)
    _write_json(out / "config.json", {"checkpoint": str(args.checkpoint), "rep": args.rep, "vs": args.vs,
                                      "bins": args.bins, "angles": args.angles, "seed": args.seed or 0})
    seed = args.seed or 0
    if args.vs == "traverse":
        curves = modality_ablation_traversal(ckpt, manifest, args.split, args.rep, args.bins, args.angles, seed)
    else:
        subset = parse_subset(args.vs)
        full = representation_sets(ckpt, manifest, args.split, rep=args.rep)
        other = representation_sets(ckpt, manifest, args.split, subset, args.rep)
        curves = {subset_name(subset): pr_distribution_curve(full, other, args.bins, args.angles, seed)}
    metrics = {}
    for name, curve in curves.items():
        fname = "pr.csv" if len(curves) == 1 else f"pr_{name.replace('+', '_')}.csv"
        (out / fname).write_text(curve.to_csv())
        metrics[f"{name}/area"] = curve.area()
        metrics[f"{name}/max_min"] = curve.max_min()
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({k: round(v, 4) for k, v in metrics.items()}))
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    manifest = _load_data(args.data)
    ckpt = _load_checkpoint(args)
    out = _out_dir(args)
    samples = manifest.split(args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")
    data = encode_samples(samples, ckpt.config, ckpt.task, ckpt.class_names, args.fixed_frames)
    inf = run_inference(ckpt.build_model(), data, batch_rows(len(data), 64))
    mats = {
        "specific": inf.specific.reshape(len(data), -1),
        "shared": inf.shared.reshape(len(data), -1),
        "fused": inf.fused,
    }
    files = {}
    for name, mat in mats.items():
        write_smft(out / f"{name}.smft", mat.astype(np.float32))
        files[name] = {"path": f"{name}.smft", "rows": int(mat.shape[0]), "cols": int(mat.shape[1])}
    labels = [y if isinstance(y, (str, float, int)) else list(y) for y in data.labels]
    _write_json(out / "index.json", {"sample_ids": inf.sample_ids, "labels": labels, "files": files,
                                     "common_dim": ckpt.config.gba.common_dim, "split": args.split})
    _write_json(out / "config.json", ckpt.config.to_dict())
    _write_json(out / "metrics.json", {"samples": float(len(data))})
    return EXIT_OK


def cmd_dump_pseudo_labels(args) -> int:
    ckpt = _load_checkpoint(args)
    if ckpt.store is None:
        raise ConfigError("checkpoint carries no pseudo-label store")
    out = _out_dir(args)
    (out / "pseudo_labels.json").write_text(json.dumps(ckpt.store) + "\n")
    _write_json(out / "config.json", ckpt.config.to_dict())
    _write_json(out / "metrics.json", {"epoch": float(ckpt.store.get("epoch", ckpt.epoch))})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="preset name (e.g. desk, mosi) or path to a preset JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. gba.common_dim=16")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semanticmac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize-data", help="write a synthetic label-correlated manifest")
    _common(p)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--task", choices=("regression", "classification", "detection"), default="regression")
    p.add_argument("--multilabel", action="store_true")
    p.add_argument("--min-frames", type=int, default=3)
    p.add_argument("--max-frames", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--signal", action="append", metavar="MOD=STRENGTH")
    p.add_argument("--no-splits", action="store_true", help="put every sample in the train split")
    p.add_argument("--external", action="store_true", help="store frames as SMFT files")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train a model on a manifest")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--fixed-frames", type=int, default=None, help="resample every clip to this many frames")
    p.add_argument("--dump-pseudo-labels", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint, or average k retrained runs")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--fixed-frames", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose-pr", help="PR curves between full and modality-subset representations")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--rep", choices=("fused", "specific", "shared"), default="fused")
    p.add_argument("--vs", default="traverse", help="modality subset such as text or text+audio; 'traverse' for all 7")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--angles", type=int, default=1001)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("dump-embeddings", help="write specific/shared/fused representations as SMFT")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--fixed-frames", type=int, default=None)
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("dump-pseudo-labels", help="write the pseudo-label store saved in a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_dump_pseudo_labels)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        (Path(args.out) / "history.csv").unlink(missing_ok=True)
        code = args.func(args)
        _ensure_history(Path(args.out))
        return code
    except (ConfigError, ManifestError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
