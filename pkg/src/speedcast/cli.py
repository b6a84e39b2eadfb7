"""Command-line entry point: synth, prepare, train, eval, ablate, gradcheck, pipeline."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SpeedcastError
from .evaluation import (
    SweepSpec,
    evaluate,
    measure_inference,
    run_ablation,
    write_loss_curves,
    write_results_table,
)
from .ingest import ClipDataset, build_dataset, downsample, read_detection_log, read_sensor_log
from .model import (
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .seeding import derive_seed
from .synth import SynthConfig, generate, write_logs
from .train import TrainConfig, gradient_check, train
from .types import ACTION_NAMES, CategoryQuota

MANIFEST_SCHEMA = "speedcast-manifest/1"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config_snapshot: dict, seed: int, artifacts: dict[str, Path]) -> None:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "tool_version": __version__,
        "command": command,
        "config": config_snapshot,
        "master_seed": seed,
        "artifacts": {
            name: {"path": str(path), "sha256": _sha256(path)} for name, path in artifacts.items()
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2)
        handle.write("\n")


def _parse_quota(text: str) -> CategoryQuota:
    parts = text.split(",")
    if len(parts) != 3:
        raise SpeedcastError(f"--quota expects car,ped,traffic, got {text!r}")
    return CategoryQuota(int(parts[0]), int(parts[1]), int(parts[2]))


def cmd_synth(args: argparse.Namespace) -> int:
    if args.config:
        config = SynthConfig.from_json(Path(args.config).read_text())
        if args.seed is not None:
            config = SynthConfig.from_json(
                json.dumps({**json.loads(config.to_json()), "seed": args.seed})
            )
    else:
        config = SynthConfig(seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    result = generate(config)
    det_path, sen_path = write_logs(result, out)
    _write_manifest(
        out,
        "synth",
        json.loads(config.to_json()),
        config.seed,
        {"detections": det_path, "sensors": sen_path},
    )
    print(f"wrote {det_path} and {sen_path} ({config.sessions} sessions)")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    logs = Path(args.logs)
    detections = read_detection_log(logs / "detections.jsonl")
    sensor_log = read_sensor_log(logs / "sensors.jsonl")
    quota = _parse_quota(args.quota)
    seed = args.seed if args.seed is not None else 0
    sessions = {}
    for name, frames in detections.items():
        if name not in sensor_log:
            raise SpeedcastError(f"session {name!r} has detections but no sensor rows")
        frames = downsample(frames, args.source_fps, args.target_fps)
        kept = {f.frame_index for f in frames}
        sensors = [s for s in sensor_log[name] if s.frame_index in kept]
        sessions[name] = (frames, sensors)
    dataset = build_dataset(
        sessions, T=args.T, FT=args.FT, quota=quota, seed=derive_seed(seed, "split")
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archive = out / "clips.npz"
    dataset.save(archive)
    hist = np.bincount(dataset.labels, minlength=4)
    train_hist = np.bincount(dataset.labels[dataset.train_idx], minlength=4)
    _write_manifest(
        out,
        "prepare",
        {
            "T": args.T,
            "FT": args.FT,
            "quota": [quota.n_car, quota.n_pedestrian, quota.n_traffic],
            "source_fps": args.source_fps,
            "target_fps": args.target_fps,
        },
        seed,
        {"clips": archive},
    )
    if len(dataset) == 0:
        print("warning: no clips assembled from the given logs", file=sys.stderr)
    print(f"clips: {len(dataset)}  splits: {len(dataset.train_idx)}/{len(dataset.val_idx)}/{len(dataset.test_idx)}")
    for name, total, tr in zip(ACTION_NAMES, hist, train_hist):
        print(f"  {name}: {total} total, {tr} in oversampled train")
    return 0


def _train_config(args: argparse.Namespace, seed: int) -> TrainConfig:
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    overrides.setdefault("seed", seed)
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if args.step_size is not None:
        overrides["step_size"] = args.step_size
    return TrainConfig(**overrides)


def cmd_train(args: argparse.Namespace) -> int:
    dataset = ClipDataset.load(args.archive)
    seed = args.seed if args.seed is not None else 0
    config = ModelConfig(
        T=dataset.T,
        FT=dataset.FT,
        K=args.K,
        quota=dataset.quota,
        variant=args.variant,
    )
    params = init_params(config, seed=derive_seed(seed, "init", args.variant))
    train_config = _train_config(args, derive_seed(seed, "train", args.variant))
    best, report = train(
        dataset,
        params,
        train_config,
        progress=(None if args.quiet else lambda e, tr, vl: print(f"epoch {e}: train {tr:.4f} val {vl:.4f}")),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(best, ckpt)
    report_path = out / "train_report.json"
    with open(report_path, "w", encoding="utf-8") as handle:
        json.dump(
            {
                "stop_epoch": report.stop_epoch,
                "best_epoch": report.best_epoch,
                "best_val_loss": report.best_val_loss,
                "aborted": report.aborted,
            },
            handle,
            indent=2,
        )
        handle.write("\n")
    metrics_path = out / "train_metrics.csv"
    with open(metrics_path, "w", encoding="utf-8") as handle:
        handle.write("epoch,train_loss,val_loss,seconds\n")
        for epoch, tr, vl, sec in report.rows():
            handle.write(f"{epoch},{tr:.6f},{vl:.6f},{sec:.3f}\n")
    _write_manifest(
        out,
        "train",
        {"variant": config.variant, "K": args.K, "train": vars(train_config)},
        seed,
        {"checkpoint": ckpt, "report": report_path, "metrics": metrics_path},
    )
    print(
        f"stopped at epoch {report.stop_epoch}, best epoch {report.best_epoch} "
        f"(val loss {report.best_val_loss:.6f})"
    )
    return 4 if report.aborted else 0


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = ClipDataset.load(args.archive)
    params = load_checkpoint(args.checkpoint)
    idx = {"train": dataset.train_idx, "val": dataset.val_idx, "test": dataset.test_idx}[args.split]
    feats, mask, labels = dataset.subset(idx)
    metrics = evaluate(params, feats, mask, labels)
    timing = measure_inference(params, feats, mask)
    for name, recall in zip(ACTION_NAMES, metrics.recalls):
        print(f"recall {name}: " + ("undefined" if recall is None else f"{recall:.2f}"))
    print(f"accuracy: {metrics.accuracy:.2f}")
    print(f"inference: {timing['per_clip_us']:.1f} us/clip over {len(labels)} clips")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    logs = Path(args.logs)
    detections = read_detection_log(logs / "detections.jsonl")
    sensor_log = read_sensor_log(logs / "sensors.jsonl")
    sessions = {name: (frames, sensor_log[name]) for name, frames in detections.items()}
    seed = args.seed if args.seed is not None else 0
    sweep = SweepSpec(
        T_set=tuple(args.T),
        FT_set=tuple(args.FT),
        K_set=tuple(args.K),
        variants=tuple(args.variant),
        quotas=(_parse_quota(args.quota),),
        seeds=(seed,),
    )
    train_config = _train_config(args, seed)
    results = run_ablation(sessions, sweep, train_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "results.csv"
    curves = out / "loss_curves.csv"
    write_results_table(results, table)
    write_loss_curves(results, curves)
    _write_manifest(
        out,
        "ablate",
        {"T": args.T, "FT": args.FT, "K": args.K, "variants": args.variant},
        seed,
        {"results": table, "loss_curves": curves},
    )
    failures = [c for c in results if c.error]
    print(f"{len(results)} cells, {len(failures)} failed; table at {table}")
    for cell in failures:
        print(f"  failed {cell.variant} T={cell.T} FT={cell.FT} K={cell.K}: {cell.error}", file=sys.stderr)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    config = ModelConfig(
        T=3,
        FT=1,
        K=2,
        quota=CategoryQuota(3, 2, 1),
        graph_widths=(4, 8),
        lstm_hidden=8,
        mlp_widths=(8, 8),
        variant="full",
    )
    params = init_params(config, seed=derive_seed(seed, "gradcheck"))
    rng = np.random.default_rng(derive_seed(seed, "gradcheck-data"))
    # Check at a generic point: zero-initialized biases can leave rectifier
    # pre-activations exactly at the kink, where the one-sided finite
    # difference disagrees with the subgradient by construction.
    for _, arr in params.named_arrays():
        arr += rng.normal(scale=0.05, size=arr.shape)
    batch = 2
    features = rng.uniform(0.0, 1.0, size=(batch, config.T, config.quota.total, 4))
    mask = rng.uniform(size=(batch, config.T, config.quota.total)) < 0.7
    mask[:, :, 0] = True  # keep at least one real car per frame
    features[~mask] = 0.0
    labels = rng.integers(0, 4, size=batch)
    worst = gradient_check(features, mask, labels, params)
    worst_overall = max(worst.values())
    for name in sorted(worst, key=worst.get, reverse=True)[:5]:
        print(f"  {name}: {worst[name]:.3e}")
    print(f"max relative error {worst_overall:.3e} (tolerance {args.tolerance:.1e})")
    if worst_overall > args.tolerance:
        print("gradient check FAILED", file=sys.stderr)
        return 5
    print("gradient check passed")
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    """Chain synth -> prepare -> train -> eval into one run directory."""
    out = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    ns = argparse.Namespace(
        config=args.synth_config, seed=seed, out=str(out / "logs")
    )
    rc = cmd_synth(ns)
    if rc:
        return rc
    ns = argparse.Namespace(
        logs=str(out / "logs"),
        out=str(out / "dataset"),
        T=args.T,
        FT=args.FT,
        quota=args.quota,
        seed=seed,
        source_fps=args.source_fps,
        target_fps=args.target_fps,
    )
    rc = cmd_prepare(ns)
    if rc:
        return rc
    ns = argparse.Namespace(
        archive=str(out / "dataset" / "clips.npz"),
        out=str(out / "model"),
        variant=args.variant,
        K=args.K,
        seed=seed,
        config=args.train_config,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        step_size=args.step_size,
        quiet=args.quiet,
    )
    rc = cmd_train(ns)
    if rc:
        return rc
    ns = argparse.Namespace(
        archive=str(out / "dataset" / "clips.npz"),
        checkpoint=str(out / "model" / "checkpoint.npz"),
        split="test",
    )
    return cmd_eval(ns)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speedcast", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="reserved; computation is single-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic detection and sensor logs")
    p.add_argument("--config", help="synth config JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build a clip dataset archive from logs")
    p.add_argument("--logs", required=True, help="directory with detections.jsonl and sensors.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--FT", type=int, default=1)
    p.add_argument("--quota", default="20,10,10", help="car,ped,traffic slot counts")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--source-fps", type=float, default=3.0, dest="source_fps")
    p.add_argument("--target-fps", type=float, default=3.0, dest="target_fps")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a variant on a clip archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="full")
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="train config JSON file")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--step-size", type=float, default=None, dest="step_size")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an archive split")
    p.add_argument("--archive", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a sweep of variants and settings")
    p.add_argument("--logs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, nargs="+", default=[10])
    p.add_argument("--FT", type=int, nargs="+", default=[1])
    p.add_argument("--K", type=int, nargs="+", default=[1])
    p.add_argument("--variant", nargs="+", default=["base", "base_single", "base_multi", "base_t", "full"])
    p.add_argument("--quota", default="20,10,10")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="train config JSON file")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--step-size", type=float, default=None, dest="step_size")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pipeline", help="synth + prepare + train + eval in one run")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--synth-config", default=None, dest="synth_config")
    p.add_argument("--train-config", default=None, dest="train_config")
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--FT", type=int, default=1)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--quota", default="20,10,10")
    p.add_argument("--variant", default="full")
    p.add_argument("--source-fps", type=float, default=3.0, dest="source_fps")
    p.add_argument("--target-fps", type=float, default=3.0, dest="target_fps")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--step-size", type=float, default=None, dest="step_size")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpeedcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
