import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np
import yaml
from dotenv import load_dotenv

# Ensure src is in path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '.')))

from src.exceptions import InvalidConfig, RangeSegError
from src.layer1.class_map import class_map_from_config, class_statistics
from src.layer1.scan_io import SensorId, load_labeled_scan, load_manifest, load_scan, write_labels
from src.layer1.scene_generator import load_scene_spec, write_dataset
from src.layer1.sensor_rig import default_rig, load_rig
from src.layer2.projection import destagger, project
from src.layer2.render import Channel, render_png, render_stack
from src.layer3.objectives import loss_config_from_config
from src.layer3.segnet import build, load_checkpoint, net_config_from_config
from src.layer4.benchmark import BenchMode, bench, compare_presets, realtime_budget_ms
from src.layer4.dataset import ScanDataset
from src.layer4.pipeline import evaluate, infer_dual, point_labels, predict_images, preprocess
from src.layer4.report_generator import ReportGenerator
from src.layer4.trainer import train, train_config_from_config

DEFAULT_CONFIG = "config/config.yaml"
DEFAULT_RIG = "config/rig.yaml"
DEFAULT_SCENE = "config/scene.yaml"

logger = logging.getLogger("CLI")


def setup_logging(level: str = "INFO"):
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO),
                        format="[%(name)s] %(message)s", force=True)


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise InvalidConfig(f"config file not found: {path}")
    with open(path, 'r') as f:
        return yaml.safe_load(f) or {}


def data_root(args, config: dict) -> str:
    return args.data or os.getenv("RANGESEG_DATA_ROOT") or config.get('dataset', {}).get('root', './data')


def resolve_rig(args, config: dict, manifest=None):
    """--rig, else the dataset's rig copy, else config/rig.yaml; --rows/--cols override."""
    path = getattr(args, 'rig', None) or (manifest.rig_path if manifest is not None else None) or DEFAULT_RIG
    rig = load_rig(path, config.get('projection', {})) if os.path.exists(path) else default_rig()
    rows, cols = getattr(args, 'rows', None), getattr(args, 'cols', None)
    if rows or cols:
        rig = rig.with_resolution(rows or rig.front.rows, cols or rig.front.cols)
    return rig


def net_overrides(args) -> dict:
    return {
        "use_reflectivity": False if getattr(args, 'no_reflectivity', False) else None,
        "geometry_injection": False if getattr(args, 'no_geometry', False) else None,
        "include_range_channel": True if getattr(args, 'range_channel', False) else None,
    }


def train_overrides(args) -> dict:
    return {"epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size, "seed": args.seed}


# --- Commands ---

def cmd_synth(args, config):
    print(f"\n--- Layer 1: Synthetic Scene Generation ---")
    spec = load_scene_spec(args.scene)
    rig = resolve_rig(args, config)
    class_map = class_map_from_config(config)
    out = data_root(args, config)
    test_sequence = (config.get('dataset', {}).get('test_sequences') or ["0000"])[0]
    path = write_dataset(out, spec, rig, class_map, train_scenes=args.train, test_scenes=args.test, seed=args.seed,
                         test_sequence=str(test_sequence))
    print(f"Dataset written: {path} ({args.train} train + {args.test} test scenes)")
    return 0


def _load_single(args, config):
    class_map = class_map_from_config(config)
    sensor_id = SensorId(args.sensor)
    cloud = load_labeled_scan(args.scan, args.labels, class_map, sensor_id)
    return cloud, resolve_rig(args, config)[sensor_id], class_map


def cmd_project(args, config):
    print(f"\n--- Layer 2: Spherical Projection ---")
    cloud, sensor, class_map = _load_single(args, config)
    img = destagger(project(cloud, sensor.model, class_map.ignore_id), sensor.destagger_shifts)
    for k, v in {**cloud.stats, **img.stats}.items():
        if k != "kept_mask":
            print(f"  {k}: {v}")
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        np.savez_compressed(args.out, xyz=img.xyz, range=img.range, reflectivity=img.reflectivity,
                            labels=img.labels, valid=img.valid, point_index=img.point_index)
        print(f"Planes saved to: {args.out}")
    return 0


def cmd_normals(args, config):
    print(f"\n--- Layer 2: Vehicle Frame & Surface Normals ---")
    cloud, sensor, class_map = _load_single(args, config)
    img = preprocess(cloud, sensor, class_map.ignore_id)
    for k, v in img.stats.items():
        print(f"  {k}: {v}")
    if args.out:
        render_png(img, Channel.NORMALS, args.out)
        print(f"Normals figure saved to: {args.out}")
    return 0


def cmd_render(args, config):
    print(f"\n--- Layer 2: Rendering ---")
    cloud, sensor, class_map = _load_single(args, config)
    img = preprocess(cloud, sensor, class_map.ignore_id)
    prediction = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        prediction = predict_images(model, [img])[0][0]
    if args.stack:
        render_stack(img, args.out, class_map, prediction)
    else:
        render_png(img, Channel(args.channel), args.out, class_map, prediction)
    print(f"Figure saved to: {args.out}")
    return 0


def cmd_train(args, config):
    manifest = load_manifest(data_root(args, config))
    rig = resolve_rig(args, config, manifest)
    class_map = class_map_from_config(config)
    net_cfg = net_config_from_config(config, args.preset, **net_overrides(args))
    train_cfg = train_config_from_config(config, checkpoint_dir=args.checkpoint_dir, **train_overrides(args))

    print(f"\n--- Layer 4: Loading Training Scans ---")
    train_set = ScanDataset.from_manifest(manifest, rig, class_map, net_cfg, "train", progress=True)
    loss_cfg = loss_config_from_config(config, train_set.class_counts())

    print(f"\n--- Layer 3: Model ({args.preset or config.get('network', {}).get('preset', 'small')}) ---")
    model = build(net_cfg, seed=train_cfg.seed)
    print(f"Parameters: {model.param_count:,}")

    print(f"\n--- Layer 4: Training ({train_cfg.epochs} epochs) ---")
    result = train(model, train_set, train_cfg, loss_cfg, progress=True)
    print(f"Final loss: {result.loss_curve[-1]:.5f}")
    if result.checkpoints:
        print(f"Checkpoint: {result.checkpoints[-1]}")

    if manifest.frames("test"):
        print(f"\n--- Layer 4: Held-out Evaluation ---")
        report = evaluate(result.model, manifest, rig, class_map, "test",
                          extra={"parameters": model.param_count})
        print(report.to_markdown("Held-out Results"))
    return 0


def cmd_infer(args, config):
    model, header = load_checkpoint(args.checkpoint)
    rig = resolve_rig(args, config)
    class_map = class_map_from_config(config)
    print(f"\n--- Layer 4: Dual Inference (epoch {header.get('epoch', '?')}) ---")
    result = infer_dual(model, args.front, args.down, rig)
    paths = {SensorId.FRONT: args.front, SensorId.DOWN: args.down}
    for sid, plane in result.labels.items():
        cloud = load_scan(paths[sid], sid)
        ids = np.full(cloud.stats["raw_count"], class_map.ignore_id, dtype=np.int32)
        ids[cloud.stats["kept_mask"]] = point_labels(cloud, rig[sid], plane, class_map.ignore_id)
        if args.out:
            out_dir = os.path.join(args.out, sid.value)
        else:
            out_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(paths[sid]))), "predictions")
        stem = os.path.splitext(os.path.basename(paths[sid]))[0]
        label_path = os.path.join(out_dir, f"{stem}.label")
        write_labels(label_path, ids, class_map)
        print(f"[{sid.value}] {int(result.images[sid].valid.sum())} pixels labeled -> {label_path}")
        if args.render:
            png = os.path.join(out_dir, f"{stem}.png")
            render_stack(result.images[sid], png, class_map, plane)
            print(f"[{sid.value}] figure -> {png}")
    return 0


def cmd_eval(args, config):
    model, header = load_checkpoint(args.checkpoint)
    manifest = load_manifest(data_root(args, config))
    rig = resolve_rig(args, config, manifest)
    class_map = class_map_from_config(config)
    print(f"\n--- Layer 4: Evaluation ({args.split}) ---")
    report = evaluate(model, manifest, rig, class_map, args.split, workers=args.workers,
                      extra={"checkpoint": os.path.basename(args.checkpoint), "parameters": model.param_count})
    print(report.to_markdown())
    paths = ReportGenerator(args.config).write_metric_report(report, "eval", args.out)
    print(f"Report saved to: {paths['yaml']}")
    return 0


def _bench_frames(manifest, split: str, limit: int = 4):
    frames = []
    for frame in manifest.frames(split)[:limit]:
        frames.append({sid: load_scan(e.scan_path, sid) for sid, e in frame.items()})
    return [f for f in frames if len(f) == len(SensorId)]


def cmd_bench(args, config):
    manifest = load_manifest(data_root(args, config))
    rig = resolve_rig(args, config, manifest)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = build(net_config_from_config(config, args.preset, **net_overrides(args)), seed=0)
    budget = realtime_budget_ms(config)
    bcfg = config.get('benchmark', {})
    repetitions = args.repetitions or int(bcfg.get('repetitions', 30))
    warmup = args.warmup if args.warmup is not None else int(bcfg.get('warmup', 5))
    frames = _bench_frames(manifest, args.split)

    print(f"\n--- Layer 4: Latency Benchmark ({model.param_count:,} parameters, budget {budget:.1f} ms) ---")
    modes = [BenchMode.SINGLE, BenchMode.DUAL] if args.mode == "both" else [BenchMode(args.mode)]
    reports = [bench(model, frames, m, rig, repetitions, warmup, budget) for m in modes]
    for r in reports:
        print(f"  {r.mode.value:<6} median {r.median_ms:8.2f} ms | p95 {r.p95_ms:8.2f} ms | "
              f"{'within' if r.within_budget else 'over'} budget")
    paths = ReportGenerator(args.config).write_latency_report(reports, "bench", args.out)
    print(f"Report saved to: {paths['yaml']}")
    return 0


def cmd_stats(args, config):
    manifest = load_manifest(data_root(args, config))
    class_map = class_map_from_config(config)
    print(f"\n--- Layer 1: Class Distribution ---")
    entries = manifest.split(args.split) if args.split else manifest.entries
    labels = [load_labeled_scan(e.scan_path, e.label_path, class_map, e.sensor_id).labels
              for e in entries if e.label_path]
    counts = class_statistics(labels, class_map)
    for name, c in zip(class_map.names(), counts):
        print(f"  {name:<18} {int(c):>10}")
    paths = ReportGenerator(args.config).write_class_statistics(counts, class_map, "stats", args.out)
    print(f"Figure saved to: {paths['figure']}")
    return 0


def cmd_compare(args, config):
    manifest = load_manifest(data_root(args, config))
    rig = resolve_rig(args, config, manifest)
    class_map = class_map_from_config(config)
    net_cfg = net_config_from_config(config, args.presets[0], **net_overrides(args))
    train_set = ScanDataset.from_manifest(manifest, rig, class_map, net_cfg, "train")
    frames = _bench_frames(manifest, "test")
    bcfg = config.get('benchmark', {})

    print(f"\n--- Layer 4: Backbone Comparison ({', '.join(args.presets)}) ---")
    rows = compare_presets(config, args.presets, train_set, manifest, rig, class_map, frames,
                           train_overrides(args), args.repetitions or int(bcfg.get('repetitions', 30)),
                           int(bcfg.get('warmup', 5)))
    budget = realtime_budget_ms(config)
    for r in rows:
        miou = "n/a" if r["miou"] is None else f"{100 * r['miou']:.2f}"
        print(f"  {r['preset']:<8} {r['parameters']:>10,} params | mIoU {miou:>6} | "
              f"single {r['single_ms']:7.2f} ms | dual {r['dual_ms']:7.2f} ms")
    paths = ReportGenerator(args.config).write_comparison(rows, budget, "compare", args.out)
    print(f"Figure saved to: {paths['figure']}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "project": cmd_project, "normals": cmd_normals, "render": cmd_render,
    "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench,
    "stats": cmd_stats, "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dual-LiDAR Range-Image Segmentation")
    parser.add_argument("--config", default=os.getenv("RANGESEG_CONFIG", DEFAULT_CONFIG), help="Config file")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_rig(p):
        p.add_argument("--rig", help="Rig file (default: dataset rig or config/rig.yaml)")
        p.add_argument("--rows", type=int, help="Override range image rows")
        p.add_argument("--cols", type=int, help="Override range image columns")
        return p

    def with_net(p):
        p.add_argument("--preset", choices=["tiny", "small", "medium", "large"], help="Backbone preset")
        p.add_argument("--no-reflectivity", action="store_true", help="Zero the reflectivity channel")
        p.add_argument("--no-geometry", action="store_true", help="Disable geometry injection")
        p.add_argument("--range-channel", action="store_true", help="Add the range input channel")
        return p

    def with_curriculum(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        return p

    p = with_rig(sub.add_parser("synth", help="Generate synthetic scenes"))
    p.add_argument("--data", help="Output dataset root")
    p.add_argument("--scene", default=DEFAULT_SCENE, help="Scene spec file")
    p.add_argument("--train", type=int, default=4, help="Training scenes")
    p.add_argument("--test", type=int, default=1, help="Test scenes (sequence 0000)")
    p.add_argument("--seed", type=int, default=0)

    for name, help_text in (("project", "Project one scan"), ("normals", "Estimate normals of one scan"),
                            ("render", "Render one scan as PNG")):
        p = with_rig(sub.add_parser(name, help=help_text))
        p.add_argument("scan", help="Path to a .bin scan")
        p.add_argument("--labels", help="Matching .label file")
        p.add_argument("--sensor", default="front", choices=[s.value for s in SensorId])
        p.add_argument("--out", required=(name == "render"), help="Output file")
        if name == "render":
            p.add_argument("--channel", default="reflectivity", choices=[c.value for c in Channel])
            p.add_argument("--stack", action="store_true", help="Multi-panel figure")
            p.add_argument("--checkpoint", help="Model for the prediction channel")

    p = with_curriculum(with_net(with_rig(sub.add_parser("train", help="Train a model"))))
    p.add_argument("--data", help="Dataset root")
    p.add_argument("--checkpoint-dir", help="Checkpoint directory")

    p = with_rig(sub.add_parser("infer", help="Segment one front/down scan pair"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--front", required=True, help="Front sensor .bin")
    p.add_argument("--down", required=True, help="Down sensor .bin")
    p.add_argument("--out", help="Output directory for .label files")
    p.add_argument("--render", action="store_true", help="Also write PNG figures")

    p = with_rig(sub.add_parser("eval", help="Evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="Dataset root")
    p.add_argument("--split", default="test")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--out", help="Report path (without extension)")

    p = with_net(with_rig(sub.add_parser("bench", help="Latency benchmark")))
    p.add_argument("--checkpoint", help="Model to time (default: untrained preset)")
    p.add_argument("--data", help="Dataset root")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", default="both", choices=["single", "dual", "both"])
    p.add_argument("--repetitions", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--out", help="Report path (without extension)")

    p = sub.add_parser("stats", help="Class distribution of a dataset")
    p.add_argument("--data", help="Dataset root")
    p.add_argument("--split", help="Restrict to one split")
    p.add_argument("--out", help="Report path (without extension)")

    p = with_curriculum(with_net(with_rig(sub.add_parser("compare", help="Sweep backbone presets"))))
    p.add_argument("--data", help="Dataset root")
    p.add_argument("--presets", nargs="+", default=["tiny", "small", "medium"])
    p.add_argument("--repetitions", type=int)
    p.add_argument("--out", help="Report path (without extension)")
    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 success, 1 user error, 2 internal error."""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        config = load_config(args.config)
        setup_logging(os.getenv("RANGESEG_LOG_LEVEL") or config.get('system', {}).get('log_level', 'INFO'))
        print(f"=== Dual-LiDAR Range-Image Segmentation: {args.command} ===")
        return COMMANDS[args.command](args, config)
    except (RangeSegError, OSError) as e:
        print(f"Error: {e}")
        return 1
    except Exception as e:
        logger.exception("internal error")
        print(f"Error: internal failure ({type(e).__name__}: {e})")
        return 2


if __name__ == "__main__":
    sys.exit(cli())
