"""Command-line entry point: ``gridood <verb> --config run.json [--set key=value ...]``.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime failure.
"""
import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .constants import (
    SPLITS,
    STRIDES,
    CheckpointError,
    ConfigError,
    GridOODException,
    TrainingDivergedError,
    UsageError,
)
from .diffcore import Tensor
from .gridnet import Checkpoint, CandidateGrids, GridNet, load_checkpoint, save_checkpoint
from .imageio import read_ppm, write_pgm, write_ppm
from .log import setup_logging
from .oodmetrics import METRIC_NAMES, MetricReport, evaluate_scores, macro_ap
from .oodscore import ABLATION_METHODS, ScoredSample, heatmap, method_family, parse_method, score_sample
from .settings import ResponsibilityConfig, RunConfig, Settings
from .synthscenes import Dataset, Scene, dump_dataset, generate_dataset, generate_scene, load_dataset, load_split
from .trainer import train

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.gridood"
TRAIN_LOG_NAME = "train_log.jsonl"


def _load_config(args: argparse.Namespace) -> RunConfig:
    return Settings.read_settings(args.config, args.set or ())


def _output_dir(args: argparse.Namespace, config: RunConfig, default: Optional[str] = None) -> Path:
    if args.output:
        return Path(args.output)
    return Path(config.output_dir) / default if default else Path(config.output_dir)


def _dataset_dir(args: argparse.Namespace, config: RunConfig) -> Optional[Path]:
    directory = getattr(args, "dataset_dir", None) or config.dataset_dir
    return Path(directory) if directory else None


def _dataset(args: argparse.Namespace, config: RunConfig) -> Dataset:
    """The dataset on disk when one is configured, otherwise generated in memory from the DatasetSpec."""
    directory = _dataset_dir(args, config)
    if directory is None:
        return generate_dataset(config.dataset)
    if not directory.is_dir():
        raise UsageError(f"No dataset directory at {directory}; run 'gridood gen' first")
    logger.info(f"Loading dataset from {directory}")
    return load_dataset(directory)


def _checkpoint(path: str, config: RunConfig) -> Checkpoint:
    checkpoint = load_checkpoint(path)
    if checkpoint.config.image_size != config.dataset.image_size:
        raise ConfigError(f"dataset.image_size ({config.dataset.image_size}) does not match the checkpoint's "
                          f"network.image_size ({checkpoint.config.image_size})")
    if checkpoint.config.num_classes != config.dataset.num_classes:
        raise ConfigError(f"dataset.num_classes ({config.dataset.num_classes}) does not match the checkpoint's "
                          f"network.num_classes ({checkpoint.config.num_classes})")
    return checkpoint


def _methods(args: argparse.Namespace, config: RunConfig) -> List[str]:
    names = args.methods.split(";") if getattr(args, "methods", None) else list(config.eval.methods)
    return [parse_method(name) for name in names if name.strip()]


def _check_methods(methods: Sequence[str], checkpoint: Checkpoint) -> None:
    for name in methods:
        if method_family(name) != checkpoint.mode:
            raise UsageError(f"Method {name} needs a {method_family(name)} checkpoint, "
                             f"but the checkpoint was trained in mode {checkpoint.mode}")


def _forward(network: GridNet, mode: str, scenes: Sequence[Scene],
             batch_size: int) -> Iterator[Tuple[Optional[CandidateGrids], Optional[np.ndarray]]]:
    for start in range(0, len(scenes), batch_size):
        images = Tensor(np.stack([scene.image.data for scene in scenes[start:start + batch_size]]))
        if mode == "yolood":
            grids = network.forward(images)
            for b in range(images.shape[0]):
                yield grids.sample(b), None
        else:
            for row in network.forward_flat(images).data:
                yield None, row


def score_scenes(checkpoint: Checkpoint, scenes: Sequence[Scene], methods: Sequence[str],
                 batch_size: int = 16) -> List[ScoredSample]:
    network = GridNet.from_checkpoint(checkpoint)
    return [score_sample(methods, grids=grids, logits=logits)
            for grids, logits in _forward(network, checkpoint.mode, scenes, batch_size)]


def evaluate_checkpoint(checkpoint: Checkpoint, dataset: Dataset, methods: Sequence[str],
                        target_tpr: float = 0.95,
                        batch_size: int = 16) -> Tuple[Dict[str, MetricReport], float, Dict[str, List[ScoredSample]]]:
    """Metric reports per method, test-ID macro-AP and the per-sample scores of both test splits."""
    _check_methods(methods, checkpoint)
    scored = {
        "test_id": score_scenes(checkpoint, dataset.test_id, methods, batch_size),
        "test_ood": score_scenes(checkpoint, dataset.test_ood, methods, batch_size),
    }
    reports = {
        name: evaluate_scores(name,
                              [s.ood_scores[name] for s in scored["test_id"]],
                              [s.ood_scores[name] for s in scored["test_ood"]],
                              target_tpr)
        for name in methods
    }
    labels = np.stack([scene.labels(checkpoint.config.num_classes) for scene in dataset.test_id])
    id_macro_ap = macro_ap(np.stack([s.class_probs for s in scored["test_id"]]), labels)
    return reports, id_macro_ap, scored


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"Wrote {path}")


def _write_json(path: Path, document: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {path}")


def cmd_gen(args: argparse.Namespace) -> int:
    config = _load_config(args)
    directory = Path(args.output) if args.output else (_dataset_dir(args, config)
                                                       or Path(config.output_dir) / "dataset")
    dump_dataset(generate_dataset(config.dataset), directory)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    output = _output_dir(args, config)
    dataset = _dataset(args, config)
    try:
        checkpoint, log = train(dataset, config.network, config.train, config.responsibility)
    except TrainingDivergedError as e:
        if e.last_good is not None:
            save_checkpoint(output / "checkpoint.last_good.gridood", e.last_good)
            logger.error(f"Saved last good checkpoint to {output / 'checkpoint.last_good.gridood'}")
        raise
    save_checkpoint(output / CHECKPOINT_NAME, checkpoint)
    log.write(output / TRAIN_LOG_NAME)
    Settings.write_settings_file(output / "config.json", config.model_dump(mode="json"))
    logger.info(f"Wrote {output / CHECKPOINT_NAME} and {output / TRAIN_LOG_NAME}")
    return 0


def _checkpoint_path(args: argparse.Namespace, config: RunConfig) -> str:
    return args.checkpoint or str(Path(config.output_dir) / CHECKPOINT_NAME)


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    path = _checkpoint_path(args, config)
    checkpoint = _checkpoint(path, config)
    methods = _methods(args, config)
    _check_methods(methods, checkpoint)
    output = _output_dir(args, config, "eval")
    reports, id_macro_ap, scored = evaluate_checkpoint(checkpoint, _dataset(args, config), methods,
                                                       config.eval.target_tpr, config.train.batch_size)

    _write_json(output / "report.json", {
        "checkpoint": str(path),
        "mode": checkpoint.mode,
        "target_tpr": config.eval.target_tpr,
        "id_macro_ap": id_macro_ap,
        "methods": {name: report.as_dict() for name, report in reports.items()},
    })
    _write_csv(output / "report.csv", ["method", "metric", "value"],
               [[name, metric, value] for name, report in reports.items()
                for metric, value in report.metrics().items()])
    _write_csv(output / "scores.csv", ["split", "position", *methods],
               [[split, position, *(sample.ood_scores[name] for name in methods)]
                for split, samples in scored.items() for position, sample in enumerate(samples)])
    for name, report in reports.items():
        logger.info(f"{name}: FPR95 {report.fpr95:.4f}, AUROC {report.auroc:.4f}, AUPR {report.aupr:.4f}")
    return 0


def _check_triplets(p_grid) -> List[ResponsibilityConfig]:
    triplets = []
    for p in p_grid:
        responsibility = ResponsibilityConfig.parse(p=tuple(p))
        if not responsibility.is_sweep_valid:
            raise ConfigError(f"sweep.p_grid: triplet {tuple(p)} violates p3 > p2 > p1")
        triplets.append(responsibility)
    return triplets


def tally_top_k(rows: Sequence[dict], top_k: int) -> dict:
    """Count each head's p value among the ``top_k`` triplets with the best validation macro-AP."""
    ranked = sorted(rows, key=lambda row: -row["val_macro_ap"])[:top_k]
    counts, selected = {}, []
    for k in range(3):
        counter = Counter(row["p"][k] for row in ranked)
        counts[f"p{k + 1}"] = {repr(value): n for value, n in counter.items()}
        # Ties keep the value seen first, i.e. the better-ranked one
        selected.append(counter.most_common(1)[0][0])
    return {"top_k": top_k, "ranked": [list(row["p"]) for row in ranked], "counts": counts, "selected": selected}


def cmd_sweep_p(args: argparse.Namespace) -> int:
    config = _load_config(args)
    triplets = _check_triplets(config.sweep.p_grid)
    output = _output_dir(args, config, "sweep_p")
    dataset = _dataset(args, config)
    train_config = config.train.model_copy(update={"epochs": config.sweep.epochs, "mode": "yolood",
                                                   "resume_from": None})
    rows = []
    for responsibility in triplets:
        logger.info(f"Training with p={responsibility.p}")
        checkpoint, log = train(dataset, config.network, train_config, responsibility)
        reports, _, _ = evaluate_checkpoint(checkpoint, dataset, ["yolood"], config.eval.target_tpr,
                                            train_config.batch_size)
        rows.append({"p": responsibility.p, "val_macro_ap": log.records[-1].val_macro_ap,
                     **reports["yolood"].metrics()})
    _write_csv(output / "sweep_p.csv", ["p1", "p2", "p3", "val_macro_ap", *METRIC_NAMES],
               [[*row["p"], row["val_macro_ap"], *(row[m] for m in METRIC_NAMES)] for row in rows])
    _write_json(output / "sweep_p_tally.json", tally_top_k(rows, config.sweep.top_k))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    checkpoint = _checkpoint(_checkpoint_path(args, config), config)
    if checkpoint.mode != "yolood":
        raise UsageError(f"ablate needs a yolood checkpoint, got mode {checkpoint.mode}")
    output = _output_dir(args, config, "ablate")
    reports, _, _ = evaluate_checkpoint(checkpoint, _dataset(args, config), list(ABLATION_METHODS),
                                        config.eval.target_tpr, config.train.batch_size)
    _write_csv(output / "ablation.csv", ["method", *METRIC_NAMES],
               [[name, *report.metrics().values()] for name, report in reports.items()])
    return 0


def _split_offset(config: RunConfig, split: str) -> int:
    counts = config.dataset.counts
    sizes = {"train": counts.train, "val": counts.val, "test_id": counts.test_id, "test_ood": counts.test_ood}
    return sum(sizes[name] for name in SPLITS[:SPLITS.index(split)])


def _heatmap_image(args: argparse.Namespace, config: RunConfig) -> np.ndarray:
    if args.image:
        if not Path(args.image).is_file():
            raise UsageError(f"No image at {args.image}")
        image = read_ppm(args.image)
        if image.shape[1:] != (config.dataset.image_size, config.dataset.image_size):
            raise UsageError(f"{args.image} is {image.shape[2]}x{image.shape[1]}, "
                             f"expected {config.dataset.image_size}x{config.dataset.image_size}")
        return image
    split = args.split
    directory = _dataset_dir(args, config)
    if directory is not None:
        scenes = load_split(directory / split)
        if not 0 <= args.index < len(scenes):
            raise UsageError(f"Split {split} has {len(scenes)} scenes, no index {args.index}")
        return scenes[args.index].image.data
    count = getattr(config.dataset.counts, split)
    if not 0 <= args.index < count:
        raise UsageError(f"Split {split} has {count} scenes, no index {args.index}")
    scene = generate_scene(config.dataset, _split_offset(config, split) + args.index, split == "test_ood")
    return scene.image.data


def cmd_heatmap(args: argparse.Namespace) -> int:
    config = _load_config(args)
    checkpoint = _checkpoint(_checkpoint_path(args, config), config)
    image = _heatmap_image(args, config)
    output = _output_dir(args, config, "heatmap")
    output.mkdir(parents=True, exist_ok=True)
    grids = GridNet.from_checkpoint(checkpoint).forward(Tensor(image))

    size = image.shape[-1]
    upsampled = []
    for k in range(1, len(STRIDES) + 1):
        rows = heatmap(grids, k).T  # grid[i, j] is column i, row j
        write_pgm(output / f"heatmap_head{k}.pgm", rows)
        scale = size // rows.shape[0]
        upsampled.append(np.repeat(np.repeat(rows, scale, axis=0), scale, axis=1))
    heat = np.max(np.stack(upsampled), axis=0)
    write_ppm(output / "overlay.ppm", 0.5 * image + 0.5 * heat[None])
    logger.info(f"Wrote {len(upsampled)} heatmaps and overlay.ppm to {output}")
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    """Mean and population standard deviation of every metric across eval reports."""
    values: Dict[Tuple[str, str], List[float]] = {}
    for path in args.reports:
        try:
            with open(path, "r") as f:
                document = json.load(f)
        except (OSError, ValueError) as e:
            raise UsageError(f"Cannot read report {path}: {e}")
        for name, report in document.get("methods", {}).items():
            for metric in METRIC_NAMES:
                values.setdefault((name, metric), []).append(float(report[metric]))
        if "id_macro_ap" in document:
            values.setdefault(("classifier", "id_macro_ap"), []).append(float(document["id_macro_ap"]))
    output = Path(args.output or "aggregate.csv")
    if output.suffix != ".csv":
        output = output / "aggregate.csv"
    _write_csv(output, ["method", "metric", "mean", "std", "n"],
               [[name, metric, float(np.mean(v)), float(np.std(v)), len(v)] for (name, metric), v in values.items()])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridood", description="Grid-detector OOD scoring on synthetic scenes")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="gridood.json", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Override a configuration key, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--output", help="Output directory (defaults derive from output_dir)")
    common.add_argument("--dataset-dir", help="Dataset written by 'gen'; generated in memory when absent")

    with_checkpoint = argparse.ArgumentParser(add_help=False)
    with_checkpoint.add_argument("--checkpoint", help=f"Checkpoint file (default <output_dir>/{CHECKPOINT_NAME})")

    commands.add_parser("gen", parents=[common], help="Generate the synthetic dataset").set_defaults(handler=cmd_gen)
    commands.add_parser("train", parents=[common], help="Train a network").set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", parents=[common, with_checkpoint], help="Score test splits")
    evaluate.add_argument("--methods", help="Semicolon-separated scoring methods (default eval.methods)")
    evaluate.set_defaults(handler=cmd_eval)

    commands.add_parser("sweep-p", parents=[common], help="Train one model per p triplet") \
        .set_defaults(handler=cmd_sweep_p)
    commands.add_parser("ablate", parents=[common, with_checkpoint], help="Evaluate the aggregation ablations") \
        .set_defaults(handler=cmd_ablate)

    heat = commands.add_parser("heatmap", parents=[common, with_checkpoint], help="Export confidence heatmaps")
    source = heat.add_mutually_exclusive_group()
    source.add_argument("--index", type=int, default=0, help="Scene index within --split")
    source.add_argument("--image", help="PPM image to score instead of a dataset scene")
    heat.add_argument("--split", choices=SPLITS, default="test_id")
    heat.set_defaults(handler=cmd_heatmap)

    aggregate = commands.add_parser("aggregate", help="Mean and std of metrics across eval reports")
    aggregate.add_argument("reports", nargs="+", help="report.json files")
    aggregate.add_argument("--output", help="Output CSV path or directory")
    aggregate.set_defaults(handler=cmd_aggregate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.handler(args)
    except (ConfigError, UsageError, CheckpointError) as e:
        logger.error(str(e))
        return 2
    except TrainingDivergedError as e:
        logger.error(str(e))
        return 3
    except GridOODException as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
