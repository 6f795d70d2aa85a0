"""
Command-line entry point.

    python main.py gen --count 100 --seed 0 --out runs/data
    python main.py train detailer --data runs/data --iters 2000
    python main.py eval --checkpoint runs/train/checkpoint --data runs/val --composite
    python main.py sweep --sizes 10,25,50 --seeds 0,1,2
    python main.py distill --teacher runs/train/checkpoint --data runs/data --val runs/val

Every command writes run_manifest.json and run.log in its output directory.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import evaluation
import experiments
import training
from checkpoint import load_checkpoint, save_checkpoint
from errors import CheckpointError, ConfigError, DataError, DetailerError
from log_util import configure_logging, release_logging
from mini_psp import InjectionPoint, NetworkConfig
from synth_data import CoarsenSpec, SceneSpec, generate_dataset, read_dataset, read_manifest, write_dataset, \
    write_mask_dir

logger = logging.getLogger("main")

OUTPUT_ROOT_ENV = "DETAILER_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
RUN_MANIFEST = "run_manifest.json"
RUN_LOG = "run.log"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class DetailerArgumentParser(argparse.ArgumentParser):
    """ Reports usage errors with exit code 1. """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def str_list(text: str) -> tuple[str, ...]:
    values = tuple(v.strip() for v in text.split(",") if v.strip())
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def output_dir(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / args.command


def add_network_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--injection", choices=[i.value for i in InjectionPoint], default=None,
                   help="coarse injection point (detailer default after-final, classifier none)")
    g.add_argument("--embed-width", type=int, default=64)
    g.add_argument("--encoder-channels", type=int_list, default=(16, 32, 64))
    g.add_argument("--ppm-bins", type=int_list, default=(1, 2, 3, 6))
    g.add_argument("--downsample", type=int, default=4, help="encoder output stride (power of two)")
    g.add_argument("--ppm-channels", type=int, default=16)
    g.add_argument("--final-channels", type=int, default=64)


def add_train_args(p: argparse.ArgumentParser, iters: int = 2000) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    g.add_argument("--power", type=float, default=0.9, help="poly decay power")
    g.add_argument("--momentum", type=float, default=0.99)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--iters", type=int, default=iters)
    g.add_argument("--crop", type=int, default=None, help="training crop (default: canvas size)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eval-every", type=int, default=200, help="0 disables periodic validation")
    g.add_argument("--grad-clip", type=float, default=5.0, help="global gradient norm bound, 0 disables")


def network_config(args, num_classes: int, detailer: bool) -> NetworkConfig:
    injection = args.injection
    if injection is None:
        injection = InjectionPoint.AFTER_FINAL if detailer else InjectionPoint.NONE
    return NetworkConfig(
        num_classes=num_classes,
        injection=injection,
        embed_width=args.embed_width,
        encoder_channels=args.encoder_channels,
        ppm_bins=args.ppm_bins,
        encoder_downsample=args.downsample,
        ppm_channels=args.ppm_channels,
        final_channels=args.final_channels,
        seed=args.seed,
    )


def train_config(args, crop: int) -> training.TrainConfig:
    return training.TrainConfig(
        base_lr=args.lr,
        poly_power=args.power,
        momentum=args.momentum,
        batch_size=args.batch,
        total_iters=args.iters,
        crop=crop if args.crop is None else args.crop,
        seed=args.seed,
        eval_every=args.eval_every,
        grad_clip=args.grad_clip or None,
    )


def load_split(directory):
    """ (triplets, num_classes) of a dataset directory. """
    manifest = read_manifest(directory)
    triplets = read_dataset(directory)
    if not triplets:
        raise DataError(f"dataset {directory} holds no triplets")
    return triplets, manifest["num_classes"]


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_gen(args, out: Path) -> None:
    scene = SceneSpec(num_classes=args.classes, height=args.height, width=args.width,
                      min_shapes=args.min_shapes, max_shapes=args.max_shapes,
                      noise_sigma=args.noise, seed=args.seed)
    coarse_spec = CoarsenSpec(erosion_radius=args.erosion, drop_prob=args.drop_prob, bleed_prob=args.bleed_prob,
                              bleed_width=args.bleed_width, precision_target=args.precision_target,
                              seed=args.seed)
    triplets = generate_dataset(scene, coarse_spec, args.count, args.seed)
    baseline = evaluation.coarse_baseline(triplets, args.classes)
    report = {"count": args.count, "coverage": baseline.coverage, "precision": baseline.precision,
              "coarse_miou": baseline.miou}
    write_dataset(out, triplets, args.classes, scene, coarse_spec, report)
    (out / "generation_report.txt").write_text("".join(f"{k} = {v!r}\n" for k, v in report.items()))
    logger.info("coverage %.4f precision %.4f coarse mIoU %.4f", baseline.coverage, baseline.precision, baseline.miou)


def cmd_train(args, out: Path) -> None:
    dataset, num_classes = load_split(args.data)
    val_set = None if args.val is None else load_split(args.val)[0]
    detailer = training.ModelKind(args.kind) is training.ModelKind.DETAILER
    net_cfg = network_config(args, num_classes, detailer)
    cfg = train_config(args, dataset[0].height)
    state, rows = training.train(args.kind, dataset, cfg, net_cfg, val_set=val_set, out_dir=out)
    logger.info("finished %d iterations, final loss %.5f", state.iteration, rows[-1].loss)


def cmd_eval(args, out: Path) -> None:
    dataset, num_classes = load_split(args.data)
    if args.baseline:
        report = evaluation.coarse_baseline(dataset, num_classes)
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint unless --baseline is given")
        network = load_checkpoint(args.checkpoint)
        if network.cfg.num_classes != num_classes:
            raise CheckpointError(
                f"checkpoint has {network.cfg.num_classes} classes but dataset {args.data} has {num_classes}"
            )
        report = evaluation.evaluate_model(network, dataset,
                                           use_coarse_input=network.cfg.is_detailer or args.composite,
                                           composite_mode=args.composite)
    (out / "report.txt").write_text(report.to_record())
    write_csv(out / "report.csv", evaluation.EvalReport.csv_header(num_classes), [report.csv_row()])
    logger.info("mIoU %.4f", report.miou)
    print(report.to_record(), end="")


def cmd_sweep(args, out: Path) -> None:
    # --injection picks the detailer location of the tables that do not vary it
    default_injection = args.injection or InjectionPoint.AFTER_FINAL.value
    net_cfg = replace(network_config(args, args.classes, detailer=False), injection=InjectionPoint.NONE)
    train_cfg = train_config(args, crop=max(args.resolutions))
    plan = experiments.ExperimentPlan(
        sizes=args.sizes,
        resolutions=args.resolutions,
        injections=args.injections,
        embed_widths=args.embed_widths,
        seeds=args.seeds,
        out_dir=str(out),
        tables=args.tables,
        val_size=args.val_size,
        composite_size=args.composite_size,
        ablation_size=args.ablation_size,
        crop=args.crop,
        default_injection=default_injection,
        train=train_cfg,
        network=net_cfg,
        scene=SceneSpec(num_classes=args.classes),
    )
    written = experiments.run_sweep(plan)
    for name, path in written.items():
        print(f"{name}: {path}")


def cmd_distill(args, out: Path) -> None:
    teacher = load_checkpoint(args.teacher)
    if not teacher.cfg.is_detailer:
        raise ConfigError(f"{args.teacher} holds a classifier; the distillation teacher must be a detailer")
    dataset, num_classes = load_split(args.data)
    if num_classes != teacher.cfg.num_classes:
        raise CheckpointError(f"teacher has {teacher.cfg.num_classes} classes but dataset has {num_classes}")
    val_set = load_split(args.val)[0]
    student_cfg = network_config(args, num_classes, detailer=False)
    cfg = train_config(args, dataset[0].height)

    result = evaluation.distill_comparison(teacher, dataset, student_cfg, cfg, val_set)
    ids = [entry["id"] for entry in read_manifest(args.data)["triplets"]]
    write_mask_dir(out / "detailed_masks", ids, result.detailed)
    save_checkpoint(result.student, out / "student")
    save_checkpoint(result.coarse_student, out / "coarse_student")
    lines = [
        f"detailed_student_miou = {result.report.miou!r}",
        f"coarse_student_miou = {result.coarse_report.miou!r}",
        f"difference = {result.difference!r}",
    ]
    (out / "distill_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    parser = DetailerArgumentParser(
        prog="main.py",
        description="Coarse-mask detailer experiments on synthetic scenes.",
        epilog=f"Outputs default to ${OUTPUT_ROOT_ENV}/<command> ({DEFAULT_OUTPUT_ROOT}/<command> when unset).",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=DetailerArgumentParser)

    def command(name, func, help, **kwargs):
        p = sub.add_parser(name, help=help, description=help, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="count", default=0)
        p.add_argument("-q", "--quiet", action="store_true")
        return p

    p = command("gen", cmd_gen, "generate a synthetic dataset with coarse masks")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--min-shapes", type=int, default=3)
    p.add_argument("--max-shapes", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.08, help="gaussian pixel noise sigma")
    p.add_argument("--erosion", type=int, default=2, help="coarse erosion radius")
    p.add_argument("--drop-prob", type=float, default=0.15)
    p.add_argument("--bleed-prob", type=float, default=0.2)
    p.add_argument("--bleed-width", type=int, default=1)
    p.add_argument("--precision-target", type=float, default=0.97)

    p = command("train", cmd_train, "train a classifier or a detailer")
    p.add_argument("kind", choices=[k.value for k in training.ModelKind])
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", default=None, help="validation dataset directory")
    add_train_args(p)
    add_network_args(p)

    p = command("eval", cmd_eval, "score a checkpoint (or the coarse masks) against fine masks")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--composite", action="store_true", help="keep coarse labels, fill only ignore pixels")
    p.add_argument("--baseline", action="store_true", help="score the coarse masks themselves")

    p = command("sweep", cmd_sweep, "run a resumable experiment sweep and write table CSVs",
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="table columns:\n" + experiments.describe_tables())
    p.add_argument("--sizes", type=int_list, default=(10, 25, 50))
    p.add_argument("--resolutions", type=int_list, default=(48, 96))
    p.add_argument("--injections", type=str_list, default=("before-pool", "after-pool", "after-final"))
    p.add_argument("--embed-widths", type=int_list, default=(16, 64, 128))
    p.add_argument("--seeds", type=int_list, default=(0, 1, 2))
    p.add_argument("--tables", type=str_list, default=tuple(experiments.TABLES))
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--val-size", type=int, default=50)
    p.add_argument("--composite-size", type=int, default=None)
    p.add_argument("--ablation-size", type=int, default=None)
    add_train_args(p, iters=600)
    add_network_args(p)
    p.set_defaults(eval_every=0)

    p = command("distill", cmd_distill, "train a classifier on a detailer's masks and compare")
    p.add_argument("--teacher", required=True, help="detailer checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    add_train_args(p)
    add_network_args(p)
    return parser


def write_run_manifest(args, out: Path) -> None:
    flags = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}
    seeds = list(flags.get("seeds") or [flags.get("seed", 0)])
    manifest = {"command": args.command, "flags": flags, "seeds": seeds, "argv": sys.argv[1:]}
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = output_dir(args)
    handlers = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        handlers = configure_logging(-1 if args.quiet else args.verbose, out / RUN_LOG)
        write_run_manifest(args, out)
        args.func(args, out)
    except (UsageError, ConfigError, CheckpointError) as err:
        logger.error("%s", err)
        return EXIT_USAGE
    except (DetailerError, OSError) as err:
        logger.error("%s", err)
        return EXIT_RUNTIME
    finally:
        release_logging(handlers)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
