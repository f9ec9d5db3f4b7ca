"""Command-line experiment runner for the pseudo-label polishing simulator"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

from pydantic import ValidationError

from config.logging_config import setup_logging
from config.settings import RunConfig, load_environment, worker_threads
from metrics import deviation_stats, deviation_stats_arrays, matched_pairs, pseudo_quality
from polish import DualPolishLearner, fit_polishers, polish_oracle_detections
from report import HISTORY_FILE, REPORT_DIR, SSOD_RUN_PREFIX, SUMMARY_FILE, build_bundle, write_bundle
from sample import (
    UNIT_BOX,
    Rng,
    monte_carlo_category_stats,
    monte_carlo_deviation_stats,
    monte_carlo_iou_stats,
    perturb_boxes,
)
from ssod import Variant, run_ssod
from storage import HistoryWriter, load_split, save_net, save_polishers, save_split, write_csv, write_json
from scene import make_split
from utils.errors import ConfigError, DivergenceError, StorageError, UsageError
from utils.logger import get_logger

logger = get_logger("CLI")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

STREAM_POLISH_TRAIN = 20
SWEEP_PARAMS = ("theta_reg", "gamma", "eta")


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def cmd_mc_stats(cfg: RunConfig, args: argparse.Namespace) -> int:
    """IoU and corner-deviation statistics of box perturbation per theta"""
    thetas = args.theta if args.theta else cfg.mc_stats.thetas
    n = args.n if args.n is not None else cfg.mc_stats.n
    if n < 1:
        raise ConfigError("N must be at least 1")
    for theta in thetas:
        if theta < 0:
            raise ConfigError(f"theta must be non-negative, got {theta}")
    threads = worker_threads()

    rows = []
    for theta in thetas:
        iou_stats = monte_carlo_iou_stats(theta, n, cfg.seed, threads=threads)
        dev = monte_carlo_deviation_stats(theta, n, cfg.seed, threads=threads)
        row = {"theta": theta, "mean_iou": iou_stats.mean, "std_iou": iou_stats.std}
        for coord, stats in dev.items():
            row[f"dev_{coord}_mean"] = stats.mean
            row[f"dev_{coord}_std"] = stats.std
        rows.append(row)
        logger.info(f"mean IoU {iou_stats.mean:.4f} std {iou_stats.std:.4f}", extra={"theta": theta, "seed": cfg.seed})

    category = monte_carlo_category_stats(cfg.sample, n, cfg.seed, threads=threads)
    out = _out(cfg)
    write_csv(out / "mc_stats.csv", rows)
    write_json(
        out / "mc_stats.json",
        {"seed": cfg.seed, "n": n, "rows": rows, "category_samples": category.to_dict()},
    )
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_make_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = make_split(cfg.data.n_annotated, cfg.data.n_unannotated, cfg.scene, cfg.oracle, cfg.seed)
    path = save_split(split, cfg.split_path())
    n_objects = sum(len(s.objects) for s in split.annotated)
    print(
        f"annotated={len(split.annotated)} unannotated={split.n_unannotated} "
        f"annotated_objects={n_objects} path={path}"
    )
    return EXIT_OK


def cmd_train_polish(cfg: RunConfig, args: argparse.Namespace) -> int:
    """
    Train both polishers on annotated scenes, then compare oracle teacher
    labels of unannotated scenes before and after polishing
    """
    split = load_split(cfg.split_path())
    polish_cfg = cfg.polish.model_copy(update={"box_loss": args.loss})
    learner = DualPolishLearner(
        polish_cfg,
        cfg.sample,
        cfg.features.channels,
        split.num_classes,
        Rng(cfg.seed).child(STREAM_POLISH_TRAIN).child(0),
        train_category=not args.no_cat_polish,
        train_box=not args.no_box_polish,
    )
    out = _out(cfg) / "polish"
    with HistoryWriter(out / HISTORY_FILE) as history:
        fit_polishers(
            learner,
            split,
            cfg.features,
            cfg.proposals,
            cfg.polish_train.iterations,
            Rng(cfg.seed).child(STREAM_POLISH_TRAIN).child(1),
            on_step=lambda it, pc, pr: history.write({"iteration": it, "L_pc": pc, "L_pr": pr}),
        )
    save_polishers(learner.category, learner.box, learner.channels, out / "polishers")

    # evaluation against sealed ground truth from here on
    views = split.unlabeled_views()[: cfg.polish_train.eval_scenes]
    cat_p = learner.category if learner.train_category else None
    box_p = learner.box if learner.train_box else None
    before, after = polish_oracle_detections(split, [v.scene_id for v in views], cat_p, box_p, cfg.features)
    gt = split.sealed_ground_truth()
    # candidates: labels the loop would consider, teacher confidence above eta
    candidates = [k for k, d in enumerate(before) if d.confidence > cfg.ssod.selection.eta]
    reports = {
        "before": pseudo_quality(before, gt),
        "after": pseudo_quality(after, gt),
        "candidates_before": pseudo_quality([before[k] for k in candidates], gt),
        "candidates_after": pseudo_quality([after[k] for k in candidates], gt),
    }
    for label, report in reports.items():
        write_json(out / f"quality_{label}.json", report.to_dict())
    write_csv(out / "quality.csv", [row for label, r in reports.items() for row in r.csv_rows(label)])

    deviation = {}
    real_pairs = matched_pairs(before, gt)
    if real_pairs:
        deviation["oracle"] = deviation_stats(real_pairs)
    polished_pairs = matched_pairs(after, gt)
    if polished_pairs:
        deviation["polished"] = deviation_stats(polished_pairs)
    n_sim = cfg.mc_stats.n
    simulated = perturb_boxes(UNIT_BOX, cfg.sample.theta_reg, n_sim, Rng(cfg.seed).child(STREAM_POLISH_TRAIN).child(2))
    deviation["simulated"] = deviation_stats_arrays(simulated, UNIT_BOX.to_array()[None, :].repeat(n_sim, axis=0))
    write_json(out / "deviation.json", {k: v.to_dict() for k, v in deviation.items()})
    write_csv(out / "deviation.csv", [row for label, d in deviation.items() for row in d.csv_rows(label)])

    logger.info(
        f"Pseudo label mean IoU {reports['before'].mean_iou:.4f} -> {reports['after'].mean_iou:.4f}, "
        f"candidate category accuracy {reports['candidates_before'].category_accuracy:.4f} -> "
        f"{reports['candidates_after'].category_accuracy:.4f}",
        extra={"stage": "polish", "seed": cfg.seed},
    )
    print(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True))
    return EXIT_OK


def variant_from_args(args: argparse.Namespace) -> Variant:
    return Variant(
        no_cat_polish=args.no_cat_polish,
        no_box_polish=args.no_box_polish,
        no_disentangle=getattr(args, "no_disentangle", False),
        loss=args.loss,
    )


def run_variant(cfg: RunConfig, variant: Variant, run_dir: Path) -> Dict[str, object]:
    """One run_ssod invocation with its history, teacher checkpoint and summary written to run_dir"""
    split = load_split(cfg.split_path())
    with HistoryWriter(run_dir / HISTORY_FILE) as history:
        result = run_ssod(
            split,
            cfg.ssod,
            cfg.polish,
            cfg.sample,
            cfg.features,
            cfg.proposals,
            cfg.metrics,
            cfg.seed,
            variant=variant,
            on_record=history.write,
        )
    save_net(result.teacher.cls_head, run_dir / "teacher_cls_head.json")
    save_net(result.teacher.reg_head, run_dir / "teacher_reg_head.json")

    polished_mean_iou = None
    if result.learner is not None and cfg.metrics.eval_scenes:
        views = split.unlabeled_views()[: cfg.metrics.eval_scenes]
        box_p = result.learner.box if result.learner.train_box else None
        _, after = polish_oracle_detections(split, [v.scene_id for v in views], None, box_p, cfg.features)
        polished_mean_iou = pseudo_quality(after, split.sealed_ground_truth()).mean_iou

    summary = {
        "variant": variant.model_dump(),
        "seed": cfg.seed,
        "iterations": cfg.ssod.iterations,
        "final_ap": result.final_ap.to_dict() if result.final_ap is not None else None,
        "polished_mean_iou": polished_mean_iou,
    }
    write_json(run_dir / SUMMARY_FILE, summary)
    return summary


def cmd_run_ssod(cfg: RunConfig, args: argparse.Namespace) -> int:
    variant = variant_from_args(args)
    run_dir = _out(cfg) / f"{SSOD_RUN_PREFIX}{variant.slug()}"
    summary = run_variant(cfg, variant, run_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _with_sweep_value(cfg: RunConfig, param: str, value: float) -> RunConfig:
    data = cfg.model_dump()
    if param == "theta_reg":
        data["sample"]["theta_reg"] = value
    elif param == "gamma":
        data["polish"]["context"]["gamma"] = value
    else:
        data["ssod"]["selection"]["eta"] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid {param}={value:g}: {e}") from e


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    """The full method over a list of values of one hyper-parameter"""
    variant = variant_from_args(args)
    rows = []
    for value in args.values:
        swept = _with_sweep_value(cfg, args.param, value)
        run_dir = _out(cfg) / f"sweep-{args.param}" / f"{args.param}={value:g}"
        logger.info(f"Sweep {args.param}={value:g}", extra={"stage": "sweep", "seed": cfg.seed})
        summary = run_variant(swept, variant, run_dir)
        final = summary["final_ap"] or {}
        rows.append(
            {
                "param": args.param,
                "value": value,
                "ap50": final.get("ap50"),
                "ap50_95": final.get("ap50_95"),
                "polished_mean_iou": summary["polished_mean_iou"],
            }
        )
    write_csv(_out(cfg) / f"sweep-{args.param}.csv", rows)
    write_json(_out(cfg) / f"sweep-{args.param}.json", {"seed": cfg.seed, "rows": rows})
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else _out(cfg)
    if not run_dir.is_dir():
        raise UsageError(f"run directory {run_dir} does not exist")
    bundle = build_bundle(run_dir)
    write_bundle(bundle, run_dir / REPORT_DIR)
    print(f"runs={len(bundle.runs)} loss_points={len(bundle.loss_curves)} eval_points={len(bundle.eval_curves)}")
    return EXIT_OK


def _add_polish_flags(p: argparse.ArgumentParser, disentangle: bool):
    p.add_argument("--no-cat-polish", action="store_true", help="Keep the teacher's categories")
    p.add_argument("--no-box-polish", action="store_true", help="Keep the teacher's boxes")
    if disentangle:
        p.add_argument("--no-disentangle", action="store_true", help="Use polished labels consecutively")
    p.add_argument("--loss", choices=["giou", "l1"], default="giou", help="Box polisher training loss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polish-sim", description="Dual pseudo-label polishing simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="Overrides the config seed")
    common.add_argument("--out", help="Overrides the config output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mc-stats", parents=[common], help="Monte Carlo IoU and deviation statistics")
    p.add_argument("--theta", type=float, nargs="+", help="Noise scales (default from config)")
    p.add_argument("--n", type=int, help="Draws per theta (default from config)")
    p.set_defaults(handler=cmd_mc_stats)

    p = sub.add_parser("make-data", parents=[common], help="Generate and save a synthetic split")
    p.set_defaults(handler=cmd_make_data)

    p = sub.add_parser("train-polish", parents=[common], help="Train polishers and report pseudo label quality")
    _add_polish_flags(p, disentangle=False)
    p.set_defaults(handler=cmd_train_polish)

    p = sub.add_parser("run-ssod", parents=[common], help="Teacher-student training with polished pseudo labels")
    _add_polish_flags(p, disentangle=True)
    p.set_defaults(handler=cmd_run_ssod)

    p = sub.add_parser("sweep", parents=[common], help="run-ssod over values of one hyper-parameter")
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)
    _add_polish_flags(p, disentangle=True)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="Consolidate a run directory into a plotting bundle")
    p.add_argument("--run-dir", help="Run directory (default: output directory)")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    load_environment()
    try:
        cfg = RunConfig.load(args.config).with_overrides(seed=args.seed, out_dir=args.out)
        setup_logging()
        logger.info(f"Running {args.command}", extra={"seed": cfg.seed, "run": cfg.out_dir})
        return args.handler(cfg, args)
    except (ConfigError, UsageError) as e:
        logger.error(f"{args.command}: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StorageError, OSError) as e:
        logger.error(f"{args.command}: {str(e)}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as e:
        logger.error(f"{args.command}: {str(e)}", extra={"iteration": e.iteration})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
