"""Consolidated plotting bundle built from a run directory"""

from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from storage import read_history, read_json, write_csv, write_json
from utils.errors import UsageError
from utils.logger import get_logger

logger = get_logger("Report")

BUNDLE_FORMAT = "polish-sim-report"
BUNDLE_VERSION = 1
SSOD_RUN_PREFIX = "ssod-"
HISTORY_FILE = "history.jsonl"
SUMMARY_FILE = "summary.json"
REPORT_DIR = "report"
QUALITY_LABELS = ("before", "after", "candidates_before", "candidates_after")

LOSS_COLUMNS = ["run", "iteration", "L_s", "L_u^c", "L_u^r", "L_pc", "L_pr", "L"]


class LossPoint(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    run: str
    iteration: int
    L_s: float
    L_u_c: float = Field(alias="L_u^c")
    L_u_r: float = Field(alias="L_u^r")
    L_pc: float
    L_pr: float
    L: float


class EvalPoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run: str
    iteration: int
    ap50: float
    ap50_95: float


class RunSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run: str
    variant: Dict[str, Any]
    seed: int
    iterations: int
    final_ap50: Optional[float] = None
    final_ap50_95: Optional[float] = None


class ReportBundle(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = BUNDLE_FORMAT
    version: int = BUNDLE_VERSION
    runs: List[RunSummary]
    loss_curves: List[LossPoint]
    eval_curves: List[EvalPoint] = Field(default_factory=list)
    pseudo_quality: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    deviation: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    mc_stats: List[Dict[str, float]] = Field(default_factory=list)


def build_bundle(run_dir: Path) -> ReportBundle:
    """
    Collect ssod histories and summaries plus any polishing and Monte Carlo outputs

    Raises:
        UsageError: no ssod run histories under run_dir, or a run without its summary
    """
    run_dirs = sorted(p.parent for p in run_dir.glob(f"{SSOD_RUN_PREFIX}*/{HISTORY_FILE}"))
    if not run_dirs:
        raise UsageError(f"no {SSOD_RUN_PREFIX}*/{HISTORY_FILE} under {run_dir}")

    runs, losses, evals = [], [], []
    for directory in run_dirs:
        name = directory.name
        if not (directory / SUMMARY_FILE).is_file():
            raise UsageError(f"run {name} has no {SUMMARY_FILE}; it did not finish")
        summary = read_json(directory / SUMMARY_FILE)
        final = summary.get("final_ap") or {}
        runs.append(
            RunSummary(
                run=name,
                variant=summary["variant"],
                seed=summary["seed"],
                iterations=summary["iterations"],
                final_ap50=final.get("ap50"),
                final_ap50_95=final.get("ap50_95"),
            )
        )
        for record in read_history(directory / HISTORY_FILE):
            losses.append(LossPoint.model_validate({"run": name, **{k: record[k] for k in LOSS_COLUMNS[1:]}}))
            if "eval" in record:
                evals.append(
                    EvalPoint(
                        run=name, iteration=record["iteration"], ap50=record["eval"]["ap50"], ap50_95=record["eval"]["ap50_95"]
                    )
                )

    bundle = ReportBundle(runs=runs, loss_curves=losses, eval_curves=evals)
    polish_dir = run_dir / "polish"
    for label in QUALITY_LABELS:
        path = polish_dir / f"quality_{label}.json"
        if path.exists():
            bundle.pseudo_quality[label] = read_json(path)
    if (polish_dir / "deviation.json").exists():
        bundle.deviation = read_json(polish_dir / "deviation.json")
    if (run_dir / "mc_stats.json").exists():
        bundle.mc_stats = read_json(run_dir / "mc_stats.json")["rows"]
    return bundle


def write_bundle(bundle: ReportBundle, out_dir: Path) -> Path:
    """bundle.json, its JSON schema and flat CSVs; rewriting gives identical files"""
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "bundle.json", bundle.model_dump(mode="json", by_alias=True))
    write_json(out_dir / "schema.json", ReportBundle.model_json_schema(by_alias=True))
    write_csv(
        out_dir / "loss_curves.csv",
        [p.model_dump(by_alias=True) for p in bundle.loss_curves],
        columns=LOSS_COLUMNS,
    )
    write_csv(
        out_dir / "eval_curves.csv",
        [p.model_dump() for p in bundle.eval_curves],
        columns=["run", "iteration", "ap50", "ap50_95"],
    )
    write_csv(
        out_dir / "runs.csv",
        [r.model_dump(exclude={"variant"}) for r in bundle.runs],
        columns=["run", "seed", "iterations", "final_ap50", "final_ap50_95"],
    )
    logger.info(f"Wrote report bundle with {len(bundle.runs)} runs to {out_dir}")
    return out_dir
