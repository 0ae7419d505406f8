#!/usr/bin/env python3
"""
CCSL Command Line
Generate synthetic panels, fit causal clusterings, evaluate fits against
ground truth, run experiment grids and ingest delimited tables.

Usage:
    python ccsl_cli.py generate --config configs/default.toml --out runs/panel --seed 7
    python ccsl_cli.py fit runs/panel --config configs/default.toml --out runs/fit
    python ccsl_cli.py evaluate runs/fit/fit_result.json runs/panel/ground_truth.json --out runs/eval.json
    python ccsl_cli.py sweep --config configs/sweep_variables.toml --out runs/sweep --workers 4
    python ccsl_cli.py ingest sessions.csv --id-column subject --out runs/sessions
"""

import argparse
import asyncio
import csv
import hashlib
import itertools
import json
import logging
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from ccsl_core import (FORMAT_VERSION, CCSLError, ConfigError, FitConfig, FitResult, IngestionError,
                       Panel, PanelValidationError, SubjectSeries, validate_panel)
from ccsl_inference import fit
from ccsl_metrics import EvalReport, evaluate
from ccsl_synthgen import LABEL_MODES, NOISE_FAMILIES, GroundTruth, gen_dataset

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.1"

MANIFEST_FILE = "manifest.json"
GROUND_TRUTH_FILE = "ground_truth.json"
FIT_RESULT_FILE = "fit_result.json"
EVAL_FILE = "eval.json"
SWEEP_FILE = "sweep_results.csv"
TIMING_FILE = "timing.json"

SWEEP_AXES = ("q", "n", "m", "T")
SWEEP_COLUMNS = ("q", "n", "m", "T", "realization", "ari", "auc_instantaneous", "auc_lagged",
                 "auc_combined", "q_estimated", "sweeps_run", "converged", "wall_seconds", "error")


class GenerateConfig(BaseModel):
    """Synthetic panel parameters."""

    q: int = Field(2, ge=1, description="Number of true groups")
    n: int = Field(30, ge=1, description="Number of subjects")
    m: int = Field(6, ge=1, description="Variables per subject")
    T: int = Field(60, ge=1, description="Time steps per subject")
    p_l: int = Field(1, ge=1, description="Maximum lag")
    noise_components: int = Field(2, ge=1)
    edge_prob: float = Field(0.3, ge=0, le=1)
    burn_in: int = Field(100, ge=0)
    label_mode: str = "balanced"
    crp_alpha: float = Field(1.0, gt=0)
    noise_family: str = "mixture"
    seed: Optional[int] = Field(None, ge=0)

    @field_validator("label_mode")
    @classmethod
    def validate_label_mode(cls, v):
        if v not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        return v

    @field_validator("noise_family")
    @classmethod
    def validate_noise_family(cls, v):
        if v not in NOISE_FAMILIES:
            raise ValueError(f"noise_family must be one of {NOISE_FAMILIES}")
        return v

    @model_validator(mode="after")
    def groups_fit_subjects(self) -> "GenerateConfig":
        if self.q > self.n:
            raise ValueError(f"q={self.q} groups need at least as many subjects, got n={self.n}")
        return self


class SweepConfig(BaseModel):
    """Experiment grid: every combination of the listed axis values, repeated."""

    axis_q: Optional[List[int]] = None
    axis_n: Optional[List[int]] = None
    axis_m: Optional[List[int]] = None
    axis_T: Optional[List[int]] = None
    realizations: int = Field(10, ge=1)

    @field_validator("axis_q", "axis_n", "axis_m", "axis_T")
    @classmethod
    def validate_axis(cls, v):
        if v is not None:
            if not v:
                raise ValueError("axis must list at least one value")
            if any(value < 1 for value in v):
                raise ValueError("axis values must be positive")
        return v

    @model_validator(mode="after")
    def grid_not_empty(self) -> "SweepConfig":
        if not any(self.axis(name) for name in SWEEP_AXES):
            raise ValueError("sweep grid is empty: set at least one of " + ", ".join(f"axis_{a}" for a in SWEEP_AXES))
        return self

    def axis(self, name: str) -> Optional[List[int]]:
        return getattr(self, f"axis_{name}")

    def cells(self, base: GenerateConfig) -> List[Dict[str, int]]:
        values = [self.axis(name) or [getattr(base, name)] for name in SWEEP_AXES]
        return [dict(zip(SWEEP_AXES, combo)) for combo in itertools.product(*values)]


class RunManifest(BaseModel):
    """Everything needed to re-run a fit bit for bit."""

    format_version: int = FORMAT_VERSION
    tool_version: str = TOOL_VERSION
    seed: int
    config: Dict[str, Any]
    input_digests: Dict[str, str]
    outputs: List[str]


CONFIG_MODELS: Tuple[Type[BaseModel], ...] = (FitConfig, GenerateConfig, SweepConfig)
KNOWN_KEYS = frozenset(key for model in CONFIG_MODELS for key in model.model_fields)


def load_config(path: Optional[str]) -> Dict[str, Any]:
    """Read a flat TOML file of key = value pairs; unknown keys are rejected."""
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        with open(config_path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Cannot parse {config_path}: {e}") from e

    nested = [key for key, value in raw.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"Config must be flat, found tables: {', '.join(nested)}")
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"Unknown config keys in {config_path}: {', '.join(unknown)}")
    return raw


def build_config(model: Type[BaseModel], raw: Dict[str, Any]):
    """Validate the keys of ``raw`` that belong to ``model``; errors name every bad field."""
    values = {key: value for key, value in raw.items() if key in model.model_fields}
    try:
        return model.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or model.__name__}: {err['msg']}"
                             for err in e.errors())
        raise ConfigError(f"Invalid configuration: {problems}") from e


def resolve_seed(flag: Optional[int], configured: Optional[int]) -> int:
    """--seed beats the config file; with neither, draw 64 bits of entropy."""
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    seed = int(np.random.SeedSequence().entropy) & (2 ** 64 - 1)
    logger.info(f"No seed given, using {seed}")
    return seed


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise IngestionError(f"File not found: {path}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise IngestionError(f"Invalid JSON in {path} at line {e.lineno}, column {e.colno}: {e.msg}",
                             path=str(path), line=e.lineno, column=e.colno) from e


def write_timing(out_dir: Path, started: datetime, wall_seconds: float) -> None:
    write_json(out_dir / TIMING_FILE, {"started": started.isoformat(timespec="seconds"),
                                       "finished": datetime.now().isoformat(timespec="seconds"),
                                       "wall_seconds": wall_seconds})


def prepare_output_dir(path: str) -> Path:
    out_dir = Path(path)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CCSLError(f"Cannot create output directory {out_dir}: {e}") from e
    return out_dir


def subject_filename(subject_id: str) -> str:
    return f"subject_{subject_id}.csv"


def write_panel(panel: Panel, out_dir: Path, seed: Optional[int] = None,
                config: Optional[Dict[str, Any]] = None) -> List[str]:
    """Write one CSV per subject plus manifest.json; returns the file names written."""
    header = [f"x{j}" for j in range(panel.m)]
    files = []
    for subject in panel.subjects:
        name = subject_filename(subject.id)
        with open(out_dir / name, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows([repr(float(v)) for v in row] for row in subject.data)
        files.append(name)

    write_json(out_dir / MANIFEST_FILE, {
        "format_version": FORMAT_VERSION,
        "m": panel.m,
        "seed": seed,
        "config": config,
        "subjects": [{"id": s.id, "T": s.T, "file": name} for s, name in zip(panel.subjects, files)],
    })
    return [MANIFEST_FILE] + files


def parse_cell(value: str, path: Path, line: int, column: int) -> float:
    try:
        return float(value)
    except ValueError as e:
        raise IngestionError(f"{path}: non-numeric value {value!r} at line {line}, column {column}",
                             path=str(path), line=line, column=column) from e


def read_subject_csv(path: Path, subject_id: str, m: int) -> SubjectSeries:
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError as e:
        raise IngestionError(f"Subject {subject_id}: file not found: {path}", path=str(path)) from e

    if not rows:
        raise IngestionError(f"Subject {subject_id}: {path} is empty", path=str(path), line=1)
    if len(rows[0]) != m:
        raise IngestionError(f"Subject {subject_id}: {path} header has {len(rows[0])} columns, expected {m}",
                             path=str(path), line=1)
    data = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != m:
            raise IngestionError(f"Subject {subject_id}: {path} line {line} has {len(row)} columns, expected {m}",
                                 path=str(path), line=line)
        data.append([parse_cell(cell, path, line, column) for column, cell in enumerate(row, start=1)])
    return SubjectSeries(id=subject_id, data=np.array(data, dtype=float).reshape(len(data), m))


def read_panel(panel_dir: Path, p_l: Optional[int] = None) -> Panel:
    """Load and validate a panel directory written by write_panel."""
    manifest = read_json(panel_dir / MANIFEST_FILE)
    m = manifest["m"]
    subjects = [read_subject_csv(panel_dir / entry["file"], entry["id"], m) for entry in manifest["subjects"]]
    panel = Panel(subjects=tuple(subjects), m=m)
    try:
        validate_panel(panel, p_l)
    except PanelValidationError as e:
        raise IngestionError(f"Panel {panel_dir} is invalid (subject {e.subject_id}): {e}",
                             path=str(panel_dir)) from e
    return panel


def panel_digests(panel_dir: Path) -> Dict[str, str]:
    manifest = read_json(panel_dir / MANIFEST_FILE)
    names = [MANIFEST_FILE] + [entry["file"] for entry in manifest["subjects"]]
    return {name: hashlib.sha256((panel_dir / name).read_bytes()).hexdigest() for name in names}


def cmd_generate(config_path: Optional[str], out: str, seed: Optional[int] = None) -> Tuple[Panel, GroundTruth]:
    """Simulate a panel and write it with its ground truth."""
    started, clock = datetime.now(), time.perf_counter()
    config = build_config(GenerateConfig, load_config(config_path))
    seed = resolve_seed(seed, config.seed)
    config = config.model_copy(update={"seed": seed})

    panel, truth = gen_dataset(config.q, config.n, config.m, config.T, config.p_l, config.noise_components,
                               np.random.default_rng(seed), edge_prob=config.edge_prob, burn_in=config.burn_in,
                               label_mode=config.label_mode, crp_alpha=config.crp_alpha,
                               noise_family=config.noise_family)

    out_dir = prepare_output_dir(out)
    write_panel(panel, out_dir, seed=seed, config=config.model_dump())
    write_json(out_dir / GROUND_TRUTH_FILE, {"format_version": FORMAT_VERSION, **truth.to_dict()})
    write_timing(out_dir, started, time.perf_counter() - clock)

    print("=" * 60)
    print(f"Generated panel: {panel.n} subjects, {panel.m} variables, {truth.q} groups")
    print(f"   Seed: {seed}")
    print(f"   Output: {out_dir}")
    return panel, truth


def cmd_fit(panel_dir: str, config_path: Optional[str], out: str, seed: Optional[int] = None) -> FitResult:
    """Fit a panel directory and write fit_result.json."""
    started, clock = datetime.now(), time.perf_counter()
    config = build_config(FitConfig, load_config(config_path))
    seed = resolve_seed(seed, config.seed)
    config = config.model_copy(update={"seed": seed})

    source = Path(panel_dir)
    panel = read_panel(source, config.p_l)
    digests = panel_digests(source)

    result = fit(panel, config, np.random.default_rng(seed))

    out_dir = prepare_output_dir(out)
    manifest = RunManifest(seed=seed, config=config.model_dump(), input_digests=digests,
                           outputs=[FIT_RESULT_FILE])
    write_json(out_dir / FIT_RESULT_FILE, {
        "format_version": FORMAT_VERSION,
        "subject_ids": panel.ids,
        "assignments": {sid: c for sid, c in zip(panel.ids, result.state.assignments)},
        "q_estimated": result.q,
        "result": result.to_dict(),
        "manifest": manifest.model_dump(),
    })
    write_timing(out_dir, started, time.perf_counter() - clock)

    print("=" * 60)
    print(f"Fitted {panel.n} subjects into {result.q} clusters")
    print(f"   Sweeps: {result.sweeps_run} ({'converged' if result.converged else 'not converged'})")
    print(f"   Output: {out_dir / FIT_RESULT_FILE}")
    return result


def load_fit(path: Path) -> Tuple[List[str], FitResult]:
    document = read_json(path)
    try:
        return document["subject_ids"], FitResult.from_dict(document["result"])
    except (KeyError, TypeError, ValueError) as e:
        raise IngestionError(f"Malformed fit result {path}: {e!r}", path=str(path)) from e


def load_ground_truth(path: Path) -> GroundTruth:
    document = read_json(path)
    try:
        return GroundTruth.from_dict(document)
    except (KeyError, TypeError, ValueError) as e:
        raise IngestionError(f"Malformed ground truth {path}: {e!r}", path=str(path)) from e


def cmd_evaluate(fit_path: str, truth_path: str, out: str, config_path: Optional[str] = None,
                 seed: Optional[int] = None) -> EvalReport:
    """Score a fit against the ground truth of the same panel.

    Scoring is deterministic: a config is only validated and a seed is ignored.
    """
    if config_path is not None:
        build_config(FitConfig, load_config(config_path))
    if seed is not None:
        logger.debug(f"Ignoring seed {seed}: evaluation is deterministic")
    subject_ids, result = load_fit(Path(fit_path))
    truth = load_ground_truth(Path(truth_path))
    if list(subject_ids) != list(truth.subject_ids):
        raise IngestionError(f"Subject ids disagree: fit has {len(subject_ids)} subjects, "
                             f"ground truth {len(truth.subject_ids)}", path=truth_path)

    report = evaluate(result, truth)
    out_path = Path(out)
    if out_path.suffix != ".json":
        out_path = out_path / EVAL_FILE
    prepare_output_dir(str(out_path.parent))
    write_json(out_path, report.model_dump(mode="json"))

    print("=" * 60)
    print(f"ARI: {report.ari:.4f} ({report.q_estimated} clusters vs {report.q_true} groups)")
    print(f"   Mean AUC instantaneous: {report.mean_auc_instantaneous}")
    print(f"   Mean AUC lagged: {report.mean_auc_lagged}")
    if report.flagged:
        print(f"   Flagged clusters: {report.flagged}")
    return report


def cell_seed(master: int, cell_index: int, realization: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, cell_index, realization])


def run_cell(cell: Dict[str, int], realization: int, seed_sequence: np.random.SeedSequence,
             base: GenerateConfig, fit_config: FitConfig) -> Dict[str, Any]:
    """generate -> fit -> evaluate for one grid cell; failures become an error row."""
    row: Dict[str, Any] = {**cell, "realization": realization}
    clock = time.perf_counter()
    try:
        config = base.model_validate({**base.model_dump(), **cell})
        data_rng, fit_rng = (np.random.default_rng(s) for s in seed_sequence.spawn(2))
        panel, truth = gen_dataset(config.q, config.n, config.m, config.T, config.p_l, config.noise_components,
                                   data_rng, edge_prob=config.edge_prob, burn_in=config.burn_in,
                                   label_mode=config.label_mode, crp_alpha=config.crp_alpha,
                                   noise_family=config.noise_family)
        result = fit(panel, fit_config, fit_rng)
        report = evaluate(result, truth)
        row.update(ari=report.ari, auc_instantaneous=report.mean_auc_instantaneous,
                   auc_lagged=report.mean_auc_lagged, auc_combined=report.mean_auc_combined,
                   q_estimated=report.q_estimated, sweeps_run=result.sweeps_run, converged=result.converged)
    except (CCSLError, ValueError, RuntimeError) as e:
        logger.warning(f"Cell {cell} realization {realization} failed: {e}")
        row["error"] = f"{type(e).__name__}: {e}"
    row["wall_seconds"] = round(time.perf_counter() - clock, 3)
    return row


async def run_cell_with_semaphore(semaphore: asyncio.Semaphore, index: int, *args) -> Tuple[int, Dict[str, Any]]:
    async with semaphore:
        return index, await asyncio.to_thread(run_cell, *args)


async def run_grid(jobs: Sequence[Tuple], workers: int) -> List[Dict[str, Any]]:
    semaphore = asyncio.Semaphore(workers)
    tasks = [run_cell_with_semaphore(semaphore, index, *job) for index, job in enumerate(jobs)]
    results = await asyncio.gather(*tasks)
    return [row for _, row in sorted(results, key=lambda item: item[0])]


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_sweep(config_path: Optional[str], out: str, seed: Optional[int] = None, workers: int = 1) -> List[Dict[str, Any]]:
    """Run generate -> fit -> evaluate over the grid and write sweep_results.csv."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    started, clock = datetime.now(), time.perf_counter()
    raw = load_config(config_path)
    sweep = build_config(SweepConfig, raw)
    base = build_config(GenerateConfig, raw)
    fit_config = build_config(FitConfig, raw)
    master = resolve_seed(seed, fit_config.seed)
    fit_config = fit_config.model_copy(update={"seed": master})

    cells = sweep.cells(base)
    jobs = [(cell, r, cell_seed(master, index, r), base, fit_config)
            for index, cell in enumerate(cells) for r in range(sweep.realizations)]
    print(f"Running {len(cells)} cells x {sweep.realizations} realizations with {workers} worker(s)...")

    rows = asyncio.run(run_grid(jobs, workers))

    out_dir = prepare_output_dir(out)
    with open(out_dir / SWEEP_FILE, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows([format_cell(row.get(column)) for column in SWEEP_COLUMNS] for row in rows)
    write_timing(out_dir, started, time.perf_counter() - clock)

    failures = sum(1 for row in rows if row.get("error"))
    print("=" * 60)
    print(f"Sweep finished: {len(rows)} rows, {failures} failed")
    print(f"   Seed: {master}")
    print(f"   Output: {out_dir / SWEEP_FILE}")
    return rows


def read_long_table(path: Path, id_column: str, delimiter: str = ",") -> Panel:
    """Long-format table (one row per subject and time step) -> Panel, subjects in order of appearance."""
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f, delimiter=delimiter))
    except FileNotFoundError as e:
        raise IngestionError(f"File not found: {path}", path=str(path)) from e
    if not rows:
        raise IngestionError(f"{path} is empty", path=str(path), line=1)

    header = rows[0]
    if id_column not in header:
        raise IngestionError(f"{path}: id column {id_column!r} not in header {header}", path=str(path), line=1)
    id_index = header.index(id_column)
    variable_columns = [i for i in range(len(header)) if i != id_index]

    series: Dict[str, List[List[float]]] = {}
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise IngestionError(f"{path} line {line} has {len(row)} columns, expected {len(header)}",
                                 path=str(path), line=line)
        values = [parse_cell(row[i], path, line, i + 1) for i in variable_columns]
        series.setdefault(row[id_index], []).append(values)

    subjects = [SubjectSeries(id=sid, data=np.array(data, dtype=float)) for sid, data in series.items()]
    return Panel(subjects=tuple(subjects), m=len(variable_columns))


def cmd_ingest(table_path: str, out: str, id_column: str = "subject", delimiter: str = ",") -> Panel:
    """Convert a long-format delimited table into a panel directory."""
    panel = read_long_table(Path(table_path), id_column, delimiter)
    try:
        validate_panel(panel)
    except PanelValidationError as e:
        raise IngestionError(f"{table_path}: subject {e.subject_id}: {e}", path=table_path) from e

    out_dir = prepare_output_dir(out)
    write_panel(panel, out_dir)
    print("=" * 60)
    print(f"Ingested {panel.n} subjects with {panel.m} variables into {out_dir}")
    return panel


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Causal clustering structure learning for multi-subject time series.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Simulate a synthetic panel")
    generate.add_argument("--config")
    generate.add_argument("--out", required=True)
    generate.add_argument("--seed", type=int)

    fit_parser = commands.add_parser("fit", help="Cluster a panel and learn its causal models")
    fit_parser.add_argument("panel")
    fit_parser.add_argument("--config")
    fit_parser.add_argument("--out", required=True)
    fit_parser.add_argument("--seed", type=int)

    evaluate_parser = commands.add_parser("evaluate", help="Score a fit against ground truth")
    evaluate_parser.add_argument("fit_result")
    evaluate_parser.add_argument("ground_truth")
    evaluate_parser.add_argument("--out", required=True)
    evaluate_parser.add_argument("--config")
    evaluate_parser.add_argument("--seed", type=int)

    sweep = commands.add_parser("sweep", help="Run an experiment grid")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--workers", type=int, default=1)

    ingest = commands.add_parser("ingest", help="Convert a long-format table into a panel directory")
    ingest.add_argument("table")
    ingest.add_argument("--out", required=True)
    ingest.add_argument("--id-column", default="subject")
    ingest.add_argument("--delimiter", default=",")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level))

    try:
        if args.command == "generate":
            cmd_generate(args.config, args.out, args.seed)
        elif args.command == "fit":
            cmd_fit(args.panel, args.config, args.out, args.seed)
        elif args.command == "evaluate":
            cmd_evaluate(args.fit_result, args.ground_truth, args.out, args.config, args.seed)
        elif args.command == "sweep":
            cmd_sweep(args.config, args.out, args.seed, args.workers)
        elif args.command == "ingest":
            cmd_ingest(args.table, args.out, args.id_column, args.delimiter)
    except KeyboardInterrupt:
        print("\nInterrupted by user")
        return 130
    except CCSLError as e:
        print(f"\nError: {e}")
        return 1
    except OSError as e:
        print(f"\nFile error: {e}")
        return 1
    except (ValueError, KeyError) as e:
        print(f"\nInvalid input: {e}")
        return 1

    return 0


if __name__ == "__main__":
    exit(main())
