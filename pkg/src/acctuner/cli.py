"""Command-line pipeline: analyze, classify, tune, emit-best, verify.

Exit codes: 0 success, 1 user error, 2 environment error, 3 verification
failure.  The tune report body is deterministic for a deterministic evaluator
and a fixed seed; timestamps and host facts live in a separate meta file so
reports can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import json
import platform
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import classify as classify_mod
from .classify import (CommandProbe, StaticRuleProbe, classify_project,
                       eligible_ids, filter_by_trip_count)
from .code_model import ProjectModel, analyze_project, dump_structural, load_structural
from .emitter import emit_variant, strip_inserted_lines
from .errors import (BaselineFailure, ConfigError, EvaluatorUnavailable,
                     ParseError, ProbeUnavailable, TunerError, UnparsableOutput,
                     ZeroGeneLength)
from .evaluators import (CommandConfig, CostModel, CostModelEvaluator,
                         ExternalEvaluator, MeasuredTime)
from .ga import GAConfig, genome_str, run_ga
from .transfer import Planner

DEFAULT_ATOL = 1e-6
DEFAULT_RTOL = 1e-4


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ToolConfig:
    sources: list[str] = field(default_factory=list)
    structural: Optional[str] = None
    probe: object = "static"              # "static" | {"command": ...}
    trip_counts: Optional[str] = None
    trip_threshold: int = 0
    evaluator: dict = field(default_factory=dict)
    ga: GAConfig = field(default_factory=GAConfig)
    output_dir: Optional[str] = None
    atol: float = DEFAULT_ATOL
    rtol: float = DEFAULT_RTOL
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def load(cls, path: str) -> "ToolConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls(base_dir=p.parent)
        cfg.sources = list(doc.get("sources", []))
        cfg.structural = doc.get("structural")
        cfg.probe = doc.get("probe", "static")
        cfg.trip_counts = doc.get("trip_counts")
        cfg.trip_threshold = int(doc.get("trip_threshold", 0))
        cfg.evaluator = doc.get("evaluator", {})
        cfg.ga = GAConfig.from_json(doc.get("ga", {}))
        cfg.output_dir = doc.get("output_dir")
        verify = doc.get("verify", {})
        cfg.atol = float(verify.get("atol", DEFAULT_ATOL))
        cfg.rtol = float(verify.get("rtol", DEFAULT_RTOL))
        if not cfg.sources and not cfg.structural:
            raise ConfigError("config needs 'sources' or 'structural'")
        if cfg.evaluator.get("type") not in ("costmodel", "external"):
            raise ConfigError("config needs evaluator.type: costmodel | external")
        return cfg

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def load_project_from_config(cfg: ToolConfig) -> ProjectModel:
    if cfg.sources:
        files = []
        for src in cfg.sources:
            p = cfg.resolve(src)
            files.append((str(src), p.read_text()))
        return analyze_project(files)
    doc = json.loads(cfg.resolve(cfg.structural).read_text())
    return load_structural(doc)


def build_probe(cfg: ToolConfig):
    if cfg.probe == "static":
        return StaticRuleProbe()
    if isinstance(cfg.probe, str):
        return CommandProbe(cfg.probe)
    if isinstance(cfg.probe, dict) and "command" in cfg.probe:
        return CommandProbe(cfg.probe["command"],
                            int(cfg.probe.get("max_concurrency", 1)))
    raise ConfigError(f"unsupported probe spec: {cfg.probe!r}")


def build_evaluator(cfg: ToolConfig, project: ProjectModel, verdicts):
    elig = eligible_ids(verdicts)
    kind = cfg.evaluator["type"]
    if kind == "costmodel":
        model = CostModel.load(cfg.resolve(cfg.evaluator["model"]))
        return CostModelEvaluator(model, project.loops, project.refs, elig)
    if not project.has_sources:
        raise ConfigError("external evaluator needs source files, "
                          "not a structural description")
    planner = Planner(project.loops, project.refs, elig)

    def build_variant(genome):
        return emit_variant(project, genome, verdicts, planner.plan(genome))

    return ExternalEvaluator(CommandConfig.from_json(cfg.evaluator), build_variant)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class DiffReport:
    passed: bool
    values_compared: int
    max_abs_err: float
    max_rel_err: float
    mismatches: int
    atol: float
    rtol: float
    length_mismatch: bool = False
    detail: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "values_compared": self.values_compared,
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
            "mismatches": self.mismatches,
            "atol": self.atol,
            "rtol": self.rtol,
            "length_mismatch": self.length_mismatch,
            "detail": self.detail[:10],
        }


def verify_results(baseline_output: str, tuned_output: str,
                   atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL) -> DiffReport:
    """Whitespace-separated numeric diff; non-numeric tokens compare exactly."""
    if not isinstance(baseline_output, str) or not isinstance(tuned_output, str):
        raise UnparsableOutput("output streams must be text")
    base = baseline_output.split()
    tuned = tuned_output.split()
    report = DiffReport(True, 0, 0.0, 0.0, 0, atol, rtol)
    if len(base) != len(tuned):
        report.passed = False
        report.length_mismatch = True
        report.detail.append(f"value counts differ: {len(base)} vs {len(tuned)}")
    for i, (b, t) in enumerate(zip(base, tuned)):
        fb, ft = _as_float(b), _as_float(t)
        if fb is None or ft is None:
            report.values_compared += 1
            if b != t:
                report.mismatches += 1
                report.passed = False
                report.detail.append(f"token {i}: {t!r} != {b!r}")
            continue
        report.values_compared += 1
        abs_err = abs(ft - fb)
        rel_err = abs_err / abs(fb) if fb != 0 else (0.0 if abs_err == 0 else float("inf"))
        report.max_abs_err = max(report.max_abs_err, abs_err)
        report.max_rel_err = max(report.max_rel_err, rel_err)
        if abs_err > atol + rtol * abs(fb):
            report.mismatches += 1
            report.passed = False
            if len(report.detail) < 10:
                report.detail.append(f"value {i}: {ft!r} vs {fb!r} (abs {abs_err:.3e})")
    return report


def _as_float(token: str) -> Optional[float]:
    try:
        return float(token)
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def measure_baseline(evaluator, gene_len: int) -> float:
    """All-zero genome measured once, outside the GA population."""
    measured = evaluator.measure(tuple([0] * gene_len))
    if measured.failure is not None:
        raise BaselineFailure(f"baseline run failed: {measured.failure}")
    if measured.timed_out:
        raise BaselineFailure("baseline run exceeded the timeout; "
                              "the unmodified program must complete")
    return measured.seconds


def run_pipeline(cfg: ToolConfig, out_dir: Path, echo=print) -> tuple[dict, bool]:
    """Full tune flow; returns (report document, verification_ok)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    project = load_project_from_config(cfg)
    probe = build_probe(cfg)
    verdicts = classify_project(project, probe)
    trip_counts = None
    if cfg.trip_counts:
        raw = json.loads(cfg.resolve(cfg.trip_counts).read_text())
        trip_counts = {int(k): int(v) for k, v in raw.items()}
    if cfg.trip_threshold > 0:
        verdicts = filter_by_trip_count(verdicts, project, trip_counts,
                                        cfg.trip_threshold)
    elig = eligible_ids(verdicts)
    echo(f"loops: {len(project.loops)} total, {len(elig)} eligible "
         f"(gene length {len(elig)})")
    (out_dir / "verdicts.json").write_text(_dumps(
        [v.to_json() for v in verdicts]))

    evaluator = build_evaluator(cfg, project, verdicts)
    baseline_s = measure_baseline(evaluator, len(elig))
    echo(f"baseline (all-CPU) time: {baseline_s:.6g} s")

    if not elig:
        report = _report_body(cfg, baseline_s, baseline_s, tuple(), {}, [],
                              {"status": "skipped", "reason": "no offloadable loops"},
                              0, note="no offloadable loops")
        _write_report(out_dir, report, [])
        echo("no offloadable loops; improvement ratio 1.0")
        return report, True

    planner = Planner(project.loops, project.refs, elig)

    def on_generation(rec):
        echo(f"generation {rec.generation}: best so far {rec.best_time_s:.6g} s")

    result = run_ga(cfg.ga, len(elig), evaluator, on_generation)
    best = result.best
    best_plan = planner.plan(best.genome)
    ratio = baseline_s / best.time_s
    echo(f"best genome {genome_str(best.genome)} time {best.time_s:.6g} s "
         f"ratio {ratio:.3f}x ({result.evaluations} evaluations)")

    verification: dict
    verification_ok = True
    if project.has_sources:
        variant = emit_variant(project, best.genome, verdicts, best_plan)
        best_dir = out_dir / "best_src"
        best_dir.mkdir(exist_ok=True)
        for file_id, text in variant.texts.items():
            (best_dir / Path(file_id).name).write_text(text)
        (out_dir / "insertion_log.json").write_text(_dumps(variant.log_json()))
        if isinstance(evaluator, ExternalEvaluator):
            originals = {u.file_id: u.original_text for u in project.units}
            base_out = evaluator.run_for_output(originals)
            tuned_out = evaluator.run_for_output(variant.texts)
            diff = verify_results(base_out, tuned_out, cfg.atol, cfg.rtol)
            verification = diff.to_json() | {"status": "ran"}
            verification_ok = diff.passed
            echo(f"verification: {'pass' if diff.passed else 'FAIL'} "
                 f"(max abs err {diff.max_abs_err:.3e})")
        else:
            verification = {"status": "skipped",
                            "reason": "cost-model evaluator produces no program output"}
    else:
        verification = {"status": "skipped",
                        "reason": "structural input carries no source text"}

    kinds = {v.loop_id: v.kind.value for v in verdicts if v.eligible}
    report = _report_body(cfg, baseline_s, best.time_s, best.genome, kinds,
                          best_plan.to_json(project.refs), verification,
                          result.evaluations)
    _write_report(out_dir, report, result.records)
    return report, verification_ok


def _report_body(cfg, baseline_s, best_s, genome, kinds, plan_json,
                 verification, evaluations, note="") -> dict:
    return {
        "baseline_time_s": baseline_s,
        "best_time_s": best_s,
        "improvement_ratio": baseline_s / best_s,
        "best_genome": genome_str(genome),
        "gene_length": len(genome),
        "kinds": {str(k): v for k, v in kinds.items()},
        "plan": plan_json,
        "verification": verification,
        "evaluations": evaluations,
        "ga": {
            "population": cfg.ga.population,
            "generations": cfg.ga.generations,
            "crossover_rate": cfg.ga.crossover_rate,
            "mutation_rate": cfg.ga.mutation_rate,
            "rng_seed": cfg.ga.rng_seed,
        },
        "note": note,
    }


def _write_report(out_dir: Path, report: dict, records) -> None:
    (out_dir / "report.json").write_text(_dumps(report))
    with (out_dir / "generations.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    meta = {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "host": platform.node(), "python": platform.python_version()}
    (out_dir / "meta.json").write_text(_dumps(meta))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _cmd_analyze(args) -> int:
    files = [(src, Path(src).read_text()) for src in args.sources]
    project = analyze_project(files)
    doc = dump_structural(project)
    Path(args.out).write_text(_dumps(doc))
    print(f"{len(project.loops)} loops, {len(project.refs.vars)} variables "
          f"-> {args.out}")
    return 0


def _cmd_classify(args) -> int:
    if args.sources:
        project = analyze_project([(s, Path(s).read_text()) for s in args.sources])
    elif args.model:
        project = load_structural(json.loads(Path(args.model).read_text()))
    else:
        raise ConfigError("classify needs --sources or --model")
    probe = StaticRuleProbe() if args.probe == "static" else CommandProbe(args.probe)
    verdicts = classify_project(project, probe)
    if args.trip_threshold > 0:
        counts = None
        if args.trip_counts:
            raw = json.loads(Path(args.trip_counts).read_text())
            counts = {int(k): int(v) for k, v in raw.items()}
        verdicts = filter_by_trip_count(verdicts, project, counts, args.trip_threshold)
    elig = eligible_ids(verdicts)
    doc = {"gene_length": len(elig), "eligible": elig,
           "verdicts": [v.to_json() for v in verdicts]}
    Path(args.out).write_text(_dumps(doc))
    print(f"{len(elig)} of {len(project.loops)} loops eligible -> {args.out}")
    return 0


def _cmd_tune(args) -> int:
    cfg = ToolConfig.load(args.config)
    out_dir = Path(args.out) if args.out else (
        cfg.resolve(cfg.output_dir) if cfg.output_dir else Path("tune-out"))
    _report, verification_ok = run_pipeline(cfg, out_dir)
    print(f"report written to {out_dir / 'report.json'}")
    return 0 if verification_ok else 3

def _cmd_emit_best(args) -> int:
    report_dir = Path(args.report)
    best_dir = report_dir / "best_src"
    if not best_dir.is_dir():
        raise ConfigError(f"{best_dir} not found; was tune run with sources?")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for src in sorted(best_dir.iterdir()):
        shutil.copy(src, out / src.name)
        count += 1
    print(f"{count} annotated file(s) -> {out}")
    return 0


def _cmd_verify(args) -> int:
    try:
        baseline = Path(args.baseline).read_text()
        tuned = Path(args.tuned).read_text()
    except UnicodeDecodeError as exc:
        raise UnparsableOutput(str(exc)) from exc
    report = verify_results(baseline, tuned, args.atol, args.rtol)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0 if report.passed else 3


def main(argv=None) -> int:
    parser = _Parser(prog="tuner",
                     description="GPU offload autotuner for C loop programs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parse sources into a structural model")
    p.add_argument("sources", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("classify", help="decide per-loop GPU eligibility")
    p.add_argument("--model")
    p.add_argument("--sources", nargs="*", default=[])
    p.add_argument("--probe", default="static",
                   help="'static' or a command template with {src} {workdir}")
    p.add_argument("--trip-counts")
    p.add_argument("--trip-threshold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_classify)

    p = sub.add_parser("tune", help="run the full offload search")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_tune)

    p = sub.add_parser("emit-best", help="copy the tuned sources out of a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_emit_best)

    p = sub.add_parser("verify", help="numeric diff of two program outputs")
    p.add_argument("--baseline", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--atol", type=float, default=DEFAULT_ATOL)
    p.add_argument("--rtol", type=float, default=DEFAULT_RTOL)
    p.set_defaults(fn=_cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParseError, UnparsableOutput, ZeroGeneLength) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProbeUnavailable, EvaluatorUnavailable, BaselineFailure) as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return 2
    except TunerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
