"""Measurement backends for the search: external commands and a cost model.

The external evaluator compiles and runs an annotated variant with
user-supplied command templates; the cost model evaluator prices a genome
deterministically from per-loop times plus per-transfer-event costs, which is
what makes the whole pipeline testable at desk scale.  A brute-force
enumerator over the cost model doubles as the optimality oracle in tests.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter
from typing import Callable, Optional

from .code_model import LoopTable, VarRefTable
from .errors import (BaselineFailure, EnumerationTooLarge, EvaluatorUnavailable,
                     ModelIncomplete)
from .transfer import Planner, TransferPlan

BRUTE_FORCE_LIMIT = 20


@dataclass(frozen=True)
class MeasuredTime:
    seconds: Optional[float] = None
    timed_out: bool = False
    failure: Optional[str] = None

    @classmethod
    def ok(cls, seconds: float) -> "MeasuredTime":
        if seconds <= 0:
            raise ValueError("measured seconds must be positive")
        return cls(seconds=seconds)

    @classmethod
    def timeout(cls) -> "MeasuredTime":
        return cls(timed_out=True)

    @classmethod
    def failed(cls, diagnostic: str) -> "MeasuredTime":
        return cls(failure=diagnostic or "unspecified failure")


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

@dataclass
class CostModel:
    overhead_s: float
    loop_cpu_s: dict[int, float]
    loop_gpu_s: dict[int, float]
    var_bytes: dict[str, float]
    bandwidth_bytes_per_s: float
    latency_s: float
    note: str = ""

    def __post_init__(self):
        values = [self.overhead_s, self.bandwidth_bytes_per_s, self.latency_s]
        values += list(self.loop_cpu_s.values()) + list(self.loop_gpu_s.values())
        values += list(self.var_bytes.values())
        if any(v < 0 for v in values) or self.bandwidth_bytes_per_s == 0:
            raise ValueError("cost model components must be non-negative "
                             "with positive bandwidth")

    def transfer_event_s(self, var_name: str) -> float:
        if var_name not in self.var_bytes:
            raise ModelIncomplete(f"cost model has no bytes for variable {var_name!r}")
        return self.var_bytes[var_name] / self.bandwidth_bytes_per_s + self.latency_s

    @classmethod
    def from_json(cls, doc: dict) -> "CostModel":
        loops = doc.get("loops", {})
        return cls(
            overhead_s=float(doc.get("overhead_s", 0.0)),
            loop_cpu_s={int(k): float(v["cpu_s"]) for k, v in loops.items()},
            loop_gpu_s={int(k): float(v["gpu_s"]) for k, v in loops.items()},
            var_bytes={k: float(v["bytes"]) for k, v in doc.get("vars", {}).items()},
            bandwidth_bytes_per_s=float(doc["bandwidth_bytes_per_s"]),
            latency_s=float(doc.get("latency_s", 0.0)),
            note=doc.get("note", ""),
        )

    @classmethod
    def load(cls, path) -> "CostModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def evaluate_costmodel(genome, plan: TransferPlan, model: CostModel,
                       eligible_ids: list[int], refs: VarRefTable) -> float:
    """overhead + CPU loops + GPU loops + priced transfer events of the plan."""
    total = model.overhead_s
    for lid, bit in zip(eligible_ids, genome):
        table = model.loop_gpu_s if bit else model.loop_cpu_s
        if lid not in table:
            raise ModelIncomplete(f"cost model has no entry for loop {lid}")
        total += table[lid]
    for entry in plan.entries:
        total += entry.events * model.transfer_event_s(refs.vars[entry.var].name)
    return total


class CostModelEvaluator:
    """Deterministic desk-scale evaluator: plans transfers, prices the result."""

    deterministic = True
    max_concurrency = 1  # pure function; nothing to overlap

    def __init__(self, model: CostModel, loops: LoopTable, refs: VarRefTable,
                 eligible_ids: list[int]):
        self.model = model
        self.refs = refs
        self.eligible_ids = list(eligible_ids)
        self.planner = Planner(loops, refs, eligible_ids)

    def plan(self, genome) -> TransferPlan:
        return self.planner.plan(genome)

    def measure(self, genome) -> MeasuredTime:
        plan = self.planner.plan(genome)
        seconds = evaluate_costmodel(genome, plan, self.model,
                                     self.eligible_ids, self.refs)
        return MeasuredTime.ok(seconds)


def brute_force_optimum(model: CostModel, loops: LoopTable, refs: VarRefTable,
                        eligible_ids: list[int]) -> tuple[tuple, float]:
    """Exact minimizer over all 2^len genomes; ties go to the lowest binary
    value (genome read as a binary number, gene 0 most significant)."""
    n = len(eligible_ids)
    if n > BRUTE_FORCE_LIMIT:
        raise EnumerationTooLarge(f"{n} genes exceed the 2^{BRUTE_FORCE_LIMIT} bound")
    planner = Planner(loops, refs, eligible_ids)
    best_genome: Optional[tuple] = None
    best_time = float("inf")
    for value in range(1 << n):
        genome = tuple((value >> (n - 1 - i)) & 1 for i in range(n))
        plan = planner.plan(genome)
        t = evaluate_costmodel(genome, plan, model, eligible_ids, refs)
        if t < best_time:
            best_genome, best_time = genome, t
    return best_genome, best_time


# ---------------------------------------------------------------------------
# External command evaluator
# ---------------------------------------------------------------------------

@dataclass
class CommandConfig:
    compile_template: str        # placeholders: {src} {bin} {workdir}
    run_template: str            # placeholders: {bin} {workdir}
    timeout_s: float = 180.0
    max_concurrency: int = 1

    @classmethod
    def from_json(cls, doc: dict) -> "CommandConfig":
        return cls(compile_template=doc["compile"], run_template=doc["run"],
                   timeout_s=float(doc.get("timeout_s", 180.0)),
                   max_concurrency=int(doc.get("max_concurrency", 1)))


class ExternalEvaluator:
    """Compile, deploy, and time one variant per genome via shell templates."""

    deterministic = False

    def __init__(self, config: CommandConfig, build_variant: Callable):
        self.config = config
        self.build_variant = build_variant
        self.max_concurrency = config.max_concurrency

    def measure(self, genome) -> MeasuredTime:
        variant = self.build_variant(genome)
        outcome, _stdout = self._compile_and_run(variant.texts)
        return outcome

    def run_for_output(self, texts: dict[str, str]) -> str:
        """Run a variant and return its stdout (for the final numeric diff)."""
        outcome, stdout = self._compile_and_run(texts)
        if outcome.failure is not None or outcome.timed_out:
            raise BaselineFailure(outcome.failure or "timed out")
        return stdout

    def _compile_and_run(self, texts: dict[str, str]) -> tuple[MeasuredTime, str]:
        try:
            with tempfile.TemporaryDirectory(prefix="acctune-") as tmp:
                paths = []
                for file_id, text in texts.items():
                    path = Path(tmp) / Path(file_id).name
                    path.write_text(text)
                    paths.append(str(path))
                binary = str(Path(tmp) / "app")
                compile_cmd = self.config.compile_template.format(
                    src=" ".join(paths), bin=binary, workdir=tmp)
                comp = subprocess.run(compile_cmd, shell=True, capture_output=True,
                                      text=True, cwd=tmp)
                if comp.returncode != 0:
                    diag = (comp.stderr or comp.stdout).strip()[-500:]
                    return MeasuredTime.failed(f"compile failed: {diag}"), ""
                run_cmd = self.config.run_template.format(bin=binary, workdir=tmp)
                t0 = perf_counter()
                try:
                    run = subprocess.run(run_cmd, shell=True, capture_output=True,
                                         text=True, cwd=tmp,
                                         timeout=self.config.timeout_s)
                except subprocess.TimeoutExpired:
                    return MeasuredTime.timeout(), ""
                elapsed = perf_counter() - t0
                if run.returncode != 0:
                    diag = (run.stderr or run.stdout).strip()[-500:]
                    return MeasuredTime.failed(f"run failed: {diag}"), ""
                return MeasuredTime.ok(max(elapsed, 1e-9)), run.stdout
        except FileNotFoundError as exc:
            raise EvaluatorUnavailable(str(exc)) from exc
        except OSError as exc:
            raise EvaluatorUnavailable(str(exc)) from exc
