"""Per-loop GPU eligibility: pluggable compile probe plus static shape rules.

Each loop gets at most one directive kind, fixed before the search starts.
Kinds are tried in a fixed priority order (kernels, then parallel loop, then
parallel loop vector); the first accepted kind wins.  Kernels is only tried
on single loops and tight-nest outer loops, where the compiler is trusted to
judge parallelism on its own.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from time import perf_counter
from typing import Optional

from .code_model import (Expr, LoopInfo, LoopShape, MATH_FUNCS, ProjectModel)
from .errors import ProbeUnavailable


class DirectiveKind(Enum):
    KERNELS = "kernels"
    PARALLEL_LOOP = "parallel loop"
    PARALLEL_LOOP_VECTOR = "parallel loop vector"

    @property
    def pragma(self) -> str:
        return f"#pragma acc {self.value}"


KIND_PRIORITY = [DirectiveKind.KERNELS, DirectiveKind.PARALLEL_LOOP,
                 DirectiveKind.PARALLEL_LOOP_VECTOR]

_KERNELS_SHAPES = {LoopShape.SINGLE, LoopShape.TIGHT_OUTER}


@dataclass(frozen=True)
class ProbeResult:
    accepted: bool
    diagnostic: str = ""
    elapsed_ms: float = 0.0


@dataclass
class EligibilityVerdict:
    loop_id: int
    kind: Optional[DirectiveKind]
    reason: str = ""
    probe_log: list[tuple[str, str]] = field(default_factory=list)

    @property
    def eligible(self) -> bool:
        return self.kind is not None

    def to_json(self) -> dict:
        return {
            "loop_id": self.loop_id,
            "eligible": self.eligible,
            "kind": self.kind.value if self.kind else None,
            "reason": self.reason,
            "probe_log": [list(entry) for entry in self.probe_log],
        }


# ---------------------------------------------------------------------------
# Static-rule probe
# ---------------------------------------------------------------------------

def _subscript_offset(expr: Expr, index_var: str) -> Optional[int]:
    """Offset c for subscripts of the form i, i+c, c+i, i-c; None if i absent
    or the form is not recognized ("unknown")."""
    names = [e.text for e in expr.walk() if e.kind == "name"]
    if index_var not in names:
        return None
    if expr.kind == "name" and expr.text == index_var:
        return 0
    if expr.kind == "bin" and expr.op in ("+", "-"):
        a, b = expr.kids
        if a.kind == "name" and a.text == index_var and b.kind == "num":
            c = int(b.text.rstrip("uUlL"))
            return c if expr.op == "+" else -c
        if expr.op == "+" and b.kind == "name" and b.text == index_var and a.kind == "num":
            return int(a.text.rstrip("uUlL"))
    raise _UnknownOffset()


class _UnknownOffset(Exception):
    pass


@dataclass
class _DependenceFacts:
    reads: dict[str, set[int]] = field(default_factory=dict)
    writes: dict[str, set[int]] = field(default_factory=dict)
    unknown_reads: set[str] = field(default_factory=set)
    unknown_writes: set[str] = field(default_factory=set)
    breaks_out: bool = False
    has_goto: bool = False
    bad_call: str = ""
    index_written: bool = False


def _gather_facts(loop: LoopInfo) -> _DependenceFacts:
    facts = _DependenceFacts()
    index_var = loop.index_var

    def record(arr: str, writing: bool, sub: Expr) -> None:
        try:
            off = _subscript_offset(sub, index_var)
        except _UnknownOffset:
            (facts.unknown_writes if writing else facts.unknown_reads).add(arr)
            return
        if off is not None:
            target = facts.writes if writing else facts.reads
            target.setdefault(arr, set()).add(off)

    def scan_expr(e: Expr, writing: bool = False) -> None:
        if e.kind == "assign":
            target, value = e.kids
            scan_expr(target, writing=True)
            scan_expr(value)
            return
        if e.kind == "un" and e.op in ("++pre", "++post", "--pre", "--post"):
            scan_expr(e.kids[0], writing=True)
            return
        if e.kind == "index":
            arr = e.kids[0].text
            for sub in e.kids[1:]:
                record(arr, writing, sub)
                scan_expr(sub)
            return
        if e.kind == "call":
            if e.text not in MATH_FUNCS:
                facts.bad_call = e.text
            for arg in e.kids:
                scan_expr(arg)
            return
        for k in e.kids:
            scan_expr(k)

    def note_index_write(e: Expr) -> None:
        for sub in e.walk():
            if sub.kind == "assign" and sub.kids[0].kind == "name" \
                    and sub.kids[0].text == index_var:
                facts.index_written = True
            if sub.kind == "un" and sub.op in ("++pre", "++post", "--pre", "--post") \
                    and sub.kids[0].kind == "name" and sub.kids[0].text == index_var:
                facts.index_written = True

    def scan_stmt(st, breakable_depth: int) -> None:
        if st.kind == "goto" or st.kind == "label":
            facts.has_goto = True
            return
        if st.kind == "break" and breakable_depth == 0:
            facts.breaks_out = True
            return
        for e in st.exprs():
            scan_expr(e)
            note_index_write(e)
        inner = 1 if st.kind in ("for", "while") else 0
        if st.kind == "for" and st.for_init is not None:
            for e in st.for_init.exprs():
                scan_expr(e)
        for c in list(st.children) + list(st.else_children):
            scan_stmt(c, breakable_depth + inner)

    stmt = loop.stmt
    for e in stmt.exprs():
        scan_expr(e)
    if stmt.for_init is not None:
        for e in stmt.for_init.exprs():
            scan_expr(e)
    for c in stmt.children:
        scan_stmt(c, 0)
    return facts


def _hazards(facts: _DependenceFacts) -> tuple[bool, bool]:
    """(flow_or_unknown, anti): cross-iteration hazards over written arrays."""
    written = set(facts.writes) | facts.unknown_writes
    # an index-dependent write we cannot resolve may collide across iterations
    flow = bool(facts.unknown_writes)
    flow = flow or bool(facts.unknown_reads & written)
    anti = False
    for arr, woffs in facts.writes.items():
        for r in facts.reads.get(arr, set()):
            for w in woffs:
                if r == w:
                    continue
                if r - w < 0:
                    flow = True     # reads a value an earlier iteration wrote
                else:
                    anti = True     # reads a value a later iteration overwrites
    return flow, anti


class StaticRuleProbe:
    """Dependence-rule stand-in for a real accelerator compiler.

    Loops from structural descriptions carry no bodies; those are assumed
    pre-screened by whatever external tool produced the description, so the
    probe accepts them.
    """

    max_concurrency = 0  # pure analysis, no capacity limit
    name = "static"

    def probe(self, loop: LoopInfo, kind: DirectiveKind,
              project: ProjectModel) -> ProbeResult:
        if loop.stmt is None:
            return ProbeResult(True, "structural input: assumed pre-screened")
        if not loop.index_var:
            return ProbeResult(False, "no recognizable loop index")
        facts = _gather_facts(loop)
        if facts.has_goto:
            return ProbeResult(False, "goto/label inside loop body")
        if facts.breaks_out:
            return ProbeResult(False, "break out of the candidate loop")
        if facts.bad_call:
            return ProbeResult(False, f"call to unknown function {facts.bad_call!r}")
        if facts.index_written:
            return ProbeResult(False, "loop index modified inside the body")
        flow, anti = _hazards(facts)
        if flow:
            return ProbeResult(False, "cross-iteration dependence on the loop index")
        if anti and kind is not DirectiveKind.PARALLEL_LOOP_VECTOR:
            return ProbeResult(False, "anti-dependence: vectorizable but not parallelizable")
        return ProbeResult(True)


class CommandProbe:
    """Trial compilation through an external command template.

    The template receives {src} (path of the variant of the file holding the
    probed loop) and {workdir}; exit code 0 means the directive compiles.
    """

    name = "command"

    def __init__(self, template: str, max_concurrency: int = 1):
        self.template = template
        self.max_concurrency = max_concurrency

    def probe(self, loop: LoopInfo, kind: DirectiveKind,
              project: ProjectModel) -> ProbeResult:
        from .emitter import insert_single_pragma  # cycle-free at call time
        if not project.has_sources:
            raise ProbeUnavailable("command probe needs source files, "
                                   "not a structural description")
        t0 = perf_counter()
        try:
            with tempfile.TemporaryDirectory(prefix="accprobe-") as tmp:
                src_path = None
                for unit in project.units:
                    text = unit.original_text
                    if unit.file_id == loop.file_id:
                        text = insert_single_pragma(unit, loop, kind.pragma)
                    path = Path(tmp) / Path(unit.file_id).name
                    path.write_text(text)
                    if unit.file_id == loop.file_id:
                        src_path = path
                cmd = self.template.format(src=src_path, workdir=tmp)
                proc = subprocess.run(cmd, shell=True, capture_output=True,
                                      text=True, cwd=tmp)
        except OSError as exc:
            raise ProbeUnavailable(str(exc)) from exc
        elapsed = (perf_counter() - t0) * 1e3
        if proc.returncode == 0:
            return ProbeResult(True, elapsed_ms=elapsed)
        diag = (proc.stderr or proc.stdout).strip()[-500:]
        return ProbeResult(False, diag, elapsed)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def classify_loop(loop: LoopInfo, project: ProjectModel, probe) -> EligibilityVerdict:
    """Try directive kinds in priority order; first accepted kind wins."""
    log: list[tuple[str, str]] = []
    last_diag = ""
    for kind in KIND_PRIORITY:
        if kind is DirectiveKind.KERNELS and loop.shape not in _KERNELS_SHAPES:
            log.append((kind.value, "skipped: shape excludes kernels"))
            continue
        result = probe.probe(loop, kind, project)
        if result.accepted:
            log.append((kind.value, "accepted"))
            return EligibilityVerdict(loop.loop_id, kind, probe_log=log)
        last_diag = result.diagnostic
        log.append((kind.value, f"rejected: {result.diagnostic}"))
    return EligibilityVerdict(loop.loop_id, None, reason=last_diag or "all kinds rejected",
                              probe_log=log)


def classify_project(project: ProjectModel, probe) -> list[EligibilityVerdict]:
    """Verdicts for every loop, in document (loop id) order."""
    return [classify_loop(loop, project, probe) for loop in project.loops]


def filter_by_trip_count(verdicts: list[EligibilityVerdict], project: ProjectModel,
                         trip_counts: Optional[dict[int, int]],
                         threshold: int) -> list[EligibilityVerdict]:
    """Demote eligible loops whose known trip count falls below threshold.

    The user-supplied profile wins over the static constant-bound estimate;
    loops with no known count are kept.
    """
    if threshold <= 0:
        return verdicts
    trip_counts = trip_counts or {}
    out = []
    for v in verdicts:
        loop = project.loops.get(v.loop_id)
        count = trip_counts.get(v.loop_id, loop.trip_count_estimate)
        if v.eligible and count is not None and count < threshold:
            out.append(EligibilityVerdict(v.loop_id, None,
                                          reason="below trip-count threshold",
                                          probe_log=list(v.probe_log)))
        else:
            out.append(v)
    return out


def eligible_ids(verdicts: list[EligibilityVerdict]) -> list[int]:
    """Genome index space: i-th eligible loop in document order is gene i."""
    return [v.loop_id for v in verdicts if v.eligible]


def kind_map(verdicts: list[EligibilityVerdict]) -> dict[int, DirectiveKind]:
    return {v.loop_id: v.kind for v in verdicts if v.eligible}
