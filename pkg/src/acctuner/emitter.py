"""Materialize a genome plus its transfer plan as annotated source text.

Pragmas are always inserted as whole lines, so deleting every logged line
reproduces the original input byte for byte.  Spellings are fixed, lowercase,
single-space separated:

    #pragma acc kernels | parallel loop | parallel loop vector
    #pragma acc data copy(...) copyin(...) copyout(...)
    #pragma acc data present(...)
    #pragma acc declare create(...)
    #pragma acc update device(...) | self(...)

A structured data region spanning more than one statement is wrapped in an
inserted brace pair; single-statement regions rely on the statement itself
being the structured block.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional

from .classify import DirectiveKind, EligibilityVerdict
from .code_model import LoopInfo, ProjectModel, SourceUnit, VarEntry
from .errors import EmitError, GenomeLengthMismatch, PlanInconsistent
from .transfer import Direction, PlanEntry, TransferPlan

# Category ranks fix the stacking order of pragmas around one statement.
_BEFORE_UPDATE, _BEFORE_DATA, _BEFORE_PRESENT, _BEFORE_KIND = 10, 20, 30, 40
_AFTER_BRACE, _AFTER_UPDATE = 60, 90


@dataclass
class AnnotatedVariant:
    texts: dict[str, str]
    genome: tuple
    kinds: dict[int, DirectiveKind]
    plan: TransferPlan
    insertion_log: list[tuple[str, int, str]]  # (file_id, emitted line no, text)

    def log_json(self) -> list[dict]:
        return [{"file": f, "line": n, "text": t} for f, n, t in self.insertion_log]


@dataclass
class _Insertion:
    offset: int
    side: int          # 0 = before the line holding offset, 1 = after
    key: tuple
    text: str


class _FileEditor:
    def __init__(self, unit: SourceUnit):
        self.unit = unit
        self.inserts: list[_Insertion] = []
        self._starts = [0]
        for i, ch in enumerate(unit.original_text):
            if ch == "\n":
                self._starts.append(i + 1)

    def line_of(self, offset: int) -> int:
        return bisect.bisect_right(self._starts, offset) - 1

    def before(self, offset: int, key: tuple, text: str) -> None:
        self.inserts.append(_Insertion(offset, 0, key, text))

    def after(self, offset: int, key: tuple, text: str) -> None:
        self.inserts.append(_Insertion(offset, 1, key, text))

    def _check_alignment(self, ins: _Insertion) -> None:
        """Inserted lines must not re-bind or trail another statement."""
        text = self.unit.original_text
        line = self.line_of(ins.offset)
        start = self._starts[line]
        end = self._starts[line + 1] if line + 1 < len(self._starts) else len(text)
        if ins.side == 0 and text[start:ins.offset].strip():
            raise EmitError(f"{self.unit.file_id}: insertion target at offset "
                            f"{ins.offset} does not start its line")
        if ins.side == 1 and text[ins.offset + 1:end].strip():
            raise EmitError(f"{self.unit.file_id}: statement at offset "
                            f"{ins.offset} does not end its line")

    def render(self, log: list[tuple[str, int, str]]) -> str:
        text = self.unit.original_text
        if not self.inserts:
            return text
        if not text.endswith("\n"):
            raise EmitError(f"{self.unit.file_id}: file must end with a newline "
                            "to accept pragma insertions")
        lines = text.splitlines(keepends=True)
        before: dict[int, list[_Insertion]] = {}
        after: dict[int, list[_Insertion]] = {}
        for ins in self.inserts:
            self._check_alignment(ins)
            line = self.line_of(ins.offset)
            (before if ins.side == 0 else after).setdefault(line, []).append(ins)
        out = []
        lineno = 0
        for i, line in enumerate(lines):
            indent = line[:len(line) - len(line.lstrip())].rstrip("\n\r")
            for ins in sorted(before.get(i, []), key=lambda x: x.key):
                lineno += 1
                out.append(f"{indent}{ins.text}\n")
                log.append((self.unit.file_id, lineno, ins.text))
            lineno += 1
            out.append(line)
            for ins in sorted(after.get(i, []), key=lambda x: x.key):
                lineno += 1
                out.append(f"{indent}{ins.text}\n")
                log.append((self.unit.file_id, lineno, ins.text))
        return "".join(out)


def _clause_name(var: VarEntry) -> str:
    if var.extents is None:
        if var.subscripted:
            raise EmitError(f"array {var.name!r} has no declared extent; "
                            "refusing to emit an extent-less data clause")
        return var.name
    return var.name + "".join(f"[0:{n}]" for n in var.extents)


def insert_single_pragma(unit: SourceUnit, loop: LoopInfo, pragma: str) -> str:
    """Variant with exactly one pragma line in front of one loop (probe use)."""
    editor = _FileEditor(unit)
    editor.before(loop.span[0], (_BEFORE_KIND,), pragma)
    return editor.render([])


def emit_variant(project: ProjectModel, genome, verdicts: list[EligibilityVerdict],
                 plan: TransferPlan) -> AnnotatedVariant:
    """Annotated sources for one genome: kind pragmas plus the transfer plan."""
    eligible = [v.loop_id for v in verdicts if v.eligible]
    kinds = {v.loop_id: v.kind for v in verdicts if v.eligible}
    if len(genome) != len(eligible):
        raise GenomeLengthMismatch(
            f"genome length {len(genome)} != eligible loops {len(eligible)}")
    gene = dict(zip(eligible, genome))
    on_loops = {lid for lid, bit in gene.items() if bit == 1}

    for e in plan.entries:
        for m in e.members:
            if m not in on_loops:
                raise PlanInconsistent(f"plan covers loop {m} which is not gene=1")
        for site in e.present_sites:
            if site not in e.members:
                raise PlanInconsistent(f"present site {site} outside its region")

    refs = project.refs
    loops = project.loops
    editors = {u.file_id: _FileEditor(u) for u in project.units}

    def editor_for(file_id: str) -> _FileEditor:
        if file_id not in editors:
            raise EmitError(f"plan references unknown file {file_id!r}")
        return editors[file_id]

    # GPU-processing pragma per gene=1 loop
    for lid in sorted(on_loops):
        loop = loops.get(lid)
        ed = editor_for(loop.file_id)
        ed.before(loop.span[0], (_BEFORE_KIND, lid), kinds[lid].pragma)

    # structured data regions, grouped so one line carries all clauses
    groups: dict[tuple, list[PlanEntry]] = {}
    declared: set[str] = set()
    for e in plan.entries:
        if e.temp_region:
            _emit_temp_region(e, refs, editor_for, declared)
        else:
            key = (e.open_file, e.open_span, e.close_span)
            groups.setdefault(key, []).append(e)
    for (file_id, open_span, close_span), entries in groups.items():
        ed = editor_for(file_id)
        width = close_span[1] - open_span[0]
        clauses = []
        for direction in (Direction.COPY, Direction.COPYIN, Direction.COPYOUT):
            names = sorted(_clause_name(refs.vars[e.var])
                           for e in entries if e.direction is direction)
            if names:
                clauses.append(f"{direction.value}({','.join(names)})")
        ed.before(open_span[0], (_BEFORE_DATA, -width, 0),
                  "#pragma acc data " + " ".join(clauses))
        if open_span != close_span:
            ed.before(open_span[0], (_BEFORE_DATA, -width, 1), "{")
            ed.after(close_span[1] - 1, (_AFTER_BRACE, width), "}")

    # present assertions at covered loops
    present: dict[tuple[str, int], list[str]] = {}
    for e in plan.entries:
        for site in e.present_sites:
            loop = loops.get(site)
            present.setdefault((loop.file_id, site), []).append(
                _clause_name(refs.vars[e.var]))
    for (file_id, site), names in present.items():
        loop = loops.get(site)
        editor_for(file_id).before(
            loop.span[0], (_BEFORE_PRESENT, site),
            f"#pragma acc data present({','.join(sorted(names))})")

    log: list[tuple[str, int, str]] = []
    texts = {}
    for unit in project.units:
        texts[unit.file_id] = editors[unit.file_id].render(log)
    return AnnotatedVariant(texts, tuple(genome), kinds, plan, log)


def _emit_temp_region(e: PlanEntry, refs, editor_for, declared: set[str]) -> None:
    var = refs.vars[e.var]
    clause = _clause_name(var)
    if var.decl_file is None or var.decl_span is None:
        raise EmitError(f"variable {var.name!r} needs a device mirror but has "
                        "no visible declaration site")
    if e.var not in declared:
        declared.add(e.var)
        editor_for(var.decl_file).after(
            var.decl_span[1] - 1, (_AFTER_BRACE - 1, var.name),
            f"#pragma acc declare create({clause})")
    if e.direction.into_device:
        editor_for(e.open_file).before(
            e.open_span[0], (_BEFORE_UPDATE, var.name),
            f"#pragma acc update device({clause})")
    if e.direction.out_of_device:
        editor_for(e.close_file).after(
            e.close_span[1] - 1, (_AFTER_UPDATE, var.name),
            f"#pragma acc update self({clause})")


def strip_inserted_lines(variant: AnnotatedVariant) -> dict[str, str]:
    """Remove every logged line; the result must equal the original sources."""
    removed: dict[str, set[int]] = {}
    for file_id, lineno, _ in variant.insertion_log:
        removed.setdefault(file_id, set()).add(lineno)
    out = {}
    for file_id, text in variant.texts.items():
        gone = removed.get(file_id, set())
        lines = text.splitlines(keepends=True)
        out[file_id] = "".join(line for i, line in enumerate(lines, start=1)
                               if i not in gone)
    return out
