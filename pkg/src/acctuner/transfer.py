"""Data-movement planning for a given offload genome.

Three stages, applied in order:

  plan_transfers        per-GPU-loop copy directions (the unbatched worst case)
  hoist_and_batch       merge per-loop regions into wide regions where no CPU
                        access interferes, and hoist nest-confined regions to
                        the outermost legal loop level
  suppress_auto_transfers
                        switch global variables to the device-mirror pattern
                        (declare create + explicit update) so the compiler has
                        no reason to insert its own synchronization

The merged/hoisted plan is what the emitter and the cost evaluator consume;
the unbatched plan exists so the gain from batching is measurable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .code_model import LoopTable, Region, VarEntry, VarRefTable
from .errors import GenomeLengthMismatch


class Direction(Enum):
    COPYIN = "copyin"
    COPYOUT = "copyout"
    COPY = "copy"

    @property
    def into_device(self) -> bool:
        return self in (Direction.COPYIN, Direction.COPY)

    @property
    def out_of_device(self) -> bool:
        return self in (Direction.COPYOUT, Direction.COPY)


@dataclass
class PlanEntry:
    var: str                      # VarRefTable key
    direction: Direction
    members: list[int]            # covered gene=1 anchor loops, order-sorted
    open_file: str
    open_span: tuple[int, int]    # statement span the region opens before
    close_file: str
    close_span: tuple[int, int]   # statement span the region closes after
    present_sites: list[int] = field(default_factory=list)
    temp_region: bool = False

    @property
    def events(self) -> int:
        return int(self.direction.into_device) + int(self.direction.out_of_device)

    def to_json(self, refs: VarRefTable) -> dict:
        entry = refs.vars[self.var]
        return {
            "var": entry.name,
            "direction": self.direction.value,
            "region_span": [self.open_span[0], self.close_span[1]],
            "present": list(self.present_sites),
            "temp_region": self.temp_region,
            "file": self.open_file,
        }


@dataclass
class TransferPlan:
    entries: list[PlanEntry] = field(default_factory=list)

    def events_for(self, var: str) -> int:
        return sum(e.events for e in self.entries if e.var == var)

    def total_events(self) -> int:
        return sum(e.events for e in self.entries)

    def to_json(self, refs: VarRefTable) -> list[dict]:
        return [e.to_json(refs) for e in self.entries]


@dataclass
class GpuRegionMap:
    """Genome-induced partition of the gene=1 loops into batched runs."""
    runs: list[list[int]]
    gene: dict[int, int]
    planner: "Planner"

    def run_of(self, loop_id: int) -> int:
        for i, run in enumerate(self.runs):
            if loop_id in run:
                return i
        raise KeyError(loop_id)


@dataclass
class _CpuRef:
    order: int
    region: Region
    read: bool
    written: bool
    defined: bool


@dataclass
class _AnchorUse:
    anchor: int
    order: int
    read: bool = False
    written: bool = False


class Planner:
    """Reusable planning context; plan() is cheap per genome."""

    def __init__(self, loops: LoopTable, refs: VarRefTable, eligible_ids: list[int]):
        self.loops = loops
        self.refs = refs
        self.eligible_ids = list(eligible_ids)
        self._chains = {l.loop_id: loops.ancestors(l.loop_id) for l in loops}
        self._subtree_end = self._compute_subtree_ends()
        self._file_of = {l.loop_id: l.file_id for l in loops}
        self._span_of = {l.loop_id: l.span for l in loops}
        self._vars = refs.plannable()

    # -- static geometry ------------------------------------------------------

    def _compute_subtree_ends(self) -> dict[int, int]:
        order = self.refs.order
        end = {l.loop_id: order(l.loop_id) for l in self.loops}
        for l in self.loops:
            for anc in self._chains[l.loop_id]:
                end[anc] = max(end[anc], order(l.loop_id))
        return end

    def _anchor_of(self, region: Region, gene: dict[int, int]) -> Optional[int]:
        """Outermost gene=1 loop enclosing the region, if any."""
        if not isinstance(region, int):
            return None
        for lid in reversed(self._chains[region]):
            if gene.get(lid) == 1:
                return lid
        return None

    def _cyclic(self, region: Region, anchor: int) -> bool:
        if not isinstance(region, int):
            return False
        return bool(set(self._chains[region]) & set(self._chains[anchor]))

    def _precedes(self, cpu: _CpuRef, anchor_use: _AnchorUse) -> bool:
        return cpu.order < anchor_use.order or self._cyclic(cpu.region, anchor_use.anchor)

    def _follows(self, cpu: _CpuRef, anchor_use: _AnchorUse) -> bool:
        return cpu.order > anchor_use.order or self._cyclic(cpu.region, anchor_use.anchor)

    def gene_map(self, genome) -> dict[int, int]:
        if len(genome) != len(self.eligible_ids):
            raise GenomeLengthMismatch(
                f"genome length {len(genome)} != eligible loops {len(self.eligible_ids)}")
        return dict(zip(self.eligible_ids, genome))

    # -- per-variable view ----------------------------------------------------

    def _var_view(self, var: VarEntry, gene) -> tuple[list[_AnchorUse], list[_CpuRef]]:
        anchors: dict[int, _AnchorUse] = {}
        cpu: list[_CpuRef] = []
        for region, flags in var.refs.items():
            a = self._anchor_of(region, gene)
            if a is None:
                cpu.append(_CpuRef(self.refs.order(region), region,
                                   flags.read, flags.written, flags.defined))
            else:
                use = anchors.setdefault(a, _AnchorUse(a, self.refs.order(a)))
                use.read = use.read or flags.read
                use.written = use.written or flags.written
        ordered = sorted(anchors.values(), key=lambda u: u.order)
        cpu.sort(key=lambda c: c.order)
        return ordered, cpu

    # -- stage 1: directions --------------------------------------------------

    def plan_transfers(self, genome) -> TransferPlan:
        gene = self.gene_map(genome)
        entries: list[PlanEntry] = []
        for var in self._vars:
            uses, cpu = self._var_view(var, gene)
            for use in uses:
                entry = self._entry_for(var, [use], cpu)
                if entry is not None:
                    entries.append(entry)
        return TransferPlan(entries)

    def _entry_for(self, var: VarEntry, members: list[_AnchorUse],
                   cpu: list[_CpuRef],
                   reps: Optional[list[int]] = None) -> Optional[PlanEntry]:
        first, last = members[0], members[-1]
        reads = any(m.read for m in members)
        writes = any(m.written for m in members)
        copyin = reads and any((c.written or c.defined) and self._precedes(c, first)
                               for c in cpu)
        copyout = writes and any((c.read or c.written or c.defined)
                                 and self._follows(c, last) for c in cpu)
        if not copyin and not copyout:
            return None
        direction = (Direction.COPY if copyin and copyout
                     else Direction.COPYIN if copyin else Direction.COPYOUT)
        if reps is None:
            reps = self._reps(members)
        open_rep, close_rep = reps[0], reps[-1]
        widened = len(members) > 1 or open_rep != members[0].anchor
        return PlanEntry(
            var=var.key,
            direction=direction,
            members=[m.anchor for m in members],
            open_file=self._file_of[open_rep],
            open_span=self._span_of[open_rep],
            close_file=self._file_of[close_rep],
            close_span=self._span_of[close_rep],
            present_sites=[m.anchor for m in members] if widened else [],
        )

    # -- stage 2: batching and hoisting ---------------------------------------

    def _reps(self, members: list[_AnchorUse]) -> list[int]:
        """Member representatives lifted to the common nesting level."""
        chains = [list(reversed(self._chains[m.anchor])) for m in members]
        prefix = 0
        while all(len(ch) > prefix for ch in chains):
            heads = {ch[prefix] for ch in chains}
            if len(heads) != 1:
                break
            prefix += 1
        if prefix and any(len(ch) == prefix for ch in chains):
            prefix -= 1  # never lift a member past itself into the shared chain
        reps = []
        for ch in chains:
            rep = ch[prefix] if len(ch) > prefix else ch[-1]
            if not reps or reps[-1] != rep:
                reps.append(rep)
        return reps

    def _interval(self, reps: list[int]) -> tuple[int, int]:
        start = min(self.refs.order(r) for r in reps)
        end = max(self._subtree_end[r] for r in reps)
        return start, end

    def _barrier(self, c: _CpuRef, member_writes: bool) -> bool:
        return c.written or c.defined or (c.read and member_writes)

    def _merge_legal(self, var: VarEntry, members: list[_AnchorUse],
                     cpu: list[_CpuRef], all_uses: list[_AnchorUse]) -> bool:
        reps = self._reps(members)
        start, end = self._interval(reps)
        if self._file_of[reps[0]] != self._file_of[reps[-1]] and var.scope != "global":
            return False
        member_writes = any(m.written for m in members)
        member_ids = {m.anchor for m in members}
        for c in cpu:
            if start <= c.order <= end and self._barrier(c, member_writes):
                return False
        for u in all_uses:  # a foreign anchor inside the widened span
            if u.anchor not in member_ids and start <= u.order <= end:
                return False
        return True

    def hoist_and_batch(self, plan: TransferPlan, regions: GpuRegionMap) -> TransferPlan:
        gene = regions.gene
        entries: list[PlanEntry] = []
        by_var: dict[str, list[PlanEntry]] = {}
        for e in plan.entries:
            by_var.setdefault(e.var, []).append(e)
        for var in self._vars:
            if var.key not in by_var:
                continue
            uses, cpu = self._var_view(var, gene)
            planned = {a for e in by_var[var.key] for a in e.members}
            uses = [u for u in uses if u.anchor in planned]
            runs: list[list[_AnchorUse]] = []
            for use in uses:
                if runs and self._merge_legal(var, runs[-1] + [use], cpu, uses):
                    runs[-1].append(use)
                else:
                    runs.append([use])
            for run in runs:
                reps = self._promote(var, run, cpu, uses)
                entry = self._entry_for(var, run, cpu, reps)
                if entry is not None:
                    entries.append(entry)
        return TransferPlan(entries)

    def _promote(self, var: VarEntry, run: list[_AnchorUse], cpu: list[_CpuRef],
                 all_uses: list[_AnchorUse]) -> list[int]:
        """Region representatives hoisted to the outermost legal loop level.

        A parent loop may carry the region when every reference to the
        variable inside it is already covered by the run: then opening the
        region once outside the parent moves the transfers out of the
        iteration stream without changing what any iteration observes.
        """
        reps = self._reps(run)
        member_ids = {m.anchor for m in run}
        member_writes = any(m.written for m in run)
        while True:
            parents = {self.loops.get(r).parent_loop for r in reps}
            if len(parents) != 1 or None in parents:
                return reps
            parent = parents.pop()
            start = self.refs.order(parent)
            end = self._subtree_end[parent]
            for c in cpu:
                if start <= c.order <= end and self._barrier(c, member_writes):
                    return reps
            for u in all_uses:
                if u.anchor not in member_ids and start <= u.order <= end:
                    return reps
            reps = [parent]

    # -- stage 3: suppression ---------------------------------------------------

    def suppress_auto_transfers(self, plan: TransferPlan) -> TransferPlan:
        entries = []
        for e in plan.entries:
            scope = self.refs.vars[e.var].scope
            entries.append(replace(e, temp_region=(scope == "global"),
                                   members=list(e.members),
                                   present_sites=list(e.present_sites)))
        return TransferPlan(entries)

    # -- full chain -------------------------------------------------------------

    def compute_gpu_regions(self, genome, plan: TransferPlan) -> GpuRegionMap:
        gene = self.gene_map(genome)
        planned_vars = {e.var for e in plan.entries}
        anchors = []
        seen = set()
        for l in self.loops:
            a = self._anchor_of(l.loop_id, gene)
            if a is not None and a not in seen:
                seen.add(a)
                anchors.append(a)
        anchors.sort(key=self.refs.order)
        cpu_writes: list[int] = []
        for key in planned_vars:
            var = self.refs.vars[key]
            for region, flags in var.refs.items():
                if self._anchor_of(region, gene) is None and (flags.written or flags.defined):
                    cpu_writes.append(self.refs.order(region))
        runs: list[list[int]] = []
        for a in anchors:
            if runs and not any(self.refs.order(runs[-1][-1]) < w < self.refs.order(a)
                                for w in cpu_writes):
                runs[-1].append(a)
            else:
                runs.append([a])
        covered = [l.loop_id for l in self.loops
                   if gene.get(l.loop_id) == 1 and l.loop_id not in seen]
        for lid in covered:
            a = self._anchor_of(lid, gene)
            for run in runs:
                if a in run:
                    run.append(lid)
                    break
        return GpuRegionMap(runs, gene, self)

    def _enforce_laminar(self, plan: TransferPlan, gene: dict[int, int]) -> TransferPlan:
        """Demote structured regions that would partially overlap another.

        Structured (brace-wrapped) regions must nest; global variables use
        declare/update and never produce braces, so only local-scope entries
        are constrained.  A demoted variable falls back to per-loop regions,
        which align with single statements and therefore always nest.
        """
        def bounds(e: PlanEntry) -> tuple[int, int]:
            return e.open_span[0], e.close_span[1]

        def partial_overlap(a: PlanEntry, b: PlanEntry) -> bool:
            if a.open_file != b.open_file:
                return False
            (s1, e1), (s2, e2) = bounds(a), bounds(b)
            if e1 <= s2 or e2 <= s1:
                return False
            return not (s1 <= s2 and e2 <= e1) and not (s2 <= s1 and e1 <= e2)

        structured = [e for e in plan.entries
                      if self.refs.vars[e.var].scope != "global"]
        if not structured:
            return plan
        accepted: list[PlanEntry] = []
        demoted: set[int] = set()
        for e in sorted(structured, key=lambda e: bounds(e)[0] - bounds(e)[1]):
            if any(partial_overlap(e, a) for a in accepted):
                demoted.add(id(e))
            else:
                accepted.append(e)
        if not demoted:
            return plan
        out: list[PlanEntry] = []
        for e in plan.entries:
            if id(e) not in demoted:
                out.append(e)
                continue
            var = self.refs.vars[e.var]
            uses, cpu = self._var_view(var, gene)
            for use in uses:
                if use.anchor in e.members:
                    single = self._entry_for(var, [use], cpu)
                    if single is not None:
                        out.append(single)
        return TransferPlan(out)

    def plan(self, genome) -> TransferPlan:
        raw = self.plan_transfers(genome)
        regions = self.compute_gpu_regions(genome, raw)
        merged = self.hoist_and_batch(raw, regions)
        merged = self._enforce_laminar(merged, regions.gene)
        return self.suppress_auto_transfers(merged)


# ---------------------------------------------------------------------------
# Module-level spec surface
# ---------------------------------------------------------------------------

def plan_transfers(genome, loops: LoopTable, refs: VarRefTable,
                   eligible_ids: list[int]) -> TransferPlan:
    """Copy directions per (variable, GPU loop) before any batching."""
    return Planner(loops, refs, eligible_ids).plan_transfers(genome)


def compute_gpu_regions(genome, loops: LoopTable, refs: VarRefTable,
                        eligible_ids: list[int], plan: TransferPlan) -> GpuRegionMap:
    return Planner(loops, refs, eligible_ids).compute_gpu_regions(genome, plan)


def hoist_and_batch(plan: TransferPlan, regions: GpuRegionMap) -> TransferPlan:
    return regions.planner.hoist_and_batch(plan, regions)


def suppress_auto_transfers(plan: TransferPlan, refs: VarRefTable,
                            planner: Optional[Planner] = None) -> TransferPlan:
    entries = []
    for e in plan.entries:
        scope = refs.vars[e.var].scope
        entries.append(replace(e, temp_region=(scope == "global"),
                               members=list(e.members),
                               present_sites=list(e.present_sites)))
    return TransferPlan(entries)


def plan_for_genome(genome, loops: LoopTable, refs: VarRefTable,
                    eligible_ids: list[int]) -> TransferPlan:
    """Full pipeline: directions, batching/hoisting, suppression."""
    return Planner(loops, refs, eligible_ids).plan(genome)
