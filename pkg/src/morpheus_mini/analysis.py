"""Static table-access analysis over validated programs.

Classification is flow-insensitive and conservative toward read-write:
any data-plane write site marks its table RW, and lookup results are
traced through ALU/FieldOf chains and branch conditions (control
dependence) to the updates they feed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Set, Tuple

from .ir import (Branch, Program, TableLookup, TableUpdate, instr_uses,
                 successors, topo_order)


@dataclass(frozen=True)
class AccessSite:
    site_id: str
    table: str
    kind: str  # read | write
    block: str
    index: int

    @property
    def context(self) -> str:
        return f"{self.block}#{self.index}"


@dataclass
class AnalysisResult:
    program: str
    version: int
    sites: List[AccessSite] = field(default_factory=list)
    marks: Dict[str, str] = field(default_factory=dict)  # table -> ro | rw
    pairs: List[Tuple[str, str]] = field(default_factory=list)  # (read site, write site)
    regions: Dict[str, str] = field(default_factory=dict)  # block -> stateless | stateful

    def read_sites(self) -> List[AccessSite]:
        return [s for s in self.sites if s.kind == "read"]

    def site(self, site_id: str, kind: str = "read") -> AccessSite:
        for s in self.sites:
            if s.site_id == site_id and s.kind == kind:
                return s
        raise KeyError(site_id)


def find_access_sites(p: Program) -> List[AccessSite]:
    """One AccessSite per table instruction, in program order.  The same
    logical site id may appear in several blocks of optimized programs;
    contexts stay distinct."""
    sites: List[AccessSite] = []
    for label, i, ins in p.iter_instructions():
        if isinstance(ins, TableLookup):
            sites.append(AccessSite(ins.site, ins.table, "read", label, i))
        elif isinstance(ins, TableUpdate):
            sites.append(AccessSite(ins.site, ins.table, "write", label, i))
    return sites


def classify_tables(p: Program, sites: List[AccessSite]) -> Dict[str, str]:
    """A table is RW exactly when the data plane writes it somewhere.
    Control-plane mutations do not enter into the marking."""
    marks = {tid: "ro" for tid in p.tables}
    for s in sites:
        if s.kind == "write":
            marks[s.table] = "rw"
    return marks


def _dominators(p: Program, order: List[str]) -> Dict[str, Set[str]]:
    preds: Dict[str, List[str]] = {label: [] for label in order}
    for label in order:
        for nxt in successors(p.blocks[label].terminator):
            if nxt in preds:
                preds[nxt].append(label)
    dom: Dict[str, Set[str]] = {}
    for label in order:
        if not preds[label]:
            dom[label] = {label}
        else:
            inter = set.intersection(*(dom[q] for q in preds[label]))
            dom[label] = inter | {label}
    return dom


def _postdominators(p: Program, order: List[str]) -> Dict[str, Set[str]]:
    pdom: Dict[str, Set[str]] = {}
    for label in reversed(order):
        succs = [s for s in successors(p.blocks[label].terminator) if s in p.blocks]
        if not succs:
            pdom[label] = {label}
        else:
            pdom[label] = set.intersection(*(pdom[s] for s in succs)) | {label}
    return pdom


def match_lookups_to_updates(p: Program) -> List[Tuple[str, str]]:
    """Pairs (read site, write site) where the lookup result can influence
    the update: it reaches an operand, or the update is control-dependent
    on a branch testing a value derived from the lookup."""
    order = topo_order(p)
    if order is None:
        raise ValueError("program has a control-flow cycle")
    pdom = _postdominators(p, order)

    lookups = [(label, i, ins) for label, i, ins in p.iter_instructions()
               if isinstance(ins, TableLookup)]
    updates = [(label, i, ins) for label, i, ins in p.iter_instructions()
               if isinstance(ins, TableUpdate)]
    pairs: Set[Tuple[str, str]] = set()

    for _rlabel, _ri, lookup in lookups:
        # flow-insensitive taint, no kills, transitive through defs
        tainted: Set[str] = {lookup.dst}
        changed = True
        while changed:
            changed = False
            for _l, _i, ins in p.iter_instructions():
                defs = getattr(ins, "dst", None)
                if defs is None or defs in tainted or ins is lookup:
                    continue
                if any(u in tainted for u in instr_uses(ins)):
                    tainted.add(defs)
                    changed = True
        # branches whose condition is tainted, by block
        tainted_branches: List[str] = []
        for label in order:
            term = p.blocks[label].terminator
            if isinstance(term, Branch) and term.cond in tainted:
                tainted_branches.append(label)
        for wlabel, _wi, update in updates:
            hit = any(u in tainted for u in instr_uses(update))
            if not hit:
                for blabel in tainted_branches:
                    for succ in successors(p.blocks[blabel].terminator):
                        if succ in pdom and wlabel in pdom.get(succ, set()) \
                                and wlabel not in pdom[blabel]:
                            hit = True
                            break
                    if hit:
                        break
            if hit:
                pairs.add((lookup.site, update.site))
    return sorted(pairs)


def classify_regions(p: Program, marks: Dict[str, str],
                     sites: List[AccessSite]) -> Dict[str, str]:
    """Stateful blocks either touch an RW table themselves or sit strictly
    below one on every path (dominance)."""
    order = topo_order(p)
    if order is None:
        raise ValueError("program has a control-flow cycle")
    dom = _dominators(p, order)
    rw_blocks = {s.block for s in sites if marks.get(s.table) == "rw"}
    regions: Dict[str, str] = {}
    for label in order:
        stateful = label in rw_blocks or any(d in rw_blocks for d in dom[label])
        regions[label] = "stateful" if stateful else "stateless"
    return regions


def analyze(p: Program) -> AnalysisResult:
    sites = find_access_sites(p)
    marks = classify_tables(p, sites)
    pairs = match_lookups_to_updates(p)
    regions = classify_regions(p, marks, sites)
    return AnalysisResult(p.name, p.version, sites, marks, pairs, regions)


def render_report(a: AnalysisResult) -> str:
    lines = [f"program {a.program} v{a.version}"]
    by_table: Dict[str, List[AccessSite]] = {}
    for s in a.sites:
        by_table.setdefault(s.table, []).append(s)
    for tid in sorted(a.marks):
        lines.append(f"table {tid} mark={a.marks[tid]}")
        for s in by_table.get(tid, []):
            lines.append(f"  {s.kind} site={s.site_id} at {s.context}")
    if a.pairs:
        lines.append("lookup-update pairs:")
        for r, w in a.pairs:
            lines.append(f"  {r} -> {w}")
    lines.append("regions:")
    for label in a.regions:
        lines.append(f"  {label} {a.regions[label]}")
    return "\n".join(lines) + "\n"
