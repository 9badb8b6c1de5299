"""The compile cycle: turn a table snapshot plus heatmaps into a guarded,
specialized program.

Pass order is fixed.  Read-write tables never see elimination, injection,
constant folding, or dead-code removal derived from their contents; their
fast paths exist only behind a per-site generation guard.  Every pass
leaves the program valid or the cycle aborts.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace as dc_replace
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from .analysis import AnalysisResult
from .costmodel import (EXACT_LOOKUP, LPM_BASE, LPM_PER_LENGTH,
                        WILDCARD_PER_EXAMINED)
from .instrumentation import Heatmap, SamplingPolicy, heavy_hitters
from .ir import (Alu, Block, Branch, Const, FieldOf, GuardCheck, InstrRecord,
                 Jump, Program, Return, SetField, TableLookup, TableSchema,
                 TableUpdate, alu_eval, clone_program, instr_uses, mask,
                 successors, topo_order, validate)
from .lowering import (ChainArm, DSPlan, InjectionPlan, SiteDecision,
                       find_site_lookup, lower_site, register_def_count,
                       used_value_fields)
from .tables import (TableState, distinct_prefix_lengths, entry_count,
                     exact_lookup, field_domain, iter_entries, lookup_values,
                     make_table, mutate, uniform_prefix_length)

PASS_ORDER = ("table_elimination", "ds_specialization", "jit_inlining",
              "branch_injection", "constant_propagation", "dce",
              "guard_insertion")


@dataclass
class PassConfig:
    small_table_threshold: int = 16
    chain_cap: int = 8
    injection_domain_cap: int = 3
    min_exact_rules: int = 4
    disabled_passes: FrozenSet[str] = frozenset()
    disabled_tables: FrozenSet[str] = frozenset()
    sampling: SamplingPolicy = dc_field(default_factory=SamplingPolicy)

    def enabled(self, name: str) -> bool:
        return name not in self.disabled_passes


@dataclass(frozen=True)
class GuardSpec:
    guard_id: str
    kind: str  # program | site
    tables: Tuple[str, ...]
    generation: Optional[int] = None


@dataclass
class OptimizedArtifact:
    program: Program
    guards: List[GuardSpec]
    table_generations: Dict[str, int]
    ro_epoch: int
    instrumented_sites: List[str]
    shadow_tables: Dict[str, TableState]
    pass_log: List[str]

    def site_guards(self) -> List[GuardSpec]:
        return [g for g in self.guards if g.kind == "site"]


class PipelineAbort(Exception):
    def __init__(self, pass_name: str, diagnostics: List[str]):
        super().__init__(f"{pass_name}: {'; '.join(diagnostics[:4])}")
        self.pass_name = pass_name
        self.diagnostics = diagnostics


def _check(p: Program, pass_name: str) -> None:
    problems = validate(p)
    if problems:
        raise PipelineAbort(pass_name, problems)


def _fmt_key(key: Tuple[int, ...]) -> str:
    return "(" + ",".join(str(v) for v in key) + ")"


# ------------------------------------------------------------- the passes


def _pass_elimination(order: List[str], decisions: Dict[str, SiteDecision],
                      tables: Dict[str, TableState], cfg: PassConfig,
                      log: List[str]) -> None:
    if not cfg.enabled("table_elimination"):
        return
    for sid in order:
        d = decisions[sid]
        if entry_count(tables[d.table]) == 0:
            if d.rw:
                log.append(f"table_elimination: skip {sid} table={d.table} (rw)")
                continue
            d.eliminated = True
            log.append(f"table_elimination: {sid} table={d.table} empty, "
                       f"always-miss")


def _pass_ds(work: Program, order: List[str],
             decisions: Dict[str, SiteDecision],
             tables: Dict[str, TableState], cfg: PassConfig,
             log: List[str]) -> None:
    if not cfg.enabled("ds_specialization"):
        return
    for sid in order:
        d = decisions[sid]
        if d.eliminated:
            continue
        t = tables[d.table]
        if t.kind == "lpm":
            length = uniform_prefix_length(t)
            if length is None or entry_count(t) == 0:
                continue
            width = t.schema.key_widths()[0]
            # structural model prices one probe per distinct length like a
            # hash probe; a single length always loses to one exact hit
            model_now = LPM_BASE + EXACT_LOOKUP * 1
            model_new = EXACT_LOOKUP + (2 if length < width else 0)
            if model_new >= model_now:
                continue
            exact_id = f"{d.table}__exact"
            schema = TableSchema("exact", t.schema.key_fields,
                                 t.schema.value_fields)
            shadow = make_table(exact_id, schema)
            for (prefix, _l), values in iter_entries(t):
                mutate(shadow, "insert", (prefix,), values)
            mask_value = None
            if length < width:
                mask_value = (mask(length) << (width - length)) if length else 0
            d.ds = DSPlan("lpm_exact", {exact_id: shadow}, exact_id=exact_id,
                          mask_value=mask_value)
            work.tables[exact_id] = schema
            log.append(f"ds_specialization: {sid} table={d.table} lpm->exact"
                       f" length={length} n={entry_count(t)}"
                       f" model={model_new}<{model_now}")
        elif t.kind == "wildcard":
            widths = t.schema.key_widths()
            exact_rules = [r for r in t.wc_rules
                           if all(m == mask(w)
                                  for (_v, m), w in zip(r.fields, widths))]
            if len(exact_rules) < cfg.min_exact_rules:
                continue
            pre_id, res_id = f"{d.table}__pre", f"{d.table}__res"
            pre = make_table(pre_id, TableSchema("exact", t.schema.key_fields,
                                                 t.schema.value_fields))
            for r in exact_rules:
                key = tuple(v for v, _m in r.fields)
                winner = lookup_values(t, key)
                mutate(pre, "insert", key, winner)
            res = make_table(res_id, TableSchema("wildcard",
                                                 t.schema.key_fields,
                                                 t.schema.value_fields))
            for r in t.wc_rules:
                if r not in exact_rules:
                    mutate(res, "insert", (r.priority, r.fields), r.values)
            d.ds = DSPlan("wildcard_pre", {pre_id: pre, res_id: res},
                          pre_id=pre_id, res_id=res_id)
            work.tables[pre_id] = pre.schema
            work.tables[res_id] = res.schema
            log.append(f"ds_specialization: {sid} table={d.table}"
                       f" wildcard->exact pre={entry_count(pre)}"
                       f" residual={entry_count(res)}")


def _slow_path_estimate(d: SiteDecision, t: TableState, used: int) -> float:
    if d.ds and d.ds.kind == "wildcard_pre":
        res = d.ds.tables[d.ds.res_id]
        look = EXACT_LOOKUP + WILDCARD_PER_EXAMINED * entry_count(res)
    elif d.ds and d.ds.kind == "lpm_exact":
        look = EXACT_LOOKUP + (2 if d.ds.mask_value is not None else 0)
    elif t.kind == "exact":
        look = EXACT_LOOKUP
    elif t.kind == "lpm":
        look = LPM_BASE + LPM_PER_LENGTH * distinct_prefix_lengths(t)
    else:
        look = WILDCARD_PER_EXAMINED * entry_count(t)
    # lookup, hit branch, field extraction, flag, jump to the join
    return look + 1 + used + 2


def _arm_values(t: TableState, key: Tuple[int, ...],
                nvalues: int) -> ChainArm:
    values = lookup_values(t, key)
    if values is None:
        return ChainArm(key, False, (0,) * nvalues)
    return ChainArm(key, True, values)


def _pass_jit(work: Program, order: List[str],
              decisions: Dict[str, SiteDecision],
              tables: Dict[str, TableState],
              heatmaps: Dict[str, Heatmap], cfg: PassConfig,
              log: List[str]) -> None:
    if not cfg.enabled("jit_inlining"):
        return
    for sid in order:
        d = decisions[sid]
        if d.eliminated:
            continue
        t = tables[d.table]
        _l, _i, lookup = find_site_lookup(work, sid)
        used = len(used_value_fields(work, lookup.dst))
        nvalues = len(t.schema.value_fields)
        n = entry_count(t)
        if (t.kind == "exact" and not d.rw and d.ds is None
                and 0 < n <= cfg.small_table_threshold):
            d.full_inline = True
            d.arms = [ChainArm(k, True, v) for k, v in iter_entries(t)]
            log.append(f"jit_inlining: {sid} table={d.table} full_inline n={n}")
            continue
        hm = heatmaps.get(sid)
        if hm is None or not hm.counts or not hm.total_recorded:
            continue
        hot = heavy_hitters(hm, cfg.sampling)[:cfg.chain_cap]
        probs = [hm.counts[k] / hm.total_recorded for k in hot]
        arm_cost = 1 + used + 1
        slow = _slow_path_estimate(d, t, used)
        guard_delta = 1 if (d.rw and d.ds is None) else 0
        best_m, best_c = 0, slow
        for m in range(1, len(hot) + 1):
            covered = sum(probs[:m])
            c = sum(probs[i] * (2 * (i + 1) + arm_cost) for i in range(m))
            c += (1 - covered) * (2 * m + slow)
            c += guard_delta
            if c < best_c:
                best_m, best_c = m, c
        if best_m:
            d.arms = [_arm_values(t, key, nvalues) for key in hot[:best_m]]
            keys = " ".join(_fmt_key(a.key) for a in d.arms)
            log.append(f"jit_inlining: {sid} table={d.table} chain m={best_m}"
                       f" cost={best_c:.2f} base={slow:.2f} keys=[{keys}]")


def _pass_injection(work: Program, order: List[str],
                    decisions: Dict[str, SiteDecision],
                    tables: Dict[str, TableState], cfg: PassConfig,
                    log: List[str]) -> None:
    if not cfg.enabled("branch_injection"):
        return
    for sid in order:
        d = decisions[sid]
        if d.eliminated or d.full_inline:
            continue
        t = tables[d.table]
        for idx, (fname, _w) in enumerate(t.schema.key_fields):
            values, exact = field_domain(t, fname)
            if not exact or not 0 < len(values) <= cfg.injection_domain_cap:
                continue
            if d.rw:
                log.append(f"branch_injection: skip {sid} table={d.table} (rw)")
                break
            d.injection = InjectionPlan(idx, fname, values)
            log.append(f"branch_injection: {sid} table={d.table}"
                       f" field={fname} domain={list(values)}")
            break


# ------------------------------------------------- constant propagation

_BOT = object()


def _pass_cp(p: Program, tables_all: Dict[str, TableState],
             marks_all: Dict[str, str], opaque: Set[str], cfg: PassConfig,
             log: List[str]) -> None:
    if not cfg.enabled("constant_propagation"):
        return
    order = topo_order(p)
    if order is None:
        raise PipelineAbort("constant_propagation", ["cycle in program"])
    lookup_table: Dict[str, str] = {}
    for _l, _i, ins in p.iter_instructions():
        if isinstance(ins, TableLookup):
            lookup_table[ins.dst] = ins.table

    lat: Dict[str, object] = {}
    reachable: Set[str] = {p.entry}

    def setval(reg: str, val) -> bool:
        old = lat.get(reg)
        if old is _BOT:
            return False
        if old is None:
            lat[reg] = val
            return True
        if old == val:
            return False
        lat[reg] = _BOT
        return True

    def evaluate(ins) -> object:
        if isinstance(ins, Const):
            return ins.value
        if isinstance(ins, Alu):
            a, b = lat.get(ins.a), lat.get(ins.b)
            if a is _BOT or b is _BOT or a is None or b is None:
                return _BOT
            return alu_eval(ins.op, a, b)
        if isinstance(ins, FieldOf):
            tid = lookup_table.get(ins.src)
            if tid is not None and marks_all.get(tid) == "ro":
                t = tables_all.get(tid)
                if t is not None:
                    fname = t.schema.value_fields[ins.index][0]
                    values, _exact = field_domain(t, fname)
                    if len(values) == 1:
                        return values[0]
            return _BOT
        return _BOT

    changed = True
    while changed:
        changed = False
        for label in order:
            if label not in reachable:
                continue
            block = p.blocks[label]
            for ins in block.instructions:
                dst = getattr(ins, "dst", None)
                if dst is None:
                    continue
                val = _BOT if dst in opaque else evaluate(ins)
                if isinstance(ins, (TableLookup,)):
                    val = _BOT
                if setval(dst, val):
                    changed = True
            term = block.terminator
            if isinstance(term, Branch):
                cond = lat.get(term.cond)
                if cond is _BOT or cond is None:
                    targets = [term.then_label, term.else_label]
                elif cond:
                    targets = [term.then_label]
                else:
                    targets = [term.else_label]
            else:
                targets = list(successors(term))
            for tgt in targets:
                if tgt not in reachable:
                    reachable.add(tgt)
                    changed = True

    folded_defs = folded_branches = 0
    for label in order:
        if label not in reachable:
            continue
        block = p.blocks[label]
        for i, ins in enumerate(block.instructions):
            if isinstance(ins, (Alu, FieldOf)):
                val = lat.get(ins.dst)
                if val is not None and val is not _BOT:
                    block.instructions[i] = Const(ins.dst, 128, val)
                    folded_defs += 1
        term = block.terminator
        if isinstance(term, Branch):
            cond = lat.get(term.cond)
            if cond is not None and cond is not _BOT:
                taken = term.then_label if cond else term.else_label
                block.instructions[-1] = Jump(taken)
                folded_branches += 1
    log.append(f"constant_propagation: folded {folded_branches} branches,"
               f" {folded_defs} defs")


# ------------------------------------------------------------------- dce

_PURE = (Const, Alu, FieldOf)


def _retarget(term, old: str, new: str):
    if isinstance(term, Jump) and term.target == old:
        return dc_replace(term, target=new)
    if isinstance(term, Branch):
        t = new if term.then_label == old else term.then_label
        e = new if term.else_label == old else term.else_label
        if (t, e) != (term.then_label, term.else_label):
            return dc_replace(term, then_label=t, else_label=e)
    if isinstance(term, GuardCheck):
        ok = new if term.ok == old else term.ok
        fb = new if term.fallback == old else term.fallback
        if (ok, fb) != (term.ok, term.fallback):
            return dc_replace(term, ok=ok, fallback=fb)
    return term


def run_dce(p: Program, marks_all: Dict[str, str]) -> Tuple[int, int]:
    """Unreachable blocks, dead pure defs, degenerate branches, and
    jump-only block threading, to a fixpoint.  Returns removal counts."""
    removed_i = removed_b = 0
    changed = True
    while changed:
        changed = False
        seen: Set[str] = set()
        stack = [p.entry]
        while stack:
            label = stack.pop()
            if label in seen or label not in p.blocks:
                continue
            seen.add(label)
            stack.extend(successors(p.blocks[label].terminator))
        for label in [l for l in p.blocks if l not in seen]:
            removed_i += len(p.blocks[label].instructions)
            del p.blocks[label]
            removed_b += 1
            changed = True

        for block in p.blocks.values():
            term = block.terminator
            if isinstance(term, Branch) and term.then_label == term.else_label:
                block.instructions[-1] = Jump(term.then_label)
                changed = True

        for label in list(p.blocks):
            block = p.blocks.get(label)
            if block is None or len(block.instructions) != 1:
                continue
            term = block.instructions[0]
            if not isinstance(term, Jump) or term.target == label:
                continue
            target = term.target
            for other in p.blocks.values():
                if other is block:
                    continue
                other.instructions[-1] = _retarget(other.terminator, label,
                                                   target)
            if p.entry == label:
                p.entry = target
            del p.blocks[label]
            removed_b += 1
            changed = True

        used: Set[str] = set()
        for _l, _i, ins in p.iter_instructions():
            used.update(instr_uses(ins))
        for block in p.blocks.values():
            kept = []
            for ins in block.instructions:
                dst = getattr(ins, "dst", None)
                dead = dst is not None and dst not in used
                if dead and isinstance(ins, _PURE):
                    removed_i += 1
                    changed = True
                    continue
                if dead and isinstance(ins, TableLookup) and \
                        marks_all.get(ins.table) == "ro":
                    removed_i += 1
                    changed = True
                    continue
                kept.append(ins)
            block.instructions[:] = kept
    return removed_i, removed_b


def _pass_dce(p: Program, marks_all: Dict[str, str], cfg: PassConfig,
              log: List[str]) -> None:
    if not cfg.enabled("dce"):
        return
    ni, nb = run_dce(p, marks_all)
    log.append(f"dce: removed {ni} instructions, {nb} blocks")


# ---------------------------------------------------------------- guards


def _pass_guards(work: Program, original: Program, analysis: AnalysisResult,
                 order: List[str], decisions: Dict[str, SiteDecision],
                 tables: Dict[str, TableState], ro_epoch: int,
                 log: List[str]) -> List[GuardSpec]:
    guards: List[GuardSpec] = []
    ro_tables = tuple(sorted(t for t, m in analysis.marks.items()
                             if m == "ro"))
    guards.append(GuardSpec("prog", "program", ro_tables, None))
    log.append(f"guard_insertion: program guard ro_epoch={ro_epoch}"
               f" tables={list(ro_tables)}")
    for sid in order:
        d = decisions[sid]
        if d.needs_guard:
            gen = tables[d.table].generation
            d.guard_generation = gen
            guards.append(GuardSpec(f"site_{sid}", "site", (d.table,), gen))
            log.append(f"guard_insertion: site guard {sid} table={d.table}"
                       f" generation={gen}")

    for label, block in original.blocks.items():
        ins = list(block.instructions[:-1])
        term = block.terminator
        if isinstance(term, Jump):
            term = dc_replace(term, target=f"orig__{term.target}")
        elif isinstance(term, Branch):
            term = dc_replace(term, then_label=f"orig__{term.then_label}",
                              else_label=f"orig__{term.else_label}")
        ins.append(term)
        work.blocks[f"orig__{label}"] = Block(f"orig__{label}", ins)
    work.blocks["prog_guard"] = Block("prog_guard", [
        GuardCheck("prog", work.entry, f"orig__{original.entry}")])
    work.entry = "prog_guard"
    return guards


# ---------------------------------------------------------------- driver


def run_pipeline(original: Program, analysis: AnalysisResult,
                 heatmaps: Dict[str, Heatmap],
                 tables: Dict[str, TableState], cfg: PassConfig,
                 instrumented_sites: List[str],
                 ro_epoch: int) -> OptimizedArtifact:
    """tables must be a snapshot the caller will not mutate mid-call."""
    work = clone_program(original)
    work.provenance = "optimized"
    log: List[str] = []
    instrumented = set(instrumented_sites)

    order: List[str] = []
    decisions: Dict[str, SiteDecision] = {}
    for s in analysis.read_sites():
        if s.table in cfg.disabled_tables:
            log.append(f"setup: skip {s.site_id} table={s.table} (disabled)")
            continue
        if s.site_id in decisions:
            continue
        _lb, _ix, lk = find_site_lookup(work, s.site_id)
        if register_def_count(work, lk.dst) > 1:
            log.append(f"setup: skip {s.site_id} (result register reused)")
            continue
        order.append(s.site_id)
        decisions[s.site_id] = SiteDecision(
            s.site_id, s.table, analysis.marks[s.table] == "rw",
            record=s.site_id in instrumented)

    _pass_elimination(order, decisions, tables, cfg, log)
    _pass_ds(work, order, decisions, tables, cfg, log)
    _pass_jit(work, order, decisions, tables, heatmaps, cfg, log)
    _pass_injection(work, order, decisions, tables, cfg, log)

    opaque: Set[str] = set()
    for sid in order:
        d = decisions[sid]
        if not (d.record or d.explodes or d.ds):
            continue
        _lb, _ix, lk = find_site_lookup(work, sid)
        used = used_value_fields(work, lk.dst)
        lower_site(work, d)
        if d.rw and d.explodes:
            opaque.add(f"{sid}__hit")
            opaque.update(f"{sid}__f{j}" for j in used)
    _check(work, "branch_injection")

    tables_all = dict(tables)
    marks_all = dict(analysis.marks)
    shadow_tables: Dict[str, TableState] = {}
    for sid in order:
        d = decisions[sid]
        if d.ds:
            for tid, shadow in d.ds.tables.items():
                tables_all[tid] = shadow
                shadow_tables[tid] = shadow
                marks_all[tid] = analysis.marks[d.table]

    _pass_cp(work, tables_all, marks_all, opaque, cfg, log)
    _check(work, "constant_propagation")
    _pass_dce(work, marks_all, cfg, log)
    _check(work, "dce")

    guards = _pass_guards(work, original, analysis, order, decisions,
                          tables, ro_epoch, log)
    _check(work, "guard_insertion")

    table_generations = {d.table: d.guard_generation
                         for d in decisions.values()
                         if d.guard_generation is not None}
    return OptimizedArtifact(
        program=work, guards=guards, table_generations=table_generations,
        ro_epoch=ro_epoch, instrumented_sites=sorted(instrumented),
        shadow_tables=shadow_tables, pass_log=log)
