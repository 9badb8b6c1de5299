"""Execution: a reference interpreter, a faster generated-Python executor
with identical cost semantics, and the engine that runs traffic while
recompiling and atomically swapping program versions between packets.

Cost charging rules (both executors):
  plain instruction 1; branch or jump 1; guard check 1; table update 12;
  record 2 when sampled else 1; lookups by structure: exact 10,
  lpm 5 + 3 per distinct prefix length, wildcard 4 per rule examined.
  A fused compare group charges 1 for its non-branch part and 1 for its
  branch, however many constants and ALU ops it carries.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field as dc_field, replace as dc_replace
from typing import Callable, Dict, List, Optional, Tuple

from .analysis import analyze
from .costmodel import (CAT_BRANCH, CAT_GUARD, CAT_INSTR,
                        CAT_INSTRUMENTATION, CAT_LOOKUP, CAT_UPDATE,
                        CostBreakdown, EXACT_LOOKUP, LPM_BASE,
                        LPM_PER_LENGTH, RECORD_SAMPLED, RECORD_SKIPPED,
                        TABLE_UPDATE, WILDCARD_PER_EXAMINED)
from .instrumentation import (SamplingPolicy, SiteCache, make_caches,
                              plan_instrumentation, record,
                              snapshot_and_reset)
from .ir import (Alu, Branch, Const, FIELDS, FIELD_INDEX, FIELD_ORDER,
                 FieldOf, GuardCheck, InstrRecord, Jump, LoadField, Program,
                 Return, SetField, TableLookup, TableUpdate, alu_eval,
                 clone_program, mask, topo_order)
from .optimizer import (OptimizedArtifact, PassConfig, PipelineAbort,
                        run_pipeline)
from .tables import (TableState, copy_table, distinct_prefix_lengths,
                     exact_lookup, lpm_lookup, mutate, wildcard_lookup)
from .workload import ControlUpdate, Scenario, Segment, iter_trace

Row = Tuple[int, ...]
# (action, row, instr, branch, guard, lookup, update, instrumentation, fallbacks)
ExecTuple = Tuple[str, Row, int, int, int, int, int, int, int]


class ExecutionError(Exception):
    pass


class EquivalenceError(Exception):
    pass


def lookup_with_cost(t: TableState, key: Row) -> Tuple[Optional[Row], int]:
    if t.kind == "exact":
        return exact_lookup(t, key), EXACT_LOOKUP
    if t.kind == "lpm":
        hit = lpm_lookup(t, key[0])
        cost = LPM_BASE + LPM_PER_LENGTH * distinct_prefix_lengths(t)
        return (None if hit is None else hit[0]), cost
    values, _prio, examined = wildcard_lookup(t, key)
    return values, WILDCARD_PER_EXAMINED * examined


# ---------------------------------------------------------- interpreter


def interpret(p: Program, row: Row, tables: Dict[str, TableState],
              guard_ok: Optional[Callable[[str], bool]] = None,
              record_cb: Optional[Callable[[str, Row], int]] = None,
              ) -> ExecTuple:
    fields = dict(zip(FIELD_ORDER, row))
    regs: Dict[str, object] = {}
    ci = cb = cg = cl = cu = cr = fb = 0
    charged: set = set()
    label = p.entry
    steps = 0
    while True:
        steps += 1
        if steps > len(p.blocks) + 1:
            raise ExecutionError(f"{p.name}: control flow does not terminate")
        nxt = None
        for ins in p.blocks[label].instructions:
            t = ins.__class__
            if t is Alu:
                if ins.fuse is None:
                    ci += 1
                elif ins.fuse not in charged:
                    ci += 1
                    charged.add(ins.fuse)
                regs[ins.dst] = alu_eval(ins.op, regs[ins.a], regs[ins.b])
            elif t is Const:
                if ins.fuse is None:
                    ci += 1
                elif ins.fuse not in charged:
                    ci += 1
                    charged.add(ins.fuse)
                regs[ins.dst] = ins.value
            elif t is LoadField:
                ci += 1
                regs[ins.dst] = fields[ins.fieldname]
            elif t is FieldOf:
                ci += 1
                v = regs[ins.src]
                if v is None:
                    raise ExecutionError(f"field of missed lookup {ins.src}")
                regs[ins.dst] = v[ins.index]
            elif t is Branch:
                cb += 1
                v = regs[ins.cond]
                if v is None or isinstance(v, tuple):
                    taken = v is not None
                else:
                    taken = bool(v)
                nxt = ins.then_label if taken else ins.else_label
            elif t is TableLookup:
                values, cost = lookup_with_cost(
                    tables[ins.table], tuple(regs[k] for k in ins.keys))
                cl += cost
                regs[ins.dst] = values
            elif t is SetField:
                ci += 1
                fields[ins.fieldname] = regs[ins.src] & mask(
                    FIELDS[ins.fieldname])
            elif t is TableUpdate:
                cu += TABLE_UPDATE
                mutate(tables[ins.table], "insert",
                       tuple(regs[k] for k in ins.keys),
                       tuple(regs[v] for v in ins.values))
            elif t is InstrRecord:
                if record_cb is None:
                    cr += RECORD_SKIPPED
                else:
                    cr += record_cb(ins.site,
                                    tuple(regs[k] for k in ins.keys))
            elif t is Jump:
                cb += 1
                nxt = ins.target
            elif t is Return:
                ci += 1
                out = tuple(fields[f] for f in FIELD_ORDER)
                return (ins.action, out, ci, cb, cg, cl, cu, cr, fb)
            elif t is GuardCheck:
                cg += 1
                if guard_ok is None or guard_ok(ins.guard):
                    nxt = ins.ok
                else:
                    fb += 1
                    nxt = ins.fallback
            else:
                raise ExecutionError(f"unknown instruction {ins!r}")
        label = nxt


# ---------------------------------------------------- generated executor


@dataclass
class CompiledProgram:
    version: int
    source: str
    fn: Callable


def _sanitize(reg: str, names: Dict[str, str]) -> str:
    if reg not in names:
        names[reg] = f"r{len(names)}"
    return names[reg]


_ALU_EXPR = {
    "add": "({a} + {b}) & {M}",
    "sub": "({a} - {b}) & {M}",
    "and": "{a} & {b}",
    "or": "{a} | {b}",
    "xor": "{a} ^ {b}",
    "shl": "(({a} << {b}) & {M} if {b} < 128 else 0)",
    "shr": "({a} >> {b} if {b} < 128 else 0)",
    "eq": "(1 if {a} == {b} else 0)",
    "ne": "(1 if {a} != {b} else 0)",
    "lt": "(1 if {a} < {b} else 0)",
}


def generate_source(p: Program) -> str:
    order = topo_order(p)
    if order is None:
        raise ExecutionError(f"{p.name}: cannot compile a cyclic program")
    labels = {label: i for i, label in enumerate(order)}
    names: Dict[str, str] = {}
    optional = {ins.dst for _l, _i, ins in p.iter_instructions()
                if isinstance(ins, TableLookup)}
    M = (1 << 128) - 1
    fvars = ", ".join(f"f{i}" for i in range(len(FIELD_ORDER)))
    out: List[str] = [
        "def run(fields, lk, upd, rec, gok):",
        f"    ({fvars}) = fields",
        "    ci = cb = cg = cl = cu = cr = fb = 0",
        f"    _L = {labels[p.entry]}",
        "    while True:",
    ]
    emit = out.append
    first = True
    for label in order:
        block = p.blocks[label]
        kw = "if" if first else "elif"
        first = False
        emit(f"        {kw} _L == {labels[label]}:  # {label}")
        body: List[str] = []
        static_ci = 0
        charged: set = set()
        for ins in block.instructions:
            t = ins.__class__
            if t is Const:
                if ins.fuse is None:
                    static_ci += 1
                elif ins.fuse not in charged:
                    static_ci += 1
                    charged.add(ins.fuse)
                body.append(f"{_sanitize(ins.dst, names)} = {ins.value}")
            elif t is Alu:
                if ins.fuse is None:
                    static_ci += 1
                elif ins.fuse not in charged:
                    static_ci += 1
                    charged.add(ins.fuse)
                expr = _ALU_EXPR[ins.op].format(
                    a=_sanitize(ins.a, names), b=_sanitize(ins.b, names), M=M)
                body.append(f"{_sanitize(ins.dst, names)} = {expr}")
            elif t is LoadField:
                static_ci += 1
                body.append(f"{_sanitize(ins.dst, names)} = "
                            f"f{FIELD_INDEX[ins.fieldname]}")
            elif t is FieldOf:
                static_ci += 1
                body.append(f"{_sanitize(ins.dst, names)} = "
                            f"{_sanitize(ins.src, names)}[{ins.index}]")
            elif t is SetField:
                static_ci += 1
                body.append(f"f{FIELD_INDEX[ins.fieldname]} = "
                            f"{_sanitize(ins.src, names)} & "
                            f"{mask(FIELDS[ins.fieldname])}")
            elif t is TableLookup:
                keys = ", ".join(_sanitize(k, names) for k in ins.keys)
                body.append(f"{_sanitize(ins.dst, names)}, _c = "
                            f"lk({ins.table!r}, ({keys},))")
                body.append("cl += _c")
            elif t is TableUpdate:
                keys = ", ".join(_sanitize(k, names) for k in ins.keys)
                vals = ", ".join(_sanitize(v, names) for v in ins.values)
                body.append(f"cu += upd({ins.table!r}, ({keys},), ({vals},))")
            elif t is InstrRecord:
                keys = ", ".join(_sanitize(k, names) for k in ins.keys)
                body.append(f"cr += rec({ins.site!r}, ({keys},))")
            elif t is Branch:
                cond = _sanitize(ins.cond, names)
                test = f"{cond} is not None" if ins.cond in optional else cond
                body.append("cb += 1")
                body.append(f"if {test}:")
                body.append(f"    _L = {labels[ins.then_label]}")
                body.append("else:")
                body.append(f"    _L = {labels[ins.else_label]}")
                body.append("continue")
            elif t is Jump:
                body.append("cb += 1")
                body.append(f"_L = {labels[ins.target]}")
                body.append("continue")
            elif t is Return:
                static_ci += 1
                body.append(f"return ({ins.action!r}, ({fvars}), "
                            "ci, cb, cg, cl, cu, cr, fb)")
            elif t is GuardCheck:
                body.append("cg += 1")
                body.append(f"if gok({ins.guard!r}):")
                body.append(f"    _L = {labels[ins.ok]}")
                body.append("else:")
                body.append("    fb += 1")
                body.append(f"    _L = {labels[ins.fallback]}")
                body.append("continue")
            else:
                raise ExecutionError(f"unknown instruction {ins!r}")
        lines = [f"ci += {static_ci}"] if static_ci else []
        lines.extend(body)
        for line in lines:
            emit(f"            {line}")
    emit("        else:")
    emit("            raise RuntimeError('jump to unknown block')")
    return "\n".join(out) + "\n"


def compile_program(p: Program) -> CompiledProgram:
    source = generate_source(p)
    ns: Dict[str, object] = {}
    exec(source, ns)  # noqa: S102 - our own generated code
    return CompiledProgram(p.version, source, ns["run"])


# ----------------------------------------------------------------- engine


@dataclass
class EngineConfig:
    mode: str = "adaptive"  # adaptive | baseline | naive
    executor: str = "compiled"  # compiled | interp
    num_workers: int = 2
    compile_period: int = 50_000
    compile_latency: int = 1_000
    window: int = 5_000
    seed: int = 0
    shadow_check: bool = False
    sampling: SamplingPolicy = dc_field(default_factory=SamplingPolicy)
    passes: PassConfig = dc_field(default_factory=PassConfig)


@dataclass
class WindowStat:
    index: int
    packets: int
    mean_cost: float
    specialized_fraction: float
    recompiles: int
    guard_fallbacks: int


@dataclass
class CostReport:
    packets: int
    total_cost: int
    by_category: Dict[str, int]
    specialized_packets: int
    guard_fallbacks: int
    recompiles: int
    swaps: int
    aborts: int
    final_version: int
    windows: List[WindowStat]

    @property
    def mean_cost(self) -> float:
        return self.total_cost / self.packets if self.packets else 0.0

    @property
    def specialized_fraction(self) -> float:
        return (self.specialized_packets / self.packets
                if self.packets else 0.0)

    def breakdown(self) -> CostBreakdown:
        return CostBreakdown(dict(self.by_category))


CSV_HEADER = "window,mean_cost,specialized_hit_fraction,recompiles,guard_fallbacks"


def windows_csv(report: CostReport) -> str:
    lines = [CSV_HEADER]
    for w in report.windows:
        lines.append(f"{w.index},{w.mean_cost:.4f},"
                     f"{w.specialized_fraction:.4f},{w.recompiles},"
                     f"{w.guard_fallbacks}")
    return "\n".join(lines) + "\n"


class Engine:
    """Runs one scenario: packets in sequence order, workers interleaved
    round-robin, control updates applied between packets, and program
    versions swapped only at packet boundaries."""

    def __init__(self, scenario: Scenario, config: EngineConfig):
        self.scenario = scenario
        self.config = config
        if config.mode not in ("adaptive", "baseline", "naive"):
            raise ValueError(f"unknown mode {config.mode!r}")
        self.original = scenario.program
        self.analysis = analyze(self.original)
        self.tables: Dict[str, TableState] = scenario.tables
        self.base_table_ids = set(scenario.tables)
        self.ro_tables = {t for t, m in self.analysis.marks.items()
                          if m == "ro"}
        self.ro_epoch = 0
        self.version = 1
        self.live_program = self.original
        self.compiled = compile_program(self.original)
        self.artifact: Optional[OptimizedArtifact] = None
        self.pending: Optional[Tuple[int, Optional[OptimizedArtifact]]] = None
        self.control_queue: List[ControlUpdate] = []
        self.updates = sorted(scenario.control_updates, key=lambda u: u.seq)
        self.caches: Dict[Tuple[str, int], SiteCache] = {}
        self.worker_rngs = [random.Random(f"{config.seed}:worker:{w}")
                            for w in range(config.num_workers)]
        self.policy = dc_replace(
            config.sampling,
            table_enabled={**config.sampling.table_enabled,
                           **{t: False for t in config.passes.disabled_tables}})
        self.recompiles = 0
        self.swaps = 0
        self.aborts = 0
        self.guard_fallbacks = 0
        self.pass_history: List[Tuple[int, List[str]]] = []
        self._event_due = False
        self._cache_epoch = 0
        self._worker = 0
        self._guard_sites: Dict[str, Tuple[str, int]] = {}
        self._artifact_epoch = -1
        self._rw_ids = [t for t, m in self.analysis.marks.items()
                        if m == "rw"]

    # ---- data plane callbacks (bound once, resolved per call)

    def _lk(self, tid: str, key: Row) -> Tuple[Optional[Row], int]:
        return lookup_with_cost(self.tables[tid], key)

    def _upd(self, tid: str, key: Row, values: Row) -> int:
        mutate(self.tables[tid], "insert", key, values)
        return TABLE_UPDATE

    def _rec(self, site: str, key: Row) -> int:
        cache = self.caches.get((site, self._worker))
        if cache is None:
            return RECORD_SKIPPED
        sampled = record(cache, key, self.worker_rngs[self._worker])
        return RECORD_SAMPLED if sampled else RECORD_SKIPPED

    def _gok(self, gid: str) -> bool:
        if gid == "prog":
            return self.ro_epoch == self._artifact_epoch
        table, generation = self._guard_sites[gid]
        return self.tables[table].generation == generation

    # ---- control plane

    def _apply_update(self, u: ControlUpdate) -> None:
        mutate(self.tables[u.table], u.op, u.key, u.value)
        if u.table in self.ro_tables:
            self.ro_epoch += 1
            self._event_due = True

    def _start_compile(self, seq: int) -> None:
        self._event_due = False
        self.recompiles += 1
        ready = seq + self.config.compile_latency
        if self.config.mode == "baseline":
            self.pending = (ready, None)
            return
        snapshot = {tid: copy_table(self.tables[tid])
                    for tid in self.base_table_ids}
        heat = snapshot_and_reset(self.caches.values())
        threshold = (0 if self.config.mode == "naive"
                     else self.config.passes.small_table_threshold)
        planned = plan_instrumentation(self.original, self.analysis, snapshot,
                                       self.policy, threshold)
        try:
            artifact = run_pipeline(self.original, self.analysis, heat,
                                    snapshot, self.config.passes, planned,
                                    self.ro_epoch)
        except PipelineAbort:
            self.aborts += 1
            self.pending = (ready, None)
            return
        self.pass_history.append((seq, artifact.pass_log))
        self.pending = (ready, artifact)

    def _swap(self) -> None:
        assert self.pending is not None
        _ready, artifact = self.pending
        self.pending = None
        queued, self.control_queue = self.control_queue, []
        if artifact is not None:
            self.version += 1
            program = artifact.program
            program.version = self.version
            self.live_program = program
            self.compiled = compile_program(program)
            self.artifact = artifact
            self._artifact_epoch = artifact.ro_epoch
            self._guard_sites = {
                g.guard_id: (g.tables[0], g.generation)
                for g in artifact.guards if g.kind == "site"}
            for tid in [t for t in self.tables
                        if t not in self.base_table_ids]:
                del self.tables[tid]
            self.tables.update(artifact.shadow_tables)
            self._cache_epoch += 1
            probability = 1.0 if self.config.mode == "naive" else None
            self.caches = {
                (c.site_id, c.worker_id): c
                for c in make_caches(artifact.instrumented_sites,
                                     self.config.num_workers, self.policy,
                                     probability=probability,
                                     epoch=self._cache_epoch)}
            self.swaps += 1
        for u in queued:
            self._apply_update(u)

    # ---- execution

    def _execute(self, row: Row) -> ExecTuple:
        if self.config.executor == "interp":
            return interpret(self.live_program, row, self.tables,
                             guard_ok=self._gok, record_cb=self._rec)
        return self.compiled.fn(row, self._lk, self._upd, self._rec,
                                self._gok)

    def _shadow_check(self, seq: int, row: Row) -> ExecTuple:
        saved = {tid: copy_table(self.tables[tid]) for tid in self._rw_ids}
        result = self._execute(row)
        post = {tid: self.tables[tid] for tid in self._rw_ids}
        for tid in self._rw_ids:
            self.tables[tid] = saved[tid]
        ref = interpret(self.original, row, self.tables)
        if (result[0], result[1]) != (ref[0], ref[1]):
            raise EquivalenceError(
                f"packet {seq}: optimized {result[0]} {result[1]} != "
                f"original {ref[0]} {ref[1]}")
        for tid in self._rw_ids:
            a, b = post[tid], self.tables[tid]
            if (a.exact, a.lpm_buckets, a.wc_rules, a.generation) != \
                    (b.exact, b.lpm_buckets, b.wc_rules, b.generation):
                raise EquivalenceError(
                    f"packet {seq}: table {tid} diverged under optimization")
        return result

    def run(self, segments: List[Segment], seed: int,
            on_packet: Optional[Callable[[int, int, str, Row], None]] = None,
            ) -> CostReport:
        cfg = self.config
        ui = 0
        updates = self.updates
        total = ci = cb = cg = cl = cu = cr = 0
        spec_packets = 0
        packets = 0
        windows: List[WindowStat] = []
        wcost = wpk = wspec = wfall = 0

        for seq, pkt in enumerate(iter_trace(self.scenario, segments, seed)):
            while ui < len(updates) and updates[ui].seq <= seq:
                if self.pending is not None:
                    self.control_queue.append(updates[ui])
                else:
                    self._apply_update(updates[ui])
                ui += 1
            if self.pending is not None and seq >= self.pending[0]:
                self._swap()
            if self.pending is None and (seq % cfg.compile_period == 0
                                         or self._event_due):
                self._start_compile(seq)

            self._worker = seq % cfg.num_workers
            row = pkt.as_row()
            if cfg.shadow_check and self.version > 1:
                r = self._shadow_check(seq, row)
            else:
                r = self._execute(row)
            action, out_row, i1, b1, g1, l1, u1, r1, fb1 = r
            cost = i1 + b1 + g1 + l1 + u1 + r1
            ci += i1
            cb += b1
            cg += g1
            cl += l1
            cu += u1
            cr += r1
            total += cost
            self.guard_fallbacks += fb1
            specialized = (self.version > 1
                           and self.ro_epoch == self._artifact_epoch)
            spec_packets += specialized
            packets += 1
            wcost += cost
            wpk += 1
            wspec += specialized
            wfall += fb1
            if on_packet is not None:
                on_packet(seq, self.version, action, out_row)
            if wpk == cfg.window:
                windows.append(WindowStat(len(windows), wpk, wcost / wpk,
                                          wspec / wpk, self.recompiles,
                                          wfall))
                wcost = wpk = wspec = wfall = 0
        if wpk:
            windows.append(WindowStat(len(windows), wpk, wcost / wpk,
                                      wspec / wpk, self.recompiles, wfall))
        by_category = {CAT_INSTR: ci, CAT_BRANCH: cb, CAT_GUARD: cg,
                       CAT_LOOKUP: cl, CAT_UPDATE: cu,
                       CAT_INSTRUMENTATION: cr}
        return CostReport(packets=packets, total_cost=total,
                          by_category=by_category,
                          specialized_packets=spec_packets,
                          guard_fallbacks=self.guard_fallbacks,
                          recompiles=self.recompiles, swaps=self.swaps,
                          aborts=self.aborts, final_version=self.version,
                          windows=windows)


def run_scenario(scenario_factory: Callable[[], Scenario],
                 segments: List[Segment], seed: int,
                 config: EngineConfig,
                 on_packet: Optional[Callable] = None) -> CostReport:
    engine = Engine(scenario_factory(), config)
    return engine.run(segments, seed, on_packet=on_packet)


def differential_outputs(scenario_factory: Callable[[], Scenario],
                         segments: List[Segment], seed: int,
                         config_a: EngineConfig,
                         config_b: EngineConfig) -> Optional[str]:
    """Run the same trace under two configurations and return a description
    of the first diverging packet, or None when every packet agrees."""
    log_a: List[Tuple[int, str, Row]] = []
    run_scenario(scenario_factory, segments, seed, config_a,
                 on_packet=lambda s, _v, a, r: log_a.append((s, a, r)))
    failure: List[str] = []

    def check(seq: int, _version: int, action: str, row: Row) -> None:
        if failure:
            return
        sa, aa, ra = log_a[seq]
        if (aa, ra) != (action, row):
            failure.append(f"packet {seq}: {aa} {ra} != {action} {row}")

    run_scenario(scenario_factory, segments, seed, config_b, on_packet=check)
    return failure[0] if failure else None
