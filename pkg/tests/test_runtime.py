"""Executors and the live engine.

The interpreter is the semantic reference; the generated executor must
match it on actions, header rewrites, table effects, and every cost
category.  Engine tests pin swap timing, control-update queueing, event
recompiles, and the shadow checker.
"""
import random

import pytest

from morpheus_mini.analysis import analyze
from morpheus_mini.costmodel import CAT_INSTRUMENTATION
from morpheus_mini.instrumentation import Heatmap, make_caches, record
from morpheus_mini.ir import (Block, Branch, Const, Jump, Packet, Program,
                              Return, TableSchema)
from morpheus_mini.optimizer import PassConfig, run_pipeline
from morpheus_mini.runtime import (CSV_HEADER, Engine, EngineConfig,
                                   EquivalenceError, ExecutionError,
                                   compile_program, differential_outputs,
                                   interpret, lookup_with_cost, windows_csv)
from morpheus_mini.tables import copy_table, make_table, mutate
from morpheus_mini.text import parse_program
from morpheus_mini.workload import ControlUpdate, Scenario, Segment

RO_SRC = """
program tiny version 1 provenance original entry start
table m kind=exact key=k:16 value=a:16,b:16

start:
  %k = loadfield dst_port
  %r = lookup m keys=%k site=s1
  br %r then hit else miss

hit:
  %a = fieldof %r 0
  setfield vlan %a
  ret TX

miss:
  ret DROP
"""

RW_SRC = RO_SRC.replace(
    "miss:\n  ret DROP",
    "miss:\n  %cv = const 16:9\n"
    "  update m keys=%k vals=%cv,%cv site=w1\n"
    "  ret DROP")


def row(dst_port=0, proto=6):
    return Packet(proto=proto, src_ip=0, dst_ip=0, src_port=0,
                  dst_port=dst_port, src_mac=0, dst_mac=0, vlan=0,
                  payload_len=64).as_row()


def table_m(src=RO_SRC, n=20):
    p = parse_program(src)
    t = make_table("m", p.tables["m"])
    for k in range(n):
        mutate(t, "insert", (k,), (k + 100, k))
    return p, t


def tiny_scenario(src=RO_SRC, updates=()):
    p, t = table_m(src)

    def make_packet(flow, rng, seq):
        return Packet(proto=6, src_ip=0, dst_ip=0, src_port=0,
                      dst_port=flow % 50, src_mac=0, dst_mac=0, vlan=0,
                      payload_len=64)

    return Scenario("tiny", p, {"m": t}, list(updates), make_packet)


# ------------------------------------------------------------- executors


def test_hand_computed_costs():
    p, t = table_m()
    hit = interpret(p, row(dst_port=3), {"m": t})
    # loadfield + fieldof + setfield + ret, branch, exact lookup
    assert hit[2:] == (4, 1, 0, 10, 0, 0, 0)
    assert hit[0] == "TX" and hit[1][7] == 103
    miss = interpret(p, row(dst_port=40), {"m": t})
    assert miss[2:] == (2, 1, 0, 10, 0, 0, 0)
    assert miss[0] == "DROP"


def test_update_and_record_costs():
    p, t = table_m(RW_SRC)
    miss = interpret(p, row(dst_port=40), {"m": t})
    assert miss[6] == 12 and miss[0] == "DROP"
    assert (40,) in t.exact
    # a record with no cache behind it charges the unsampled rate
    p2 = parse_program(RO_SRC.replace(
        "%r = lookup m keys=%k site=s1",
        "record site=s1 keys=%k\n  %r = lookup m keys=%k site=s1"))
    p2.provenance = "optimized"
    out = interpret(p2, row(dst_port=3), {"m": t})
    assert out[7] == 1


def test_fused_group_charges_once():
    schema = TableSchema("exact", (("k", 16),), (("a", 16),))
    blocks = {
        "e": Block("e", [
            Const("c0", 16, 5, fuse="g"),
            Const("c1", 16, 5, fuse="g"),
            Const("k", 16, 5),
            Const("e0", 16, 1, fuse="g"),
            Branch("e0", "t", "f", fuse="g"),
        ]),
        "t": Block("t", [Return("TX")]),
        "f": Block("f", [Return("DROP")]),
    }
    p = Program("fused", 1, "optimized", "e", {"m": schema}, blocks)
    out = interpret(p, row(), {})
    # group g: 1 for all non-branch members, 1 for the branch; plain
    # const 1; return 1
    assert out[2] == 3 and out[3] == 1
    got = compile_program(p).fn(row(), None, None, None, None)
    assert got == out


class Harness:
    """Engine-shaped callbacks over a private table dict, for comparing
    the two executors head to head."""

    def __init__(self, tables, caches=None, seed=0, generations=None):
        self.tables = tables
        self.caches = caches or {}
        self.rng = random.Random(seed)
        self.generations = generations or {}

    def lk(self, tid, key):
        return lookup_with_cost(self.tables[tid], key)

    def upd(self, tid, key, values):
        mutate(self.tables[tid], "insert", key, values)
        return 12

    def rec(self, site, key):
        cache = self.caches.get(site)
        if cache is None:
            return 1
        return 2 if record(cache, key, self.rng) else 1

    def gok(self, gid):
        if gid == "prog":
            return True
        tid, gen = self.generations[gid]
        return self.tables[tid].generation == gen


@pytest.mark.parametrize("seed", range(8))
def test_interpreter_and_codegen_agree(seed):
    rng = random.Random(f"exec:{seed}")
    p, t = table_m(RW_SRC)
    heat = {"s1": Heatmap("s1", {(5,): 60, (9,): 25, (33,): 11}, 96, 96, 1)}
    art = run_pipeline(p, analyze(p), heat, {"m": copy_table(t)},
                       PassConfig(), ["s1"], ro_epoch=0)
    generations = {g.guard_id: (g.tables[0], g.generation)
                   for g in art.guards if g.kind == "site"}

    def fresh():
        tables = {"m": copy_table(t)}
        tables.update({k: copy_table(v)
                       for k, v in art.shadow_tables.items()})
        caches = {c.site_id: c for c in make_caches(["s1"], 1,
                                                    PassConfig().sampling)}
        return Harness(tables, caches, seed=seed, generations=generations)

    ha, hb = fresh(), fresh()
    fn = compile_program(art.program).fn
    for _ in range(250):
        r = row(dst_port=rng.choice([5, 9, 33, 17, 44, 2]))
        got = fn(r, hb.lk, hb.upd, hb.rec, hb.gok)
        ref = interpret(art.program, r, ha.tables, guard_ok=ha.gok,
                        record_cb=ha.rec)
        assert got == ref
        if rng.random() < 0.05:
            k = (rng.randrange(50),)
            v = (rng.randrange(1 << 16), 0)
            mutate(ha.tables["m"], "insert", k, v)
            mutate(hb.tables["m"], "insert", k, v)
    assert ha.tables["m"].exact == hb.tables["m"].exact


def test_interpreter_rejects_cycles():
    schema = TableSchema("exact", (("k", 16),), (("a", 16),))
    blocks = {
        "a": Block("a", [Jump("b")]),
        "b": Block("b", [Jump("a")]),
    }
    p = Program("loop", 1, "original", "a", {"m": schema}, blocks)
    with pytest.raises(ExecutionError):
        interpret(p, row(), {})


def test_lookup_cost_tracks_live_structure():
    schema = TableSchema("lpm", (("k", 32),), (("a", 16),))
    t = make_table("p", schema)
    mutate(t, "insert", (1 << 24, 8), (1,))
    assert lookup_with_cost(t, (0,))[1] == 8
    mutate(t, "insert", (1 << 16, 16), (2,))
    assert lookup_with_cost(t, (0,))[1] == 11


# ----------------------------------------------------------------- engine


def test_swap_happens_exactly_at_the_boundary():
    eng = Engine(tiny_scenario(),
                 EngineConfig(compile_period=2000, compile_latency=100))
    versions = {}
    eng.run([Segment("none", 4300)], seed=1,
            on_packet=lambda s, v, a, r: versions.setdefault(s, v))
    assert versions[99] == 1 and versions[100] == 2
    assert versions[2099] == 2 and versions[2100] == 3
    seq_versions = [versions[i] for i in range(4300)]
    assert seq_versions == sorted(seq_versions), "versions must be monotone"


def test_control_updates_queue_during_compile_window():
    updates = [ControlUpdate(50, "m", "insert", (30,), (1, 2))]
    eng = Engine(tiny_scenario(updates=updates),
                 EngineConfig(compile_period=5000, compile_latency=100))
    hits = {}
    eng.run([Segment("none", 1500)], seed=1,
            on_packet=lambda s, v, a, r: hits.setdefault(s, (a, r[7])))
    # the inserted entry is the only one that rewrites vlan to 1
    before = [s for s in range(50, 100) if hits[s] == ("TX", 1)]
    after = [s for s in range(100, 1500) if hits[s] == ("TX", 1)]
    assert not before, "queued update visible before the swap"
    assert after, "queued update never became visible"
    eng2 = Engine(tiny_scenario(updates=updates),
                  EngineConfig(mode="baseline", compile_period=5000,
                               compile_latency=100))
    hits2 = {}
    eng2.run([Segment("none", 1500)], seed=1,
             on_packet=lambda s, v, a, r: hits2.setdefault(s, (a, r)))
    assert eng.tables["m"].exact[(30,)] == (1, 2)
    assert eng2.tables["m"].exact[(30,)] == (1, 2)


def test_ro_update_fails_program_guard_until_event_recompile():
    updates = [ControlUpdate(300, "m", "insert", (30,), (1, 2))]
    eng = Engine(tiny_scenario(updates=updates),
                 EngineConfig(compile_period=2000, compile_latency=100))
    rep = eng.run([Segment("none", 4000)], seed=1)
    # compiles: periodic at 0 and 2000, plus the event at 300
    assert rep.recompiles == 3
    # between the update and the event swap every packet walks the
    # pristine body through the program guard
    assert rep.guard_fallbacks == 100
    assert rep.final_version == 4


def test_baseline_and_adaptive_same_outputs_small():
    for src in (RO_SRC, RW_SRC):
        diff = differential_outputs(
            lambda s=src: tiny_scenario(s,
                                        updates=[ControlUpdate(
                                            700, "m", "insert", (31,),
                                            (4, 4))]),
            [Segment("high", 6000)], 7,
            EngineConfig(mode="baseline", compile_period=2000,
                         compile_latency=150),
            EngineConfig(mode="adaptive", compile_period=2000,
                         compile_latency=150))
        assert diff is None


def test_interp_executor_parity_on_engine():
    reports = {}
    for ex in ("compiled", "interp"):
        eng = Engine(tiny_scenario(RW_SRC),
                     EngineConfig(executor=ex, compile_period=1500,
                                  compile_latency=100))
        reports[ex] = eng.run([Segment("high", 5000)], seed=3)
    a, b = reports["compiled"], reports["interp"]
    assert a.total_cost == b.total_cost
    assert a.by_category == b.by_category
    assert a.guard_fallbacks == b.guard_fallbacks


def test_shadow_check_passes_on_honest_engine():
    eng = Engine(tiny_scenario(RW_SRC),
                 EngineConfig(shadow_check=True, compile_period=1000,
                              compile_latency=100))
    rep = eng.run([Segment("high", 3000)], seed=2)
    assert rep.final_version >= 3


def test_shadow_check_catches_a_wrong_program():
    eng = Engine(tiny_scenario(),
                 EngineConfig(shadow_check=True, compile_period=1000,
                              compile_latency=100))
    eng.run([Segment("high", 1200)], seed=2)
    assert eng.version > 1
    broken = parse_program("""
program tiny version 1 provenance original entry start
table m kind=exact key=k:16 value=a:16,b:16

start:
  ret DROP
""")
    broken.version = eng.version
    eng.live_program = broken
    eng.compiled = compile_program(broken)
    with pytest.raises(EquivalenceError):
        eng._shadow_check(9999, row(dst_port=3))


def test_naive_mode_records_more_than_adaptive():
    costs = {}
    for mode in ("adaptive", "naive"):
        eng = Engine(tiny_scenario(), EngineConfig(
            mode=mode, compile_period=1000, compile_latency=100))
        rep = eng.run([Segment("high", 4000)], seed=4)
        costs[mode] = rep.by_category[CAT_INSTRUMENTATION]
    assert costs["naive"] > costs["adaptive"] > 0


def test_caches_cover_every_worker():
    eng = Engine(tiny_scenario(), EngineConfig(
        num_workers=3, compile_period=1000, compile_latency=100))
    eng.run([Segment("high", 2500)], seed=4)
    workers = {w for (_s, w) in eng.caches}
    assert workers == {0, 1, 2}
    assert all(c.samples_seen > 0 for c in eng.caches.values())


def test_windows_csv_shape_and_determinism():
    def run_once():
        eng = Engine(tiny_scenario(RW_SRC), EngineConfig(
            compile_period=1500, compile_latency=100, window=500))
        rep = eng.run([Segment("high", 4000)], seed=6)
        return rep, windows_csv(rep)

    rep1, csv1 = run_once()
    rep2, csv2 = run_once()
    assert csv1 == csv2
    lines = csv1.strip().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 1 + 8
    total = sum(w.mean_cost * w.packets for w in rep1.windows)
    assert round(total) == rep1.total_cost


def test_report_breakdown_consistency():
    eng = Engine(tiny_scenario(), EngineConfig(compile_period=1000,
                                               compile_latency=50))
    rep = eng.run([Segment("low", 3000)], seed=8)
    assert sum(rep.by_category.values()) == rep.total_cost
    assert rep.packets == 3000
    assert rep.breakdown().total == rep.total_cost
