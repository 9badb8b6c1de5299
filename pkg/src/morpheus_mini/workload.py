"""Traffic synthesis and the bundled pipeline scenarios.

A scenario ties together a source program, populated tables, a packet
factory, and a scripted list of control-plane updates.  Traffic follows a
locality profile: a small hot set of flows with Zipf-shaped weights plus a
uniform background, or no locality at all.
"""
from __future__ import annotations

import bisect
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

from .ir import PROTO_TCP, PROTO_UDP, Packet, Program
from .tables import TableState, make_table, mutate
from .text import parse_program

FLOW_UNIVERSE = 1000


@dataclass
class LocalityProfile:
    name: str
    hot_flows: int
    hot_share: float
    universe: int = FLOW_UNIVERSE
    hot_base: int = 0  # lets two high-locality profiles disagree on who is hot
    _edges: List[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.hot_flows:
            weights = [1.0 / (i + 1) for i in range(self.hot_flows)]
            scale = self.hot_share / sum(weights)
            acc = 0.0
            for w in weights:
                acc += w * scale
                self._edges.append(acc)

    def pick_flow(self, rng: random.Random) -> int:
        u = rng.random()
        if self.hot_flows and u < self.hot_share:
            return self.hot_base + bisect.bisect_left(self._edges, u)
        r = rng.randrange(self.universe - self.hot_flows)
        return r if r < self.hot_base else r + self.hot_flows


PROFILES: Dict[str, LocalityProfile] = {
    "high": LocalityProfile("high", 5, 0.95),
    "high_alt": LocalityProfile("high_alt", 5, 0.95, hot_base=500),
    "low": LocalityProfile("low", 50, 0.95),
    "none": LocalityProfile("none", 0, 0.0),
}


@dataclass(frozen=True)
class Segment:
    profile: str
    packets: int


def parse_schedule(text: str) -> List[Segment]:
    """JSON schedule: {"segments": [{"profile": "high", "packets": 50000}, ...]}"""
    doc = json.loads(text)
    out = []
    for seg in doc["segments"]:
        profile = seg["profile"]
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        n = int(seg["packets"])
        if n <= 0:
            raise ValueError("segment packet count must be positive")
        out.append(Segment(profile, n))
    if not out:
        raise ValueError("schedule has no segments")
    return out


@dataclass(frozen=True)
class ControlUpdate:
    seq: int
    table: str
    op: str
    key: Tuple
    value: Optional[Tuple] = None


@dataclass
class Scenario:
    name: str
    program: Program
    tables: Dict[str, TableState]
    control_updates: List[ControlUpdate]
    make_packet: Callable[[int, random.Random, int], Packet]


def iter_trace(scenario: Scenario, segments: List[Segment],
               seed: int) -> Iterator[Packet]:
    """Deterministic packet stream; each segment reseeds so a schedule
    prefix is unaffected by what follows it."""
    seq = 0
    for idx, seg in enumerate(segments):
        profile = PROFILES[seg.profile]
        rng = random.Random(f"{seed}:{idx}:{seg.profile}")
        for _ in range(seg.packets):
            flow = profile.pick_flow(rng)
            yield scenario.make_packet(flow, rng, seq)
            seq += 1


def _flow_rng(tag: str) -> random.Random:
    return random.Random(tag)


# ---------------------------------------------------------------- router

ROUTER_SRC = """
program router version 0 provenance original entry start

table fib kind=lpm key=dst_ip:32 value=nh_mac:48,flags:16
table local_ports kind=exact key=dst_port:16 value=out_if:16

start:
  %plen = loadfield payload_len
  %zero = const 16:0
  %isz = alu eq %plen %zero
  br %isz then drop else fwd

drop:
  ret DROP

fwd:
  %dip = loadfield dst_ip
  %fib = lookup fib keys=%dip site=fib_read
  br %fib then route else nomatch

nomatch:
  ret PASS

route:
  %mac = fieldof %fib 0
  %rfl = fieldof %fib 1
  br %rfl then special else fast

special:
  ret PASS

fast:
  setfield dst_mac %mac
  %sip = loadfield src_ip
  %sp = loadfield src_port
  %k16 = const 16:16
  %c1 = alu xor %sip %dip
  %c2 = alu add %c1 %sp
  %c3 = alu shr %c2 %k16
  %c4 = alu xor %c2 %c3
  setfield vlan %c4
  %dport = loadfield dst_port
  %lp = lookup local_ports keys=%dport site=ports_read
  br %lp then local else wire

local:
  %oif = fieldof %lp 0
  setfield src_port %oif
  ret TX

wire:
  ret TX
"""


def _build_router() -> Scenario:
    p = parse_program(ROUTER_SRC)
    tables = {tid: make_table(tid, schema) for tid, schema in p.tables.items()}
    rules_rng = random.Random("router-rules")
    prefixes: List[Tuple[int, int]] = []
    seen = set()
    # prefixes at every length 1..32, so LPM probing stays expensive
    for length in range(1, 33):
        want = min(80, 2 ** length) if length < 32 else 200
        while want:
            prefix = rules_rng.getrandbits(length) << (32 - length)
            if (prefix, length) in seen:
                continue
            seen.add((prefix, length))
            prefixes.append((prefix, length))
            mac = rules_rng.getrandbits(48)
            mutate(tables["fib"], "insert", (prefix, length), (mac, 0))
            want -= 1
    for port, oif in ((22, 1), (179, 2), (515, 3)):
        mutate(tables["local_ports"], "insert", (port,), (oif,))

    common_ports = (80, 443, 8080, 33434)
    flow_memo: Dict[int, Tuple[int, ...]] = {}

    def make_packet(flow: int, rng: random.Random, seq: int) -> Packet:
        # flow-determined fields are a pure function of the flow id, so
        # derive them once and reuse (hot flows repeat constantly)
        cached = flow_memo.get(flow)
        if cached is None:
            fr = _flow_rng(f"router-flow:{flow}")
            prefix, length = prefixes[fr.randrange(len(prefixes))]
            low = fr.getrandbits(32 - length) if length < 32 else 0
            dst_ip = prefix | low
            dst_port = 22 if fr.random() < 0.05 else \
                common_ports[fr.randrange(len(common_ports))]
            cached = (fr.getrandbits(32), dst_ip, 1024 + fr.randrange(60000),
                      dst_port, fr.getrandbits(48))
            flow_memo[flow] = cached
        src_ip, dst_ip, src_port, dst_port, src_mac = cached
        plen = 0 if rng.random() < 0.004 else 64 + rng.randrange(1437)
        return Packet(proto=PROTO_TCP, src_ip=src_ip,
                      dst_ip=dst_ip, src_port=src_port,
                      dst_port=dst_port, src_mac=src_mac,
                      dst_mac=0, vlan=0, payload_len=plen)

    updates = [
        ControlUpdate(60_000, "fib", "insert", (0x0B00BB00, 24),
                      (0x02AA00000001, 0)),
        ControlUpdate(260_000, "fib", "update", prefixes[0],
                      (0x02AA00000002, 0)),
    ]
    return Scenario("router", p, tables, updates, make_packet)


# -------------------------------------------------------------- l2switch

L2_SRC = """
program l2switch version 0 provenance original entry start

table vlans kind=exact key=vlan:12 value=vflags:16
table mac kind=exact key=addr:48 value=port:16

start:
  %vl = loadfield vlan
  %vinfo = lookup vlans keys=%vl site=vlan_read
  br %vinfo then vok else drop

drop:
  ret DROP

vok:
  %vfl = fieldof %vinfo 0
  br %vfl then blocked else learn

blocked:
  ret DROP

learn:
  %smac = loadfield src_mac
  %inp = loadfield src_port
  %known = lookup mac keys=%smac site=learn_read
  br %known then chk else add

add:
  update mac keys=%smac vals=%inp site=learn_write
  jmp fwd

chk:
  %kp = fieldof %known 0
  %same = alu eq %kp %inp
  br %same then fwd else move

move:
  update mac keys=%smac vals=%inp site=move_write
  jmp fwd

fwd:
  %dmac = loadfield dst_mac
  %dst = lookup mac keys=%dmac site=fwd_read
  br %dst then out else flood

flood:
  ret PASS

out:
  %op = fieldof %dst 0
  setfield dst_port %op
  ret TX
"""

L2_TABLE_SIZE = 4096


def _l2_addr(i: int) -> int:
    return 0x020000000000 | i


def _build_l2switch() -> Scenario:
    p = parse_program(L2_SRC)
    tables = {tid: make_table(tid, schema) for tid, schema in p.tables.items()}
    for v in (1, 2, 3, 4):
        mutate(tables["vlans"], "insert", (v,), (0,))
    for i in range(L2_TABLE_SIZE):
        mutate(tables["mac"], "insert", (_l2_addr(i),), (i & 0x3F,))

    flow_memo: Dict[int, Tuple[int, ...]] = {}

    def make_packet(flow: int, rng: random.Random, seq: int) -> Packet:
        cached = flow_memo.get(flow)
        if cached is None:
            fr = _flow_rng(f"l2-flow:{flow}")
            if fr.random() < 0.005:
                src_mac = 0x040000000000 | flow  # not prelearned, inserted once
                src_port = flow & 0x3F
            else:
                i = fr.randrange(L2_TABLE_SIZE)
                src_mac = _l2_addr(i)
                src_port = i & 0x3F
            if fr.random() < 0.03:
                dst_mac = 0x060000000000 | fr.getrandbits(16)  # flood
            else:
                dst_mac = _l2_addr(fr.randrange(L2_TABLE_SIZE))
            cached = (src_mac, src_port, dst_mac, fr.getrandbits(32),
                      fr.getrandbits(32), 1 + fr.randrange(4))
            flow_memo[flow] = cached
        src_mac, src_port, dst_mac, src_ip, dst_ip, vlan = cached
        plen = 64 + rng.randrange(1437)
        return Packet(proto=PROTO_TCP, src_ip=src_ip,
                      dst_ip=dst_ip, src_port=src_port,
                      dst_port=0, src_mac=src_mac, dst_mac=dst_mac,
                      vlan=vlan, payload_len=plen)

    updates = [
        ControlUpdate(60_000, "mac", "insert", (0x02FFFFFFFFFE,), (7,)),
        ControlUpdate(260_000, "vlans", "insert", (5,), (0,)),
    ]
    return Scenario("l2switch", p, tables, updates, make_packet)


# -------------------------------------------------------------- firewall

FW_SRC = """
program firewall version 0 provenance original entry start

table acl kind=wildcard key=src_ip:32,dst_ip:32,src_port:16,dst_port:16,proto:16 value=verdict:16

start:
  %sip = loadfield src_ip
  %dip = loadfield dst_ip
  %sp = loadfield src_port
  %dp = loadfield dst_port
  %pr = loadfield proto
  %r = lookup acl keys=%sip,%dip,%sp,%dp,%pr site=acl_read
  br %r then matched else nomatch

nomatch:
  ret DROP

matched:
  %v = fieldof %r 0
  br %v then allow else deny

deny:
  ret DROP

allow:
  ret TX
"""

M32 = 0xFFFFFFFF
M16 = 0xFFFF


def gen_wildcard_rules(n: int, exact_fraction: float,
                       seed: str) -> List[Tuple[int, Tuple, Tuple[int, ...]]]:
    """Firewall rule set: every rule pins proto to TCP; a slice of them is
    fully exact on all five fields.  Returns (priority, fields, values)."""
    rng = random.Random(seed)
    rules = []
    for prio in range(n):
        sip, dip = rng.getrandbits(32), rng.getrandbits(32)
        sp, dp = rng.getrandbits(16), rng.getrandbits(16)
        verdict = 1 if rng.random() < 0.7 else 0
        if rng.random() < exact_fraction:
            fields = ((sip, M32), (dip, M32), (sp, M16), (dp, M16),
                      (PROTO_TCP, M16))
        else:
            shape = rng.randrange(3)
            if shape == 0:
                fields = ((sip, 0xFFFFFF00), (dip, 0), (sp, 0), (dp, M16),
                          (PROTO_TCP, M16))
            elif shape == 1:
                fields = ((sip, 0), (dip, 0xFFFF0000), (sp, 0), (dp, M16),
                          (PROTO_TCP, M16))
            else:
                fields = ((sip, 0xFFFFFF00), (dip, 0xFFFF0000), (sp, 0),
                          (dp, 0), (PROTO_TCP, M16))
        rules.append((prio, fields, (verdict,)))
    return rules


def _build_firewall() -> Scenario:
    p = parse_program(FW_SRC)
    tables = {tid: make_table(tid, schema) for tid, schema in p.tables.items()}
    rules = gen_wildcard_rules(500, 0.45, "firewall-rules")
    for prio, fields, values in rules:
        mutate(tables["acl"], "insert", (prio, fields), values)

    def _key_from_rule(fr: random.Random, fields) -> Tuple[int, ...]:
        out = []
        for (value, m), width in zip(fields, (32, 32, 16, 16, 16)):
            free = fr.getrandbits(width) & ~m
            out.append((value & m) | free)
        return tuple(out)

    flow_memo: Dict[int, Tuple[int, ...]] = {}

    def make_packet(flow: int, rng: random.Random, seq: int) -> Packet:
        cached = flow_memo.get(flow)
        if cached is None:
            fr = _flow_rng(f"fw-flow:{flow}")
            u = fr.random()
            if u < 0.60:
                prio, fields, _ = rules[fr.randrange(len(rules))]
                sip, dip, sp, dp, pr = _key_from_rule(fr, fields)
            elif u < 0.85:
                sip, dip = fr.getrandbits(32), fr.getrandbits(32)
                sp, dp, pr = fr.getrandbits(16), fr.getrandbits(16), PROTO_TCP
            else:
                sip, dip = fr.getrandbits(32), fr.getrandbits(32)
                sp, dp, pr = fr.getrandbits(16), fr.getrandbits(16), PROTO_UDP
            cached = (sip, dip, sp, dp, pr)
            flow_memo[flow] = cached
        sip, dip, sp, dp, pr = cached
        plen = 64 + rng.randrange(1437)
        return Packet(proto=pr, src_ip=sip, dst_ip=dip, src_port=sp,
                      dst_port=dp, src_mac=0, dst_mac=0, vlan=0,
                      payload_len=plen)

    updates = [
        ControlUpdate(60_000, "acl", "insert",
                      (500, ((0x0A0A0A0A, M32), (0x08080808, M32),
                             (1234, M16), (443, M16), (PROTO_TCP, M16))),
                      (1,)),
    ]
    return Scenario("firewall", p, tables, updates, make_packet)


# ------------------------------------------------------------------- nat

NAT_CHURN_PERIOD = 5000


def _nat_src() -> str:
    head = """
program nat version 0 provenance original entry start

table conntrack kind=exact key=src_ip:32,src_port:16,dst_ip:32,dst_port:16,proto:16 value=nat_port:16

start:
  %plen = loadfield payload_len
  %zero = const 16:0
  %isz = alu eq %plen %zero
  br %isz then drop else lookupb

drop:
  ret DROP

lookupb:
  %sip = loadfield src_ip
  %sp = loadfield src_port
  %dip = loadfield dst_ip
  %dp = loadfield dst_port
  %pr = loadfield proto
  %ct = lookup conntrack keys=%sip,%sp,%dip,%dp,%pr site=ct_read
  br %ct then hit else miss

miss:
  %h1 = alu xor %sip %dip
  %h2 = alu xor %sp %dp
  %h3 = alu add %h1 %h2
  %m14 = const 16:16383
  %h4 = alu and %h3 %m14
  %b14 = const 16:16384
  %np = alu or %h4 %b14
  update conntrack keys=%sip,%sp,%dip,%dp,%pr vals=%np site=ct_write
  jmp rewrite

hit:
  %np = fieldof %ct 0
  jmp rewrite

rewrite:
  %natip = const 32:0xc0a80001
  setfield src_ip %natip
  setfield src_port %np
  %k7 = const 16:7
  %x0 = alu xor %natip %dip
"""
    lines = []
    prev = "%x0"
    ops = ("add", "xor", "shr", "add", "xor")
    operands = ("%np", "%dp", "%k7", "%dip", "%sp")
    idx = 1
    for round_ in range(5):
        for op, operand in zip(ops, operands):
            lines.append(f"  %x{idx} = alu {op} {prev} {operand}")
            prev = f"%x{idx}"
            idx += 1
    tail = f"""\
  setfield vlan {prev}
  ret TX
"""
    return head + "\n".join(lines) + "\n" + tail


def _build_nat() -> Scenario:
    p = parse_program(_nat_src())
    tables = {tid: make_table(tid, schema) for tid, schema in p.tables.items()}

    flow_memo: Dict[int, Tuple[int, ...]] = {}
    memo_epoch = [-1]

    def make_packet(flow: int, rng: random.Random, seq: int) -> Packet:
        # connection churn: the whole flow universe is replaced every
        # NAT_CHURN_PERIOD packets, so cached translations keep dying
        epoch = seq // NAT_CHURN_PERIOD
        if epoch != memo_epoch[0]:
            flow_memo.clear()
            memo_epoch[0] = epoch
        cached = flow_memo.get(flow)
        if cached is None:
            fr = _flow_rng(f"nat-flow:{flow}:{epoch}")
            cached = (fr.getrandbits(32), fr.getrandbits(32),
                      1024 + fr.randrange(60000), fr.getrandbits(16))
            flow_memo[flow] = cached
        src_ip, dst_ip, src_port, dst_port = cached
        plen = 0 if rng.random() < 0.004 else 64 + rng.randrange(1437)
        return Packet(proto=PROTO_TCP, src_ip=src_ip,
                      dst_ip=dst_ip,
                      src_port=src_port,
                      dst_port=dst_port, src_mac=0, dst_mac=0,
                      vlan=0, payload_len=plen)

    updates = [
        ControlUpdate(60_000, "conntrack", "delete",
                      (1, 1, 1, 1, PROTO_TCP), None),
        ControlUpdate(260_000, "conntrack", "insert",
                      (2, 2, 2, 2, PROTO_TCP), (0x4001,)),
    ]
    return Scenario("nat", p, tables, updates, make_packet)


# ------------------------------------------------------------- katran_lb

KATRAN_SRC = """
program katran_lb version 0 provenance original entry start

table vip_map kind=exact key=dst_ip:32,dst_port:16,proto:16 value=vflags:16,vip_idx:16
table conn_table kind=exact key=src_ip:32,src_port:16,dst_ip:32,dst_port:16,proto:16 value=backend_idx:16
table backend_pool kind=exact key=backend_idx:16 value=backend_ip:32

start:
  %plen = loadfield payload_len
  %zero = const 16:0
  %isz = alu eq %plen %zero
  br %isz then drop else vip

drop:
  ret DROP

vip:
  %dip = loadfield dst_ip
  %dp = loadfield dst_port
  %pr = loadfield proto
  %vres = lookup vip_map keys=%dip,%dp,%pr site=vip_read
  br %vres then vhit else drop2

drop2:
  ret DROP

vhit:
  %vfl = fieldof %vres 0
  br %vfl then special else conn

special:
  ret PASS

conn:
  %sip = loadfield src_ip
  %sp = loadfield src_port
  %cres = lookup conn_table keys=%sip,%sp,%dip,%dp,%pr site=conn_read
  br %cres then chit else cmiss

cmiss:
  %h1 = alu xor %sip %dip
  %h2 = alu add %h1 %sp
  %m9 = const 16:511
  %bidx = alu and %h2 %m9
  update conn_table keys=%sip,%sp,%dip,%dp,%pr vals=%bidx site=conn_write
  jmp pool

chit:
  %bidx = fieldof %cres 0
  jmp pool

pool:
  %bres = lookup backend_pool keys=%bidx site=pool_read
  br %bres then send else drop3

drop3:
  ret DROP

send:
  %bip = fieldof %bres 0
  setfield dst_ip %bip
  %c1 = alu xor %bip %sip
  %c2 = alu add %c1 %sp
  setfield vlan %c2
  ret TX
"""

KATRAN_VIPS = 10
_KATRAN_HOT_VIP = (0, 0, 1, 0, 2)  # explicit pins for the hot flows


def _katran_vip_for(flow: int) -> int:
    if flow < len(_KATRAN_HOT_VIP):
        return _KATRAN_HOT_VIP[flow]
    u = _flow_rng(f"katran-vip:{flow}").random()
    if u < 0.60:
        return 0
    if u < 0.80:
        return 1
    return 2 + int((u - 0.80) / 0.20 * (KATRAN_VIPS - 2)) % (KATRAN_VIPS - 2)


def _build_katran() -> Scenario:
    p = parse_program(KATRAN_SRC)
    tables = {tid: make_table(tid, schema) for tid, schema in p.tables.items()}
    for i in range(KATRAN_VIPS):
        mutate(tables["vip_map"], "insert", (0x0A000000 + i, 443, PROTO_TCP),
               (0, i))
    for i in range(1000):
        mutate(tables["backend_pool"], "insert", (i,), (0xC0000000 + i,))

    flow_memo: Dict[int, Tuple[int, ...]] = {}

    def make_packet(flow: int, rng: random.Random, seq: int) -> Packet:
        cached = flow_memo.get(flow)
        if cached is None:
            fr = _flow_rng(f"katran-flow:{flow}")
            cached = (fr.getrandbits(32), 1024 + fr.randrange(60000),
                      _katran_vip_for(flow))
            flow_memo[flow] = cached
        src_ip, src_port, vip = cached
        plen = 0 if rng.random() < 0.003 else 64 + rng.randrange(1437)
        return Packet(proto=PROTO_TCP, src_ip=src_ip,
                      dst_ip=0x0A000000 + vip,
                      src_port=src_port, dst_port=443,
                      src_mac=0, dst_mac=0, vlan=0, payload_len=plen)

    updates = [
        ControlUpdate(60_000, "backend_pool", "update", (3,), (0xC0001003,)),
        ControlUpdate(260_000, "vip_map", "insert",
                      (0x0A00000A, 443, PROTO_TCP), (0, 10)),
    ]
    return Scenario("katran_lb", p, tables, updates, make_packet)


SCENARIO_NAMES = ("router", "l2switch", "firewall", "nat", "katran_lb")

_BUILDERS = {
    "router": _build_router,
    "l2switch": _build_l2switch,
    "firewall": _build_firewall,
    "nat": _build_nat,
    "katran_lb": _build_katran,
}


def build_scenario(name: str) -> Scenario:
    """Fresh scenario instance; tables are rebuilt so callers may mutate."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}") from None
    return builder()
