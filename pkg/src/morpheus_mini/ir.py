"""Register-based control-flow IR for the packet pipeline.

Programs are DAGs of labeled blocks over a fixed packet header layout.
Register values are unsigned integers; widths are enforced at the edges
(packet fields, constants, table schemas), never on intermediate registers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple

# Packet header fields, in canonical row order.  Width in bits.
FIELDS: Dict[str, int] = {
    "proto": 16,
    "src_ip": 32,
    "dst_ip": 32,
    "src_port": 16,
    "dst_port": 16,
    "src_mac": 48,
    "dst_mac": 48,
    "vlan": 12,
    "payload_len": 16,
}
FIELD_ORDER: Tuple[str, ...] = tuple(FIELDS)
FIELD_INDEX: Dict[str, int] = {f: i for i, f in enumerate(FIELD_ORDER)}

PROTO_TCP = 6
PROTO_UDP = 17
PROTO_OTHER = 0

VALUE_WIDTHS = frozenset({1, 12, 16, 32, 48, 64, 128})
MAX_WIDTH = 128
_WRAP = (1 << MAX_WIDTH) - 1

ALU_OPS = frozenset({"add", "sub", "and", "or", "xor", "shl", "shr", "eq", "ne", "lt"})
CMP_OPS = frozenset({"eq", "ne", "lt"})
ACTIONS = ("DROP", "TX", "PASS")


def mask(width: int) -> int:
    return (1 << width) - 1


@dataclass(frozen=True)
class Packet:
    proto: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    src_mac: int
    dst_mac: int
    vlan: int
    payload_len: int

    def __post_init__(self) -> None:
        for name, width in FIELDS.items():
            v = getattr(self, name)
            if not 0 <= v <= mask(width):
                raise ValueError(f"field {name} out of range for u{width}: {v}")

    def as_row(self) -> Tuple[int, ...]:
        return (self.proto, self.src_ip, self.dst_ip, self.src_port,
                self.dst_port, self.src_mac, self.dst_mac, self.vlan,
                self.payload_len)

    @staticmethod
    def from_row(row: Tuple[int, ...]) -> "Packet":
        return Packet(*row)


# (action kind, packet row after header rewrites)
Action = Tuple[str, Tuple[int, ...]]


@dataclass(frozen=True)
class Value:
    width: int
    bits: int

    def __post_init__(self) -> None:
        if self.width not in VALUE_WIDTHS:
            raise ValueError(f"unsupported width {self.width}")
        if not 0 <= self.bits <= mask(self.width):
            raise ValueError(f"value {self.bits} does not fit u{self.width}")


def alu_eval(op: str, a: int, b: int) -> int:
    """Total semantics for every ALU op on unsigned ints below 2**128."""
    if op == "add":
        return (a + b) & _WRAP
    if op == "sub":
        return (a - b) & _WRAP
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "shl":
        return 0 if b >= MAX_WIDTH else (a << b) & _WRAP
    if op == "shr":
        return 0 if b >= MAX_WIDTH else a >> b
    if op == "eq":
        return 1 if a == b else 0
    if op == "ne":
        return 1 if a != b else 0
    if op == "lt":
        return 1 if a < b else 0
    raise ValueError(f"unknown alu op {op}")


# --- instructions ---------------------------------------------------------
# `fuse` tags const/alu/branch triples emitted for one inlined table entry
# test; the cost model charges a whole fused group as a single comparison.


@dataclass
class LoadField:
    dst: str
    fieldname: str


@dataclass
class Const:
    dst: str
    width: int
    value: int
    fuse: Optional[str] = None


@dataclass
class Alu:
    dst: str
    op: str
    a: str
    b: str
    fuse: Optional[str] = None


@dataclass
class SetField:
    fieldname: str
    src: str


@dataclass
class TableLookup:
    dst: str
    table: str
    keys: Tuple[str, ...]
    site: str


@dataclass
class TableUpdate:
    table: str
    keys: Tuple[str, ...]
    values: Tuple[str, ...]
    site: str


@dataclass
class FieldOf:
    dst: str
    src: str
    index: int


@dataclass
class Branch:
    cond: str
    then_label: str
    else_label: str
    fuse: Optional[str] = None


@dataclass
class Jump:
    target: str


@dataclass
class Return:
    action: str


@dataclass
class GuardCheck:
    guard: str
    ok: str
    fallback: str


@dataclass
class InstrRecord:
    site: str
    keys: Tuple[str, ...]


Instruction = object
TERMINATORS = (Branch, Jump, Return, GuardCheck)


def instr_defs(ins: Instruction) -> Tuple[str, ...]:
    if isinstance(ins, (LoadField, Const, Alu, TableLookup, FieldOf)):
        return (ins.dst,)
    return ()


def instr_uses(ins: Instruction) -> Tuple[str, ...]:
    if isinstance(ins, Alu):
        return (ins.a, ins.b)
    if isinstance(ins, SetField):
        return (ins.src,)
    if isinstance(ins, TableLookup):
        return tuple(ins.keys)
    if isinstance(ins, TableUpdate):
        return tuple(ins.keys) + tuple(ins.values)
    if isinstance(ins, FieldOf):
        return (ins.src,)
    if isinstance(ins, Branch):
        return (ins.cond,)
    if isinstance(ins, InstrRecord):
        return tuple(ins.keys)
    return ()


def successors(ins: Instruction) -> Tuple[str, ...]:
    if isinstance(ins, Branch):
        return (ins.then_label, ins.else_label)
    if isinstance(ins, Jump):
        return (ins.target,)
    if isinstance(ins, GuardCheck):
        return (ins.ok, ins.fallback)
    return ()


@dataclass
class Block:
    label: str
    instructions: List[Instruction] = field(default_factory=list)

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]


@dataclass
class TableSchema:
    """Declared shape of a match-action table as seen by the program."""
    kind: str  # exact | lpm | wildcard
    key_fields: Tuple[Tuple[str, int], ...]
    value_fields: Tuple[Tuple[str, int], ...]

    def key_widths(self) -> Tuple[int, ...]:
        return tuple(w for _, w in self.key_fields)

    def value_widths(self) -> Tuple[int, ...]:
        return tuple(w for _, w in self.value_fields)


@dataclass
class Program:
    name: str
    version: int
    provenance: str  # original | optimized
    entry: str
    tables: Dict[str, TableSchema] = field(default_factory=dict)
    blocks: Dict[str, Block] = field(default_factory=dict)

    def iter_instructions(self) -> Iterator[Tuple[str, int, Instruction]]:
        for label, block in self.blocks.items():
            for i, ins in enumerate(block.instructions):
                yield label, i, ins


def static_instruction_count(p: Program) -> int:
    return sum(len(b.instructions) for b in p.blocks.values())


def clone_with_version(p: Program, version: int) -> Program:
    out = clone_program(p)
    out.version = version
    return out


def clone_program(p: Program) -> Program:
    blocks = {
        label: Block(label, [replace(ins) for ins in b.instructions])
        for label, b in p.blocks.items()
    }
    tables = {tid: replace(s) for tid, s in p.tables.items()}
    return Program(p.name, p.version, p.provenance, p.entry, tables, blocks)


# --- validation -----------------------------------------------------------


def _reachable(p: Program) -> List[str]:
    seen: List[str] = []
    stack = [p.entry]
    marked = {p.entry}
    while stack:
        label = stack.pop()
        if label not in p.blocks:
            continue
        seen.append(label)
        for nxt in successors(p.blocks[label].terminator):
            if nxt not in marked:
                marked.add(nxt)
                stack.append(nxt)
    return seen


def topo_order(p: Program) -> Optional[List[str]]:
    """Topological order of reachable blocks, or None if the CFG has a cycle."""
    order: List[str] = []
    state: Dict[str, int] = {}  # 1 = in progress, 2 = done

    def visit(label: str) -> bool:
        if label not in p.blocks:
            return True
        st = state.get(label)
        if st == 2:
            return True
        if st == 1:
            return False
        state[label] = 1
        if p.blocks[label].instructions:
            for nxt in successors(p.blocks[label].terminator):
                if not visit(nxt):
                    return False
        state[label] = 2
        order.append(label)
        return True

    import sys
    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 4 * len(p.blocks) + 100))
    try:
        if not visit(p.entry):
            return None
    finally:
        sys.setrecursionlimit(old_limit)
    order.reverse()
    return order


def validate(p: Program) -> List[str]:
    """Structural and dataflow checks.  Empty result means the program is
    safe to execute: no undefined registers, no miss dereference, every
    path reaches a Return."""
    diags: List[str] = []
    if p.provenance not in ("original", "optimized"):
        diags.append(f"unknown provenance {p.provenance!r}")
    if p.version < 0:
        diags.append("version must be non-negative")
    if p.entry not in p.blocks:
        diags.append(f"entry block {p.entry!r} does not exist")
        return diags

    for label, block in p.blocks.items():
        if not block.instructions:
            diags.append(f"block {label}: empty")
            continue
        for i, ins in enumerate(block.instructions):
            last = i == len(block.instructions) - 1
            if last and not isinstance(ins, TERMINATORS):
                diags.append(f"block {label}: does not end in a terminator")
            if not last and isinstance(ins, TERMINATORS):
                diags.append(f"block {label}: terminator before end of block")
            for target in successors(ins):
                if target not in p.blocks:
                    diags.append(f"block {label}: jump target {target!r} does not exist")
            if isinstance(ins, Return) and ins.action not in ACTIONS:
                diags.append(f"block {label}: unknown action {ins.action!r}")
            if isinstance(ins, Alu) and ins.op not in ALU_OPS:
                diags.append(f"block {label}: unknown alu op {ins.op!r}")
            if isinstance(ins, (LoadField, SetField)) and ins.fieldname not in FIELDS:
                diags.append(f"block {label}: unknown packet field {ins.fieldname!r}")
            if isinstance(ins, Const):
                if ins.width not in VALUE_WIDTHS:
                    diags.append(f"block {label}: const width {ins.width} unsupported")
                elif not 0 <= ins.value <= mask(ins.width):
                    diags.append(f"block {label}: const {ins.value} does not fit u{ins.width}")
            if isinstance(ins, (TableLookup, TableUpdate)):
                schema = p.tables.get(ins.table)
                if schema is None:
                    diags.append(f"block {label}: table {ins.table!r} not declared")
                else:
                    if len(ins.keys) != len(schema.key_fields):
                        diags.append(f"block {label}: {ins.table} key arity "
                                     f"{len(ins.keys)} != {len(schema.key_fields)}")
                    if isinstance(ins, TableUpdate) and \
                            len(ins.values) != len(schema.value_fields):
                        diags.append(f"block {label}: {ins.table} value arity "
                                     f"{len(ins.values)} != {len(schema.value_fields)}")
            if p.provenance == "original" and isinstance(ins, (GuardCheck, InstrRecord)):
                diags.append(f"block {label}: {type(ins).__name__} not allowed in source programs")

    if diags:
        return diags

    if p.provenance == "original":
        seen_sites: Dict[str, str] = {}
        for label, i, ins in p.iter_instructions():
            if isinstance(ins, (TableLookup, TableUpdate)):
                where = f"{label}#{i}"
                if ins.site in seen_sites:
                    diags.append(f"duplicate site id {ins.site!r} at {where} "
                                 f"and {seen_sites[ins.site]}")
                seen_sites[ins.site] = where

    order = topo_order(p)
    if order is None:
        diags.append("control-flow cycle detected; paths must all reach a Return")
        return diags

    # Optional registers: defined by TableLookup, usable only as a branch
    # condition or FieldOf source.  Everything else is scalar.
    optional_tables: Dict[str, List[str]] = {}
    scalar_defs: Dict[str, bool] = {}
    for label, _, ins in p.iter_instructions():
        if label not in order:
            continue
        if isinstance(ins, TableLookup):
            optional_tables.setdefault(ins.dst, []).append(ins.table)
        else:
            for d in instr_defs(ins):
                scalar_defs[d] = True
    for reg in optional_tables:
        if reg in scalar_defs:
            diags.append(f"register {reg} defined as both lookup result and scalar")

    def is_optional(reg: str) -> bool:
        return reg in optional_tables and reg not in scalar_defs

    for label, _, ins in p.iter_instructions():
        if label not in order:
            continue
        for use in instr_uses(ins):
            if is_optional(use) and not isinstance(ins, (Branch, FieldOf)):
                diags.append(f"block {label}: lookup result {use} used outside "
                             f"branch/fieldof")
        if isinstance(ins, FieldOf):
            if not is_optional(ins.src):
                diags.append(f"block {label}: fieldof source {ins.src} is not a lookup result")
            else:
                for tid in optional_tables[ins.src]:
                    nfields = len(p.tables[tid].value_fields)
                    if ins.index >= nfields:
                        diags.append(f"block {label}: fieldof index {ins.index} out of "
                                     f"range for table {tid}")
    if diags:
        return diags

    # Definite assignment plus hit-checked tracking along edges, in topo
    # order.  checked[r] means every path here passed the then-edge of a
    # branch on optional r with no intervening redefinition.
    all_regs = set(scalar_defs) | set(optional_tables)
    assigned_out: Dict[str, set] = {}
    checked_out: Dict[str, Dict[str, set]] = {}  # label -> succ -> checked set
    assigned_in: Dict[str, set] = {p.entry: set()}
    checked_in: Dict[str, set] = {p.entry: set()}
    preds: Dict[str, List[str]] = {label: [] for label in order}
    for label in order:
        for nxt in successors(p.blocks[label].terminator):
            if nxt in preds:
                preds[nxt].append(label)

    for label in order:
        block = p.blocks[label]
        if label not in assigned_in:
            ins_sets = [assigned_out[q] for q in preds[label]]
            chk_sets = [checked_out[q][label] for q in preds[label]]
            assigned_in[label] = set.intersection(*ins_sets) if ins_sets else set()
            checked_in[label] = set.intersection(*chk_sets) if chk_sets else set()
        assigned = set(assigned_in[label])
        checked = set(checked_in[label])
        for ins in block.instructions:
            for use in instr_uses(ins):
                if use not in assigned:
                    diags.append(f"block {label}: register {use} read before "
                                 f"any dominating definition")
            if isinstance(ins, FieldOf) and is_optional(ins.src) and ins.src not in checked:
                diags.append(f"block {label}: fieldof {ins.src} not dominated by a hit test")
            for d in instr_defs(ins):
                assigned.add(d)
                checked.discard(d)
        assigned_out[label] = assigned
        term = block.terminator
        edge_checked: Dict[str, set] = {}
        if isinstance(term, Branch) and is_optional(term.cond):
            edge_checked[term.then_label] = checked | {term.cond}
            edge_checked[term.else_label] = checked - {term.cond}
        for nxt in successors(term):
            edge_checked.setdefault(nxt, set(checked))
        checked_out[label] = edge_checked

    del all_regs
    return diags


class ValidationError(Exception):
    pass


def assert_valid(p: Program) -> None:
    diags = validate(p)
    if diags:
        raise ValidationError(f"program {p.name} v{p.version}: " + "; ".join(diags))
