"""Site-level rewriting shared by the optimization passes.

A lookup site gets "exploded" when any structural change lands on it:
the one lookup instruction becomes a per-site subgraph of recording,
guarding, injected domain tests, inlined compare chains, a slow path,
and a join that re-materializes the registers downstream code expects.
Downstream, the optional result register disappears: branches test a
hit flag and field extractions become plain copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .ir import (Alu, Block, Branch, Const, FieldOf, GuardCheck, InstrRecord,
                 Jump, Program, TableLookup, instr_defs)
from .tables import TableState

KeyTuple = Tuple[int, ...]


@dataclass
class ChainArm:
    key: KeyTuple
    hit: bool
    values: Tuple[int, ...]


@dataclass
class DSPlan:
    kind: str  # wildcard_pre | lpm_exact
    tables: Dict[str, TableState]
    pre_id: str = ""
    res_id: str = ""
    exact_id: str = ""
    mask_value: Optional[int] = None  # lpm with length < key width


@dataclass
class InjectionPlan:
    key_index: int
    field: str
    values: Tuple[int, ...]


@dataclass
class SiteDecision:
    site_id: str
    table: str
    rw: bool
    record: bool = False
    eliminated: bool = False
    ds: Optional[DSPlan] = None
    injection: Optional[InjectionPlan] = None
    arms: List[ChainArm] = field(default_factory=list)
    full_inline: bool = False
    guard_generation: Optional[int] = None

    @property
    def needs_guard(self) -> bool:
        return self.rw and bool(self.arms or self.ds)

    @property
    def explodes(self) -> bool:
        return bool(self.eliminated or self.arms or self.injection
                    or (self.ds and self.ds.kind == "wildcard_pre")
                    or (self.ds and self.rw))


class LoweringError(Exception):
    pass


def find_site_lookup(p: Program, site_id: str) -> Tuple[str, int, TableLookup]:
    for label, i, ins in p.iter_instructions():
        if isinstance(ins, TableLookup) and ins.site == site_id:
            return label, i, ins
    raise LoweringError(f"no lookup for site {site_id}")


def used_value_fields(p: Program, reg: str) -> List[int]:
    out = set()
    for _l, _i, ins in p.iter_instructions():
        if isinstance(ins, FieldOf) and ins.src == reg:
            out.add(ins.index)
    return sorted(out)


def register_def_count(p: Program, reg: str) -> int:
    return sum(1 for _l, _i, ins in p.iter_instructions()
               if reg in instr_defs(ins))


def _rewrite_result_uses(p: Program, reg: str, hit_reg: str,
                         field_regs: Dict[int, str]) -> None:
    for block in p.blocks.values():
        for i, ins in enumerate(block.instructions):
            if isinstance(ins, FieldOf) and ins.src == reg:
                src = field_regs[ins.index]
                block.instructions[i] = Alu(ins.dst, "or", src, src)
            elif isinstance(ins, Branch) and ins.cond == reg:
                block.instructions[i] = Branch(hit_reg, ins.then_label,
                                               ins.else_label, ins.fuse)


def _test_block(sid: str, tag: str, key_regs: List[str], key: KeyTuple,
                widths: List[int], hit_label: str, miss_label: str) -> Block:
    """Fused compare-and-branch group: one entry test costs 2 no matter how
    wide the key is."""
    fuse = f"{sid}:{tag}"
    ins: List = []
    acc = None
    for k, (reg, kv, w) in enumerate(zip(key_regs, key, widths)):
        creg = f"{sid}__{tag}_c{k}"
        ereg = f"{sid}__{tag}_e{k}"
        ins.append(Const(creg, w, kv, fuse=fuse))
        ins.append(Alu(ereg, "eq", reg, creg, fuse=fuse))
        if acc is None:
            acc = ereg
        else:
            mreg = f"{sid}__{tag}_m{k}"
            ins.append(Alu(mreg, "and", acc, ereg, fuse=fuse))
            acc = mreg
    ins.append(Branch(acc, hit_label, miss_label, fuse=fuse))
    return Block(f"{sid}__{tag}", ins)


def _arm_block(sid: str, idx: int, arm: ChainArm, hit_reg: str,
               field_regs: Dict[int, str],
               value_widths: Tuple[int, ...], join: str) -> Block:
    ins: List = [Const(hit_reg, 1, 1 if arm.hit else 0)]
    for j, reg in field_regs.items():
        v = arm.values[j] if arm.hit else 0
        ins.append(Const(reg, value_widths[j], v))
    ins.append(Jump(join))
    return Block(f"{sid}__a{idx}", ins)


def _miss_block(sid: str, hit_reg: str, field_regs: Dict[int, str],
                value_widths: Tuple[int, ...], join: str) -> Block:
    ins: List = [Const(hit_reg, 1, 0)]
    for j, reg in field_regs.items():
        # dead on the miss path, present so every path defines the register
        ins.append(Const(reg, value_widths[j], 0))
    ins.append(Jump(join))
    return Block(f"{sid}__miss", ins)


def _fieldof_hit_block(label: str, result_reg: str, hit_reg: str,
                       field_regs: Dict[int, str], join: str) -> Block:
    ins: List = []
    for j, reg in field_regs.items():
        ins.append(FieldOf(reg, result_reg, j))
    ins.append(Const(hit_reg, 1, 1))
    ins.append(Jump(join))
    return Block(label, ins)


def lower_site(p: Program, d: SiteDecision) -> None:
    """Rewrite one lookup site in place according to its decision."""
    label, i, lookup = find_site_lookup(p, d.site_id)
    block = p.blocks[label]
    sid = d.site_id

    if not d.explodes:
        # instrumentation only: drop a record in front of the lookup
        if d.record:
            block.instructions.insert(i, InstrRecord(sid, tuple(lookup.keys)))
        if d.ds and d.ds.kind == "lpm_exact":
            _swap_lpm_lookup(p, d, label)
        return

    schema = p.tables[lookup.table]
    key_widths = list(schema.key_widths())
    value_widths = schema.value_widths()
    used = used_value_fields(p, lookup.dst)
    hit_reg = f"{sid}__hit"
    field_regs = {j: f"{sid}__f{j}" for j in used}
    join_label = f"{sid}__join"
    miss_label = f"{sid}__miss"

    # split the block: everything after the lookup moves to the join
    pre = block.instructions[:i]
    post = block.instructions[i + 1:]
    p.blocks[join_label] = Block(join_label, post)
    new_blocks: List[Block] = []

    # stage chain: injection tests, then arms, then the slow path
    slow_entry: str
    if d.eliminated:
        slow_entry = miss_label
    elif d.ds and d.ds.kind == "wildcard_pre":
        slow_entry = _wildcard_pre_blocks(new_blocks, p, d, lookup, hit_reg,
                                          field_regs, join_label, miss_label)
    elif d.ds and d.ds.kind == "lpm_exact":
        slow_entry = _lpm_exact_block(new_blocks, d, lookup, hit_reg,
                                      field_regs, join_label, miss_label)
    elif d.full_inline:
        slow_entry = miss_label
    else:
        slow_entry = _plain_slow_block(new_blocks, d, lookup, hit_reg,
                                       field_regs, join_label, miss_label)

    chain_entry = slow_entry
    if d.arms:
        for idx in reversed(range(len(d.arms))):
            arm = d.arms[idx]
            arm_block = _arm_block(sid, idx, arm, hit_reg, field_regs,
                                   value_widths, join_label)
            test = _test_block(sid, f"t{idx}", list(lookup.keys), arm.key,
                               key_widths, arm_block.label, chain_entry)
            new_blocks.append(arm_block)
            new_blocks.append(test)
            chain_entry = test.label

    inj_entry = chain_entry
    if d.injection:
        inj_entry = _injection_blocks(new_blocks, d, lookup, chain_entry,
                                      miss_label)

    # guard-fail path always re-runs the original lookup on live state
    if d.needs_guard:
        fb_entry = _guard_fallback_block(new_blocks, d, lookup, hit_reg,
                                         field_regs, join_label, miss_label)
        block.instructions = pre
        if d.record:
            block.instructions.append(InstrRecord(sid, tuple(lookup.keys)))
        block.instructions.append(
            GuardCheck(f"site_{sid}", inj_entry, fb_entry))
        for nb in new_blocks:
            p.blocks[nb.label] = nb
    else:
        # no guard: fold the first stage straight into the source block
        entry_block = None
        for nb in new_blocks:
            if nb.label == inj_entry:
                entry_block = nb
                break
        block.instructions = pre
        if d.record:
            block.instructions.append(InstrRecord(sid, tuple(lookup.keys)))
        if entry_block is None:
            # first stage is the shared miss block (eliminated site)
            block.instructions.append(Jump(inj_entry))
            for nb in new_blocks:
                p.blocks[nb.label] = nb
        else:
            block.instructions.extend(entry_block.instructions)
            for nb in new_blocks:
                if nb is not entry_block:
                    p.blocks[nb.label] = nb

    p.blocks[miss_label] = _miss_block(sid, hit_reg, field_regs,
                                       value_widths, join_label)
    _rewrite_result_uses(p, lookup.dst, hit_reg, field_regs)


def _plain_slow_block(new_blocks: List[Block], d: SiteDecision,
                      lookup: TableLookup, hit_reg: str,
                      field_regs: Dict[int, str], join: str,
                      miss: str) -> str:
    sid = d.site_id
    res = f"{sid}__slow"
    hit_label = f"{sid}__slowhit"
    slow = Block(f"{sid}__fb", [
        TableLookup(res, lookup.table, tuple(lookup.keys), lookup.site),
        Branch(res, hit_label, miss),
    ])
    new_blocks.append(slow)
    new_blocks.append(_fieldof_hit_block(hit_label, res, hit_reg,
                                         field_regs, join))
    return slow.label


def _guard_fallback_block(new_blocks: List[Block], d: SiteDecision,
                          lookup: TableLookup, hit_reg: str,
                          field_regs: Dict[int, str], join: str,
                          miss: str) -> str:
    sid = d.site_id
    res = f"{sid}__orig"
    hit_label = f"{sid}__orighit"
    fb = Block(f"{sid}__origfb", [
        TableLookup(res, lookup.table, tuple(lookup.keys), lookup.site),
        Branch(res, hit_label, miss),
    ])
    new_blocks.append(fb)
    new_blocks.append(_fieldof_hit_block(hit_label, res, hit_reg,
                                         field_regs, join))
    return fb.label


def _wildcard_pre_blocks(new_blocks: List[Block], p: Program, d: SiteDecision,
                         lookup: TableLookup, hit_reg: str,
                         field_regs: Dict[int, str], join: str,
                         miss: str) -> str:
    sid = d.site_id
    pre_res = f"{sid}__pre"
    res_res = f"{sid}__res"
    pre_hit = f"{sid}__prehit"
    res_label = f"{sid}__resfb"
    res_hit = f"{sid}__reshit"
    entry = Block(f"{sid}__ds", [
        TableLookup(pre_res, d.ds.pre_id, tuple(lookup.keys), lookup.site),
        Branch(pre_res, pre_hit, res_label),
    ])
    residual = Block(res_label, [
        TableLookup(res_res, d.ds.res_id, tuple(lookup.keys), lookup.site),
        Branch(res_res, res_hit, miss),
    ])
    new_blocks.append(entry)
    new_blocks.append(_fieldof_hit_block(pre_hit, pre_res, hit_reg,
                                         field_regs, join))
    new_blocks.append(residual)
    new_blocks.append(_fieldof_hit_block(res_hit, res_res, hit_reg,
                                         field_regs, join))
    return entry.label


def _lpm_exact_block(new_blocks: List[Block], d: SiteDecision,
                     lookup: TableLookup, hit_reg: str,
                     field_regs: Dict[int, str], join: str,
                     miss: str) -> str:
    sid = d.site_id
    res = f"{sid}__ex"
    hit_label = f"{sid}__exhit"
    ins: List = []
    key_reg = lookup.keys[0]
    if d.ds.mask_value is not None:
        mreg, areg = f"{sid}__exm", f"{sid}__exk"
        ins.append(Const(mreg, 32, d.ds.mask_value))
        ins.append(Alu(areg, "and", key_reg, mreg))
        key_reg = areg
    ins.append(TableLookup(res, d.ds.exact_id, (key_reg,), lookup.site))
    ins.append(Branch(res, hit_label, miss))
    entry = Block(f"{sid}__ds", ins)
    new_blocks.append(entry)
    new_blocks.append(_fieldof_hit_block(hit_label, res, hit_reg,
                                         field_regs, join))
    return entry.label


def _swap_lpm_lookup(p: Program, d: SiteDecision, label: str) -> None:
    """Light rewrite for a read-only LPM turned exact: same optional result
    register, different backing structure."""
    block = p.blocks[label]
    for i, ins in enumerate(block.instructions):
        if isinstance(ins, TableLookup) and ins.site == d.site_id:
            key_reg = ins.keys[0]
            if d.ds.mask_value is not None:
                mreg = f"{d.site_id}__exm"
                areg = f"{d.site_id}__exk"
                block.instructions[i:i] = [
                    Const(mreg, 32, d.ds.mask_value),
                    Alu(areg, "and", key_reg, mreg),
                ]
                i += 2
                key_reg = areg
            block.instructions[i] = TableLookup(ins.dst, d.ds.exact_id,
                                                (key_reg,), ins.site)
            return
    raise LoweringError(f"lookup vanished for {d.site_id}")


def _injection_blocks(new_blocks: List[Block], d: SiteDecision,
                      lookup: TableLookup, proceed: str, miss: str) -> str:
    """Membership tests on one key field with a small exact domain; a value
    outside the domain can never match, so it short-circuits to miss."""
    sid = d.site_id
    key_reg = lookup.keys[d.injection.key_index]
    fail = miss
    for k in reversed(range(len(d.injection.values))):
        v = d.injection.values[k]
        fuse = f"{sid}:inj{k}"
        creg, ereg = f"{sid}__injc{k}", f"{sid}__inje{k}"
        blk = Block(f"{sid}__inj{k}", [
            Const(creg, 128, v, fuse=fuse),
            Alu(ereg, "eq", key_reg, creg, fuse=fuse),
            Branch(ereg, proceed, fail, fuse=fuse),
        ])
        new_blocks.append(blk)
        fail = blk.label
    return fail
