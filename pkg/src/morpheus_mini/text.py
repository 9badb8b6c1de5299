"""Line-oriented assembly for pipeline programs.

`parse_program(print_program(p)) == p` holds for every valid program,
including optimizer output (guards, recording, fuse tags).
"""
from __future__ import annotations

from typing import List, Tuple

from .ir import (ACTIONS, ALU_OPS, Alu, Block, Branch, Const, FieldOf,
                 GuardCheck, InstrRecord, Jump, LoadField, Program, Return,
                 SetField, TableLookup, TableSchema, TableUpdate)


class ParseError(Exception):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _fields_str(fields: Tuple[Tuple[str, int], ...]) -> str:
    return ",".join(f"{name}:{width}" for name, width in fields)


def _regs_str(regs: Tuple[str, ...]) -> str:
    return ",".join(f"%{r}" for r in regs)


def _fuse_suffix(tag) -> str:
    return f" !fuse={tag}" if tag is not None else ""


def print_program(p: Program) -> str:
    lines: List[str] = [
        f"program {p.name} version {p.version} provenance {p.provenance} entry {p.entry}"
    ]
    for tid, schema in p.tables.items():
        lines.append(f"table {tid} kind={schema.kind} "
                     f"key={_fields_str(schema.key_fields)} "
                     f"value={_fields_str(schema.value_fields)}")
    for label, block in p.blocks.items():
        lines.append("")
        lines.append(f"{label}:")
        for ins in block.instructions:
            lines.append("  " + _print_instr(ins))
    return "\n".join(lines) + "\n"


def _print_instr(ins) -> str:
    if isinstance(ins, LoadField):
        return f"%{ins.dst} = loadfield {ins.fieldname}"
    if isinstance(ins, Const):
        return f"%{ins.dst} = const {ins.width}:{ins.value}{_fuse_suffix(ins.fuse)}"
    if isinstance(ins, Alu):
        return f"%{ins.dst} = alu {ins.op} %{ins.a} %{ins.b}{_fuse_suffix(ins.fuse)}"
    if isinstance(ins, SetField):
        return f"setfield {ins.fieldname} %{ins.src}"
    if isinstance(ins, TableLookup):
        return (f"%{ins.dst} = lookup {ins.table} keys={_regs_str(ins.keys)} "
                f"site={ins.site}")
    if isinstance(ins, TableUpdate):
        return (f"update {ins.table} keys={_regs_str(ins.keys)} "
                f"vals={_regs_str(ins.values)} site={ins.site}")
    if isinstance(ins, FieldOf):
        return f"%{ins.dst} = fieldof %{ins.src} {ins.index}"
    if isinstance(ins, Branch):
        return (f"br %{ins.cond} then {ins.then_label} else {ins.else_label}"
                f"{_fuse_suffix(ins.fuse)}")
    if isinstance(ins, Jump):
        return f"jmp {ins.target}"
    if isinstance(ins, Return):
        return f"ret {ins.action}"
    if isinstance(ins, GuardCheck):
        return f"guard {ins.guard} ok {ins.ok} fallback {ins.fallback}"
    if isinstance(ins, InstrRecord):
        return f"record site={ins.site} keys={_regs_str(ins.keys)}"
    raise TypeError(f"cannot print {ins!r}")


def _parse_int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(lineno, f"bad integer {tok!r}") from None


def _parse_reg(tok: str, lineno: int) -> str:
    if not tok.startswith("%") or len(tok) < 2:
        raise ParseError(lineno, f"expected register, got {tok!r}")
    return tok[1:]


def _parse_reg_list(tok: str, lineno: int) -> Tuple[str, ...]:
    return tuple(_parse_reg(t, lineno) for t in tok.split(",") if t)


def _parse_field_list(tok: str, lineno: int) -> Tuple[Tuple[str, int], ...]:
    out = []
    for part in tok.split(","):
        if not part:
            continue
        if ":" not in part:
            raise ParseError(lineno, f"expected name:width, got {part!r}")
        name, width = part.split(":", 1)
        out.append((name, _parse_int(width, lineno)))
    return tuple(out)


def _kv(tok: str, key: str, lineno: int) -> str:
    if not tok.startswith(key + "="):
        raise ParseError(lineno, f"expected {key}=..., got {tok!r}")
    return tok[len(key) + 1:]


def _split_fuse(tokens: List[str]):
    if tokens and tokens[-1].startswith("!fuse="):
        return tokens[:-1], tokens[-1][len("!fuse="):]
    return tokens, None


def parse_program(source: str) -> Program:
    program: Program = None  # type: ignore[assignment]
    current: Block = None  # type: ignore[assignment]
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "program":
            if program is not None:
                raise ParseError(lineno, "duplicate program header")
            if len(tokens) != 8 or tokens[2] != "version" or \
                    tokens[4] != "provenance" or tokens[6] != "entry":
                raise ParseError(lineno, "malformed program header")
            program = Program(name=tokens[1], version=_parse_int(tokens[3], lineno),
                              provenance=tokens[5], entry=tokens[7])
            continue
        if program is None:
            raise ParseError(lineno, "program header must come first")
        if tokens[0] == "table":
            if current is not None:
                raise ParseError(lineno, "table declarations must precede blocks")
            if len(tokens) != 5:
                raise ParseError(lineno, "malformed table declaration")
            tid = tokens[1]
            if tid in program.tables:
                raise ParseError(lineno, f"duplicate table {tid!r}")
            program.tables[tid] = TableSchema(
                kind=_kv(tokens[2], "kind", lineno),
                key_fields=_parse_field_list(_kv(tokens[3], "key", lineno), lineno),
                value_fields=_parse_field_list(_kv(tokens[4], "value", lineno), lineno),
            )
            continue
        if len(tokens) == 1 and tokens[0].endswith(":"):
            label = tokens[0][:-1]
            if label in program.blocks:
                raise ParseError(lineno, f"duplicate block {label!r}")
            current = Block(label)
            program.blocks[label] = current
            continue
        if current is None:
            raise ParseError(lineno, "instruction outside of a block")
        current.instructions.append(_parse_instr(tokens, lineno))
    if program is None:
        raise ParseError(0, "missing program header")
    return program


def _parse_instr(tokens: List[str], lineno: int):
    tokens, fuse = _split_fuse(tokens)
    if len(tokens) >= 3 and tokens[1] == "=":
        dst = _parse_reg(tokens[0], lineno)
        op = tokens[2]
        rest = tokens[3:]
        if op == "loadfield" and len(rest) == 1:
            return LoadField(dst, rest[0])
        if op == "const" and len(rest) == 1 and ":" in rest[0]:
            width, value = rest[0].split(":", 1)
            return Const(dst, _parse_int(width, lineno), _parse_int(value, lineno), fuse)
        if op == "alu" and len(rest) == 3:
            if rest[0] not in ALU_OPS:
                raise ParseError(lineno, f"unknown alu op {rest[0]!r}")
            return Alu(dst, rest[0], _parse_reg(rest[1], lineno),
                       _parse_reg(rest[2], lineno), fuse)
        if op == "lookup" and len(rest) == 3:
            return TableLookup(dst, rest[0],
                               _parse_reg_list(_kv(rest[1], "keys", lineno), lineno),
                               _kv(rest[2], "site", lineno))
        if op == "fieldof" and len(rest) == 2:
            return FieldOf(dst, _parse_reg(rest[0], lineno), _parse_int(rest[1], lineno))
        raise ParseError(lineno, f"malformed instruction {' '.join(tokens)!r}")
    op = tokens[0]
    rest = tokens[1:]
    if op == "setfield" and len(rest) == 2:
        return SetField(rest[0], _parse_reg(rest[1], lineno))
    if op == "update" and len(rest) == 4:
        return TableUpdate(rest[0],
                           _parse_reg_list(_kv(rest[1], "keys", lineno), lineno),
                           _parse_reg_list(_kv(rest[2], "vals", lineno), lineno),
                           _kv(rest[3], "site", lineno))
    if op == "br" and len(rest) == 5 and rest[1] == "then" and rest[3] == "else":
        return Branch(_parse_reg(rest[0], lineno), rest[2], rest[4], fuse)
    if op == "jmp" and len(rest) == 1:
        return Jump(rest[0])
    if op == "ret" and len(rest) == 1:
        if rest[0] not in ACTIONS:
            raise ParseError(lineno, f"unknown action {rest[0]!r}")
        return Return(rest[0])
    if op == "guard" and len(rest) == 5 and rest[1] == "ok" and rest[3] == "fallback":
        return GuardCheck(rest[0], rest[2], rest[4])
    if op == "record" and len(rest) == 2:
        return InstrRecord(_kv(rest[0], "site", lineno),
                           _parse_reg_list(_kv(rest[1], "keys", lineno), lineno))
    raise ParseError(lineno, f"malformed instruction {' '.join(tokens)!r}")
