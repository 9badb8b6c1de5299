"""Match-action table state: exact, longest-prefix and wildcard kinds.

Lookup results are value tuples already masked to the schema.  Every
mutation bumps the generation counter, including no-op deletes, so guard
checks can compare a single integer.  LPM and wildcard lookups memoize
per generation; the linear reference scan only runs once per distinct key.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

from .ir import TableSchema, mask

KeyTuple = Tuple[int, ...]
ValueTuple = Tuple[int, ...]


class SchemaError(Exception):
    pass


@dataclass
class WildcardRule:
    priority: int
    order: int  # insertion index, breaks priority ties
    fields: Tuple[Tuple[int, int], ...]  # (value, mask) per key field
    values: ValueTuple


@dataclass
class MutationResult:
    generation: int
    applied: bool


@dataclass
class TableState:
    table_id: str
    schema: TableSchema
    exact: Dict[KeyTuple, ValueTuple] = field(default_factory=dict)
    lpm_buckets: Dict[int, Dict[int, ValueTuple]] = field(default_factory=dict)
    wc_rules: List[WildcardRule] = field(default_factory=list)
    generation: int = 0
    rw_mark: bool = False
    instrumentation_enabled: bool = True
    _wc_order: int = 0
    _memo: Dict[KeyTuple, object] = field(default_factory=dict, repr=False)
    _memo_gen: int = -1
    _dpl: int = 0
    _dpl_gen: int = -1

    @property
    def kind(self) -> str:
        return self.schema.kind


def make_table(table_id: str, schema: TableSchema) -> TableState:
    if schema.kind not in ("exact", "lpm", "wildcard"):
        raise SchemaError(f"unknown table kind {schema.kind!r}")
    if schema.kind == "lpm" and len(schema.key_fields) != 1:
        raise SchemaError("lpm tables take exactly one key field")
    return TableState(table_id, schema)


def entry_count(t: TableState) -> int:
    if t.kind == "exact":
        return len(t.exact)
    if t.kind == "lpm":
        return sum(len(b) for b in t.lpm_buckets.values())
    return len(t.wc_rules)


def copy_table(t: TableState) -> TableState:
    """Snapshot for a compile cycle.  Entry payloads are immutable tuples,
    so container-level copies are enough."""
    out = TableState(t.table_id, t.schema)
    out.exact = dict(t.exact)
    out.lpm_buckets = {ln: dict(b) for ln, b in t.lpm_buckets.items()}
    out.wc_rules = list(t.wc_rules)
    out.generation = t.generation
    out.rw_mark = t.rw_mark
    out.instrumentation_enabled = t.instrumentation_enabled
    out._wc_order = t._wc_order
    return out


def _mask_key(t: TableState, key: KeyTuple) -> KeyTuple:
    widths = t.schema.key_widths()
    if len(key) != len(widths):
        raise SchemaError(f"{t.table_id}: key arity {len(key)} != {len(widths)}")
    return tuple(k & mask(w) for k, w in zip(key, widths))


def _mask_value(t: TableState, value: ValueTuple) -> ValueTuple:
    widths = t.schema.value_widths()
    if len(value) != len(widths):
        raise SchemaError(f"{t.table_id}: value arity {len(value)} != {len(widths)}")
    return tuple(v & mask(w) for v, w in zip(value, widths))


# --- lookups ---------------------------------------------------------------


def exact_lookup(t: TableState, key: KeyTuple) -> Optional[ValueTuple]:
    return t.exact.get(_mask_key(t, key))


def _lpm_top_mask(width: int, length: int) -> int:
    if length == 0:
        return 0
    return ((1 << length) - 1) << (width - length)


def lpm_lookup(t: TableState, addr: int) -> Optional[Tuple[ValueTuple, int]]:
    """Longest matching prefix: (values, prefix length), or None."""
    width = t.schema.key_widths()[0]
    addr &= mask(width)
    if t._memo_gen != t.generation:
        t._memo.clear()
        t._memo_gen = t.generation
    memo_key = (addr,)
    if memo_key in t._memo:
        return t._memo[memo_key]  # type: ignore[return-value]
    result = None
    for length in sorted(t.lpm_buckets, reverse=True):
        bucket = t.lpm_buckets[length]
        if not bucket:
            continue
        probe = addr & _lpm_top_mask(width, length)
        hit = bucket.get(probe)
        if hit is not None:
            result = (hit, length)
            break
    t._memo[memo_key] = result
    return result


def wildcard_lookup(t: TableState, key: KeyTuple) -> Tuple[Optional[ValueTuple], Optional[int], int]:
    """First match in (priority, insertion) order.
    Returns (values, priority, entries examined); a miss examines every rule."""
    key = _mask_key(t, key)
    if t._memo_gen != t.generation:
        t._memo.clear()
        t._memo_gen = t.generation
    if key in t._memo:
        return t._memo[key]  # type: ignore[return-value]
    examined = 0
    result: Tuple[Optional[ValueTuple], Optional[int], int] = (None, None, len(t.wc_rules))
    for rule in t.wc_rules:
        examined += 1
        if all((k & m) == v for (v, m), k in zip(rule.fields, key)):
            result = (rule.values, rule.priority, examined)
            break
    t._memo[key] = result
    return result


def lookup_values(t: TableState, key: KeyTuple) -> Optional[ValueTuple]:
    """Kind-independent lookup used by the interpreter and compile-time
    verification of inlined entries."""
    if t.kind == "exact":
        return exact_lookup(t, key)
    if t.kind == "lpm":
        hit = lpm_lookup(t, key[0])
        return None if hit is None else hit[0]
    values, _, _ = wildcard_lookup(t, key)
    return values


# --- mutation --------------------------------------------------------------


def mutate(t: TableState, op: str, key, value=None) -> MutationResult:
    """insert/update are upserts; delete of an absent key is a no-op with
    applied=False.  The generation always bumps."""
    if op not in ("insert", "update", "delete"):
        raise SchemaError(f"unknown mutation {op!r}")
    applied = True
    if t.kind == "exact":
        k = _mask_key(t, tuple(key))
        if op == "delete":
            applied = t.exact.pop(k, None) is not None
        else:
            t.exact[k] = _mask_value(t, tuple(value))
    elif t.kind == "lpm":
        prefix, length = key
        width = t.schema.key_widths()[0]
        if not 0 <= length <= width:
            raise SchemaError(f"{t.table_id}: prefix length {length} out of range")
        p = prefix & _lpm_top_mask(width, length)
        bucket = t.lpm_buckets.setdefault(length, {})
        if op == "delete":
            applied = bucket.pop(p, None) is not None
            if not bucket:
                del t.lpm_buckets[length]
        else:
            bucket[p] = _mask_value(t, tuple(value))
    else:
        priority, fields = key
        widths = t.schema.key_widths()
        if len(fields) != len(widths):
            raise SchemaError(f"{t.table_id}: wildcard key arity mismatch")
        canon = tuple((v & m & mask(w), m & mask(w))
                      for (v, m), w in zip(fields, widths))
        if op == "delete":
            applied = False
            for i, rule in enumerate(t.wc_rules):
                if rule.priority == priority and rule.fields == canon:
                    del t.wc_rules[i]
                    applied = True
                    break
        else:
            rule = WildcardRule(priority, t._wc_order, canon, _mask_value(t, tuple(value)))
            t._wc_order += 1
            t.wc_rules.append(rule)
            t.wc_rules.sort(key=lambda r: (r.priority, r.order))
    t.generation += 1
    return MutationResult(t.generation, applied)


# --- content introspection (drives the optimizer) --------------------------


def iter_entries(t: TableState) -> Iterator[Tuple[KeyTuple, ValueTuple]]:
    """Concrete (key, values) pairs in deterministic declaration order.
    LPM keys are (prefix, length); wildcard rules are not enumerated here."""
    if t.kind == "exact":
        yield from t.exact.items()
    elif t.kind == "lpm":
        for length in sorted(t.lpm_buckets, reverse=True):
            for prefix, values in t.lpm_buckets[length].items():
                yield (prefix, length), values
    else:
        for rule in t.wc_rules:
            yield (rule.priority, rule.fields), rule.values


def field_domain(t: TableState, fieldname: str) -> Tuple[Tuple[int, ...], bool]:
    """Distinct values a field takes across entries.  The second element is
    False when some entry does not pin the field exactly (short prefix or
    partial mask), meaning the domain cannot justify skipping a lookup."""
    key_names = [n for n, _ in t.schema.key_fields]
    value_names = [n for n, _ in t.schema.value_fields]
    if fieldname in value_names:
        idx = value_names.index(fieldname)
        vals = sorted({values[idx] for _, values in iter_entries(t)})
        return tuple(vals), True
    if fieldname not in key_names:
        raise SchemaError(f"{t.table_id}: no field {fieldname!r}")
    idx = key_names.index(fieldname)
    if t.kind == "exact":
        return tuple(sorted({k[idx] for k in t.exact})), True
    if t.kind == "lpm":
        width = t.schema.key_widths()[0]
        exact_only = all(ln == width for ln in t.lpm_buckets if t.lpm_buckets[ln])
        vals = sorted({p for ln, b in t.lpm_buckets.items() for p in b if ln == width})
        return tuple(vals), exact_only
    width = t.schema.key_widths()[idx]
    full = mask(width)
    pinned = all(rule.fields[idx][1] == full for rule in t.wc_rules)
    vals = sorted({rule.fields[idx][0] for rule in t.wc_rules
                   if rule.fields[idx][1] == full})
    return tuple(vals), pinned


def uniform_prefix_length(t: TableState) -> Optional[int]:
    if t.kind != "lpm":
        raise SchemaError(f"{t.table_id}: not an lpm table")
    lengths = [ln for ln, b in t.lpm_buckets.items() if b]
    if len(lengths) == 1:
        return lengths[0]
    return None


def distinct_prefix_lengths(t: TableState) -> int:
    if t.kind != "lpm":
        return 0
    if t._dpl_gen != t.generation:
        t._dpl = sum(1 for b in t.lpm_buckets.values() if b)
        t._dpl_gen = t.generation
    return t._dpl


# --- rule files -------------------------------------------------------------


def _parse_num(tok: str, width: int) -> int:
    tok = tok.strip()
    if "." in tok and width == 32:
        parts = tok.split(".")
        if len(parts) != 4:
            raise SchemaError(f"bad dotted quad {tok!r}")
        out = 0
        for p in parts:
            b = int(p)
            if not 0 <= b <= 255:
                raise SchemaError(f"bad dotted quad {tok!r}")
            out = (out << 8) | b
        return out
    if ":" in tok and width == 48:
        parts = tok.split(":")
        if len(parts) != 6:
            raise SchemaError(f"bad mac {tok!r}")
        out = 0
        for p in parts:
            out = (out << 8) | int(p, 16)
        return out
    try:
        v = int(tok, 0)
    except ValueError:
        raise SchemaError(f"bad number {tok!r}") from None
    if not 0 <= v <= mask(width):
        raise SchemaError(f"{tok!r} does not fit u{width}")
    return v


def load_rules_csv(t: TableState, source: str) -> int:
    """Populate a table from its kind's rule format.  Returns rows loaded.
    exact:    key...,value...
    lpm:      prefix/len,value...
    wildcard: prio,field=value/mask;...,value...   (omitted fields match all)
    """
    key_widths = t.schema.key_widths()
    value_widths = t.schema.value_widths()
    key_names = [n for n, _ in t.schema.key_fields]
    rows = 0
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        cols = [c.strip() for c in line.split(",")]
        try:
            if t.kind == "exact":
                if len(cols) != len(key_widths) + len(value_widths):
                    raise SchemaError(f"expected {len(key_widths) + len(value_widths)} columns")
                key = tuple(_parse_num(c, w) for c, w in zip(cols, key_widths))
                values = tuple(_parse_num(c, w)
                               for c, w in zip(cols[len(key_widths):], value_widths))
                mutate(t, "insert", key, values)
            elif t.kind == "lpm":
                if len(cols) != 1 + len(value_widths):
                    raise SchemaError(f"expected {1 + len(value_widths)} columns")
                if "/" not in cols[0]:
                    raise SchemaError("lpm key must be prefix/len")
                prefix_s, len_s = cols[0].rsplit("/", 1)
                width = key_widths[0]
                prefix = _parse_num(prefix_s, width)
                length = int(len_s)
                values = tuple(_parse_num(c, w) for c, w in zip(cols[1:], value_widths))
                mutate(t, "insert", (prefix, length), values)
            else:
                if len(cols) != 2 + len(value_widths):
                    raise SchemaError(f"expected {2 + len(value_widths)} columns")
                priority = int(cols[0], 0)
                fields = {name: (0, 0) for name in key_names}
                if cols[1]:
                    for part in cols[1].split(";"):
                        if "=" not in part or "/" not in part:
                            raise SchemaError(f"bad wildcard field {part!r}")
                        name, vm = part.split("=", 1)
                        name = name.strip()
                        if name not in fields:
                            raise SchemaError(f"unknown key field {name!r}")
                        v_s, m_s = vm.split("/", 1)
                        w = key_widths[key_names.index(name)]
                        fields[name] = (_parse_num(v_s, w), _parse_num(m_s, w))
                values = tuple(_parse_num(c, w) for c, w in zip(cols[2:], value_widths))
                mutate(t, "insert",
                       (priority, tuple(fields[n] for n in key_names)), values)
        except SchemaError as exc:
            raise SchemaError(f"{t.table_id} line {lineno}: {exc}") from None
        rows += 1
    return rows


def dump_rules_csv(t: TableState) -> str:
    lines: List[str] = []
    if t.kind == "exact":
        for key, values in t.exact.items():
            lines.append(",".join(str(x) for x in key + values))
    elif t.kind == "lpm":
        for (prefix, length), values in iter_entries(t):
            lines.append(f"{prefix}/{length}," + ",".join(str(x) for x in values))
    else:
        key_names = [n for n, _ in t.schema.key_fields]
        for rule in t.wc_rules:
            fields = ";".join(f"{n}={v}/{m}"
                              for n, (v, m) in zip(key_names, rule.fields))
            lines.append(f"{rule.priority},{fields}," +
                         ",".join(str(x) for x in rule.values))
    return "\n".join(lines) + ("\n" if lines else "")
