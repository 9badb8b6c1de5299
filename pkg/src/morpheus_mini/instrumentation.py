"""Sampled per-site key recording and heatmap extraction.

Each instrumented lookup site keeps one small LRU key cache per worker.
A compile cycle drains the caches into per-site heatmaps, merged across
workers, and resets them for the next observation window.
"""
from __future__ import annotations

import random
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .analysis import AnalysisResult
from .ir import InstrRecord, Program, TableLookup
from .tables import TableState, entry_count

Key = Tuple[int, ...]


@dataclass
class SamplingPolicy:
    probability: float = 0.1
    capacity: int = 32
    hh_rule: str = "topk"  # topk | fraction
    hh_k: int = 8
    hh_fraction: float = 0.9
    table_enabled: Dict[str, bool] = field(default_factory=dict)

    def enabled_for(self, table_id: str) -> bool:
        return self.table_enabled.get(table_id, True)


@dataclass
class SiteCache:
    site_id: str
    worker_id: int
    capacity: int
    probability: float
    counts: "OrderedDict[Key, int]" = field(default_factory=OrderedDict)
    samples_seen: int = 0
    samples_recorded: int = 0
    epoch: int = 0

    def reset(self, epoch: int) -> None:
        self.counts = OrderedDict()
        self.samples_seen = 0
        self.samples_recorded = 0
        self.epoch = epoch


def record(cache: SiteCache, key: Key, rng: random.Random) -> bool:
    """Returns True when the key was sampled into the cache.  The RNG is
    always consumed so the stream does not depend on the probability."""
    cache.samples_seen += 1
    if rng.random() >= cache.probability:
        return False
    cache.samples_recorded += 1
    if key in cache.counts:
        cache.counts[key] += 1
        cache.counts.move_to_end(key)
    else:
        if len(cache.counts) >= cache.capacity:
            cache.counts.popitem(last=False)
        cache.counts[key] = 1
    return True


@dataclass
class Heatmap:
    site_id: str
    counts: Dict[Key, int] = field(default_factory=dict)
    total_seen: int = 0
    total_recorded: int = 0
    epoch: int = 0

    def share(self, key: Key) -> float:
        if not self.total_recorded:
            return 0.0
        return self.counts.get(key, 0) / self.total_recorded


def snapshot_and_reset(caches: Iterable[SiteCache]) -> Dict[str, Heatmap]:
    """Merge per-worker caches by site, then clear them and advance their
    epoch.  Returns {site_id: heatmap}."""
    groups: Dict[str, List[SiteCache]] = {}
    for c in caches:
        groups.setdefault(c.site_id, []).append(c)
    maps: Dict[str, Heatmap] = {}
    for site_id in sorted(groups):
        merged: Dict[Key, int] = {}
        seen = recorded = 0
        epoch = 0
        for c in groups[site_id]:
            for k, v in c.counts.items():
                merged[k] = merged.get(k, 0) + v
            seen += c.samples_seen
            recorded += c.samples_recorded
            epoch = max(epoch, c.epoch)
        maps[site_id] = Heatmap(site_id, merged, seen, recorded, epoch + 1)
        for c in groups[site_id]:
            c.reset(epoch + 1)
    return maps


def heavy_hitters(heatmap: Heatmap, policy: SamplingPolicy) -> List[Key]:
    """Hot keys, most frequent first; count ties break on the key tuple."""
    ranked = sorted(heatmap.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if policy.hh_rule == "topk":
        return [k for k, _ in ranked[:policy.hh_k]]
    if policy.hh_rule == "fraction":
        if heatmap.total_recorded <= 0:
            return []
        target = policy.hh_fraction * heatmap.total_recorded
        out: List[Key] = []
        acc = 0
        for k, v in ranked:
            if acc >= target:
                break
            out.append(k)
            acc += v
        return out
    raise ValueError(f"unknown heavy-hitter rule {policy.hh_rule!r}")


def plan_instrumentation(p: Program, analysis: AnalysisResult,
                         tables: Dict[str, TableState],
                         policy: SamplingPolicy,
                         small_table_threshold: int = 16) -> List[str]:
    """Read sites worth watching: their table is at or above the small-table
    threshold and instrumentation is not switched off for it.  Sorted by
    site id; write sites are never instrumented."""
    chosen = set()
    for s in analysis.read_sites():
        t = tables.get(s.table)
        if t is None:
            continue
        if entry_count(t) < small_table_threshold:
            continue
        if not t.instrumentation_enabled or not policy.enabled_for(s.table):
            continue
        chosen.add(s.site_id)
    return sorted(chosen)


def make_caches(site_ids: Iterable[str], num_workers: int,
                policy: SamplingPolicy,
                probability: Optional[float] = None,
                epoch: int = 0) -> List[SiteCache]:
    p = policy.probability if probability is None else probability
    return [SiteCache(site_id, w, policy.capacity, p, epoch=epoch)
            for site_id in sorted(set(site_ids))
            for w in range(num_workers)]


def inject_recording(p: Program, site_ids: Iterable[str]) -> int:
    """Insert an InstrRecord immediately before each chosen lookup,
    mirroring its key registers.  Mutates the program; returns the number
    of records inserted."""
    wanted = set(site_ids)
    inserted = 0
    for block in p.blocks.values():
        i = 0
        while i < len(block.instructions):
            ins = block.instructions[i]
            if isinstance(ins, TableLookup) and ins.site in wanted:
                block.instructions.insert(
                    i, InstrRecord(site=ins.site, keys=tuple(ins.keys)))
                inserted += 1
                i += 1
            i += 1
    return inserted
