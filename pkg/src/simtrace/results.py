"""Posterior sample files, histograms and engine-comparison reports.

Posterior files are CSV with a commented header: one `# address` line per
(shorthand id, full address) pair, then one row per posterior sample with
its trace type, log-weight and per-address values in columns named
`v<id>_<instance>`. Cells are empty for addresses a sample's trace does
not visit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .addressing import AddressDictionary
from .diagnostics import wasserstein1
from .engines import MarkovChain, WeightedTraceSet
from .trace import EntryKind, Trace

FORMAT_VERSION = 1


@dataclass
class PosteriorSet:
    """Weighted posterior samples keyed by (full address, instance)."""

    columns: list[tuple[str, int]]
    rows: list[dict]  # {"type_id": int, "log_weight": float, (full, inst): float}
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def marginal(self, full: str, instance: int = 1) -> tuple[np.ndarray, np.ndarray]:
        key = (full, instance)
        vals, lws = [], []
        for row in self.rows:
            if key in row:
                vals.append(row[key])
                lws.append(row["log_weight"])
        if not vals:
            return np.array([]), np.array([])
        lws = np.asarray(lws)
        w = np.exp(lws - lws.max())
        return np.asarray(vals), w / w.sum()

    def mode(self, full: str, instance: int = 1) -> float:
        """Weighted mode for integer-valued marginals."""
        vals, w = self.marginal(full, instance)
        levels, inverse = np.unique(vals, return_inverse=True)
        mass = np.zeros(levels.size)
        np.add.at(mass, inverse, w)
        return float(levels[int(np.argmax(mass))])


def _column_name(shorthand: int, instance: int) -> str:
    return f"v{shorthand}_{instance}"


def from_weighted(ws: WeightedTraceSet, meta: Optional[dict] = None) -> PosteriorSet:
    return _build([(t, lw) for t, lw in zip(ws.traces, ws.log_weights)], meta or {})


def from_chain(chain: MarkovChain, burn_in: Optional[int] = None,
               meta: Optional[dict] = None) -> PosteriorSet:
    kept = chain.kept(burn_in)
    return _build([(t, 0.0) for t in kept], meta or {})


def _build(pairs: list[tuple[Trace, float]], meta: dict) -> PosteriorSet:
    columns: list[tuple[str, int]] = []
    seen = set()
    rows = []
    for t, lw in pairs:
        row = {"type_id": t.type_id, "log_weight": float(lw)}
        for e in t.entries:
            if e.kind != EntryKind.LATENT or not e.control:
                continue
            key = (e.address.full, e.address.instance)
            if key not in seen:
                seen.add(key)
                columns.append(key)
            row[key] = e.value.as_float()
        rows.append(row)
    columns.sort()
    return PosteriorSet(columns, rows, meta)


def write_posterior(path: str, post: PosteriorSet):
    dictionary = AddressDictionary()
    for full, _ in post.columns:
        dictionary.id_for(full)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# simtrace-posterior v{FORMAT_VERSION}\n")
        for k, v in sorted(post.meta.items()):
            f.write(f"# meta {k}={v}\n")
        for shorthand, full in dictionary.items():
            f.write(f"# address {shorthand} {full}\n")
        writer = csv.writer(f)
        header = ["type_id", "log_weight"] + [
            _column_name(dictionary.lookup_id(full), inst) for full, inst in post.columns]
        writer.writerow(header)
        for row in post.rows:
            out = [f"{row['type_id']:016x}", repr(row["log_weight"])]
            for key in post.columns:
                out.append(repr(row[key]) if key in row else "")
            writer.writerow(out)


def read_posterior(path: str) -> PosteriorSet:
    id_to_full: dict[int, str] = {}
    meta: dict = {}
    data_lines = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.startswith("# address "):
                _, _, rest = line.strip().partition("# address ")
                shorthand, _, full = rest.partition(" ")
                id_to_full[int(shorthand)] = full
            elif line.startswith("# meta "):
                kv = line.strip()[len("# meta "):]
                k, _, v = kv.partition("=")
                meta[k] = v
            elif line.startswith("#"):
                continue
            else:
                data_lines.append(line)
    reader = csv.reader(data_lines)
    header = next(reader)
    keys: list[Optional[tuple[str, int]]] = []
    columns = []
    for name in header[2:]:
        body = name[1:]
        shorthand, _, inst = body.partition("_")
        key = (id_to_full[int(shorthand)], int(inst))
        keys.append(key)
        columns.append(key)
    rows = []
    for parts in reader:
        row = {"type_id": int(parts[0], 16), "log_weight": float(parts[1])}
        for key, cell in zip(keys, parts[2:]):
            if cell:
                row[key] = float(cell)
        rows.append(row)
    return PosteriorSet(sorted(columns), rows, meta)


def write_histogram(path: str, values: np.ndarray, weights: np.ndarray,
                    bins: int = 40):
    lo, hi = float(np.min(values)), float(np.max(values))
    if lo == hi:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi), weights=weights)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "mass"])
        for i, c in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), repr(float(c))])


@dataclass
class ComparisonRow:
    full: str
    instance: int
    w1: float
    mean_a: float
    mean_b: float
    mode_a: float
    mode_b: float
    n_a: int
    n_b: int


def compare_posteriors(a: PosteriorSet, b: PosteriorSet) -> list[ComparisonRow]:
    """Per-address Wasserstein-1 distances over the shared address set."""
    shared = sorted(set(a.columns) & set(b.columns))
    out = []
    for full, inst in shared:
        va, wa = a.marginal(full, inst)
        vb, wb = b.marginal(full, inst)
        if va.size == 0 or vb.size == 0:
            continue
        out.append(ComparisonRow(
            full=full, instance=inst,
            w1=wasserstein1(va, wa, vb, wb),
            mean_a=float(np.dot(va, wa)), mean_b=float(np.dot(vb, wb)),
            mode_a=a.mode(full, inst), mode_b=b.mode(full, inst),
            n_a=va.size, n_b=vb.size))
    return out


def format_comparison(rows: list[ComparisonRow]) -> str:
    lines = [f"{'address':58s} {'inst':4s} {'W1':>10s} {'mean A':>10s} {'mean B':>10s}"]
    for r in rows:
        lines.append(f"{r.full:58s} {r.instance:<4d} {r.w1:10.5f} "
                     f"{r.mean_a:10.4f} {r.mean_b:10.4f}")
    return "\n".join(lines)
