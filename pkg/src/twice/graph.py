"""Worker-firm mobility graph: connected components, connectivity statistics and a mover event study."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from twice.errors import InsufficientEvents, ValidationError
from twice.panel import Panel


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, i: int) -> int:
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return int(root)

    def union(self, i: int, j: int) -> int:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return ri
        if self.size[ri] < self.size[rj] or (self.size[ri] == self.size[rj] and rj < ri):
            ri, rj = rj, ri
        self.parent[rj] = ri
        self.size[ri] += self.size[rj]
        return ri

    def labels(self) -> np.ndarray:
        """Dense component labels numbered by first appearance in node order."""
        roots = np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)
        _, first, inv = np.unique(roots, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first)] = np.arange(len(first))
        return rank[inv]


@dataclass
class MobilityGraph:
    worker_label: np.ndarray   # per worker, aligned with panel.worker_levels
    firm_label: np.ndarray     # per firm, aligned with panel.firm_levels
    n_components: int

    def row_labels(self, panel: Panel) -> np.ndarray:
        return self.worker_label[panel.worker_codes]


def mobility_graph(panel: Panel) -> MobilityGraph:
    nw, nf = panel.n_workers, panel.n_firms
    edges = np.unique(panel.worker_codes * nf + panel.firm_codes)
    uf = UnionFind(nw + nf)
    for e in edges.tolist():
        uf.union(e // nf, nw + e % nf)
    lab = uf.labels()
    return MobilityGraph(lab[:nw], lab[nw:], int(lab.max()) + 1 if len(lab) else 0)


@dataclass(frozen=True)
class ConnectivityStats:
    workers_before: int
    firms_before: int
    rows_before: int
    workers_after: int
    firms_after: int
    rows_after: int
    components: int
    mean_firms_per_worker: float
    mean_workers_per_firm: float
    share_workers_3plus_firms: float
    worker_retention: float

    def to_dict(self) -> dict:
        return asdict(self)


def connectivity_stats(before: Panel, after: Panel, components: int) -> ConnectivityStats:
    pairs = np.unique(after.worker_codes * max(after.n_firms, 1) + after.firm_codes)
    firms_per_worker = np.bincount(pairs // max(after.n_firms, 1), minlength=after.n_workers)
    workers_per_firm = np.bincount(pairs % max(after.n_firms, 1), minlength=after.n_firms)
    return ConnectivityStats(
        before.n_workers, before.n_firms, len(before),
        after.n_workers, after.n_firms, len(after), components,
        float(firms_per_worker.mean()) if len(after) else 0.0,
        float(workers_per_firm.mean()) if len(after) else 0.0,
        float((firms_per_worker >= 3).mean()) if len(after) else 0.0,
        after.n_workers / before.n_workers if before.n_workers else 0.0,
    )


def largest_connected_set(panel: Panel) -> tuple[Panel, ConnectivityStats]:
    """Rows whose worker and firm lie in the largest mobility-graph component.

    Size is counted in nodes (workers plus firms); ties go to the component
    with more rows, then to the one holding the smallest firm id.
    """
    if len(panel) == 0:
        raise ValidationError("cannot take the connected set of an empty panel")
    g = mobility_graph(panel)
    nodes = (np.bincount(g.worker_label, minlength=g.n_components)
             + np.bincount(g.firm_label, minlength=g.n_components))
    rows = np.bincount(g.row_labels(panel), minlength=g.n_components)
    min_firm = np.full(g.n_components, len(g.firm_label))
    np.minimum.at(min_firm, g.firm_label, np.arange(len(g.firm_label)))
    best = min(range(g.n_components), key=lambda c: (-nodes[c], -rows[c], min_firm[c]))
    keep = g.row_labels(panel) == best
    out = panel if keep.all() else panel.subset(keep)
    return out, connectivity_stats(panel, out, g.n_components)


# --------------------------------------------------------------------------- event study

EVENT_TIMES = (-2, -1, 0, 1)


@dataclass
class EventStudyTable:
    rows: list[dict]                                   # origin_q, dest_q, event_time, mean_log_wage, n
    insufficient: list[InsufficientEvents] = field(default_factory=list)
    cutoffs: tuple[float, ...] = ()
    n_events: int = 0

    def profile(self, origin_q: int, dest_q: int) -> np.ndarray:
        vals = {r["event_time"]: r["mean_log_wage"] for r in self.rows
                if r["origin_q"] == origin_q and r["dest_q"] == dest_q}
        return np.array([vals.get(t, np.nan) for t in EVENT_TIMES])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["origin_q", "dest_q", "event_time", "mean_log_wage", "n"])
        for r in self.rows:
            w.writerow([r["origin_q"], r["dest_q"], r["event_time"], repr(r["mean_log_wage"]), r["n"]])
        return buf.getvalue()


def _firm_means(sums, counts):
    """Average over a firm's years of its firm-year mean wage."""
    fy = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    ny = (counts > 0).sum(axis=1)
    return np.divide(fy.sum(axis=1), ny, out=np.full(len(ny), np.nan), where=ny > 0)


def event_study(panel: Panel, quartiles: int = 4, pre_years: int = 2, post_years: int = 2) -> EventStudyTable:
    """Mean log wage around job changes, by origin and destination firm quantile group.

    Firms are ranked by the average of their firm-year mean wages; when a mover's
    origin or destination is classified, that mover's own rows are removed first.
    A move qualifies when ``pre_years`` consecutive years at one firm are followed by
    ``post_years`` consecutive years at another; event time 0 is the first year at
    the new firm.
    """
    if len(panel) == 0:
        raise ValidationError("empty panel")
    years = np.unique(panel.year)
    if years[-1] - years[0] + 1 < pre_years + post_years:
        raise ValidationError(f"event study needs a panel spanning at least {pre_years + post_years} years")
    nf = panel.n_firms
    ycode = panel.year - years[0]
    ny = int(ycode.max()) + 1
    sums = np.zeros((nf, ny))
    counts = np.zeros((nf, ny))
    np.add.at(sums, (panel.firm_codes, ycode), panel.log_wage)
    np.add.at(counts, (panel.firm_codes, ycode), 1.0)
    firm_mean = _firm_means(sums, counts)
    probs = np.arange(1, quartiles) / quartiles
    cutoffs = np.quantile(firm_mean[np.isfinite(firm_mean)], probs)

    order = np.lexsort((panel.year, panel.worker_codes))
    w, yr, f, wage = (panel.worker_codes[order], ycode[order], panel.firm_codes[order], panel.log_wage[order])
    span = pre_years + post_years
    n = len(order)
    starts = np.arange(max(n - span + 1, 0))
    ok = np.ones(len(starts), dtype=bool)
    for s in range(1, span):
        ok &= (w[starts + s] == w[starts]) & (yr[starts + s] == yr[starts] + s)
    for s in range(1, pre_years):
        ok &= f[starts + s] == f[starts]
    for s in range(pre_years + 1, span):
        ok &= f[starts + s] == f[starts + pre_years]
    ok &= f[starts + pre_years] != f[starts]
    events = starts[ok]

    # rows of each worker in sorted order
    bounds = np.searchsorted(w, np.arange(panel.n_workers + 1))

    def group_of(firm, worker):
        lo, hi = bounds[worker], bounds[worker + 1]
        mine = np.flatnonzero(f[lo:hi] == firm) + lo
        s = sums[firm].copy()
        c = counts[firm].copy()
        np.subtract.at(s, yr[mine], wage[mine])
        np.subtract.at(c, yr[mine], 1.0)
        v = _firm_means(s[None, :], c[None, :])[0]
        if not np.isfinite(v):
            return None
        return int(np.searchsorted(cutoffs, v, side="right")) + 1

    cells = defaultdict(lambda: [[] for _ in range(span)])
    used = 0
    for e in events.tolist():
        oq = group_of(f[e], w[e])
        dq = group_of(f[e + pre_years], w[e])
        if oq is None or dq is None:
            continue
        used += 1
        for s in range(span):
            cells[(oq, dq)][s].append(wage[e + s])

    times = list(range(-pre_years, post_years))
    out, missing = [], []
    for oq in range(1, quartiles + 1):
        for dq in range(1, quartiles + 1):
            if (oq, dq) not in cells:
                missing.append(InsufficientEvents((oq, dq)))
                continue
            for s, t in enumerate(times):
                vals = cells[(oq, dq)][s]
                out.append({"origin_q": oq, "dest_q": dq, "event_time": t,
                            "mean_log_wage": float(np.mean(vals)), "n": len(vals)})
    return EventStudyTable(out, missing, tuple(float(c) for c in cutoffs), used)
