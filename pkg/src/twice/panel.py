"""Matched worker-firm panels: schema, CSV ingestion, holdout splits, synthetic data."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from twice.errors import (
    DegenerateSplit,
    DuplicateWorkerYear,
    MalformedRow,
    SchemaMismatch,
    ValidationError,
)

ID_COLUMNS = ("worker_id", "firm_id", "year", "log_wage")
NUMERIC = "numeric"
CATEGORICAL = "categorical"
WORKER = "worker"
FIRM = "firm"


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    side: str
    cardinality: int | None = None

    @property
    def categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class ColumnSchema:
    """Ordered covariate declaration. Identifier columns are implicit."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValidationError("covariate names must be unique")
        for c in self.columns:
            if c.name in ID_COLUMNS:
                raise ValidationError(f"{c.name!r} is reserved")
            if c.kind not in (NUMERIC, CATEGORICAL):
                raise ValidationError(f"column {c.name!r}: unknown kind {c.kind!r}")
            if c.side not in (WORKER, FIRM):
                raise ValidationError(f"column {c.name!r}: unknown side {c.side!r}")
            if c.cardinality is not None and c.cardinality < 1:
                raise ValidationError(f"column {c.name!r}: cardinality must be >= 1")

    @classmethod
    def from_triples(cls, triples) -> "ColumnSchema":
        """Build from ``(name, kind, side)`` or ``(name, kind, side, cardinality)`` tuples."""
        return cls(tuple(Column(*t) for t in triples))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)

    def side_indices(self, side: str) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.side == side]

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([c.categorical for c in self.columns], dtype=bool)

    def to_dict(self) -> list[dict]:
        return [dataclasses.asdict(c) for c in self.columns]

    @classmethod
    def from_dict(cls, data) -> "ColumnSchema":
        return cls(tuple(Column(**d) for d in data))


@dataclass(frozen=True)
class Observation:
    worker_id: str
    firm_id: str
    year: int
    log_wage: float
    worker_covariates: dict
    firm_covariates: dict


class Panel:
    """Immutable matched panel stored column-wise.

    Categorical covariates hold integer codes into ``levels[name]``; numeric
    covariates hold floats. Both live in the float matrix ``covariates``.
    """

    def __init__(self, worker_id, firm_id, year, log_wage, covariates, schema: ColumnSchema,
                 levels: dict[str, Sequence[str]] | None = None, check: bool = True):
        self.worker_id = np.asarray(worker_id, dtype=str)
        self.firm_id = np.asarray(firm_id, dtype=str)
        self.year = np.asarray(year, dtype=np.int64)
        self.log_wage = np.asarray(log_wage, dtype=np.float64)
        n = len(self.log_wage)
        cov = np.asarray(covariates, dtype=np.float64)
        if cov.size == 0:
            cov = cov.reshape(n, len(schema.columns))
        self.covariates = cov
        self.schema = schema
        self.levels = {k: tuple(v) for k, v in (levels or {}).items()}
        for arr in (self.worker_id, self.firm_id, self.year, self.log_wage, self.covariates):
            arr.setflags(write=False)
        if check:
            self._validate()

    def _validate(self):
        n = len(self)
        if not (len(self.worker_id) == len(self.firm_id) == len(self.year) == n):
            raise ValidationError("identifier columns have different lengths")
        if self.covariates.shape != (n, len(self.schema.columns)):
            raise SchemaMismatch(
                f"covariate matrix shape {self.covariates.shape} does not match schema "
                f"({n}, {len(self.schema.columns)})")
        if not np.all(np.isfinite(self.log_wage)):
            raise ValidationError("log wages must be finite")
        if not np.all(np.isfinite(self.covariates)):
            raise ValidationError("covariates must be finite; missing values are rejected")
        for i, c in enumerate(self.schema.columns):
            if not c.categorical:
                continue
            codes = self.covariates[:, i]
            nlev = len(self.levels.get(c.name, ()))
            if n and (np.any(codes < 0) or np.any(codes != np.floor(codes)) or np.any(codes >= nlev)):
                raise SchemaMismatch(f"column {c.name!r}: category codes outside the level dictionary")
            if c.cardinality is not None and nlev > c.cardinality:
                raise SchemaMismatch(f"column {c.name!r}: {nlev} levels exceed cardinality {c.cardinality}")
        if n:
            wc = self.worker_codes
            _, yc = np.unique(self.year, return_inverse=True)
            key = wc.astype(np.int64) * (int(yc.max()) + 1) + yc
            uniq, counts = np.unique(key, return_counts=True)
            if np.any(counts > 1):
                dup = uniq[np.argmax(counts > 1)]
                first = np.flatnonzero(key == dup)[0]
                raise DuplicateWorkerYear(self.worker_id[first], int(self.year[first]))

    def __len__(self) -> int:
        return len(self.log_wage)

    def __repr__(self) -> str:
        return (f"Panel(rows={len(self)}, workers={self.n_workers}, firms={self.n_firms}, "
                f"covariates={self.schema.names})")

    def _factor(self, attr):
        cache = self.__dict__.setdefault("_cache", {})
        if attr not in cache:
            levels, codes = np.unique(getattr(self, attr), return_inverse=True)
            cache[attr] = (levels, codes.astype(np.int64))
        return cache[attr]

    @property
    def worker_levels(self) -> np.ndarray:
        return self._factor("worker_id")[0]

    @property
    def worker_codes(self) -> np.ndarray:
        return self._factor("worker_id")[1]

    @property
    def firm_levels(self) -> np.ndarray:
        return self._factor("firm_id")[0]

    @property
    def firm_codes(self) -> np.ndarray:
        return self._factor("firm_id")[1]

    @property
    def n_workers(self) -> int:
        return len(self.worker_levels)

    @property
    def n_firms(self) -> int:
        return len(self.firm_levels)

    @property
    def worker_index(self) -> dict[str, np.ndarray]:
        return _group_index(self.worker_levels, self.worker_codes)

    @property
    def firm_index(self) -> dict[str, np.ndarray]:
        return _group_index(self.firm_levels, self.firm_codes)

    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.schema.index(name)]

    def labels(self, name: str) -> np.ndarray:
        """Categorical column decoded to its level strings."""
        lev = np.asarray(self.levels[name], dtype=object)
        return lev[self.column(name).astype(np.int64)]

    def subset(self, rows) -> "Panel":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Panel(self.worker_id[rows], self.firm_id[rows], self.year[rows], self.log_wage[rows],
                     self.covariates[rows], self.schema, self.levels, check=False)

    def with_log_wage(self, log_wage) -> "Panel":
        return Panel(self.worker_id, self.firm_id, self.year, log_wage, self.covariates,
                     self.schema, self.levels, check=False)

    def with_year(self, year) -> "Panel":
        return Panel(self.worker_id, self.firm_id, year, self.log_wage, self.covariates,
                     self.schema, self.levels, check=False)

    def with_covariates(self, covariates) -> "Panel":
        return Panel(self.worker_id, self.firm_id, self.year, self.log_wage, covariates,
                     self.schema, self.levels, check=False)

    @property
    def rows(self) -> Iterator[Observation]:
        cols = self.schema.columns
        for r in range(len(self)):
            wcov, fcov = {}, {}
            for i, c in enumerate(cols):
                v = self.covariates[r, i]
                v = self.levels[c.name][int(v)] if c.categorical else float(v)
                (wcov if c.side == WORKER else fcov)[c.name] = v
            yield Observation(str(self.worker_id[r]), str(self.firm_id[r]), int(self.year[r]),
                              float(self.log_wage[r]), wcov, fcov)


def _group_index(levels, codes):
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(len(levels) + 1))
    return {str(levels[g]): order[bounds[g]:bounds[g + 1]] for g in range(len(levels))}


def empty_panel(schema: ColumnSchema) -> Panel:
    return Panel([], [], [], [], np.empty((0, len(schema.columns))), schema,
                 {c.name: () for c in schema.columns if c.categorical})


# --------------------------------------------------------------------------- CSV


def ingest_csv(path, schema: ColumnSchema, levels: dict[str, Sequence[str]] | None = None) -> Panel:
    """Read a panel CSV.

    Categorical levels are interned in first-seen order, appended after any
    ``levels`` passed in (used to align a test file with a fitted model).
    """
    path = Path(path)
    levels = {c.name: list((levels or {}).get(c.name, ())) for c in schema.columns if c.categorical}
    lookup = {name: {lev: i for i, lev in enumerate(levs)} for name, levs in levels.items()}
    wid, fid, years, wages, cov = [], [], [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaMismatch(f"{path} is empty") from None
        expected = list(ID_COLUMNS) + schema.names
        if sorted(header) != sorted(expected) or len(header) != len(set(header)):
            missing = sorted(set(expected) - set(header))
            extra = sorted(set(header) - set(expected))
            raise SchemaMismatch(f"header disagrees with schema (missing={missing}, unexpected={extra})")
        pos = {h: i for i, h in enumerate(header)}
        for rec in reader:
            line = reader.line_num
            if not rec:
                continue
            if len(rec) != len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, found {len(rec)}")
            try:
                w, f = rec[pos["worker_id"]].strip(), rec[pos["firm_id"]].strip()
                if not w or not f:
                    raise ValueError("empty identifier")
                year = int(rec[pos["year"]])
                wage = float(rec[pos["log_wage"]])
                if not math.isfinite(wage):
                    raise ValueError("non-finite log wage")
                vals = []
                for c in schema.columns:
                    raw = rec[pos[c.name]]
                    if c.categorical:
                        if raw == "":
                            raise ValueError(f"missing value in {c.name}")
                        table = lookup[c.name]
                        if raw not in table:
                            if c.cardinality is not None and len(table) >= c.cardinality:
                                raise ValueError(f"{c.name}: more than {c.cardinality} levels")
                            table[raw] = len(table)
                            levels[c.name].append(raw)
                        vals.append(float(table[raw]))
                    else:
                        v = float(raw)
                        if not math.isfinite(v):
                            raise ValueError(f"missing or non-finite value in {c.name}")
                        vals.append(v)
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
            wid.append(w)
            fid.append(f)
            years.append(year)
            wages.append(wage)
            cov.append(vals)
    cov_arr = np.array(cov, dtype=np.float64).reshape(len(wages), len(schema.columns))
    return Panel(wid, fid, years, wages, cov_arr, schema, levels)


def emit_csv(panel: Panel, path) -> None:
    """Write ``panel`` in the format read by :func:`ingest_csv` (floats round-trip exactly)."""
    path = Path(path)
    cols = panel.schema.columns
    decoded = [panel.labels(c.name) if c.categorical else None for c in cols]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(ID_COLUMNS) + panel.schema.names)
        for r in range(len(panel)):
            rec = [panel.worker_id[r], panel.firm_id[r], int(panel.year[r]), repr(float(panel.log_wage[r]))]
            for i, c in enumerate(cols):
                rec.append(decoded[i][r] if c.categorical else repr(float(panel.covariates[r, i])))
            writer.writerow(rec)


# --------------------------------------------------------------------------- splits and summaries


def holdout_split(panel: Panel, firm_fraction: float, worker_fraction: float = 1.0,
                  seed: int = 0) -> tuple[Panel, Panel]:
    """Firm-level holdout: test rows come only from held-out firms (and sampled workers within them)."""
    if not 0 < firm_fraction < 1:
        raise ValidationError("firm_fraction must lie in (0, 1)")
    if not 0 < worker_fraction <= 1:
        raise ValidationError("worker_fraction must lie in (0, 1]")
    if len(panel) == 0:
        raise DegenerateSplit("cannot split an empty panel")
    rng = np.random.default_rng(seed)
    n_test = int(round(firm_fraction * panel.n_firms))
    held = np.zeros(panel.n_firms, dtype=bool)
    held[rng.permutation(panel.n_firms)[:n_test]] = True
    in_held = held[panel.firm_codes]
    test_mask = in_held.copy()
    if worker_fraction < 1:
        candidates = np.unique(panel.worker_codes[in_held])
        k = int(round(worker_fraction * len(candidates)))
        chosen = np.zeros(panel.n_workers, dtype=bool)
        chosen[rng.permutation(candidates)[:k]] = True
        test_mask &= chosen[panel.worker_codes]
    train_mask = ~in_held
    if not train_mask.any() or not test_mask.any():
        raise DegenerateSplit(
            f"split leaves {'train' if not train_mask.any() else 'test'} empty "
            f"({panel.n_firms} firms, fraction {firm_fraction})")
    return panel.subset(train_mask), panel.subset(test_mask)


@dataclass(frozen=True)
class YearSummary:
    year: int
    n_obs: int
    n_firms: int
    n_workers: int
    mean_log_wage: float


@dataclass(frozen=True)
class PanelSummary:
    n_obs: int
    n_workers: int
    n_firms: int
    mean_log_wage: float
    years: tuple[YearSummary, ...]


def summarize(panel: Panel) -> PanelSummary:
    if len(panel) == 0:
        return PanelSummary(0, 0, 0, float("nan"), ())
    years = []
    for y in np.unique(panel.year):
        m = panel.year == y
        years.append(YearSummary(int(y), int(m.sum()), len(np.unique(panel.firm_codes[m])),
                                 len(np.unique(panel.worker_codes[m])), float(panel.log_wage[m].mean())))
    return PanelSummary(len(panel), panel.n_workers, panel.n_firms, float(panel.log_wage.mean()), tuple(years))


# --------------------------------------------------------------------------- synthetic data

SYNTHETIC_SCHEMA = ColumnSchema.from_triples([
    ("age", NUMERIC, WORKER),
    ("tenure", NUMERIC, WORKER),
    ("ability", NUMERIC, WORKER),
    ("education", CATEGORICAL, WORKER),
    ("w_noise", NUMERIC, WORKER),
    ("log_revenue", NUMERIC, FIRM),
    ("log_size", NUMERIC, FIRM),
    ("sector", CATEGORICAL, FIRM),
    ("f_noise", NUMERIC, FIRM),
])

WORKER_SCALE = (0.35, 0.10)   # linear and quadratic loadings of the worker premium on the type score
FIRM_SCALE = (0.20, 0.08)
INTERACTION_SCALE = 0.20
FIRST_YEAR = 2010
N_SECTORS = 4


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings. The last five fields extend the core dials and have defaults."""

    n_workers: int = 2000
    n_firms: int = 200
    n_years: int = 5
    worker_type_count: int = 4
    firm_type_count: int = 4
    sorting_strength: float = 0.5
    interaction_scale: float = 1.0
    noise_sd: float = 0.2
    seed: int = 0
    covariate_noise: float = 0.1
    move_rate: float = 0.3
    worker_effect_sd: float = 0.0
    mean_wage: float = 2.0
    year_varying_firms: bool = True

    def __post_init__(self):
        for name in ("n_workers", "n_firms", "n_years", "worker_type_count", "firm_type_count"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.n_firms < self.firm_type_count:
            raise ValidationError("n_firms must be at least firm_type_count")
        if not 0 <= self.sorting_strength <= 1:
            raise ValidationError("sorting_strength must lie in [0, 1]")
        if self.interaction_scale < 0 or self.noise_sd < 0 or self.covariate_noise < 0:
            raise ValidationError("scales and standard deviations must be non-negative")
        if self.worker_effect_sd < 0:
            raise ValidationError("worker_effect_sd must be non-negative")
        if not 0 <= self.move_rate <= 1:
            raise ValidationError("move_rate must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, data: dict) -> "SyntheticSpec":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in data.items():
            if key not in kinds:
                raise ValidationError(f"unknown synthetic spec key {key!r}")
            kind = kinds[key]
            if kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            elif kind == "bool":
                out[key] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes")
            else:
                out[key] = raw
        return cls(**out)

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        """Read ``key = value`` lines (an optional ``[simulate]`` header is allowed)."""
        text = Path(path).read_text(encoding="utf-8")
        parser = configparser.ConfigParser()
        if not text.lstrip().startswith("["):
            text = "[simulate]\n" + text
        parser.read_string(text)
        section = "simulate" if parser.has_section("simulate") else parser.sections()[0]
        return cls.from_mapping(dict(parser[section]))


@dataclass
class GroundTruth:
    worker_type: np.ndarray        # per worker, aligned with panel.worker_levels
    firm_type: np.ndarray          # per firm, aligned with panel.firm_levels
    alpha: np.ndarray              # (L,) projected worker component
    psi: np.ndarray                # (K,)
    kappa: np.ndarray              # (L, K); nan where the type pair never occurs
    variances: dict[str, float]
    shares: dict[str, float]
    row_worker_type: np.ndarray = field(repr=False)
    row_firm_type: np.ndarray = field(repr=False)
    signal: np.ndarray = field(repr=False)   # noiseless systematic wage per row
    noise: np.ndarray = field(repr=False)    # u_it = persistent worker draw + iid noise

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "psi": self.psi.tolist(),
            "kappa": [[None if math.isnan(v) else v for v in row] for row in self.kappa.tolist()],
            "variances": self.variances,
            "shares": self.shares,
            "worker_type": self.worker_type.tolist(),
            "firm_type": self.firm_type.tolist(),
        }


def _type_score(n):
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def component_tables(spec: SyntheticSpec):
    """Raw (uncentered) worker, firm and interaction values per type."""
    z = _type_score(spec.worker_type_count)
    y = _type_score(spec.firm_type_count)
    a = WORKER_SCALE[0] * z + WORKER_SCALE[1] * z ** 2
    b = FIRM_SCALE[0] * y + FIRM_SCALE[1] * y ** 2
    k = INTERACTION_SCALE * np.outer(z, y)
    return a, b, k


def simulate(spec: SyntheticSpec) -> tuple[Panel, GroundTruth]:
    """Generate a balanced panel with known worker/firm/interaction structure.

    Matching uses a Gaussian copula: each spell draws ``z = rho*u + sqrt(1-rho^2)*e``
    from the worker's latent score ``u`` and the firm type is the ``Phi(z)``
    quantile bucket, so ``rho = 0`` is independent matching and ``rho = 1``
    matches worker and firm quantile buckets exactly.
    """
    rng = np.random.default_rng(spec.seed)
    nw, nf, nt = spec.n_workers, spec.n_firms, spec.n_years
    tw_count, tf_count = spec.worker_type_count, spec.firm_type_count
    rho = spec.sorting_strength

    u = rng.standard_normal(nw)
    worker_type = np.minimum((ndtr(u) * tw_count).astype(np.int64), tw_count - 1)
    firm_type = np.empty(nf, dtype=np.int64)
    firm_type[rng.permutation(nf)] = (np.arange(nf) * tf_count) // nf
    by_type = [np.flatnonzero(firm_type == s) for s in range(tf_count)]

    def draw_firms(idx):
        z = rho * u[idx] + math.sqrt(max(0.0, 1.0 - rho * rho)) * rng.standard_normal(len(idx))
        ft = np.minimum((ndtr(z) * tf_count).astype(np.int64), tf_count - 1)
        pick = rng.random(len(idx))
        out = np.empty(len(idx), dtype=np.int64)
        for s in range(tf_count):
            m = ft == s
            out[m] = by_type[s][(pick[m] * len(by_type[s])).astype(np.int64)]
        return out

    firm = np.empty((nw, nt), dtype=np.int64)
    tenure = np.empty((nw, nt))
    firm[:, 0] = draw_firms(np.arange(nw))
    tenure[:, 0] = rng.integers(1, 6, size=nw)
    for t in range(1, nt):
        moving = rng.random(nw) < spec.move_rate
        firm[:, t] = firm[:, t - 1]
        tenure[:, t] = tenure[:, t - 1] + 1
        idx = np.flatnonzero(moving)
        firm[idx, t] = draw_firms(idx)
        moved = idx[firm[idx, t] != firm[idx, t - 1]]
        tenure[moved, t] = 1

    cn = spec.covariate_noise
    age0 = rng.integers(22, 56, size=nw).astype(np.float64)
    ability = worker_type + cn * rng.standard_normal(nw)
    education = np.clip(worker_type + np.rint(cn * rng.standard_normal(nw)), 0, tw_count - 1)
    worker_draw = spec.worker_effect_sd * rng.standard_normal(nw)
    rev_firm = firm_type + cn * rng.standard_normal(nf)
    size_firm = 3.0 + 0.5 * firm_type + cn * rng.standard_normal(nf)
    sector = rng.integers(0, N_SECTORS, size=nf).astype(np.float64)
    f_noise = rng.standard_normal(nf)
    drift = 0.02 * cn * rng.standard_normal((nf, nt)) if spec.year_varying_firms else np.zeros((nf, nt))

    # rows ordered worker-major, then year
    w_row = np.repeat(np.arange(nw), nt)
    t_row = np.tile(np.arange(nt), nw)
    f_row = firm.ravel()
    n = nw * nt
    a_raw, b_raw, k_raw = component_tables(spec)
    tw_row, tf_row = worker_type[w_row], firm_type[f_row]
    signal = spec.mean_wage + a_raw[tw_row] + b_raw[tf_row] + spec.interaction_scale * k_raw[tw_row, tf_row]
    noise = worker_draw[w_row] + spec.noise_sd * rng.standard_normal(n)
    log_wage = signal + noise

    cov = np.column_stack([
        age0[w_row] + t_row,
        tenure.ravel(),
        ability[w_row],
        education[w_row],
        rng.standard_normal(n),
        rev_firm[f_row] + drift[f_row, t_row],
        size_firm[f_row] + drift[f_row, t_row],
        sector[f_row],
        f_noise[f_row],
    ])
    levels = {"education": [f"edu{e}" for e in range(tw_count)],
              "sector": [f"sector{s}" for s in range(N_SECTORS)]}
    w_ids = np.array([f"w{i:07d}" for i in range(nw)])
    f_ids = np.array([f"f{j:06d}" for j in range(nf)])
    # worker codes in the panel follow sorted ids, which is creation order here; re-intern
    # categorical levels in first-seen order so that emit/ingest round-trips code-for-code
    cov, levels = _first_seen_levels(cov, levels, SYNTHETIC_SCHEMA)
    panel = Panel(w_ids[w_row], f_ids[f_row], FIRST_YEAR + t_row, log_wage, cov, SYNTHETIC_SCHEMA, levels)

    present = np.unique(f_row)
    truth = _ground_truth(spec, tw_row, tf_row, signal, noise, worker_type, firm_type[present])
    return panel, truth


def _first_seen_levels(cov, levels, schema):
    cov = cov.copy()
    out = {}
    for name, levs in levels.items():
        j = schema.index(name)
        codes = cov[:, j].astype(np.int64)
        _, first = np.unique(codes, return_index=True)
        order = np.unique(codes)[np.argsort(first)]
        remap = np.full(len(levs), -1, dtype=np.int64)
        remap[order] = np.arange(len(order))
        cov[:, j] = remap[codes]
        out[name] = [levs[c] for c in order]
    return cov, out


def _ground_truth(spec, tw_row, tf_row, signal, noise, worker_type, firm_type):
    from twice.decompose import normalize_components, weighted_cell_projection

    L, K = spec.worker_type_count, spec.firm_type_count
    n = len(signal)
    cell = tw_row * K + tf_row
    counts = np.bincount(cell, minlength=L * K).reshape(L, K)
    sums = np.bincount(cell, weights=signal, minlength=L * K).reshape(L, K)
    pi = counts / n
    mu_cell = np.divide(sums, counts, out=np.full((L, K), np.nan), where=counts > 0)
    mu = float(signal.mean())
    alpha, psi = weighted_cell_projection(pi, mu_cell, mu)
    alpha, psi = normalize_components(pi, alpha, psi)
    a_raw, b_raw, k_raw = component_tables(spec)
    full = spec.mean_wage + a_raw[:, None] + b_raw[None, :] + spec.interaction_scale * k_raw
    kappa = full - mu - alpha[:, None] - psi[None, :]
    kappa[counts == 0] = np.nan

    a_r, p_r, k_r = alpha[tw_row], psi[tf_row], kappa[tw_row, tf_row]
    residual = spec.noise_sd ** 2 + spec.worker_effect_sd ** 2
    variances = {
        "worker": float(a_r.var()),
        "firm": float(p_r.var()),
        "sorting": float(2 * np.cov(a_r, p_r, bias=True)[0, 1]),
        "interaction": float(k_r.var()),
        "residual": float(residual),
    }
    total = sum(variances.values())
    shares = {k: (v / total if total > 0 else 0.0) for k, v in variances.items()}
    return GroundTruth(worker_type, firm_type, alpha, psi, kappa, variances, shares,
                       tw_row, tf_row, signal, noise)


def feature_matrix(panel: Panel, columns: Sequence[int] | None = None, include_year: bool = True):
    """Model inputs: selected covariates (all by default) plus calendar year as a numeric column.

    Returns ``(X, categorical_mask, names)``.
    """
    cols = list(range(len(panel.schema.columns))) if columns is None else list(columns)
    X = panel.covariates[:, cols]
    cat = panel.schema.categorical_mask[cols]
    names = [panel.schema.columns[i].name for i in cols]
    if include_year:
        X = np.column_stack([X, panel.year.astype(np.float64)])
        cat = np.append(cat, False)
        names.append("year")
    return X, cat, names
