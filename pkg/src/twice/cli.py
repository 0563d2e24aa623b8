"""Command-line pipeline: simulate, connect, tune, fit, decompose, akm, explain, eventstudy, robustness.

Every command reads one INI config and writes into an output directory. Stage
seeds derive from the master seed, and all CSV/JSON artifacts are written
byte-deterministically. ``manifest.json`` records what each stage produced.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from twice import __version__
from twice.akm import akm_decomposition, eta_squared, fit_akm, fit_ols_baselines, r_squared, spearman
from twice.boost import BoostConfig, BoostedEnsemble, BoostLearner
from twice.crossfit import (Featurizer, FoldPlan, PanelModel, PartitionFitter, crossfit_predict,
                            crossfit_risk, make_fold_plan, tune_grid)
from twice.decompose import sorting_matrix, twice_decomposition
from twice.errors import ConfigInvalid, MissingArtifact, TwiceError, ValidationError
from twice.explain import CurveSpec, ale, curves_to_csv, importance, pdp
from twice.graph import event_study, largest_connected_set
from twice.panel import (SYNTHETIC_SCHEMA, ColumnSchema, Panel, SyntheticSpec, emit_csv,
                         feature_matrix, holdout_split, ingest_csv, simulate)
from twice.partition import (FirmTarget, PartitionPair, assign_cells, build_firm_partition,
                             build_worker_partition, describe_cells, rules_to_dict)
from twice.tree import TreeFitConfig

log = logging.getLogger("twice")

COMMANDS = ("simulate", "connect", "tune", "fit", "decompose", "akm", "explain", "eventstudy", "robustness")


def derive_seed(master: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master}:{stage}".encode()).hexdigest()
    return int(digest[:8], 16)


# --------------------------------------------------------------------------- config


def _ints(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _dataclass_from(cls, section, key_prefix):
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in kinds:
            raise ConfigInvalid(f"{key_prefix}.{key}", "unknown key")
        try:
            kind = kinds[key]
            out[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        except ValueError as exc:
            raise ConfigInvalid(f"{key_prefix}.{key}", str(exc)) from None
    try:
        return cls(**out)
    except ValidationError as exc:
        raise ConfigInvalid(key_prefix, str(exc)) from None


@dataclass
class RunConfig:
    path: Path | None = None
    out: Path = Path("twice_out")
    seed: int = 0
    input: Path | None = None
    schema: ColumnSchema = SYNTHETIC_SCHEMA
    synthetic: dict = field(default_factory=dict)
    B: int = 5
    K_grid: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    L_grid: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    K: int | None = None
    L: int | None = None
    holdout_firm_fraction: float = 0.2
    holdout_worker_fraction: float = 1.0
    firm_target: str = "mean"
    boost: BoostConfig = field(default_factory=BoostConfig)
    tree: TreeFitConfig = field(default_factory=TreeFitConfig)
    explain_features: list[str] = field(default_factory=lambda: ["age", "tenure", "log_revenue"])
    explain_kinds: list[str] = field(default_factory=lambda: ["pdp_full", "ale"])
    grid_points: int = 40
    pre_years: int = 2
    post_years: int = 2
    robustness_targets: list[str] = field(default_factory=lambda: ["mean", "median", "residual"])
    text: str = ""

    def seed_for(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(f"{self.text}\nseed={self.seed}".encode()).hexdigest()

    @classmethod
    def load(cls, path, out=None, seed=None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalid("config", f"file {path} not found")
        text = path.read_text(encoding="utf-8")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigInvalid("config", str(exc).splitlines()[0]) from None
        cfg = cls(path=path, text=text)
        run = parser["run"] if parser.has_section("run") else {}
        known = {"out", "seed", "input", "b", "k_grid", "l_grid", "k", "l", "holdout_firm_fraction",
                 "holdout_worker_fraction", "firm_target"}
        for key in run:
            if key not in known:
                raise ConfigInvalid(f"run.{key}", "unknown key")
        try:
            base = path.parent
            if "out" in run:
                cfg.out = base / run["out"]
            cfg.seed = int(run.get("seed", 0))
            if run.get("input"):
                cfg.input = base / run["input"]
            cfg.B = int(run.get("b", cfg.B))
            if "k_grid" in run:
                cfg.K_grid = _ints(run["k_grid"])
            if "l_grid" in run:
                cfg.L_grid = _ints(run["l_grid"])
            cfg.K = int(run["k"]) if run.get("k") else None
            cfg.L = int(run["l"]) if run.get("l") else None
            cfg.holdout_firm_fraction = float(run.get("holdout_firm_fraction", cfg.holdout_firm_fraction))
            cfg.holdout_worker_fraction = float(run.get("holdout_worker_fraction", cfg.holdout_worker_fraction))
            cfg.firm_target = run.get("firm_target", cfg.firm_target)
        except ValueError as exc:
            raise ConfigInvalid("run", str(exc)) from None
        if cfg.firm_target not in ("mean", "median", "residual"):
            raise ConfigInvalid("run.firm_target", "must be mean, median or residual")
        if cfg.B < 2:
            raise ConfigInvalid("run.b", "must be >= 2")
        if not cfg.K_grid or not cfg.L_grid:
            raise ConfigInvalid("run.k_grid", "grids must be nonempty")
        if parser.has_section("schema"):
            triples = []
            for name, spec in parser["schema"].items():
                parts = spec.split()
                if len(parts) not in (2, 3):
                    raise ConfigInvalid(f"schema.{name}", "expected '<numeric|categorical> <worker|firm> [cardinality]'")
                triples.append((name, parts[0], parts[1]) + ((int(parts[2]),) if len(parts) == 3 else ()))
            try:
                cfg.schema = ColumnSchema.from_triples(triples)
            except ValidationError as exc:
                raise ConfigInvalid("schema", str(exc)) from None
        elif cfg.input is not None:
            raise ConfigInvalid("schema", "an input CSV needs a [schema] section")
        if parser.has_section("simulate"):
            cfg.synthetic = dict(parser["simulate"])
        if parser.has_section("boost"):
            cfg.boost = _dataclass_from(BoostConfig, parser["boost"], "boost")
        if parser.has_section("tree"):
            cfg.tree = _dataclass_from(TreeFitConfig, parser["tree"], "tree")
        if parser.has_section("explain"):
            sec = parser["explain"]
            if "features" in sec:
                cfg.explain_features = [s.strip() for s in sec["features"].split(",") if s.strip()]
            if "curves" in sec:
                cfg.explain_kinds = [s.strip() for s in sec["curves"].split(",") if s.strip()]
            cfg.grid_points = int(sec.get("grid_points", cfg.grid_points))
        if parser.has_section("eventstudy"):
            cfg.pre_years = int(parser["eventstudy"].get("pre_years", cfg.pre_years))
            cfg.post_years = int(parser["eventstudy"].get("post_years", cfg.post_years))
        if parser.has_section("robustness") and "targets" in parser["robustness"]:
            cfg.robustness_targets = [s.strip() for s in parser["robustness"]["targets"].split(",") if s.strip()]
        for name in cfg.explain_features:
            if name not in cfg.schema.names and name != "year":
                raise ConfigInvalid("explain.features", f"column {name!r} not in schema")
        if out is not None:
            cfg.out = Path(out)
        if seed is not None:
            cfg.seed = int(seed)
        return cfg


# --------------------------------------------------------------------------- artifact io


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


class Stage:
    """Collects the files one command writes, for the manifest."""

    def __init__(self, cfg: RunConfig, name: str):
        self.cfg = cfg
        self.name = name
        self.files: list[str] = []
        self.start = time.perf_counter()
        cfg.out.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        return self.cfg.out / name

    def _record(self, name):
        if name not in self.files:
            self.files.append(name)

    def write_text(self, name, text):
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8", newline="")
        self._record(name)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")

    def write_table(self, name, header, rows, types=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self.write_text(name, buf.getvalue())
        types = types or ["string"] * len(header)
        self.write_json(name[:-4] + ".schema.json",
                        {"file": name, "columns": [{"name": h, "type": t} for h, t in zip(header, types)]})

    def write_csv_text(self, name, text, types):
        header = next(csv.reader(io.StringIO(text)))
        self.write_text(name, text)
        self.write_json(name[:-4] + ".schema.json",
                        {"file": name, "columns": [{"name": h, "type": t} for h, t in zip(header, types)]})

    def finish(self):
        manifest_path = self.path("manifest.json")
        manifest = {}
        if manifest_path.is_file():
            try:
                manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                manifest = {}
        stages = manifest.get("stages", {})
        stages[self.name] = {"files": sorted(self.files),
                             "sha256": {f: hashlib.sha256(self.path(f).read_bytes()).hexdigest()
                                        for f in sorted(self.files)},
                             "seed": self.cfg.seed_for(self.name),
                             "seconds": round(time.perf_counter() - self.start, 3)}
        manifest.update({"tool": "twice", "version": __version__, "config_hash": self.cfg.config_hash,
                         "master_seed": self.cfg.seed, "stages": stages,
                         "artifacts": sorted({f for s in stages.values() for f in s["files"]})})
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log.info("stage %s wrote %d files", self.name, len(self.files))


def _require(cfg: RunConfig, name: str, stage: str) -> Path:
    p = cfg.out / name
    if not p.is_file():
        raise MissingArtifact(stage, p.as_posix())
    return p


def _write_panel(st: Stage, panel: Panel, name: str):
    p = st.path(name)
    emit_csv(panel, p)
    st._record(name)
    st.write_json(name[:-4] + ".schema.json",
                  {"file": name, "schema": panel.schema.to_dict(),
                   "levels": {k: list(v) for k, v in sorted(panel.levels.items())}})


def _read_panel(cfg: RunConfig, name: str, stage: str) -> Panel:
    p = _require(cfg, name, stage)
    meta = json.loads(_require(cfg, name[:-4] + ".schema.json", stage).read_text(encoding="utf-8"))
    return ingest_csv(p, ColumnSchema.from_dict(meta["schema"]), meta["levels"])


def _split(cfg: RunConfig, panel: Panel):
    return holdout_split(panel, cfg.holdout_firm_fraction, cfg.holdout_worker_fraction, cfg.seed_for("holdout"))


def _learner(cfg: RunConfig, stage: str):
    from dataclasses import replace
    return BoostLearner(replace(cfg.boost, seed=cfg.seed_for(stage + ":boost")))


def _fitter(cfg: RunConfig, stage: str, target: str | None = None) -> PartitionFitter:
    from dataclasses import replace
    kind = target or cfg.firm_target
    return PartitionFitter(cfg.tree, FirmTarget(kind, replace(cfg.boost, seed=cfg.seed_for(stage + ":target"))),
                           True, cfg.seed_for(stage + ":partition"))


def _chosen_KL(cfg: RunConfig):
    if cfg.K is not None and cfg.L is not None:
        return cfg.K, cfg.L
    p = cfg.out / "tune.json"
    if not p.is_file():
        raise MissingArtifact("tune", p.as_posix())
    data = json.loads(p.read_text(encoding="utf-8"))
    return int(data["K"]), int(data["L"])


# --------------------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig):
    st = Stage(cfg, "simulate")
    data = dict(cfg.synthetic)
    data.setdefault("seed", str(cfg.seed_for("simulate")))
    try:
        spec = SyntheticSpec.from_mapping(data)
    except ValidationError as exc:
        raise ConfigInvalid("simulate", str(exc)) from None
    panel, truth = simulate(spec)
    _write_panel(st, panel, "panel.csv")
    st.write_json("ground_truth.json", dict(truth.to_dict(), spec=asdict(spec)))
    st.finish()
    return st


def _load_input(cfg: RunConfig) -> Panel:
    if cfg.input is not None:
        if not cfg.input.is_file():
            raise MissingArtifact("input", cfg.input.as_posix())
        return ingest_csv(cfg.input, cfg.schema)
    return _read_panel(cfg, "panel.csv", "simulate")


def cmd_connect(cfg: RunConfig):
    st = Stage(cfg, "connect")
    panel = _load_input(cfg)
    connected, stats = largest_connected_set(panel)
    _write_panel(st, connected, "connected.csv")
    st.write_json("connectivity.json", stats.to_dict())
    st.finish()
    return st


def cmd_tune(cfg: RunConfig):
    st = Stage(cfg, "tune")
    panel = _read_panel(cfg, "connected.csv", "connect")
    train, _ = _split(cfg, panel)
    plan = make_fold_plan(train, cfg.B, cfg.seed_for("folds"))
    st.write_json("folds.json", plan.to_dict())
    res = tune_grid(train, cfg.K_grid, cfg.L_grid, plan, _learner(cfg, "tune"), _fitter(cfg, "tune"))
    st.write_csv_text("tune_loss.csv", res.to_csv(), ["integer", "integer", "number", "integer"])
    st.write_json("tune.json", {"K": res.K, "L": res.L, "loss": res.loss, "B": cfg.B,
                                "K_grid": cfg.K_grid, "L_grid": cfg.L_grid})
    st.finish()
    return st


def _ensemble_doc(models: dict) -> dict:
    return {"format": "twice-crossfit", "version": 1,
            "models": [{"cell": [a, b], "ensemble": m.model.trimmed().to_dict()}
                       for (a, b), m in sorted(models.items())]}


def load_models(cfg: RunConfig) -> list[PanelModel]:
    pair = PartitionPair.from_dict(json.loads(_require(cfg, "partitions.json", "fit").read_text(encoding="utf-8")))
    doc = json.loads(_require(cfg, "models.json", "fit").read_text(encoding="utf-8"))
    schema_meta = json.loads(_require(cfg, "connected.schema.json", "connect").read_text(encoding="utf-8"))
    schema = ColumnSchema.from_dict(schema_meta["schema"])
    names = schema.names + ["year"]
    cat = np.append(schema.categorical_mask, False)
    return [PanelModel(BoostedEnsemble.from_dict(m["ensemble"]), Featurizer(pair), names, cat)
            for m in doc["models"]]


def cmd_fit(cfg: RunConfig):
    K, L = _chosen_KL(cfg)
    st = Stage(cfg, "fit")
    panel = _read_panel(cfg, "connected.csv", "connect")
    train, test = _split(cfg, panel)
    fitter = _fitter(cfg, "fit")
    pair = fitter(train, K, L)
    st.write_json("partitions.json", pair.to_dict())
    plan = make_fold_plan(train, cfg.B, cfg.seed_for("folds"))
    fit = crossfit_predict(train, plan, _learner(cfg, "fit"), pair)
    risk = crossfit_risk(train, fit, cfg.B)
    st.write_json("models.json", _ensemble_doc(fit.models))
    test_pred = np.mean([m.predict_panel(test) for m in fit.model_list()], axis=0)
    rows = [["TWICE", float(np.mean((train.log_wage - fit.predictions) ** 2)),
             r_squared(train.log_wage, fit.predictions),
             float(np.mean((test.log_wage - test_pred) ** 2)), r_squared(test.log_wage, test_pred)]]
    for b in fit_ols_baselines(train, test):
        rows.append([b.name, b.train_mse, b.train_r2, b.test_mse, b.test_r2])
    st.write_table("metrics.csv", ["model", "train_mse", "train_r2", "test_mse", "test_r2"], rows,
                   ["string", "number", "number", "number", "number"])
    st.write_table("oof_predictions.csv", ["worker_id", "firm_id", "year", "prediction"],
                   [[w, f, int(y), float(p)] for w, f, y, p in
                    zip(train.worker_id, train.firm_id, train.year, fit.predictions)],
                   ["string", "string", "integer", "number"])
    st.write_json("fit.json", {"K": K, "L": L, "blocked_loss": risk.loss, "cells_used": risk.cells_used,
                               "empty_cells": risk.empty_cells, "train_rows": len(train), "test_rows": len(test),
                               "rounds": {f"{a},{b}": m.model.best_round for (a, b), m in sorted(fit.models.items())}})
    st.finish()
    return st


def _decompose(panel: Panel, pair: PartitionPair):
    asg = assign_cells(panel, pair)
    _, effects, dec = twice_decomposition(panel, asg, shape=(pair.L, pair.K))
    return asg, effects, dec


def cmd_decompose(cfg: RunConfig):
    st = Stage(cfg, "decompose")
    panel = _read_panel(cfg, "connected.csv", "connect")
    pair = PartitionPair.from_dict(json.loads(_require(cfg, "partitions.json", "fit").read_text(encoding="utf-8")))
    asg, effects, dec = _decompose(panel, pair)
    out = dec.to_dict()
    out.update({"K": pair.K, "L": pair.L, "share_sum": sum(dec.shares.values()),
                "alpha": effects.alpha, "psi": effects.psi})
    st.write_json("decomposition.json", out)
    sm = sorting_matrix(asg, effects)
    rows = []
    for c, fcell in enumerate(sm.firm_cells):
        for r, wcell in enumerate(sm.worker_cells):
            rows.append([c + 1, int(fcell), r + 1, int(wcell), float(sm.shares[r, c])])
    st.write_table("sorting_matrix.csv", ["firm_rank", "firm_cell", "worker_rank", "worker_cell", "share"], rows,
                   ["integer", "integer", "integer", "integer", "number"])
    st.write_table("cells.csv", ["worker_id", "firm_id", "year", "worker_cell", "firm_cell"],
                   [[w, f, int(y), int(a), int(b)] for w, f, y, a, b in
                    zip(panel.worker_id, panel.firm_id, panel.year, asg.worker_cell, asg.firm_cell)],
                   ["string", "string", "integer", "integer", "integer"])
    rules = describe_cells(pair)
    st.write_text("cell_rules.txt", "".join(str(r) + "\n" for r in rules))
    st.write_json("cell_rules.json", rules_to_dict(rules))
    st.finish()
    return st


def _modal_class(codes, cells, n_units):
    nc = int(cells.max()) + 1
    tab = np.bincount(codes * nc + cells, minlength=n_units * nc).reshape(n_units, nc)
    return np.argmax(tab, axis=1)


def cmd_akm(cfg: RunConfig):
    st = Stage(cfg, "akm")
    panel = _read_panel(cfg, "connected.csv", "connect")
    model = fit_akm(panel)
    st.write_table("akm_worker_effects.csv", ["unit_id", "effect"], model.effects_rows("worker"),
                   ["string", "number"])
    st.write_table("akm_firm_effects.csv", ["unit_id", "effect"], model.effects_rows("firm"), ["string", "number"])
    dec = akm_decomposition(model, panel)
    dec["controls"] = model.control_names
    dec["solver"] = {k: v for k, v in model.diagnostics.items() if k != "convention"}
    st.write_json("akm_decomposition.json", dec)
    concord = {}
    part = cfg.out / "partitions.json"
    if part.is_file():
        pair = PartitionPair.from_dict(json.loads(part.read_text(encoding="utf-8")))
        asg = assign_cells(panel, pair)
        wcls = _modal_class(panel.worker_codes, asg.worker_cell, panel.n_workers)
        fcls = _modal_class(panel.firm_codes, asg.firm_cell, panel.n_firms)
        ew = eta_squared(model.theta, wcls)
        ef = eta_squared(model.psi, fcls, np.bincount(panel.firm_codes, minlength=panel.n_firms))
        concord = {"worker": {"eta_squared": ew.value, "zero_variance": ew.zero_variance, "weights": "none"},
                   "firm": {"eta_squared": ef.value, "zero_variance": ef.zero_variance, "weights": "rows"}}
    else:
        concord = {"note": "partitions.json not found; run fit first for concordance"}
    st.write_json("concordance.json", concord)
    train, test = _split(cfg, panel)
    st.write_table("baselines.csv", ["model", "degree", "train_mse", "train_r2", "test_mse", "test_r2"],
                   [[b.name, b.degree, b.train_mse, b.train_r2, b.test_mse, b.test_r2]
                    for b in fit_ols_baselines(train, test)],
                   ["string", "integer", "number", "number", "number", "number"])
    st.finish()
    return st


def cmd_explain(cfg: RunConfig):
    st = Stage(cfg, "explain")
    panel = _read_panel(cfg, "connected.csv", "connect")
    train, _ = _split(cfg, panel)
    models = load_models(cfg)
    curves = []
    for feat in cfg.explain_features:
        j = panel.schema.names.index(feat) if feat in panel.schema.names else None
        categorical = j is not None and panel.schema.columns[j].categorical
        for kind in cfg.explain_kinds:
            if kind == "ale":
                if categorical:
                    continue
                curves.append(ale(models, train, CurveSpec(feat, cfg.grid_points)))
            else:
                curves.append(pdp(models, train, CurveSpec(feat, cfg.grid_points, variant=kind)))
    st.write_csv_text("curves.csv", curves_to_csv(curves),
                      ["number", "number", "integer", "string", "string", "string"])
    st.write_table("importance.csv", ["feature", "share"], importance(models), ["string", "number"])
    st.finish()
    return st


def cmd_eventstudy(cfg: RunConfig):
    st = Stage(cfg, "eventstudy")
    panel = _read_panel(cfg, "connected.csv", "connect")
    table = event_study(panel, 4, cfg.pre_years, cfg.post_years)
    st.write_csv_text("eventstudy.csv", table.to_csv(), ["integer", "integer", "integer", "number", "integer"])
    st.write_json("eventstudy.json", {"cutoffs": table.cutoffs, "events": table.n_events,
                                      "insufficient": [list(e.pair) for e in table.insufficient]})
    st.finish()
    return st


def cmd_robustness(cfg: RunConfig):
    K, L = _chosen_KL(cfg)
    st = Stage(cfg, "robustness")
    panel = _read_panel(cfg, "connected.csv", "connect")
    train, _ = _split(cfg, panel)
    worker = build_worker_partition(train, L, cfg.tree)
    rows, firm_psi = [], {}
    for kind in cfg.robustness_targets:
        fitter = _fitter(cfg, "robustness", kind)
        firm = build_firm_partition(train, K, fitter.target, cfg.tree, True, fitter.seed)
        pair = PartitionPair(firm, worker, dict(panel.levels))
        asg, effects, dec = _decompose(panel, pair)
        psi_row = effects.psi[asg.firm_cell - 1]
        firm_psi[kind] = np.bincount(panel.firm_codes, weights=psi_row) / np.bincount(panel.firm_codes)
        rows.append([kind] + [dec.shares[c] for c in ("worker", "firm", "sorting", "interaction", "residual")])
    st.write_table("robustness.csv", ["target", "worker", "firm", "sorting", "interaction", "residual"], rows,
                   ["string"] + ["number"] * 5)
    ref = cfg.robustness_targets[0]
    st.write_json("robustness.json", {"reference": ref, "spearman_firm_component": {
        k: spearman(firm_psi[ref], v) for k, v in firm_psi.items() if k != ref}})
    st.finish()
    return st


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# --------------------------------------------------------------------------- entry point


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(quiet: bool, json_logs: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twice", description="Observable-anchored wage decomposition pipeline.")
    ap.add_argument("--version", action="version", version=f"twice {__version__}")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="INI run configuration")
    ap.add_argument("--out", help="output directory (overrides [run] out)")
    ap.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    ap.add_argument("--quiet", action="store_true")
    ap.add_argument("--json-logs", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.quiet, args.json_logs)
    try:
        cfg = RunConfig.load(args.config, args.out, args.seed)
        log.info("running %s into %s", args.command, cfg.out)
        HANDLERS[args.command](cfg)
    except ValidationError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    except TwiceError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    except Exception as exc:   # noqa: BLE001 - any other failure is a runtime error
        log.error("runtime error: %s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
