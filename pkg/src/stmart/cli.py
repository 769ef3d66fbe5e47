"""Command-line entry point: ``stmart fit | report | simulate | test-spatial``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backfit import BackfitConfig, two_stage_fit
from .files import InputError, atomic_write_text, format_value, read_adjacency, read_csv_rows, write_adjacency, write_csv
from .interpret import importance, interaction_strength, partial_dependence
from .mart import BoostConfig
from .modelio import ModelFormatError, load_model, save_model
from .panel import CATEGORICAL, PanelValidationError, RateTransform, is_missing, validate_panel
from .spatial import GraphError, ZeroVarianceError, build_graph, morans_i
from .synth import SIGNALS, SynthSpec, generate

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("stmart")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a ``fit`` run."""

    data: str | None = None
    adjacency: str | None = None
    out: str | None = None
    seed: int | None = None
    response: str | None = "y"
    count: str | None = None
    population: str | None = None
    rate_offset: float = 1e-4
    rate_scale: float = 1000.0
    covariates: list | None = None
    categorical: list = field(default_factory=list)
    tract_col: str = "tract"
    time_col: str = "time"
    nu: float = 0.001
    max_depth: int = 3
    m_max: int = 5000
    bag_fraction: float = 0.5
    min_leaf: int = 10
    m_selection: str = "fixed"
    patience: int = 100
    delta_threshold: float = 1e-7
    p_threshold: float = 0.01
    max_outer_iterations: int = 50
    moran_method: str = "normal"
    moran_perms: int = 999
    car_method: str = "marginal"
    pd: list = field(default_factory=list)
    pd2: list = field(default_factory=list)
    pd_points: int = 50
    interactions: bool = False
    interaction_perms: int = 20

    PATH_KEYS = ("data", "adjacency", "out")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def boost(self) -> BoostConfig:
        return BoostConfig(nu=self.nu, max_depth=self.max_depth, m_max=self.m_max,
                           bag_fraction=self.bag_fraction, min_leaf=self.min_leaf, rng_seed=int(self.seed))

    def backfit(self) -> BackfitConfig:
        return BackfitConfig(
            delta_threshold=self.delta_threshold, p_threshold=self.p_threshold,
            max_outer_iterations=self.max_outer_iterations, boost=self.boost(),
            moran_method=self.moran_method, moran_perms=self.moran_perms, car_method=self.car_method,
            m_selection=self.m_selection, patience=self.patience,
        )


def load_config_file(path) -> dict:
    """Read a JSON config (or a previous ``run.json``); relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    if isinstance(doc, dict) and isinstance(doc.get("config"), dict):
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(RunConfig.keys()))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    for key in RunConfig.PATH_KEYS:
        if doc.get(key) is not None:
            doc[key] = str((path.parent / doc[key]).resolve())
    return doc


def resolve_config(flags: dict, config_path=None) -> RunConfig:
    """Defaults, then command-line flags, then the config file (which wins).

    ``out`` is the exception: an explicit ``--out`` beats the file, so a saved
    ``run.json`` can be replayed into a fresh directory.
    """
    merged = {}
    for key, value in flags.items():
        if value is not None:
            merged[key] = str(Path(value).resolve()) if key in RunConfig.PATH_KEYS else value
    if config_path:
        file_cfg = load_config_file(config_path)
        out_flag = merged.get("out")
        merged.update(file_cfg)
        if out_flag is not None:
            merged["out"] = out_flag
    cfg = RunConfig(**merged)
    if cfg.seed is None:
        raise ConfigError("a seed is required (--seed or \"seed\" in the config file)")
    for key in ("data", "adjacency", "out"):
        if getattr(cfg, key) is None:
            raise ConfigError(f"missing required setting {key!r}")
    cfg.pd2 = [list(p) for p in cfg.pd2]
    return cfg


def _split_list(text):
    if text is None:
        return None
    return [s.strip() for s in text.split(",") if s.strip()]


def _pairs(texts):
    if texts is None:
        return None
    out = []
    for t in texts:
        parts = [s.strip() for s in t.split(":")]
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"--pd2 expects 'a:b', got {t!r}")
        out.append(parts)
    return out


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(name))


def _covariate_records(panel):
    return [
        {"name": n, "kind": k, "levels": list(lv)}
        for n, k, lv in zip(panel.covariate_names, panel.covariate_kinds, panel.levels)
    ]


def encode_covariates(rows, records) -> np.ndarray:
    """Design matrix for ``rows`` using the covariate coding stored in a model file."""
    X = np.full((len(rows), len(records)), np.nan)
    for j, rec in enumerate(records):
        name = rec["name"]
        code = {lv: k for k, lv in enumerate(rec["levels"])}
        for i, row in enumerate(rows):
            if name not in row:
                raise InputError(f"data has no column {name!r}")
            v = row[name]
            if is_missing(v):
                continue
            if rec["kind"] == CATEGORICAL:
                X[i, j] = code.get(str(v).strip(), np.nan)
            else:
                try:
                    X[i, j] = float(v)
                except ValueError:
                    raise InputError(f"row {i + 1}: covariate {name!r} value {v!r} is not numeric") from None
    return X


def _names_to_index(names, records, what):
    index = {r["name"]: j for j, r in enumerate(records)}
    if names == ["all"]:
        return list(range(len(records)))
    bad = [n for n in names if n not in index]
    if bad:
        raise ConfigError(f"{what}: unknown covariate(s) {', '.join(bad)}")
    return [index[n] for n in names]


def _level_label(records, j, value):
    rec = records[j]
    if rec["kind"] == CATEGORICAL:
        return rec["levels"][int(value)]
    return float(value)


def write_interpretation(out: Path, ensemble, X, records, pd_vars, pd_pairs, pd_points):
    names = [r["name"] for r in records]
    if ensemble.M:
        imp = importance(ensemble)
    else:
        imp = np.zeros(len(names))
    order = sorted(range(len(names)), key=lambda j: (-imp[j], j))
    write_csv(out / "importance.csv", ["rank", "covariate", "importance"],
              [(r + 1, names[j], float(imp[j])) for r, j in enumerate(order)])
    for j in _names_to_index(pd_vars, records, "pd"):
        pd = partial_dependence(ensemble, X, [j], n_points=pd_points)
        rows = [(_level_label(records, j, g[0]), float(v)) for g, v in zip(pd.grid, pd.values)]
        write_csv(out / f"pd_{_safe(names[j])}.csv", [names[j], "partial_dependence"], rows)
    for a, b in pd_pairs:
        ja, jb = _names_to_index([a, b], records, "pd2")
        if ja == jb:
            raise ConfigError(f"pd2 pair {a}:{b} repeats a covariate")
        pd = partial_dependence(ensemble, X, [ja, jb], n_points=pd_points)
        rows = [(_level_label(records, ja, g[0]), _level_label(records, jb, g[1]), float(v))
                for g, v in zip(pd.grid, pd.values)]
        write_csv(out / f"pd2_{_safe(a)}_{_safe(b)}.csv", [a, b, "partial_dependence"], rows)


def _moran_cells(r):
    return (r.I, r.p_value)


def cmd_fit(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _, rows = read_csv_rows(cfg.data)
    g = build_graph(read_adjacency(cfg.adjacency))
    transform = None
    response = cfg.response
    if cfg.count or cfg.population:
        transform = RateTransform(cfg.rate_offset, cfg.rate_scale)
        response = None
    kinds = {c: CATEGORICAL for c in cfg.categorical}
    panel = validate_panel(
        rows, cfg.covariates, tract_col=cfg.tract_col, time_col=cfg.time_col, response_col=response,
        count_col=cfg.count, population_col=cfg.population, transform=transform, kinds=kinds,
    )
    bcfg = cfg.backfit()
    result = two_stage_fit(panel, g, bcfg)
    records = _covariate_records(panel)
    out.mkdir(parents=True, exist_ok=True)

    save_model(out / "model.json", result.ensemble, result.field, records,
               {"tract_ids": list(g.tract_ids), "time_labels": list(panel.time_labels)})
    write_interpretation(out, result.ensemble, panel.X, records, cfg.pd, cfg.pd2, cfg.pd_points)

    s_empty = not result.S
    mrows = []
    for row in result.moran_table:
        notes = []
        if s_empty:
            notes.append("S empty")
        if row.overfit:
            notes.append("overfit")
        if any(not math.isfinite(r.I) for r in (row.origin, row.res1, row.res2)):
            notes.append("zero variance")
        mrows.append((row.slot, row.label, *_moran_cells(row.origin), *_moran_cells(row.res1),
                      *_moran_cells(row.res2), row.in_S, ";".join(notes)))
    write_csv(out / "morans.csv",
              ["slot", "time", "I_origin", "p_origin", "I_res1", "p_res1", "I_res2", "p_res2", "in_S", "note"],
              mrows)

    phi = result.field.phi
    write_csv(out / "phi.csv", ["slot", "time", "tract", "phi"],
              [(t + 1, panel.time_labels[t], g.tract_ids[c], float(phi[t, c]))
               for t in range(phi.shape[0]) for c in range(phi.shape[1])])
    resid = panel.y - result.fitted - result.phi
    write_csv(out / "residuals.csv", ["tract", "time", "y", "fitted", "phi", "residual"],
              [(panel.tract_ids[panel.tract[i]], panel.time_labels[panel.slot[i] - 1], float(panel.y[i]),
                float(result.fitted[i]), float(result.phi[i]), float(resid[i])) for i in range(panel.n)])

    if cfg.interactions:
        yz = panel.y - result.phi
        irows = []
        for j, rec in enumerate(records):
            ir = interaction_strength(result.ensemble, panel.X, j, y=yz, n_perm=cfg.interaction_perms,
                                      rng_seed=int(cfg.seed))
            irows.append((rec["name"], ir.statistic, ir.p_value))
        write_csv(out / "interactions.csv", ["covariate", "H2", "p_value"], irows)

    run = {
        "config": asdict(cfg),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "delta_history": [float(d) for d in result.delta_history],
        "S_history": [list(s) for s in result.S_history],
        "n_trees": int(result.ensemble.M),
    }
    atomic_write_text(out / "run.json", json.dumps(run, indent=1, sort_keys=True) + "\n")
    if not result.converged:
        print(f"warning: no convergence after {result.iterations} outer iterations; results written",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_report(model_path, data_path, out, pd_vars, pd_pairs, pd_points) -> int:
    ensemble, _, doc = load_model(model_path)
    records = doc["covariates"]
    _, rows = read_csv_rows(data_path)
    X = encode_covariates(rows, records)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_interpretation(out, ensemble, X, records, pd_vars, pd_pairs, pd_points)
    return EXIT_OK


def cmd_simulate(args) -> int:
    slots = tuple(int(s) for s in _split_list(args.spatial_slots) or ())
    spec = SynthSpec(grid=(args.rows, args.cols), T=args.T, p=args.p, signal=args.signal, spatial_slots=slots,
                     tau_true=args.tau, sigma2_true=args.sigma2, missing_rate=args.missing_rate,
                     rng_seed=args.seed)
    panel, g, truth = generate(spec)
    out = Path(args.out)
    header = ["tract", "time", "y", *panel.covariate_names]
    rows = [(panel.tract_ids[panel.tract[i]], panel.time_labels[panel.slot[i] - 1], float(panel.y[i]),
             *(float(v) for v in panel.X[i])) for i in range(panel.n)]
    write_csv(out / "panel.csv", header, rows)
    write_adjacency(out / "adjacency.tsv", g)
    write_csv(out / "truth.csv", ["tract", "time", "f", "phi"],
              [(panel.tract_ids[panel.tract[i]], panel.time_labels[panel.slot[i] - 1], float(truth.f[i]),
                float(truth.phi[panel.slot[i] - 1, panel.tract[i]])) for i in range(panel.n)])
    return EXIT_OK


def spatial_test_rows(rows, edges, column, tract_col="tract", time_col="time", method="normal", n_perm=999,
                      seed=0):
    """Per-slot Moran's I on the subgraph induced by the tracts observed in that slot."""
    g = build_graph(edges, allow_isolated=True)
    by_time = {}
    for i, row in enumerate(rows, start=1):
        for col in (tract_col, time_col, column):
            if col not in row:
                raise InputError(f"data has no column {col!r}")
        t = row[time_col].strip()
        by_time.setdefault(t, []).append((i, row[tract_col].strip(), row[column]))

    def key(t):
        try:
            return (0, float(t), t)
        except ValueError:
            return (1, 0.0, t)

    results = []
    for t in sorted(by_time, key=key):
        entries = by_time[t]
        err = None
        vals, idx = [], []
        for i, tract, v in entries:
            if tract not in g.index:
                err = f"tract {tract!r} not in adjacency"
                break
            if is_missing(v):
                err = "missing values"
                break
            try:
                vals.append(float(v))
            except ValueError:
                err = f"non-numeric value {v!r}"
                break
            idx.append(g.index[tract])
        if err is None and len(set(idx)) != len(idx):
            err = "duplicate tracts"
        res = None
        if err is None:
            sub = g.subgraph(idx)
            order = np.argsort(idx)
            try:
                res = morans_i(np.asarray(vals)[order], sub, method=method, n_perm=n_perm, rng_seed=seed)
            except ZeroVarianceError:
                err = "zero variance"
            except (GraphError, ValueError) as exc:
                err = str(exc)
        if res is None:
            results.append((t, len(entries), None, None, None, None, err))
        else:
            results.append((t, len(entries), res.I, res.expected, res.z, res.p_value, ""))
    return results


def cmd_test_spatial(args) -> int:
    _, rows = read_csv_rows(args.data)
    edges = read_adjacency(args.adjacency)
    results = spatial_test_rows(rows, edges, args.column, args.tract_col, args.time_col, args.method,
                                args.perms, args.seed)
    header = ["time", "n", "I", "expected", "z", "p_value", "error"]
    if args.out:
        write_csv(args.out, header, results)
    print(",".join(header))
    for r in results:
        print(",".join(format_value(v) for v in r))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmart", description="Boosted trees with a CAR spatial smoother for panel data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run the two-stage fit and write reports")
    f.add_argument("--config", help="JSON config file (or a previous run.json); overrides flags")
    f.add_argument("--data")
    f.add_argument("--adjacency")
    f.add_argument("--out")
    f.add_argument("--seed", type=int)
    f.add_argument("--response")
    f.add_argument("--count")
    f.add_argument("--population")
    f.add_argument("--rate-offset", type=float)
    f.add_argument("--rate-scale", type=float)
    f.add_argument("--covariates", help="comma-separated; default all non-key columns")
    f.add_argument("--categorical", help="comma-separated covariates to treat as categorical")
    f.add_argument("--tract-col")
    f.add_argument("--time-col")
    f.add_argument("--nu", type=float)
    f.add_argument("--max-depth", type=int)
    f.add_argument("--m-max", type=int)
    f.add_argument("--bag-fraction", type=float)
    f.add_argument("--min-leaf", type=int)
    f.add_argument("--m-selection", choices=["fixed", "oob"])
    f.add_argument("--patience", type=int)
    f.add_argument("--delta-threshold", type=float)
    f.add_argument("--p-threshold", type=float)
    f.add_argument("--max-outer-iterations", type=int)
    f.add_argument("--moran-method", choices=["normal", "permutation"])
    f.add_argument("--moran-perms", type=int)
    f.add_argument("--car-method", choices=["marginal", "icm"])
    f.add_argument("--pd", help="comma-separated covariates, or 'all'")
    f.add_argument("--pd2", action="append", help="pair 'a:b'; repeatable")
    f.add_argument("--pd-points", type=int)
    f.add_argument("--interactions", action="store_true", default=None)
    f.add_argument("--interaction-perms", type=int)

    r = sub.add_parser("report", help="recompute importance and partial dependence from a saved model")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--pd", default="")
    r.add_argument("--pd2", action="append", default=[])
    r.add_argument("--pd-points", type=int, default=50)

    s = sub.add_parser("simulate", help="write a synthetic panel, adjacency and truth")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--rows", type=int, default=10)
    s.add_argument("--cols", type=int, default=10)
    s.add_argument("--T", type=int, default=10)
    s.add_argument("--p", type=int)
    s.add_argument("--signal", choices=sorted(SIGNALS), default="additive-nonlinear")
    s.add_argument("--spatial-slots", default="")
    s.add_argument("--tau", type=float, default=1.0)
    s.add_argument("--sigma2", type=float, default=1.0)
    s.add_argument("--missing-rate", type=float, default=0.0)

    t = sub.add_parser("test-spatial", help="per-slot Moran's I of one column")
    t.add_argument("--data", required=True)
    t.add_argument("--adjacency", required=True)
    t.add_argument("--column", required=True)
    t.add_argument("--tract-col", default="tract")
    t.add_argument("--time-col", default="time")
    t.add_argument("--method", choices=["normal", "permutation"], default="normal")
    t.add_argument("--perms", type=int, default=999)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    return p


def _fit_flags(args) -> dict:
    flags = {k: getattr(args, k) for k in RunConfig.keys() if hasattr(args, k) and k not in ("pd2",)}
    flags["covariates"] = _split_list(args.covariates)
    flags["categorical"] = _split_list(args.categorical)
    flags["pd"] = _split_list(args.pd)
    flags["pd2"] = _pairs(args.pd2)
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "fit":
            return cmd_fit(resolve_config(_fit_flags(args), args.config))
        if args.command == "report":
            return cmd_report(args.model, args.data, args.out, _split_list(args.pd), _pairs(args.pd2),
                              args.pd_points)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_test_spatial(args)
    except (InputError, PanelValidationError, GraphError, ConfigError, ModelFormatError, ValueError, TypeError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
