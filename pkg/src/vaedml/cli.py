"""Batch command-line front end.

Every subcommand reads a JSON config, writes its artifacts under --out, and
drops a run manifest with input/config digests so identical runs can be
verified byte-for-byte. Exit codes: 0 success, 1 validation failure
(quality gates), 2 usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from . import __version__, baselines, dml, indices, report, synth, vae
from .errors import VaedmlError
from .learners import LearnerSpec
from .panel import PanelTable, expand_design, ingest_csv, winsorize

EXIT_OK, EXIT_VALIDATION, EXIT_USAGE = 0, 1, 2

SUBCOMMANDS = ("ingest", "index", "synth", "vae-train", "vae-generate", "vae-validate",
               "merge", "estimate", "robustness", "heterogeneity", "temporal",
               "mediate", "baseline", "report")


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path, frame: pd.DataFrame) -> None:
    _atomic_write(path, frame.to_csv(index=False))


def _write_json(path, payload) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc


def _manifest(outdir, command, seed, config_path, config, inputs, outputs,
              started) -> None:
    payload = {
        "command": command,
        "seed": seed,
        "tool_version": __version__,
        "config_digest": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "config_path": str(config_path),
        "input_digests": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        "started_utc": started,
        "finished_utc": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(os.path.join(outdir, "manifest.json"), payload)


def load_panel(csv_path, schema_path) -> tuple[PanelTable, dict]:
    schema = _load_config(schema_path)
    table, rep = ingest_csv(csv_path, schema.get("roles", {}),
                            firm_col=schema.get("firm_col", "firm_id"),
                            year_col=schema.get("year_col", "year"))
    return table, rep.to_dict()


def _panel_inputs(config) -> tuple[PanelTable, list[str]]:
    table, _ = load_panel(config["panel_csv"], config["schema_json"])
    return table, [config["panel_csv"], config["schema_json"]]


def _dml_config(config, seed) -> dml.DmlConfig:
    raw = dict(config.get("dml", {}))
    raw.setdefault("seed", seed)
    return dml.DmlConfig.from_dict(raw)


def _rows_csv(outdir, name, rows) -> str:
    path = os.path.join(outdir, name)
    _write_csv(path, report.estimates_to_frame(rows))
    return path


# --------------------------------------------------------------------------
# subcommand handlers: (config, seed, outdir) -> (exit code, inputs, outputs)
# --------------------------------------------------------------------------

def _cmd_ingest(config, seed, outdir):
    table, rep = load_panel(config["csv"], config["schema_json"])
    out_csv = os.path.join(outdir, "panel.csv")
    out_rep = os.path.join(outdir, "ingest_report.json")
    if config.get("winsorize"):
        lo, hi = config.get("winsorize_bounds", (0.01, 0.99))
        table = winsorize(table, lo, hi)
    _write_csv(out_csv, table.data)
    _write_json(out_rep, rep)
    return EXIT_OK, [config["csv"], config["schema_json"]], [out_csv, out_rep]


def _index_greenwash(frame: pd.DataFrame) -> pd.DataFrame:
    records = []
    for _, row in frame.iterrows():
        rubric = indices.DisclosureRubric(
            credibility=tuple(int(row[f"cred{i}"]) for i in range(1, 6)),
            compliance=int(row["compliance"]), safety=int(row["safety"]),
            negative_events=int(row["negative_events"]), welfare=int(row["welfare"]),
            emergency=int(row["emergency"]),
            three_simultaneities=int(row["three_simultaneities"]),
            cleaner_production=int(row["cleaner_production"]),
            emissions=tuple(int(row[f"emis{i}"]) for i in range(1, 7)),
            treatment=tuple(int(row[f"treat{i}"]) for i in range(1, 6)))
        records.append(indices.DisclosureRecord(
            firm_id=str(row["firm_id"]), year=int(row["year"]),
            keyword_hits=int(row["keyword_hits"]), total_tokens=int(row["total_tokens"]),
            rubric=rubric))
    scores = indices.greenwash_index(records)
    return pd.DataFrame([{"firm_id": s.firm_id, "year": s.year, "mws": s.mws,
                          "mrs": s.mrs, "gw": s.gw} for s in scores])


def _cmd_index(config, seed, outdir):
    task = config.get("task")
    src = config["input_csv"]
    frame = pd.read_csv(src)
    if task == "greenwash":
        out = _index_greenwash(frame)
    elif task == "pollution":
        cities = frame.iloc[:, 0]
        closeness = indices.entropy_topsis(frame.iloc[:, 1:].to_numpy(dtype=float))
        out = pd.DataFrame({"city": cities, "pollution_index": closeness})
    elif task == "stability":
        out_rows = []
        for firm, grp in frame.groupby("firm_id"):
            by_year = {y: set(g["member"]) for y, g in grp.groupby("year")}
            for y in sorted(by_year):
                if y + 1 in by_year:
                    out_rows.append({"firm_id": firm, "year": y,
                                     "tsta": indices.team_stability_from_rosters(
                                         by_year[y], by_year[y + 1])})
        out = pd.DataFrame(out_rows)
    elif task == "pressure":
        out = frame[["firm_id", "year"]].copy()
        out["pressure"] = [indices.performance_pressure(f, a, s) for f, a, s in
                           zip(frame["forecast_mean"], frame["actual"], frame["assets"])]
    elif task == "media":
        out = frame[["firm_id", "year"]].copy()
        out["jf"] = [indices.jf_coefficient(int(e), int(c), int(t)) for e, c, t in
                     zip(frame["positive"], frame["negative"], frame["total"])]
    else:
        raise UsageError(f"unknown index task {task!r}")
    out_csv = os.path.join(outdir, f"{task}_scores.csv")
    _write_csv(out_csv, out)
    return EXIT_OK, [src], [out_csv]


def _cmd_synth(config, seed, outdir):
    raw = dict(config.get("dgp", {}))
    raw.setdefault("seed", seed)
    mediated = raw.pop("mediated", False)
    if "theta" in raw and isinstance(raw["theta"], dict):
        raw["theta"] = {k: float(v) for k, v in raw["theta"].items()}
    spec = synth.DgpSpec(**raw)
    table, truth = (synth.generate_mediated(spec) if mediated
                    else synth.generate_panel(spec))
    out_csv = os.path.join(outdir, "panel.csv")
    out_schema = os.path.join(outdir, "schema.json")
    out_truth = os.path.join(outdir, "truth.json")
    _write_csv(out_csv, table.data)
    _write_json(out_schema, {"roles": table.roles, "firm_col": table.firm_col,
                             "year_col": table.year_col})
    _write_json(out_truth, {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                            for k, v in truth.items()})
    return EXIT_OK, [], [out_csv, out_schema, out_truth]


def _cmd_vae_train(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    raw = dict(config.get("vae", {}))
    raw.setdefault("seed", seed)
    vcfg = vae.VaeConfig.from_dict(raw)
    model, trace = vae.train(table, vcfg)
    out_model = os.path.join(outdir, "vae_model.json")
    out_trace = os.path.join(outdir, "loss_trace.csv")
    vae.save_model(model, out_model)
    _write_csv(out_trace, pd.DataFrame(trace))
    return EXIT_OK, inputs, [out_model, out_trace]


def _cmd_vae_generate(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    model = vae.load_model(config["model_json"])
    rows = vae.generate(model, n=config.get("n"),
                        mode=config.get("mode", "encode_resample"),
                        source=table, seed=seed,
                        noise_scale=config.get("noise_scale", 1.0))
    out_csv = os.path.join(outdir, "generated.csv")
    _write_csv(out_csv, rows)
    return EXIT_OK, inputs + [config["model_json"]], [out_csv]


def _cmd_vae_validate(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    generated = pd.read_csv(config["generated_csv"])
    gates = vae.Gates(**config.get("gates", {}))
    quality = vae.validate(table, generated, gates)
    out_json = os.path.join(outdir, "quality_report.json")
    _write_json(out_json, quality.to_dict())
    code = EXIT_OK if quality.passed else EXIT_VALIDATION
    if not quality.passed:
        print(f"quality gates failed; report at {out_json}", file=sys.stderr)
    return code, inputs + [config["generated_csv"]], [out_json]


def _cmd_merge(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    generated = pd.read_csv(config["generated_csv"])
    quality = None
    if config.get("quality_json"):
        with open(config["quality_json"]) as fh:
            q = json.load(fh)
        quality = vae.QualityReport(smd=q["smd"], mae=q["mae"], mse=q["mse"],
                                    gates=vae.Gates(**q["gates"]), passed=q["passed"])
    merged = vae.merge(table, generated, quality=quality,
                       override=config.get("override", False))
    out_csv = os.path.join(outdir, "merged.csv")
    out_schema = os.path.join(outdir, "schema.json")
    _write_csv(out_csv, merged.data)
    _write_json(out_schema, {"roles": merged.roles, "firm_col": merged.firm_col,
                             "year_col": merged.year_col})
    extra = [config["generated_csv"]] + ([config["quality_json"]]
                                         if config.get("quality_json") else [])
    return EXIT_OK, inputs + extra, [out_csv, out_schema]


def _cmd_estimate(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    est = dml.estimate(table, _dml_config(config, seed))
    rows = [est.to_row(config.get("label", "estimate"))]
    out_csv = _rows_csv(outdir, "estimate.csv", rows)
    return EXIT_OK, inputs, [out_csv]


def _grid_from_config(raw: dict) -> dict:
    grid = dict(raw)
    if "learners" in grid:
        grid["learners"] = [(entry["label"], LearnerSpec(**entry["spec"]))
                            for entry in grid["learners"]]
    return grid


def _cmd_robustness(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    cells = dml.robustness_grid(table, _dml_config(config, seed),
                                _grid_from_config(config.get("grid", {})))
    rows, failures = [], []
    for cell in cells:
        if cell.failed:
            failures.append({"label": cell.label, "error": cell.error})
        else:
            rows.append(cell.estimate.to_row(cell.label))
    outputs = []
    if rows:
        outputs.append(_rows_csv(outdir, "robustness.csv", rows))
    if failures:
        fail_path = os.path.join(outdir, "failed_cells.json")
        _write_json(fail_path, failures)
        outputs.append(fail_path)
    return EXIT_OK, inputs, outputs


def _cmd_heterogeneity(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    groups = config.get("groups")
    ests = dml.subgroup_estimates(table, _dml_config(config, seed),
                                  config["split_column"], groups)
    rows = [est.to_row(label) for label, est in ests.items()]
    out_csv = _rows_csv(outdir, "heterogeneity.csv", rows)
    return EXIT_OK, inputs, [out_csv]


def _cmd_temporal(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    ests = dml.temporal_effects(table, _dml_config(config, seed),
                                max_lag=int(config.get("max_lag", 2)),
                                include_generated=config.get("include_generated", True))
    rows = [est.to_row(label) for label, est in ests.items()]
    out_csv = _rows_csv(outdir, "temporal.csv", rows)
    return EXIT_OK, inputs, [out_csv]


def _cmd_mediate(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    treatment = config.get("treatment") or table.single_column("treatment")
    mediators = config.get("mediators") or table.columns_by_role("mediator")
    rows = []
    for med in mediators:
        res = dml.mediation_regression(table, treatment, med,
                                       controls=config.get("controls"))
        rows.append({"label": med, "theta": res.coefficient, "se": res.robust_se,
                     "stars": report.stars(res.p_value), "ci_low": float("nan"),
                     "ci_high": float("nan"), "n": res.n, "folds": 0,
                     "constant": res.constant, "r2": res.r2})
    out_csv = _rows_csv(outdir, "mediation.csv", rows)
    return EXIT_OK, inputs, [out_csv]


def _cmd_baseline(config, seed, outdir):
    table, inputs = _panel_inputs(config)
    treatment = config.get("treatment") or table.single_column("treatment")
    outcome = config.get("outcome") or table.single_column("outcome")
    X, _ = expand_design(table, add_quadratics=config.get("add_quadratics", True),
                         fe_keys=list(config.get("fe_keys", [])))
    binz = baselines.binarize_treatment(table.data[treatment].to_numpy(),
                                        rule=config.get("rule", "median_split"),
                                        threshold=config.get("threshold"))
    prop = baselines.propensity_fit(X, binz.column)
    y = table.data[outcome].to_numpy(dtype=float)
    att = baselines.psm_att(y, binz.column, prop, caliper=config.get("caliper", 0.2))
    ate = baselines.ipw_ate(y, binz.column, prop)
    rows = []
    for res in (att, ate):
        z = res.effect / res.se if res.se > 0 else float("inf")
        rows.append({"label": res.method, "theta": res.effect, "se": res.se,
                     "stars": report.stars(dml.normal_p_value(z)),
                     "ci_low": res.ci95[0], "ci_high": res.ci95[1],
                     "n": res.n, "folds": 0})
    out_csv = _rows_csv(outdir, "baseline.csv", rows)
    return EXIT_OK, inputs, [out_csv]


def _cmd_report(config, seed, outdir):
    paths = config.get("estimates_csv")
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise UsageError("report needs estimates_csv (path or list)")
    frame = pd.concat([pd.read_csv(p) for p in paths], ignore_index=True)
    text = report.render_report(frame, template=config.get("template", "main"))
    out_md = os.path.join(outdir, "report.md")
    _atomic_write(out_md, text)
    return EXIT_OK, list(paths), [out_md]


_HANDLERS = {
    "ingest": _cmd_ingest,
    "index": _cmd_index,
    "synth": _cmd_synth,
    "vae-train": _cmd_vae_train,
    "vae-generate": _cmd_vae_generate,
    "vae-validate": _cmd_vae_validate,
    "merge": _cmd_merge,
    "estimate": _cmd_estimate,
    "robustness": _cmd_robustness,
    "heterogeneity": _cmd_heterogeneity,
    "temporal": _cmd_temporal,
    "mediate": _cmd_mediate,
    "baseline": _cmd_baseline,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaedml",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides the config)")
        p.add_argument("--out", default=os.environ.get("VAEDML_OUT", "."),
                       help="output directory")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    started = datetime.now(timezone.utc).isoformat()
    try:
        config = _load_config(args.config)
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        os.makedirs(args.out, exist_ok=True)
        code, inputs, outputs = _HANDLERS[args.command](config, seed, args.out)
        _manifest(args.out, args.command, seed, args.config, config, inputs,
                  outputs, started)
        return code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VaedmlError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
