"""Command line entry point: ``hsd <command> --config cfg.json [--seed S] [--out DIR]``.

Every command prints a JSON report on stdout and writes its tabular
artifacts as CSV files into ``--out``. Exit codes: 0 success, 2 invalid input,
3 data that cannot support the request.
"""

from __future__ import annotations

import argparse
import json
import logging
import pickle
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import __version__
from .data import CsvSchema, DataError, HsdError, PopulationFrame, SeedSpec, SimulatedTruth, ValidationError, emit_csv, load_csv
from .design import SamplingPlan, design_curve, select_plan
from .estimation import (
    covariate_adjusted_ate,
    cross_fitted_phi,
    diff_in_means,
    hs_estimate,
    stratified_ate,
)
from .evaluation import auq_decile, auq_oracle, hs_qini_curve, qini_curve
from .harness import ExperimentConfig, jsonable, run_experiment
from .learners import OutcomeLearnerSpec, fit, predict_proba
from .sampling import assign_treatment, draw_cohort, draw_uniform_cohort
from .simulation import RobustnessConfig, ScenarioSpec, generate_population, generate_pre_experiment, generate_scenario, robustness_sweep
from .uplift import fit_uplift, predict_cate

log = logging.getLogger("hsd")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA = 0, 2, 3


# --------------------------------------------------------------------------- helpers


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ValidationError(f"config is missing {key!r}")
    return cfg[key]


def _frame(block: dict) -> PopulationFrame:
    if not isinstance(block, dict):
        raise ValidationError("a data block needs 'path' and 'schema'")
    return load_csv(_require(block, "path"), CsvSchema.from_mapping(_require(block, "schema")))


def _side_table(path: str, columns: list[str]) -> pd.DataFrame:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    df = pd.read_csv(p)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ValidationError(f"{p.name}: missing column(s) {missing}")
    return df


def _aligned(df: pd.DataFrame, ids: np.ndarray, column: str, what: str) -> np.ndarray:
    """Values of ``column`` ordered like ``ids`` (joined on the ``id`` column)."""
    if "id" not in df.columns:
        raise ValidationError(f"{what} needs an 'id' column")
    s = df.set_index("id")[column]
    if not s.index.is_unique:
        raise ValidationError(f"{what}: duplicate ids")
    missing = np.setdiff1d(ids, s.index.to_numpy())
    if missing.size:
        raise DataError(f"{what}: no row for id {int(missing[0])}")
    return s.loc[ids].to_numpy()


def _strata(path: str, column: str, n: int) -> np.ndarray:
    df = _side_table(path, [column])
    vals = df[column].astype(str).str.strip().to_numpy()
    if vals.shape[0] != n:
        raise ValidationError("stratum column length does not match the cohort")
    bad = ~np.isin(vals, ["H", "L"])
    if bad.any():
        raise ValidationError(f"stratum must be H or L; data row {int(np.flatnonzero(bad)[0])} holds {vals[bad][0]!r}")
    return vals == "H"


def _seed(args, cfg: dict) -> SeedSpec:
    value = args.seed if args.seed is not None else cfg.get("seed", 0)
    return SeedSpec(int(value), args.command)


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(df: pd.DataFrame, out: Path | None, name: str) -> None:
    if out is not None:
        df.to_csv(out / name, index=False)


# --------------------------------------------------------------------------- commands


def cmd_plan(cfg: dict, args) -> dict:
    seed = _seed(args, cfg)
    pre = _frame(_require(cfg, "pre_experiment"))
    pre.require("outcome")
    population = _frame(_require(cfg, "population"))
    spec = OutcomeLearnerSpec.from_config(cfg.get("learner"))
    model = fit(spec, pre.features, pre.outcome, seed.child("outcome_model"), pre.feature_names)
    pred = predict_proba(model, population)
    curve = design_curve(pred, cfg.get("grid"))
    plan = select_plan(curve, int(cfg.get("N", 20_000)), float(cfg.get("treatment_p", 0.5)), bool(cfg.get("adjust", True)))
    out = _out_dir(args)
    rows = pd.DataFrame(curve.to_rows()).rename(columns={"V_H_hat": "V_H", "V_L_hat": "V_L", "Q_V_hat": "Q_V"})
    _write(rows[["p_H", "V_H", "V_L", "Q_V", "R_H", "predicted_ratio"]], out, "design_curve.csv")
    _write(pd.DataFrame({"id": population.ids, "prediction": pred}), out, "predictions.csv")
    if out is not None:
        (out / "plan.json").write_text(plan.to_json() + "\n")
    return {"plan": plan.to_dict(), "skipped_grid_values": curve.skipped}


def cmd_sample(cfg: dict, args) -> dict:
    seed = _seed(args, cfg)
    population = _frame(_require(cfg, "population"))
    plan_path = Path(_require(cfg, "plan"))
    if not plan_path.exists():
        raise DataError(f"no such file: {plan_path}")
    plan = SamplingPlan.from_dict(json.loads(plan_path.read_text()))
    pred = _aligned(_side_table(_require(cfg, "predictions"), ["prediction"]), population.ids, "prediction", "predictions")
    labels = pred > plan.effective_threshold
    kind = cfg.get("kind", "hs")
    N = int(cfg.get("N", plan.N))
    if kind == "hs":
        cohort = draw_cohort(population, labels, plan, seed.child("cohort"), N)
    elif kind == "uniform":
        cohort = draw_uniform_cohort(population, N, seed.child("cohort"), labels)
    else:
        raise ValidationError("kind must be 'hs' or 'uniform'")
    p = float(cfg.get("treatment_p", plan.treatment_proportion))
    cohort = assign_treatment(cohort, p, seed.child("treatment"), bool(cfg.get("blocked", False)))
    _write(cohort.to_dataframe(), _out_dir(args), "cohort.csv")
    return {
        "kind": kind,
        "n": cohort.size,
        "n_H": int(cohort.high.sum()),
        "n_treated": int(cohort.treatment.sum()),
        "population_p_H": float(labels.mean()),
    }


def cmd_estimate(cfg: dict, args) -> dict:
    block = _require(cfg, "cohort")
    cohort = _frame(block)
    cohort.require("outcome", "treatment")
    method = cfg.get("method", "dim")
    y, w = cohort.outcome, cohort.treatment
    p = float(cfg.get("treatment_p", w.mean()))

    def high():
        return _strata(block["path"], cfg.get("stratum_column", "stratum"), cohort.n_rows)

    def population_p_H():
        return float(_require(cfg, "population_p_H"))

    def phi():
        if "phi_column" in cfg:
            return _aligned(_side_table(block["path"], ["id", cfg["phi_column"]]), cohort.ids, cfg["phi_column"], "phi")
        if "truth" in cfg:
            t = _side_table(cfg["truth"], ["id", "mu0", "tau"])
            truth = SimulatedTruth(_aligned(t, cohort.ids, "mu0", "truth"), _aligned(t, cohort.ids, "tau", "truth"))
            return truth.phi(p)
        spec = OutcomeLearnerSpec.from_config(cfg.get("learner"))
        return cross_fitted_phi(cohort, spec, p, int(cfg.get("folds", 5)), _seed(args, cfg).child("phi"))

    if method == "dim":
        est = diff_in_means(y, w)
    elif method == "stratified":
        est = stratified_ate(y, w, high(), population_p_H())
    elif method == "hs":
        est = hs_estimate(y, w, high(), population_p_H())
    elif method == "hs_covadj":
        est = hs_estimate(y, w, high(), population_p_H(), mode="covadj", phi=phi())
    elif method == "oracle_covadj":
        if "truth" not in cfg:
            raise ValidationError("oracle_covadj needs a truth file")
        est = diff_in_means(y - phi(), w, method="oracle_covadj")
    elif method == "covadj":
        spec = OutcomeLearnerSpec.from_config(cfg.get("learner"))
        est = covariate_adjusted_ate(cohort, spec, int(cfg.get("folds", 5)), _seed(args, cfg).child("covadj"))
    else:
        raise ValidationError(f"unknown method {method!r}")
    return {"method": est.method, "value": est.value, "variance_hat": est.variance_hat, "n": est.n_used}


def cmd_train(cfg: dict, args) -> dict:
    seed = _seed(args, cfg)
    cohort = _frame(_require(cfg, "cohort"))
    spec = OutcomeLearnerSpec.from_config(cfg.get("learner"))
    meta = cfg.get("meta", "T")
    model = fit_uplift(meta, cohort, spec, seed.child("uplift"), float(cfg.get("treatment_p", 0.5)))
    out = _out_dir(args)
    result = {"meta": model.meta_kind, "n_train": cohort.n_rows}
    if "score" in cfg:
        target = _frame(cfg["score"])
        scores = predict_cate(model, target)
        _write(pd.DataFrame({"id": target.ids, "score": scores}), out, "scores.csv")
        result["n_scored"] = target.n_rows
    if out is not None:
        with open(out / "model.pkl", "wb") as fh:
            pickle.dump(model, fh)
    return result


def cmd_evaluate(cfg: dict, args) -> dict:
    block = _require(cfg, "test")
    test = _frame(block)
    test.require("outcome", "treatment")
    scores = _aligned(_side_table(_require(cfg, "scores"), ["id", "score"]), test.ids, "score", "scores")
    correction = cfg.get("correction", "none")
    T = int(cfg.get("T", 10))
    auq_T = int(cfg.get("auq_T", 100))
    adjusted = None
    if correction in ("covadj", "hs_covadj"):
        col = _require(cfg, "phi_column")
        adjusted = test.outcome - _aligned(_side_table(block["path"], ["id", col]), test.ids, col, "phi")
    if correction in ("hs", "hs_covadj"):
        high = _strata(block["path"], cfg.get("stratum_column", "stratum"), test.n_rows)
        ref = _side_table(_require(cfg, "reference"), ["score", "stratum"])
        ref_s = ref["score"].to_numpy(dtype=float)
        ref_h = ref["stratum"].astype(str).str.strip().to_numpy() == "H"
        curve = hs_qini_curve(scores, test.outcome, test.treatment, high, ref_s, ref_h, T, adjusted)
        auq = auq_decile(scores, test.outcome, test.treatment, auq_T, adjusted, high, ref_s, ref_h)
    elif correction in ("none", "covadj"):
        curve = qini_curve(scores, test.outcome, test.treatment, T, adjusted)
        auq = auq_decile(scores, test.outcome, test.treatment, auq_T, adjusted)
    else:
        raise ValidationError(f"unknown correction {correction!r}")
    _write(pd.DataFrame(curve.to_rows()), _out_dir(args), "qini_curve.csv")
    summary = {"correction": curve.correction, "auq_decile": auq.value, "missing_points": int(curve.missing.sum())}
    if "truth" in cfg:
        tau = _aligned(_side_table(cfg["truth"], ["id", "tau"]), test.ids, "tau", "truth")
        summary["auq_oracle"] = auq_oracle(scores, tau).value
    return summary


def cmd_simulate(cfg: dict, args) -> dict:
    seed = _seed(args, cfg)
    scenario = int(_require(cfg, "scenario"))
    n_rows = int(_require(cfg, "n_rows"))
    d = int(cfg.get("n_features", 10))
    kind = cfg.get("kind", "rct")
    if kind == "rct":
        frame, truth = generate_scenario(ScenarioSpec(scenario, n_rows, d, float(cfg.get("treatment_p", 0.5)), seed))
    elif kind == "pre_experiment":
        frame, truth = generate_pre_experiment(scenario, n_rows, d, seed)
    elif kind == "population":
        frame, truth = generate_population(scenario, n_rows, d, seed)
    else:
        raise ValidationError("kind must be 'rct', 'pre_experiment' or 'population'")
    out = _out_dir(args)
    if out is not None:
        emit_csv(frame, out / "population.csv")
        pd.DataFrame({"id": frame.ids, "mu0": truth.mu0, "tau": truth.tau}).to_csv(out / "truth.csv", index=False)
    return {"scenario": scenario, "kind": kind, "n_rows": n_rows, "true_ate": float(truth.tau.mean()), "mean_mu0": float(truth.mu0.mean())}


def cmd_robustness(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    modes = cfg.pop("alpha_modes", ["overfit", "optimal"])
    if "alpha_mode" in cfg:
        modes = [cfg.pop("alpha_mode")]
    cfg.pop("seed", None)
    if "nu_grid" in cfg:
        cfg["nu_grid"] = tuple(float(v) for v in cfg["nu_grid"])
    unknown = set(cfg) - set(RobustnessConfig.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown robustness key(s): {sorted(unknown)}")
    seed = _seed(args, {"seed": args.seed if args.seed is not None else 0})
    out = _out_dir(args)
    result = {}
    for mode in modes:
        rows = robustness_sweep(RobustnessConfig(alpha_mode=mode, seed=seed, **cfg))
        _write(pd.DataFrame(rows), out, f"robustness_{mode}.csv")
        result[mode] = rows
    return result


def cmd_experiment(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    report = run_experiment(ExperimentConfig.from_dict(cfg))
    log.info("experiment finished in %.1f s", report.runtime_seconds)
    out = _out_dir(args)
    if out is not None:
        (out / "report.json").write_text(report.to_json() + "\n")
        for name, values in report.samples.items():
            arr = np.asarray(values)
            df = pd.DataFrame(arr if arr.ndim == 2 else {"value": arr})
            df.insert(0, "repetition", np.arange(arr.shape[0]))
            _write(df, out, name.replace("/", "_") + ".csv")
    return report.to_dict()


COMMANDS: dict[str, Callable[[dict, Any], dict]] = {
    "plan": cmd_plan,
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "robustness": cmd_robustness,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsd", description="Heteroskedasticity-aware stratified sampling toolkit")
    parser.add_argument("--version", action="version", version=f"hsd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", default=None, help="directory for CSV artifacts")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        result = COMMANDS[args.command](_load_config(args.config), args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(jsonable(result), indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
