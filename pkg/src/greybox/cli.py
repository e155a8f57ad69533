"""Command-line front end: fit, predict, simulate and profile subcommands.

Data files are CSV with a header row and a mandatory ``t`` column; other
columns are matched to model input and output names.  An empty field is a
missing observation; missing input values are an error.  A declared input
named ``dummy`` may be omitted from the CSV and defaults to the constant 1.
All numeric output uses '.' as the decimal separator regardless of locale.

Exit codes: 0 success, 1 input/validation error, 2 numerical non-convergence
(artifacts are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import estimate, kalman
from .estimate import EstimationError, FitResult
from .expr import ExprError
from .kalman import DataError, Dataset, FilterError, LikelihoodOptions
from .model import CompiledModel, ModelError, load_model

__all__ = ["main", "read_dataset", "write_records_csv"]

DATA_DIR = Path(__file__).parent / "data"


def _fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def read_dataset(model: CompiledModel, path, require_outputs: bool = True) -> Dataset:
    """Read a CSV file into a dataset aligned with the model's names."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "t" not in header:
            raise DataError(f"{path}: missing mandatory column 't'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            parsed = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    parsed.append(math.nan)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: column '{name}' has non-numeric value {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows)
    series = {name: table[:, i] for i, name in enumerate(header)}
    t = series.pop("t")
    if np.any(np.isnan(t)):
        raise DataError(f"{path}: column 't' has missing values")
    for j, name in enumerate(model.input_names):
        if name in series and np.any(np.isnan(series[name])):
            bad = int(np.where(np.isnan(series[name]))[0][0]) + 2
            raise DataError(f"{path}:{bad}: input '{name}' is missing a value")
    try:
        return Dataset.build(model, t, series, require_outputs=require_outputs)
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


def write_records_csv(path, model: CompiledModel, records):
    """Per-step filter records: k, t, then per output y/yhat/sd/eps, then per
    state the prior mean and standard deviation.  Missing observations become
    empty fields."""
    header = ["k", "t"]
    for o in model.output_names:
        header += [o, f"{o}_pred", f"{o}_sd", f"{o}_eps"]
    for s in model.state_names:
        header += [f"{s}_pred", f"{s}_sd"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            row = [str(rec.k), _fmt(rec.t)]
            for j in range(model.n_outputs):
                row += [_fmt(rec.y[j]), _fmt(rec.y_pred[j]),
                        _fmt(rec.y_sd[j]), _fmt(rec.eps[j])]
            for i in range(model.n_states):
                row += [_fmt(rec.x_pred[i]), _fmt(rec.x_sd[i])]
            writer.writerow(row)


def _write_simulation_csv(path, model: CompiledModel, t, states, outputs):
    header = ["t"] + list(model.state_names) + list(model.output_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(len(t)):
            row = [_fmt(t[k])]
            row += [_fmt(v) for v in states[k]]
            row += [_fmt(v) for v in outputs[k]]
            writer.writerow(row)


def _write_profile_csv(path, prof):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["value", "profile_loglik", "wald_loglik", "cutoff"])
        for v, pl, wl in zip(prof.grid, prof.profile_loglik, prof.wald_loglik):
            writer.writerow([_fmt(v), _fmt(pl), _fmt(wl), _fmt(prof.cutoff)])


def _options_from_args(args) -> LikelihoodOptions:
    return LikelihoodOptions(
        hold=args.hold,
        abs_tol=args.tol_abs,
        rel_tol=args.tol_rel,
        pi0=args.pi0,
    )


def _load_compiled(args) -> CompiledModel:
    return load_model(args.model).compile()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_overrides(model: CompiledModel, pairs):
    values = {}
    for text in pairs or []:
        if "=" not in text:
            raise ModelError(f"--set expects name=value, got {text!r}")
        name, value = text.split("=", 1)
        name = name.strip()
        if name not in model.param_names:
            raise ModelError(f"--set names unknown parameter '{name}'")
        try:
            values[name] = float(value)
        except ValueError:
            raise ModelError(f"--set value for '{name}' is not numeric: {value!r}")
    return values


def _params_for_prediction(model: CompiledModel, args):
    overrides = _apply_overrides(model, getattr(args, "set", None))
    if getattr(args, "fit", None):
        with open(args.fit, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("schema") != estimate.FIT_SCHEMA:
            raise DataError(
                f"{args.fit}: unsupported fit schema {doc.get('schema')!r}"
            )
        values = {p["name"]: p["estimate"] for p in doc.get("parameters", [])}
        unknown = sorted(set(values) - set(model.param_names))
        if unknown:
            raise ModelError(
                f"{args.fit}: fit parameters {unknown} do not belong to this model"
            )
        values.update(overrides)
        return model.full_params(values)
    return model.full_params(overrides)


def cmd_fit(args) -> int:
    model = _load_compiled(args)
    data = read_dataset(model, args.data, require_outputs=True)
    opts = _options_from_args(args)
    out = _out_dir(args)
    result = estimate.fit(model, data, opts)
    result.save(out / "fit.json")
    text = estimate.summarize(result, correlation=args.correlation,
                              extended=args.extended)
    (out / "summary.txt").write_text(model.header() + "\n\n" + text,
                                     encoding="utf-8")
    print(model.header())
    print()
    print(text, end="")
    return 0 if result.converged else 2


def cmd_predict(args) -> int:
    model = _load_compiled(args)
    data = read_dataset(model, args.data, require_outputs=False)
    opts = _options_from_args(args)
    params = _params_for_prediction(model, args)
    records = kalman.predict_one_step(model, params, data, opts)
    out = _out_dir(args)
    write_records_csv(out / "predict.csv", model, records)
    print(f"wrote {out / 'predict.csv'} ({len(records)} rows)")
    return 0


def cmd_simulate(args) -> int:
    model = _load_compiled(args)
    data = read_dataset(model, args.data, require_outputs=False)
    overrides = _apply_overrides(model, args.set)
    params = model.full_params(overrides)
    sim = kalman.simulate_stochastic(model, params, data, nsim=args.nsim,
                                     seed=args.seed, hold=args.hold)
    out = _out_dir(args)
    for s in range(args.nsim):
        path = out / f"sim_{s + 1:03d}.csv"
        _write_simulation_csv(path, model, sim.t, sim.states[s], sim.outputs[s])
        print(f"wrote {path}")
    return 0


def cmd_profile(args) -> int:
    model = _load_compiled(args)
    data = read_dataset(model, args.data, require_outputs=True)
    opts = _options_from_args(args)
    try:
        a, b, count = args.grid.split(":")
        grid = np.linspace(float(a), float(b), int(count))
    except ValueError:
        raise DataError(f"malformed --grid {args.grid!r}, expected from:to:count") from None
    if len(grid) < 2:
        raise DataError("profile grid needs at least 2 points")
    prof = estimate.profile_likelihood(model, data, args.param, grid, opts)
    out = _out_dir(args)
    _write_profile_csv(out / "profile.csv", prof)
    print(f"wrote {out / 'profile.csv'} ({len(grid)} grid points)")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="greybox",
        description="Fit, predict, simulate and profile continuous-discrete "
                    "stochastic state-space models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_seed=False):
        p.add_argument("--model", required=True, help="model file")
        p.add_argument("--data", required=True, help="CSV data file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, required=need_seed,
                       help="random seed" + (" (required)" if need_seed else ""))
        p.add_argument("--tol-abs", type=float, default=1e-8, dest="tol_abs")
        p.add_argument("--tol-rel", type=float, default=1e-8, dest="tol_rel")
        p.add_argument("--hold", choices=("zoh", "linear"), default="zoh",
                       help="input interpolation between samples")
        p.add_argument("--pi0", type=float, default=1.0,
                       help="initial state covariance scale")

    p_fit = sub.add_parser("fit", help="maximum likelihood fit")
    common(p_fit)
    p_fit.add_argument("--extended", action="store_true",
                       help="add objective/penalty gradient columns")
    p_fit.add_argument("--correlation", action="store_true",
                       help="append the estimate correlation matrix")
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="one-step predictions as CSV")
    common(p_pred)
    p_pred.add_argument("--fit", help="fit.json with estimated parameters")
    p_pred.add_argument("--set", action="append", metavar="NAME=VALUE",
                        help="override a parameter value (repeatable)")
    p_pred.set_defaults(func=cmd_predict)

    p_sim = sub.add_parser("simulate", help="stochastic realizations as CSV")
    common(p_sim, need_seed=True)
    p_sim.add_argument("--nsim", type=int, default=1, help="number of realizations")
    p_sim.add_argument("--set", action="append", metavar="NAME=VALUE",
                       help="override a parameter value (repeatable)")
    p_sim.set_defaults(func=cmd_simulate)

    p_prof = sub.add_parser("profile", help="profile likelihood over a grid")
    common(p_prof)
    p_prof.add_argument("--param", required=True, help="free parameter to profile")
    p_prof.add_argument("--grid", required=True, metavar="FROM:TO:COUNT",
                        help="grid specification, e.g. -2:-0.5:20")
    p_prof.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "nsim", 1) < 1:
        print("error: --nsim must be at least 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ModelError, ExprError, DataError, EstimationError, FilterError,
            OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
