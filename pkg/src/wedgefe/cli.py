"""Command-line front end: ``wedgefe analyze | simulate | estimand``.

Exit codes: 0 success, 2 data/design/collinearity problems, 3 a fit that
did not converge, 4 a quadrature oracle that missed its error target.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .analysis import SCHEMA_VERSION, analyze
from .data import load_csv
from .design import DesignKind, Structure, TrialDesign
from .errors import ConvergenceError, DataError, DesignError, QuadratureError, WedgeFEError
from .loglink import MEASURES
from .sim import ScenarioSpec, oracle_estimands, run_study, scenario4_mc_oracle

EXIT_OK = 0
EXIT_DATA = 2
EXIT_CONVERGENCE = 3
EXIT_QUADRATURE = 4


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, QuadratureError):
        return EXIT_QUADRATURE
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    return EXIT_DATA


def _fail(exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(_exit_code(exc))


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        click.echo(text, nl=not text.endswith("\n"))
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Fixed-effects estimators for longitudinal cluster trials."""


@main.command("analyze")
@click.argument("data_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--design", "kind", required=True,
              type=click.Choice([k.value for k in DesignKind], case_sensitive=False))
@click.option("--J", "J", required=True, type=int, help="Number of periods.")
@click.option("--structure", default="constant",
              type=click.Choice([s.value for s in Structure], case_sensitive=False))
@click.option("--link", default="identity", type=click.Choice(["identity", "log"]))
@click.option("--measure", type=click.Choice(MEASURES), default=None,
              help="Per-cell summary measure (log link, saturated structure).")
@click.option("--covariates", default=None,
              help="Comma-separated covariate columns (default: x1, x2, ...).")
@click.option("--no-jackknife", is_flag=True, help="Skip leave-one-cluster-out refits.")
@click.option("--plug-in", is_flag=True,
              help="Use the plug-in rather than the profiled stacked-score bread.")
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv", "json"]))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--json-out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Also write the full JSON report here.")
def cmd_analyze(data_path, kind, J, structure, link, measure, covariates, no_jackknife,
                plug_in, fmt, out, json_out):
    """Fit a fixed-effects model to a long-format CSV and report estimates."""
    try:
        design = TrialDesign(kind, J)
        covs = [c.strip() for c in covariates.split(",") if c.strip()] if covariates else None
        data = load_csv(data_path, design, covariates=covs)
        for note in data.notes:
            click.echo(f"note: {note}", err=True)
        report = analyze(data, structure, link, jackknife=not no_jackknife,
                         profiled=not plug_in, measure=measure)
    except (WedgeFEError, ValueError) as exc:
        _fail(exc)
    _emit(report.to_json() + "\n" if fmt == "json" else report.to_csv(), out)
    if json_out is not None:
        _emit(report.to_json() + "\n", json_out)


def _scenario_spec(scenario, m, J, reps, seed, spec_path) -> ScenarioSpec:
    if spec_path is not None:
        try:
            raw = json.loads(Path(spec_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"could not read study spec {spec_path}: {exc}") from None
        for key, val in (("scenario", scenario), ("m", m), ("J", J), ("replicates", reps),
                         ("seed", seed)):
            if val is not None:
                raw[key] = val
        if "scenario" not in raw or "m" not in raw:
            raise DataError("study spec needs 'scenario' and 'm'")
        return ScenarioSpec.from_dict(raw)
    if scenario is None or m is None:
        raise DataError("give --scenario and --m, or --spec")
    return ScenarioSpec(scenario, m, J, seed=seed or 0,
                        replicates=1000 if reps is None else reps)


def _spec_options(f):
    f = click.option("--spec", "spec_path", type=click.Path(dir_okay=False), default=None,
                     help="Study spec JSON (flags override its fields).")(f)
    f = click.option("--J", "J", type=int, default=None)(f)
    f = click.option("--m", type=int, default=None, help="Number of clusters.")(f)
    f = click.option("--scenario", type=click.IntRange(1, 4), default=None)(f)
    return f


@main.command("simulate")
@_spec_options
@click.option("--reps", type=click.IntRange(min=2), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None,
              help="Worker processes (default: WEDGEFE_THREADS or 1).")
@click.option("--no-jackknife", is_flag=True)
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv", "json"]))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--replicates-out", type=click.Path(dir_okay=False, path_type=Path),
              default=None, help="Per-replicate estimates as CSV.")
@click.option("--plot-data", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Long-format estimator/metric/value CSV for plotting.")
def cmd_simulate(scenario, m, J, spec_path, reps, seed, threads, no_jackknife, fmt, out,
                 replicates_out, plot_data):
    """Run a simulation study and write the bias/variance/coverage table."""
    try:
        spec = _scenario_spec(scenario, m, J, reps, seed, spec_path)
        result = run_study(spec, threads=threads, jackknife=not no_jackknife)
    except WedgeFEError as exc:
        _fail(exc)
    if fmt == "json":
        text = json.dumps({"schema_version": SCHEMA_VERSION, "spec": spec.to_dict(),
                           "oracle": result.oracle.to_dict(), "rows": result.table},
                          indent=2) + "\n"
    else:
        text = result.table_csv()
    _emit(text, out)
    if replicates_out is not None:
        _emit(result.replicates_csv(), replicates_out)
    if plot_data is not None:
        _emit(result.plot_csv(), plot_data)
    n_fail = sum(r["n_fail"] for r in result.table)
    if n_fail:
        click.echo(f"note: {n_fail} estimator fits failed and were excluded "
                   "(see n_fail column)", err=True)


@main.command("estimand")
@_spec_options
@click.option("--mc-draws", type=int, default=0,
              help="Scenario 4: add a brute-force Monte Carlo check with this many draws.")
@click.option("--seed", type=int, default=12345, help="Seed of the Monte Carlo check.")
@click.option("--format", "fmt", default="json", type=click.Choice(["csv", "json"]))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
def cmd_estimand(scenario, m, J, spec_path, mc_draws, seed, fmt, out):
    """Print the true effects a scenario's estimators target."""
    try:
        spec = _scenario_spec(scenario, m if m is not None else _default_m(scenario), J,
                              2, None, spec_path)
        oracle = oracle_estimands(spec)
        mc = None
        if mc_draws:
            if spec.scenario != 4:
                raise DataError("the Monte Carlo check is available for scenario 4 only")
            mc = scenario4_mc_oracle(spec, n_draws=mc_draws, seed=seed)
    except (WedgeFEError, DesignError) as exc:
        _fail(exc)
    if fmt == "json":
        d = oracle.to_dict()
        if mc is not None:
            d["monte_carlo"] = {
                "n_draws": mc["n_draws"],
                "effects": {str(j): {"estimate": e, "se": s} for j, (e, s) in mc["effects"].items()},
                "P-avg": {"estimate": mc["P-avg"][0], "se": mc["P-avg"][1]},
                "P-ATO": {"estimate": mc["P-ATO"][0], "se": mc["P-ATO"][1]}}
        text = json.dumps(d, indent=2) + "\n"
    else:
        lines = ["quantity,value,numeric_error"]
        lines += [f"effect[{j}],{v:.10g},{oracle.error:.3g}" for j, v in oracle.effects.items()]
        lines.append(f"{oracle.average_label},{oracle.p_avg:.10g},{oracle.error:.3g}")
        lines.append(f"P-ATO,{oracle.p_ato:.10g},{oracle.error:.3g}")
        if mc is not None:
            lines.append(f"MC {oracle.average_label},{mc['P-avg'][0]:.10g},{mc['P-avg'][1]:.3g}")
            lines.append(f"MC P-ATO,{mc['P-ATO'][0]:.10g},{mc['P-ATO'][1]:.3g}")
        text = "\n".join(lines) + "\n"
    _emit(text, out)


def _default_m(scenario):
    # Oracles do not depend on m except through the scenario-1 J preset.
    if scenario is None:
        return None
    return {1: 6, 2: 6, 3: 6, 4: 100}[scenario]


if __name__ == "__main__":
    main()
