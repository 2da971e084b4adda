"""Command-line interface: estimate, simulate, pretrend and generate.

Exit codes: 0 ok, 2 invalid input or config, 3 estimation failure,
4 too many failed Monte Carlo iterations.
"""

import functools
import json
import os
from pathlib import Path

import click
import pandas as pd
from dotenv import load_dotenv

from dgp import Sim1Config, Sim1Scenario, Sim2Config, Sim2Scenario, gen_sim1, gen_sim2
from drdtd import DEFAULT_BOOTSTRAP_B, DEFAULT_MAX_WEIGHT_SHARE, dr_asu, dr_att, dr_td
from errors import ConfigError, EstimationError, PanelValidationError, StudyQualityError
from logging_config import setup_logging
from mcharness import load_study_config, run_study, write_raw_csv, write_report_csv, write_report_json
from paneldata import ColumnMapping, load_panel_csv, save_panel_csv, split_windows, subset, to_two_period, validate_partition
from pretrend import SUBSETS, did_leads, tt_leads, write_leads_csv
from tdiff import dtd_threeway_fe, dtd_two_period, td_threeway_fe, td_two_period

logger = setup_logging("cli")

EXIT_INPUT = 2
EXIT_ESTIMATION = 3
EXIT_STUDY = 4

MODELS = ("td", "dtd", "td3fe", "dtd3fe", "dr-td", "dr-dtd")
NEEDS_INTERFERENCE = ("dtd", "dtd3fe", "dr-dtd")
NEEDS_COVARIATES = ("dr-td", "dr-dtd")
ESTIMATE_COLUMNS = ["estimand", "model", "point", "se", "ci_low", "ci_high", "n_obs", "n_units"]


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    click.get_current_context().exit(code)


def exit_codes(fn):
    """Map the error hierarchy onto the documented exit codes"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (PanelValidationError, ConfigError) as e:
            logger.error(f"Invalid input: {str(e)}")
            _fail(EXIT_INPUT, str(e))
        except EstimationError as e:
            logger.error(f"Estimation failed: {str(e)}")
            _fail(EXIT_ESTIMATION, str(e))
        except StudyQualityError as e:
            logger.error(f"Study failed: {str(e)}")
            _fail(EXIT_STUDY, str(e))

    return wrapper


def resolve_threads(threads):
    """--threads, else TRIDIFF_THREADS, else 1; 0 means every core"""
    if threads is None:
        raw = os.environ.get("TRIDIFF_THREADS")
        if raw is None or raw == "":
            return None
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"TRIDIFF_THREADS must be an integer, got {raw!r}")
    if threads < 0:
        raise ConfigError("threads must be >= 0")
    return threads


def _n_jobs(threads):
    if threads is None:
        return 1
    return -1 if threads == 0 else threads


def _split_list(value):
    if not value:
        return ()
    return tuple(part.strip() for part in value.split(",") if part.strip())


def _sibling(out, suffix):
    path = Path(out)
    return str(path.with_name(f"{path.stem}.{suffix}.csv"))


def mapping_options(fn):
    """Column-mapping flags shared by estimate and pretrend"""
    options = [
        click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False), help="Long-format panel CSV"),
        click.option("--unit", default="unit", show_default=True),
        click.option("--time", "time_col", default="time", show_default=True),
        click.option("--outcome", default="outcome", show_default=True),
        click.option("--s", "s_col", default="s", show_default=True, help="Stratum indicator column"),
        click.option("--g", "g_col", default="g", show_default=True, help="Target-group indicator column"),
        click.option("--i", "i_col", default=None, help="Interference-group indicator column"),
        click.option("--covariates", default=None, help="Comma-separated covariate columns"),
        click.option("--cluster", default=None, help="Cluster column (defaults to the unit)"),
        click.option("--post-from", type=int, default=None, help="First treated period"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _mapping(unit, time_col, outcome, s_col, g_col, i_col, covariates, cluster, post_from):
    return ColumnMapping(
        unit=unit,
        time=time_col,
        outcome=outcome,
        s=s_col,
        g=g_col,
        i=i_col,
        covariates=_split_list(covariates),
        cluster=cluster,
        post_from=post_from,
    )


@click.group()
def cli():
    """Triple-difference and double-triple-difference estimation under spillovers"""
    load_dotenv()


def _collapse(data, post_from, pre_through):
    times = data.time_values
    if len(times) == 2 and post_from is None:
        return data
    if post_from is None:
        raise PanelValidationError(f"panel has {len(times)} periods; --post-from is required")
    pre, post = split_windows(times, post_from, pre_through)
    return to_two_period(data, pre, post)


def run_estimate(data, model, post_from, pre_through, seed, n_jobs, bootstrap_b, max_weight_share):
    """Estimates for one model on a loaded panel"""
    if model == "td":
        return list(td_two_period(_collapse(data, post_from, pre_through)))
    if model == "dtd":
        return list(dtd_two_period(_collapse(data, post_from, pre_through)))
    if model in ("td3fe", "dtd3fe"):
        if post_from is None:
            if len(data.time_values) != 2:
                raise PanelValidationError("--post-from is required for three-way fixed-effects models")
            post_from = data.time_values[1]
        if model == "td3fe":
            return [td_threeway_fe(data, post_from)]
        return list(dtd_threeway_fe(data, post_from))

    data = _collapse(data, post_from, pre_through)
    options = {
        "bootstrap_b": bootstrap_b,
        "seed": seed,
        "n_jobs": n_jobs,
        "max_weight_share": max_weight_share,
    }
    if model == "dr-td":
        return [dr_td(data, **options)]
    return [dr_att(data, **options), dr_asu(data, **options)]


@cli.command("estimate")
@mapping_options
@click.option("--model", type=click.Choice(MODELS), required=True)
@click.option("--pre-through", type=int, default=None, help="Last period of the pre window")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None, help="Bootstrap workers; 0 means all cores")
@click.option("--bootstrap-b", type=int, default=DEFAULT_BOOTSTRAP_B, show_default=True)
@click.option("--max-weight-share", type=float, default=DEFAULT_MAX_WEIGHT_SHARE, show_default=True)
@exit_codes
def cmd_estimate(data_path, unit, time_col, outcome, s_col, g_col, i_col, covariates, cluster,
                 post_from, model, pre_through, out, fmt, seed, threads, bootstrap_b, max_weight_share):
    """Estimate TD/DTD effects on a user panel"""
    if model in NEEDS_INTERFERENCE and not i_col:
        raise PanelValidationError(f"interference column required for model {model} (pass --i)", column="i")
    if model in NEEDS_COVARIATES and not _split_list(covariates):
        raise PanelValidationError(f"covariate columns required for model {model} (pass --covariates)")
    n_jobs = _n_jobs(resolve_threads(threads))

    mapping = _mapping(unit, time_col, outcome, s_col, g_col, i_col, covariates, cluster, post_from)
    data = load_panel_csv(data_path, mapping)
    summary = validate_partition(data)
    missing = summary.dtd_missing if model in NEEDS_INTERFERENCE else summary.td_missing
    if missing:
        logger.warning(f"Model {model} lacks cells: {', '.join(missing)}")

    estimates = run_estimate(
        data, model, post_from, pre_through, seed, n_jobs, bootstrap_b, max_weight_share
    )
    rows = [e.to_dict() for e in estimates]
    if fmt == "json":
        with open(out, "w", encoding="utf-8") as f:
            json.dump({"estimates": rows, "partition": summary.to_dict()}, f, indent=2)
    else:
        pd.DataFrame(rows, columns=ESTIMATE_COLUMNS).to_csv(out, index=False, encoding="utf-8")
        summary.to_frame().to_csv(_sibling(out, "partition"), index=False, encoding="utf-8")
    for e in estimates:
        click.echo(f"{e.model} {e.estimand.value}: {e.point:.6f} (se {e.se:.6f})")


@cli.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the config master_seed")
@click.option("--threads", type=int, default=None, help="Workers; 0 means all cores")
@click.option("--bootstrap-b", type=int, default=None, help="Override the config bootstrap_b")
@click.option("--raw", is_flag=True, help="Also write per-iteration estimates")
@exit_codes
def cmd_simulate(config_path, out, fmt, seed, threads, bootstrap_b, raw):
    """Run a Monte Carlo study from a JSON config"""
    cfg = load_study_config(config_path)
    overrides = cfg.to_dict()
    threads = resolve_threads(threads)
    if threads is not None:
        overrides["threads"] = threads
    if seed is not None:
        overrides["master_seed"] = seed
    if bootstrap_b is not None:
        overrides["bootstrap_b"] = bootstrap_b
    cfg = type(cfg).from_dict(overrides)

    report = run_study(cfg, raw=raw)
    if fmt == "json":
        write_report_json(report, out)
    else:
        write_report_csv(report, out)
    if raw:
        write_raw_csv(report, _sibling(out, "raw"))
    click.echo(f"{len(report.rows)} rows written to {out} ({report.wall_time:.1f}s)")


@cli.command("pretrend")
@mapping_options
@click.option("--design", type=click.Choice(["did", "tt"]), default="tt", show_default=True)
@click.option("--subset", "subset_name", type=click.Choice(sorted(SUBSETS)), default="all", show_default=True)
@click.option("--base", type=int, required=True, help="Base (omitted) pre-policy period")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@exit_codes
def cmd_pretrend(data_path, unit, time_col, outcome, s_col, g_col, i_col, covariates, cluster,
                 post_from, design, subset_name, base, out, fmt):
    """Pre-policy lead tests; tt on the g0 subset uses the interference group"""
    selector = SUBSETS[subset_name]
    group_var = "i" if subset_name == "g0" else "g"
    uses_i = (selector is not None and "i" in selector) or (design == "tt" and group_var == "i")
    if uses_i and not i_col:
        raise PanelValidationError(f"interference column required for subset {subset_name} (pass --i)", column="i")

    mapping = _mapping(unit, time_col, outcome, s_col, g_col, i_col, covariates, cluster, post_from)
    data = load_panel_csv(data_path, mapping)
    if selector is not None:
        data = subset(data, selector)

    if design == "did":
        result = did_leads(data, base, post_from=post_from)
    else:
        result = tt_leads(data, base, group_var=group_var, post_from=post_from)

    frame = result.to_frame()
    if fmt == "json":
        with open(out, "w", encoding="utf-8") as f:
            json.dump({"design": design, "subset": subset_name, "base": base,
                       "rows": frame.to_dict(orient="records")}, f, indent=2)
    else:
        write_leads_csv(result, out)
    if result.joint is not None:
        click.echo(f"joint {result.joint_family}: W={result.joint.statistic:.4f}, p={result.joint.p_value:.4f}")
    else:
        click.echo(f"joint test unavailable ({result.joint_note})")


@cli.command("generate")
@click.option("--design", type=click.Choice(["sim1", "sim2"]), default="sim1", show_default=True)
@click.option("--scenario", default="SUTVA", show_default=True, help="sim1: SUTVA/S1/S2/S2A; sim2: SUTVA/SPILL")
@click.option("--n-units", type=int, default=2000, show_default=True)
@click.option("--share", type=float, default=None, help="Interference share of each stratum's controls")
@click.option("--delta", type=float, default=None)
@click.option("--psi1", type=float, default=None, help="sim1 psi1, or sim2 psi")
@click.option("--psi2", type=float, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@exit_codes
def cmd_generate(design, scenario, n_units, share, delta, psi1, psi2, seed, out):
    """Write a simulated panel as a long CSV"""
    overrides = {"n_units": n_units, "seed": seed}
    if share is not None:
        overrides["interference_share"] = share
    if delta is not None:
        overrides["delta"] = delta
    try:
        if design == "sim1":
            if psi1 is not None:
                overrides["psi1"] = psi1
            if psi2 is not None:
                overrides["psi2"] = psi2
            panel = gen_sim1(Sim1Config(**overrides), Sim1Scenario(scenario.upper()))
        else:
            if psi1 is not None:
                overrides["psi"] = psi1
            panel = gen_sim2(Sim2Config(**overrides), Sim2Scenario(scenario.upper()))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"unknown scenario {scenario!r} for {design}")
    save_panel_csv(panel.data, out)
    click.echo(f"{panel.data.n_units} units x {len(panel.data.time_values)} periods written to {out}")


if __name__ == "__main__":
    cli()
