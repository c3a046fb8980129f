"""Command line front end: fit, summarize, ppc, simulate, diagnose.

Settings resolve as package defaults, then the --config JSON document,
then explicitly given flags.  All randomness flows from --seed; chains
and predictive draws derive child seeds by SeedSequence spawning.

Exit codes are a stable contract: 0 success, 2 input or validation
error, 3 numerical or sampler failure.

Directory-creating commands (fit, simulate, ppc) write a manifest.json
recording the config snapshot, input digests, seed and artifact list.
manifest.json carries a wall-clock timestamp, so it is the one output
that is not byte-stable across reruns; set SOURCE_DATE_EPOCH to pin it.
The RACEMIX_OUT_ROOT environment variable sets the default output root
when --out is omitted.
"""
from __future__ import annotations

import datetime
import functools
import glob
import hashlib
import json
import os
import sys

import click
import numpy as np

from . import __version__
from .diagnostics import (
    autocorrelation,
    multichain_ess,
    split_rhat,
    summarize,
    write_summary_csv,
    write_trace_csv,
)
from .ingest import (
    DataError,
    build_design,
    parse_races,
    parse_rainfall,
    parse_results,
)
from .model import (
    RESPONSE_LOG_PACE,
    RESPONSE_LOG_TIME,
    ConfigError,
    ModelConfig,
)
from .predictive import (
    SyntheticSpec,
    posterior_predictive_race,
    ppc_report,
    simulate_dataset,
    write_ppc_csv,
)
from .sampler import SamplerError, load_chain, run_chains, save_chain

ENV_OUT_ROOT = "RACEMIX_OUT_ROOT"

RESPONSE_FLAGS = {"log-time": RESPONSE_LOG_TIME, "log-pace": RESPONSE_LOG_PACE}


def _cli_errors(fn):
    """Map exceptions to the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SamplerError as exc:
            click.echo(f"sampler error: {exc}", err=True)
            sys.exit(3)
        except (DataError, ConfigError, ValueError, KeyError, OSError,
                json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
    return wrapper


def _out_root() -> str:
    return os.environ.get(ENV_OUT_ROOT, ".")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        dt = datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc)
    else:
        dt = datetime.datetime.now(datetime.timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def _write_manifest(out_dir, command, config, seed, inputs, artifacts) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "created_utc": _timestamp(),
        "seed": seed,
        "config": config,
        "inputs": {role: {"path": os.path.abspath(p), "sha256": _sha256(p)}
                   for role, p in inputs.items()},
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(fit_dir) -> dict:
    path = os.path.join(fit_dir, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no manifest.json in {fit_dir}; is this a fit directory?")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _explicit_params(ctx) -> set:
    """Names of parameters the user actually supplied on this invocation."""
    from click.core import ParameterSource

    explicit = set()
    for name in ctx.params:
        src = ctx.get_parameter_source(name)
        if src in (ParameterSource.COMMANDLINE, ParameterSource.ENVIRONMENT):
            explicit.add(name)
    return explicit


def _merged_config(ctx, config_path, response, windspeed, seed, burn_in,
                   iterations, thin, d_bar, w_bar) -> ModelConfig:
    """defaults < config file < explicit flags."""
    doc = ModelConfig().to_dict()
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        for key, value in user.items():
            if key in ("priors", "mcmc"):
                if not isinstance(value, dict):
                    raise ConfigError(f"config {key!r} must be an object")
                doc[key].update(value)
            else:
                doc[key] = value
        if isinstance(doc.get("response"), str):
            doc["response"] = doc["response"].replace("-", "_")
    explicit = _explicit_params(ctx)
    if "response" in explicit:
        doc["response"] = RESPONSE_FLAGS[response]
    if "windspeed" in explicit:
        doc["include_windspeed"] = windspeed
    if "seed" in explicit:
        doc["mcmc"]["seed"] = seed
    if "burn_in" in explicit:
        doc["mcmc"]["burn_in"] = burn_in
    if "iterations" in explicit:
        doc["mcmc"]["iterations"] = iterations
    if "thin" in explicit:
        doc["mcmc"]["thin"] = thin
    if "d_bar" in explicit:
        doc["d_bar"] = d_bar
    if "w_bar" in explicit:
        doc["w_bar"] = w_bar
    return ModelConfig.from_dict(doc)


def _chain_paths(out_dir, index, n_chains):
    if n_chains == 1:
        return os.path.join(out_dir, "chain.csv"), os.path.join(out_dir, "metadata.json")
    return (os.path.join(out_dir, f"chain_{index:02d}.csv"),
            os.path.join(out_dir, f"metadata_{index:02d}.json"))


def _find_chains(fit_dir):
    """All (chain CSV, metadata JSON) pairs in a fit directory."""
    single = os.path.join(fit_dir, "chain.csv")
    if os.path.exists(single):
        return [(single, os.path.join(fit_dir, "metadata.json"))]
    found = sorted(glob.glob(os.path.join(fit_dir, "chain_*.csv")))
    pairs = []
    for chain_path in found:
        suffix = os.path.basename(chain_path)[len("chain_"):-len(".csv")]
        meta_path = os.path.join(fit_dir, f"metadata_{suffix}.json")
        if os.path.exists(meta_path):
            pairs.append((chain_path, meta_path))
    if not pairs:
        raise DataError(f"no chain CSVs found in {fit_dir}")
    return pairs


@click.group()
@click.version_option(version=__version__, prog_name="racemix")
def main():
    """Bayesian mixed-effects modelling of cross-country race times."""


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False),
              help="results.csv (athlete_id,course,season,sex,finish_time_min,race_month)")
@click.option("--covariates", required=True, type=click.Path(exists=True, dir_okay=False),
              help="races.csv (course,season,distance_miles,windspeed,race_month)")
@click.option("--rainfall", required=True, type=click.Path(exists=True, dir_okay=False),
              help="rainfall.csv (month,rainfall_mm)")
@click.option("--sex", required=True, type=click.Choice(["M", "F"]))
@click.option("--response", type=click.Choice(sorted(RESPONSE_FLAGS)),
              default="log-time", show_default=True)
@click.option("--windspeed/--no-windspeed", default=False, show_default=True,
              help="Include the centred windspeed term.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--burn-in", type=int, default=10_000, show_default=True)
@click.option("--iterations", type=int, default=1_000_000, show_default=True)
@click.option("--thin", type=int, default=100, show_default=True)
@click.option("--chains", type=click.IntRange(min=1), default=1, show_default=True,
              help="Independent chains run concurrently with spawned seeds.")
@click.option("--workers", type=click.IntRange(min=1), default=None,
              help="Process pool size for --chains > 1 (default: one per chain).")
@click.option("--d-bar", type=float, default=None,
              help="Override the distance centering constant.")
@click.option("--w-bar", type=float, default=None,
              help="Override the windspeed centering constant.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON config document (defaults < config < flags).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help=f"Output directory [default: $%s/fit or ./fit]" % ENV_OUT_ROOT)
@click.pass_context
@_cli_errors
def fit(ctx, data, covariates, rainfall, sex, response, windspeed, seed, burn_in,
        iterations, thin, chains, workers, d_bar, w_bar, config_path, out_dir):
    """Fit the model by MCMC and write chain, summary and manifest files."""
    config = _merged_config(ctx, config_path, response, windspeed, seed,
                            burn_in, iterations, thin, d_bar, w_bar)
    if out_dir is None:
        out_dir = os.path.join(_out_root(), "fit")
    os.makedirs(out_dir, exist_ok=True)

    observations = parse_results(data, sex)
    contexts = parse_races(covariates)
    rain = parse_rainfall(rainfall)
    design = build_design(observations, contexts, rain, config)
    click.echo(f"fitting {design.n_obs} observations: {len(design.athletes)} athletes, "
               f"{len(design.courses)} courses, {len(design.seasons)} seasons; "
               f"{chains} chain(s)")

    outputs = run_chains(design, config, chains, max_workers=workers)

    artifacts = ["manifest.json"]
    per_chain_summaries = []
    for i, chain in enumerate(outputs, start=1):
        chain_path, meta_path = _chain_paths(out_dir, i, chains)
        save_chain(chain, chain_path, meta_path)
        summaries = summarize(chain)
        per_chain_summaries.append(summaries)
        summary_path = (os.path.join(out_dir, "summary.csv") if chains == 1
                        else os.path.join(out_dir, f"summary_{i:02d}.csv"))
        write_summary_csv(summaries, summary_path)
        artifacts += [os.path.basename(p) for p in (chain_path, meta_path, summary_path)]

    if chains > 1:
        cross_path = os.path.join(out_dir, "crosschain.csv")
        with open(cross_path, "w", encoding="utf-8", newline="") as fh:
            fh.write("parameter,split_rhat,ess_total\n")
            for j, name in enumerate(outputs[0].columns):
                cols = [c.draws[:, j] for c in outputs]
                if all(np.all(col == col[0]) for col in cols):
                    rhat, ess = 1.0, float(sum(c.size for c in cols))
                else:
                    rhat = split_rhat(cols)
                    ess = multichain_ess(cols)
                fh.write(f"{name},{repr(rhat)},{repr(ess)}\n")
        artifacts.append("crosschain.csv")

    snapshot = {"model": config.to_dict(), "sex": sex, "chains": chains}
    _write_manifest(out_dir, "fit", snapshot, config.mcmc.seed,
                    {"data": data, "covariates": covariates, "rainfall": rainfall},
                    artifacts)
    click.echo(f"wrote {out_dir}: {outputs[0].n_stored} stored draws x "
               f"{len(outputs[0].columns)} parameters per chain")


@main.command("summarize")
@click.option("--fit", "fit_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory produced by `racemix fit`.")
@click.option("--index", type=click.IntRange(min=1), default=1, show_default=True,
              help="Which chain to summarize in a multi-chain fit.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="summary.csv path [default: the fit directory's summary.csv]")
@_cli_errors
def summarize_cmd(fit_dir, index, out_path):
    """Recompute posterior summaries from a stored chain."""
    pairs = _find_chains(fit_dir)
    if index > len(pairs):
        raise DataError(f"chain index {index} out of range; found {len(pairs)} chain(s)")
    chain = load_chain(*pairs[index - 1])
    summaries = summarize(chain)
    if out_path is None:
        base = "summary.csv" if len(pairs) == 1 else f"summary_{index:02d}.csv"
        out_path = os.path.join(fit_dir, base)
    write_summary_csv(summaries, out_path)
    scalar = {"intercept", "gamma_dist", "lambda_wind", "rho_cur", "rho_prev",
              "m_rho", "phi", "tau_obs", "tau_athlete", "tau_course", "tau_season"}
    click.echo(f"{'parameter':<12} {'mean':>12} {'median':>12} "
               f"{'ci95_low':>12} {'ci95_high':>12} {'ess':>9}")
    shown = 0
    for s in summaries:
        if s.name in scalar:
            click.echo(f"{s.name:<12} {s.mean:>12.6f} {s.median:>12.6f} "
                       f"{s.ci95_low:>12.6f} {s.ci95_high:>12.6f} {s.ess:>9.1f}")
            shown += 1
    click.echo(f"(+ {len(summaries) - shown} effect rows) wrote {out_path}")


def _reingest_from_manifest(fit_dir, manifest, meta, data, covariates, rainfall):
    """Rebuild the design a fit used, preferring explicit path overrides.

    Without overrides the manifest's recorded paths are reused and their
    digests must still match.  Centering constants come from the chain
    metadata so the design matches the stored draws exactly.
    """
    roles = {"data": data, "covariates": covariates, "rainfall": rainfall}
    paths = {}
    for role, override in roles.items():
        if override is not None:
            paths[role] = override
            continue
        recorded = manifest.get("inputs", {}).get(role)
        if recorded is None:
            raise DataError(f"manifest records no {role!r} input; pass --{role}")
        path = recorded["path"]
        if not os.path.exists(path):
            raise DataError(f"recorded {role} input {path} no longer exists; "
                            f"pass --{role}")
        digest = _sha256(path)
        if digest != recorded["sha256"]:
            raise DataError(f"{role} input {path} changed since the fit "
                            f"(sha256 mismatch); pass --{role} to override")
        paths[role] = path

    model_doc = manifest.get("config", {}).get("model", {})
    config = ModelConfig.from_dict(model_doc) if model_doc else ModelConfig()
    config.response = meta.response
    config.include_windspeed = meta.include_windspeed
    config.d_bar = meta.d_bar
    config.w_bar = meta.w_bar

    sex = manifest.get("config", {}).get("sex")
    if sex is None:
        raise DataError("manifest does not record the fitted sex")
    observations = parse_results(paths["data"], sex)
    contexts = parse_races(paths["covariates"])
    rain = parse_rainfall(paths["rainfall"])
    design = build_design(observations, contexts, rain, config)
    return design, observations, paths


def _parse_race_filter(races_arg, design):
    if races_arg.strip().lower() == "all":
        return design.races()
    wanted = []
    for item in races_arg.split(","):
        item = item.strip()
        if not item or ":" not in item:
            raise DataError(f"bad race filter {item!r}; expected Course:Season")
        course, season = item.rsplit(":", 1)
        wanted.append((course.strip(), season.strip()))
    # validate against the design up front (race_mask raises with the list)
    for course, season in wanted:
        design.race_mask(course, season)
    return wanted


@main.command()
@click.option("--fit", "fit_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--races", default="all", show_default=True,
              help='"all" or a comma list of Course:Season filters.')
@click.option("--index", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for the predictive noise.")
@click.option("--bins", type=click.IntRange(min=2), default=30, show_default=True,
              help="Histogram bin count per race.")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Override the manifest-recorded results.csv.")
@click.option("--covariates", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--rainfall", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Output directory [default: <fit>/ppc]")
@_cli_errors
def ppc(fit_dir, races, index, seed, bins, data, covariates, rainfall, out_dir):
    """Posterior predictive checks: per-race five-number summaries."""
    pairs = _find_chains(fit_dir)
    if index > len(pairs):
        raise DataError(f"chain index {index} out of range; found {len(pairs)} chain(s)")
    chain = load_chain(*pairs[index - 1])
    manifest = _read_manifest(fit_dir)
    design, observations, paths = _reingest_from_manifest(
        fit_dir, manifest, chain.meta, data, covariates, rainfall)

    wanted = _parse_race_filter(races, design)
    selected = [o for o in observations if (o.course, o.season) in set(wanted)]
    if not selected:
        raise DataError("race filter matched no observations")

    if out_dir is None:
        out_dir = os.path.join(fit_dir, "ppc")
    os.makedirs(out_dir, exist_ok=True)

    master = np.random.default_rng(seed)
    report_rng, hist_rng = master.spawn(2)
    reports = ppc_report(chain, design, selected, report_rng)
    ppc_path = os.path.join(out_dir, "ppc.csv")
    write_ppc_csv(reports, ppc_path)

    hist_path = os.path.join(out_dir, "histograms.csv")
    ordered = [(r.course, r.season) for r in reports]
    children = hist_rng.spawn(len(ordered))
    obs_by_race = {}
    for o in selected:
        obs_by_race.setdefault((o.course, o.season), []).append(o.finish_time)
    with open(hist_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("course,season,bin_left,bin_right,predicted_count,observed_count\n")
        for (course, season), child in zip(ordered, children):
            pred = posterior_predictive_race(chain, design, course, season, child)
            obs = np.asarray(obs_by_race[(course, season)], dtype=float)
            lo = min(float(pred.min()), float(obs.min()))
            hi = max(float(pred.max()), float(obs.max()))
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, bins + 1)
            pred_counts, _ = np.histogram(pred.ravel(), bins=edges)
            obs_counts, _ = np.histogram(obs, bins=edges)
            for b in range(bins):
                fh.write(f"{course},{season},{repr(float(edges[b]))},"
                         f"{repr(float(edges[b + 1]))},{int(pred_counts[b])},"
                         f"{int(obs_counts[b])}\n")

    flagged = sum(1 for r in reports if r.low_power)
    _write_manifest(out_dir, "ppc",
                    {"races": races, "bins": bins, "chain_index": index,
                     "fit_dir": os.path.abspath(fit_dir)},
                    seed, paths, ["manifest.json", "ppc.csv", "histograms.csv"])
    click.echo(f"wrote {ppc_path}: {len(reports)} race(s), "
               f"{flagged} flagged low-power")


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="SyntheticSpec JSON (defaults used when omitted).")
@click.option("--seed", type=int, default=None,
              help="Override the spec's seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help=f"Output directory [default: $%s/synthetic or ./synthetic]" % ENV_OUT_ROOT)
@_cli_errors
def simulate(spec_path, seed, out_dir):
    """Simulate a synthetic dataset in the ingest CSV schemas."""
    if spec_path is not None:
        with open(spec_path, "r", encoding="utf-8") as fh:
            spec = SyntheticSpec.from_dict(json.load(fh))
    else:
        spec = SyntheticSpec()
    if seed is not None:
        spec.seed = seed
    spec.validate()

    if out_dir is None:
        out_dir = os.path.join(_out_root(), "synthetic")
    data = simulate_dataset(spec)
    files = data.write_csv(out_dir)
    truth_path = os.path.join(out_dir, "truth.json")
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump({"truth": data.truth.to_dict(), "sex": data.sex,
                   "response": data.response, "seed": spec.seed},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    inputs = {} if spec_path is None else {"spec": spec_path}
    _write_manifest(out_dir, "simulate", {"spec": spec.to_dict()}, spec.seed,
                    inputs, files + ["truth.json", "manifest.json"])
    click.echo(f"wrote {out_dir}: {len(data.observations)} observations over "
               f"{len(data.contexts)} races")


@main.command()
@click.option("--fit", "fit_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--index", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--max-lag", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--out", "out_root", type=click.Path(file_okay=False), default=None,
              help="Output directory [default: the fit directory]")
@_cli_errors
def diagnose(fit_dir, index, max_lag, out_root):
    """Export tidy traces and per-parameter ESS/autocorrelation tables."""
    pairs = _find_chains(fit_dir)
    if index > len(pairs):
        raise DataError(f"chain index {index} out of range; found {len(pairs)} chain(s)")
    chain = load_chain(*pairs[index - 1])
    if out_root is None:
        out_root = fit_dir
    os.makedirs(out_root, exist_ok=True)

    trace_path = os.path.join(out_root, "trace.csv" if len(pairs) == 1
                              else f"trace_{index:02d}.csv")
    write_trace_csv(chain, trace_path)

    lag = min(max_lag, chain.n_stored - 1)
    diag_path = os.path.join(out_root, "diagnostics.csv" if len(pairs) == 1
                             else f"diagnostics_{index:02d}.csv")
    summaries = summarize(chain)
    with open(diag_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("parameter,ess,rho1,degenerate\n")
        for s in summaries:
            col = chain.column(s.name)
            if s.degenerate or lag < 1:
                rho1 = 0.0
            else:
                rho1 = float(autocorrelation(col, lag)[1])
            fh.write(f"{s.name},{repr(s.ess)},{repr(rho1)},"
                     f"{'1' if s.degenerate else '0'}\n")
    click.echo(f"wrote {trace_path} and {diag_path} "
               f"({chain.n_stored} draws, {len(chain.columns)} parameters)")


if __name__ == "__main__":
    main()
