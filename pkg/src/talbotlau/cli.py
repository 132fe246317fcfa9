"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 data-format
error.  Relative output paths are resolved against ``$TALBOTLAU_OUTPUT_DIR``
when it is set.
"""
import json
import math
import os
import sys
import warnings

import click
import numpy as np

from . import constants as const
from .analysis import FitError, fit_fringe, fit_velocity
from .config import ConfigError, RunConfig, parse_quantity
from .ensemble import predict, visibility_map, visibility_vs_power
from .macroscopicity import GridBoundaryWarning, MmmParams, macroscopicity
from .physics import (
    DegenerateSignalError,
    DomainError,
    grating_interaction,
    ionization_threshold,
    talbot_length,
    talbot_mass,
)
from .records import (
    FRINGE_FORMAT,
    TOF_FORMAT,
    DataFormatError,
    dump_fringe_scans,
    dump_tof_traces,
    load_records,
    write_csv,
    write_json,
)
from .report import macroscopicity_report
from .synth import SeedRequiredError, synth_dataset, synth_power_scan, synth_tof_trace

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_FORMAT = 0, 1, 2, 3
OUTPUT_ENV = "TALBOTLAU_OUTPUT_DIR"


class CliFailure(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _out(path):
    base = os.environ.get(OUTPUT_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _config(path, overrides):
    cfg = RunConfig.load(path) if path else RunConfig.default()
    return cfg.with_overrides(overrides) if overrides else cfg


def config_options(f):
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a config field, e.g. setup.g2.power='20 mW'.")(f)
    f = click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False),
                     help="YAML run configuration (defaults built in).")(f)
    return f


def _meta_path(path):
    root, _ = os.path.splitext(path)
    return root + ".meta.json"


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Talbot-Lau cluster interferometry toolkit."""


# ---------------------------------------------------------------------------
# predict


@cli.command("predict")
@click.argument("mode", type=click.Choice(["visibility", "transmission", "power-scan", "map"]))
@config_options
@click.option("-o", "--output", help="Output file (default depends on mode).")
def predict_cmd(mode, config_path, overrides, output):
    """Model predictions: operating point, G2 power curves or a mass x power map."""
    cfg = _config(config_path, overrides)
    setup, material, ens = cfg.setup(), cfg.material(), cfg.ensemble()
    dg = cfg.digest()
    if mode == "visibility":
        res = predict(setup, material, ens, cfg.contrast_scale, cfg.l_max)
        payload = {
            "config_digest": dg,
            "effective_mass_kDa": ens.effective_mass() / const.kDa,
            "S0_mean": res.S0_mean,
            "V_quantum": res.V_quantum,
            "V_classical": res.V_classical,
            "V_quantum_ideal": res.V_quantum_ideal,
            "V_classical_ideal": res.V_classical_ideal,
            "contrast_scale": res.contrast_scale,
        }
        path = _out(output or "prediction.json")
        write_json(path, payload)
    elif mode in ("transmission", "power-scan"):
        curve = visibility_vs_power(setup, material, ens, cfg.p2_grid(), "both", cfg.contrast_scale)
        rows = list(curve.rows())
        cols = ["P2_mW", "transmission"] if mode == "transmission" else \
            ["P2_mW", "V_quantum", "V_classical", "transmission"]
        path = _out(output or mode.replace("-", "_") + ".csv")
        write_csv(path, rows, cols)
        write_json(_meta_path(path), {"config_digest": dg, "columns": cols,
                                      "contrast_scale": cfg.contrast_scale})
    else:
        m = cfg.values["map"]
        map_setup = setup.with_powers(p1=m["p1"], p3=m["p3"])
        masses, p2 = cfg.mass_grid(), cfg.p2_grid("map")
        vq = visibility_map(masses, p2, map_setup, material, ens, "quantum")
        vc = visibility_map(masses, p2, map_setup, material, ens, "classical")
        rows = []
        for i, mass in enumerate(masses):
            for j, p in enumerate(p2):
                ok = bool(vq.valid[i, j] and vc.valid[i, j])
                rows.append({
                    "mass_kDa": mass / const.kDa,
                    "P2_mW": p * 1e3,
                    "V_quantum": vq.V[i, j] if ok else "",
                    "V_classical": vc.V[i, j] if ok else "",
                    "delta_V": vq.V[i, j] - vc.V[i, j] if ok else "",
                    "valid": ok,
                })
        cols = ["mass_kDa", "P2_mW", "V_quantum", "V_classical", "delta_V", "valid"]
        path = _out(output or "map.csv")
        write_csv(path, rows, cols)
        write_json(_meta_path(path), {
            "config_digest": dg,
            "columns": cols,
            "contrast_scale_applied": False,
            "v_mean_m_per_s": ens.v_mean,
            "contours": {
                "talbot_length_equals_L_kDa": vq.talbot_mass / const.kDa,
                "half_talbot_length_equals_L_kDa": vq.half_talbot_mass / const.kDa,
            },
        })
    click.echo(path)


# ---------------------------------------------------------------------------
# synthesize


def _length_option(text):
    return parse_quantity(text, "nm", "--hbar-over-sigma-q")


@cli.command("synthesize")
@click.argument("what", type=click.Choice(["fringe", "power-scan", "tof"]))
@config_options
@click.option("--seed", type=int, default=None, help="Random seed (required unless set in the config).")
@click.option("-o", "--output", help="Output JSON file.")
@click.option("--tau-e", type=float, default=None, help="Inject an MMM with this classicalization time (s).")
@click.option("--hbar-over-sigma-q", default="10 nm", show_default=True,
              help="MMM length scale hbar/sigma_q (with unit).")
@click.option("--asimov", is_flag=True, help="Use rounded expected counts instead of Poisson draws.")
def synthesize_cmd(what, config_path, overrides, seed, output, tau_e, hbar_over_sigma_q, asimov):
    """Synthetic fringe scans, G2 power scans or TOF traces."""
    cfg = _config(config_path, overrides)
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise SeedRequiredError("missing seed: pass --seed or set 'seed' in the config")
    dg = cfg.digest()
    if what == "fringe":
        model = cfg.macro_model()
        ctx = model.context(cfg.setup().powers, cfg.ensemble().mass_center)
        params = None if tau_e is None else MmmParams.from_length(tau_e, _length_option(hbar_over_sigma_q))
        scans = synth_dataset(ctx, cfg.values["scan"]["total_points"], cfg.protocol(), cfg.noise(),
                              seed=seed, rate_range=cfg.rate_range(), params=params,
                              contrast_scale=cfg.contrast_scale, asimov=asimov)
        extra = {"truth": {"contrast_scale": cfg.contrast_scale,
                           "tau_e_s": tau_e,
                           "hbar_over_sigma_q_m": None if params is None else const.hbar / params.sigma_q}}
        path = _out(output or "fringe_scans.json")
        dump_fringe_scans(path, scans, dg, seed, extra)
    elif what == "power-scan":
        ps = cfg.values["power_scan"]
        scans = synth_power_scan(cfg.p2_grid(), cfg.setup(), cfg.material(), cfg.ensemble(),
                                 rate0=ps["rate0"], protocol=cfg.protocol(), noise=cfg.noise(),
                                 seed=seed, scans_per_point=ps["scans_per_point"],
                                 contrast_scale=cfg.contrast_scale)
        path = _out(output or "power_scan.json")
        dump_fringe_scans(path, scans, dg, seed)
    else:
        t = cfg.values["tof"]
        ens = cfg.ensemble()
        trace = synth_tof_trace(ens.v_mean, ens.v_sigma, t["flight_path"], t["chopper_open"],
                                t["entrance_voltage"], t["mass"], t["counts_total"], seed=seed,
                                charge_state=t["charge_state"], bins=t["bins"])
        path = _out(output or "tof.json")
        dump_tof_traces(path, [trace], dg, seed)
    click.echo(path)


# ---------------------------------------------------------------------------
# analyze / macroscopicity


def _load_many(files, expected_format, force):
    if not files:
        raise CliFailure("no input files given", EXIT_VALIDATION)
    records, digests, data_digests = [], set(), []
    for f in files:
        fmt, recs, doc = load_records(f)
        if fmt != expected_format:
            raise DataFormatError(f"expected format {expected_format!r}, found {fmt!r}", f, 0)
        digests.add(doc.get("config_digest"))
        if "data_digest" in doc:
            data_digests.append(doc["data_digest"])
        records.extend((f, i, r) for i, r in enumerate(recs))
    if len(digests) > 1 and not force:
        raise CliFailure("input files were produced with different configurations "
                         "(use --force to combine them)", EXIT_VALIDATION)
    return records, digests, data_digests


@cli.command("analyze")
@click.argument("task", type=click.Choice(["fringe-fit", "tof-fit"]))
@click.argument("files", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", help="Output JSON file.")
@click.option("--keep-going", is_flag=True, help="Record fit errors and continue.")
@click.option("--force", is_flag=True, help="Accept inputs with differing config digests.")
@click.option("--subtract-dark", is_flag=True, help="Fringe fits: subtract the recorded dark rate.")
def analyze_cmd(task, files, output, keep_going, force, subtract_dark):
    """Fit every record in the input files; one result row per record."""
    fmt = FRINGE_FORMAT if task == "fringe-fit" else TOF_FORMAT
    records, digests, data_digests = _load_many(files, fmt, force)
    rows, failures = [], 0
    for f, i, rec in records:
        row = {"file": os.path.basename(f), "index": i}
        try:
            if task == "fringe-fit":
                row.update(fit_fringe(rec, subtract_dark=subtract_dark).as_dict())
            else:
                row.update(fit_velocity(rec).as_dict())
        except (FitError, DegenerateSignalError, ValueError, FloatingPointError) as exc:
            if not keep_going:
                raise CliFailure(f"{f} record {i}: {exc}", EXIT_NUMERIC) from None
            failures += 1
            row["error"] = str(exc)
        rows.append(row)
    payload = {
        "task": task,
        "config_digests": sorted(d for d in digests if d),
        "data_digests": sorted(set(data_digests)),
        "results": rows,
        "n_failed": failures,
    }
    path = _out(output or task.replace("-", "_") + ".json")
    write_json(path, payload)
    click.echo(path)


@cli.command("macroscopicity")
@click.argument("files", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@config_options
@click.option("-o", "--output", help="Output report (JSON).")
@click.option("--acknowledge-boundary", is_flag=True,
              help="Exit 0 even if posterior mass sits at the grid boundary.")
@click.option("--force", is_flag=True, help="Accept data from a different config.")
@click.option("--no-convergence", is_flag=True, help="Skip the quantile-vs-data-count curve.")
def macroscopicity_cmd(files, config_path, overrides, output, acknowledge_boundary, force, no_convergence):
    """Bayesian macroscopicity of a set of fringe-scan files."""
    cfg = _config(config_path, overrides)
    records, digests, data_digests = _load_many(files, FRINGE_FORMAT, force)
    if not force and digests != {cfg.digest()}:
        raise CliFailure("data were produced with a different configuration than the one "
                         "given (use --force to proceed)", EXIT_VALIDATION)
    scans = [r for _, _, r in records]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GridBoundaryWarning)
        res = macroscopicity(scans, cfg.macro_model(), cfg.sigma_q_grid(), cfg.log_tau_grid(),
                             cfg.quantile, convergence=not no_convergence)
    if not math.isfinite(res.mu):
        raise CliFailure("macroscopicity is not finite", EXIT_NUMERIC)
    payload = macroscopicity_report(res, cfg, data_digests, len(scans), cfg.values["macro"]["nuisance"])
    path = _out(output or "macroscopicity.json")
    write_json(path, payload)
    click.echo(path)
    click.echo(f"mu = {res.mu:.3f}  (hbar/sigma_q = {res.argmax_hbar_over_sigma_q * 1e9:.3g} nm)")
    if res.boundary_warning and not acknowledge_boundary:
        raise CliFailure("posterior mass at the log-tau grid boundary "
                         "(widen the grid or pass --acknowledge-boundary)", EXIT_NUMERIC)


# ---------------------------------------------------------------------------
# constants


@cli.command("constants")
@config_options
def constants_cmd(config_path, overrides):
    """Print constants and derived species/grating values for audit."""
    cfg = _config(config_path, overrides)
    material, setup, ens = cfg.material(), cfg.setup(), cfg.ensemble()
    m_eff = ens.effective_mass()
    sp = material.at_mass(m_eff)
    gratings = {}
    for name, g in zip(("g1", "g2", "g3"), setup.gratings):
        gi = grating_interaction(sp, g, ens.v_mean)
        gratings[name] = {"power_W": g.power, "n0": gi.n0, "phi0_rad": gi.phi0}
    payload = {
        "constants": const.CODATA2018.as_dict(),
        "config_digest": cfg.digest(),
        "species_at_effective_mass": {
            "mass_kDa": m_eff / const.kDa,
            "n_atoms": sp.n_atoms,
            "radius_m": sp.radius,
            "polarizability_C_m2_per_V": sp.polarizability,
            "sigma_ion_m2": sp.sigma_ion,
            "ionization_thresholds_eV": [ionization_threshold(sp, q) / const.eV for q in range(3)],
        },
        "gratings_at_v_mean": gratings,
        "period_m": setup.period,
        "talbot_length_m": float(talbot_length(m_eff, ens.v_mean, setup.period)),
        "talbot_mass_kDa": float(talbot_mass(setup.separation, ens.v_mean, setup.period)) / const.kDa,
        "half_talbot_mass_kDa": float(talbot_mass(2 * setup.separation, ens.v_mean, setup.period)) / const.kDa,
    }
    click.echo(json.dumps(payload, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------


def _classify(exc):
    if isinstance(exc, CliFailure):
        return exc.code
    if isinstance(exc, DataFormatError):
        return EXIT_FORMAT
    if isinstance(exc, (DegenerateSignalError, FitError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, DomainError, SeedRequiredError, ValueError, OSError)):
        return EXIT_VALIDATION
    return None


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="talbotlau", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_VALIDATION
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except Exception as exc:
        code = _classify(exc)
        if code is None:
            raise
        click.echo(f"error: {exc}", err=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
