"""JSON report for a macroscopicity run."""
from importlib import resources
import json
import math

from . import __version__
from . import _kernels
from . import constants as const
from .macroscopicity import convergence_stable

REPORT_FORMAT = "talbotlau.macroscopicity-report/1"


def report_schema():
    text = resources.files("talbotlau").joinpath("data/macroscopicity_report.schema.json").read_text()
    return json.loads(text)


def macroscopicity_report(result, config, data_digests, n_scans, nuisance, refine=True):
    post = result.posterior
    grid = result.grid
    table = [
        {
            "hbar_over_sigma_q_m": const.hbar / sq,
            "sigma_q_kg_m_per_s": float(sq),
            "log10_tau_m": float(tm),
            "tau_m_s": 10.0 ** float(tm),
        }
        for sq, tm in zip(result.sigma_q_grid, result.tau_m_log10)
    ]
    gc = result.gaussian_check
    return {
        "format": REPORT_FORMAT,
        "software": {"package": "talbotlau", "version": __version__, "backend": _kernels.BACKEND},
        "config_digest": config.digest(),
        "data_digests": sorted(set(data_digests)),
        "n_scans": n_scans,
        "n_data": result.n_data,
        "mu": result.mu,
        "tau_m_s": 10.0 ** result.mu,
        "argmax_hbar_over_sigma_q_m": result.argmax_hbar_over_sigma_q,
        "argmax_sigma_q_kg_m_per_s": result.argmax_sigma_q,
        "quantile_level": result.quantile_level,
        "tau_m_table": table,
        "prior": {
            "kind": "uniform in log10(tau_e / 1 s)",
            "support_log10_s": [grid.start, grid.stop],
        },
        "grid": {
            "log10_tau_min": grid.start,
            "log10_tau_max": grid.stop,
            "tau_points": grid.points,
            "sigma_q_points": int(len(result.sigma_q_grid)),
            "hbar_over_sigma_q_min_m": float(const.hbar / max(result.sigma_q_grid)),
            "hbar_over_sigma_q_max_m": float(const.hbar / min(result.sigma_q_grid)),
            "refined": bool(refine),
        },
        "likelihood": {
            "visibility_model": "ideal quantum prediction; contrast scale not applied, "
                                "all missing contrast attributed to the modification",
            "nuisance": nuisance,
            "dark_rate": "fixed to recorded value" if nuisance != "profile-dark" else "profiled",
            "fourier_truncation": 1,
        },
        "posterior": {
            "sigma_q_kg_m_per_s": post.sigma_q,
            "log10_tau": [float(u) for u in post.log10_tau],
            "weights": [float(w) for w in post.weights],
        },
        "gaussian_check": {
            "kl_divergence": gc.kl_divergence,
            "mean_log10_tau": gc.mean,
            "std_log10_tau": gc.std,
        },
        "convergence": {
            "curve": [{"n_points": n, "log10_tau_m": float(q)} for n, q in result.convergence],
            "stable_to_3_decimals_over_last_15_percent": convergence_stable(result.convergence)
            if result.convergence else None,
        },
        "boundary_warning": bool(result.boundary_warning),
        "notes": [] if math.isfinite(result.mu) else ["non-finite macroscopicity"],
    }
