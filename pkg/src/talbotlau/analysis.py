"""Fringe fitting and time-of-flight velocity estimation."""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy import optimize, special

from .physics import DegenerateSignalError
from .synth import entrance_velocity_gain


class FitError(RuntimeError):
    """A fit could not be performed or did not converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# fringe fits


@dataclass(frozen=True)
class FringeFit:
    amplitude: float        # counts/s
    offset: float           # counts/s
    phase: float            # rad
    visibility: float
    visibility_sigma: float
    ci_visibility: tuple    # 1 sigma
    chi2: float
    dof: int
    n_points: int

    @property
    def reduced_chi2(self):
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    def as_dict(self):
        return {
            "amplitude_per_s": self.amplitude,
            "offset_per_s": self.offset,
            "phase_rad": self.phase,
            "visibility": self.visibility,
            "visibility_sigma": self.visibility_sigma,
            "ci_visibility": list(self.ci_visibility),
            "chi2": self.chi2,
            "dof": self.dof,
            "reduced_chi2": self.reduced_chi2,
            "n_points": self.n_points,
        }


def _wls(design, y, w):
    aw = design * w[:, None]
    normal = design.T @ aw
    coef = np.linalg.solve(normal, aw.T @ y)
    return coef, np.linalg.inv(normal)


def fit_fringe(scan, period=None, subtract_dark=False, iterations=2):
    """Sinusoid ``offset + A cos(k x) + B sin(k x)`` at the grating period.

    Weighted linear least squares on rates ``c/T``.  The first pass uses
    weights from the observed counts; further passes reweight with the fitted
    model so that low-count points do not bias the offset.
    """
    period = scan.period if period is None else period
    x = scan.positions
    n = x.size
    if n < 8:
        raise FitError("fringe fit needs at least 8 points")
    step = x[1] - x[0]
    if x[-1] - x[0] + step < period * (1 - 1e-9):
        raise FitError("scan spans less than one grating period")
    c = scan.counts.astype(float)
    T = scan.dwell_times
    if not c.any():
        raise DegenerateSignalError("scan has no counts")
    k = 2.0 * np.pi / period
    design = np.column_stack([np.ones(n), np.cos(k * x), np.sin(k * x)])
    y = c / T
    w = T**2 / np.maximum(c, 1.0)
    for _ in range(max(iterations, 1)):
        coef, cov = _wls(design, y, w)
        model = design @ coef
        w = T / np.maximum(model, 1e-12 / T.min())
    offset, a, b = coef
    dark = scan.dark_rate if subtract_dark else 0.0
    base = offset - dark
    if not base > 0:
        raise DegenerateSignalError("fitted offset is not positive")
    amp = math.hypot(a, b)
    # offset + amp cos(kx + phase) with amp >= 0
    phase = math.atan2(-b, a)
    amp_c = min(amp, base)
    V = amp_c / base
    if amp > 0:
        grad = np.array([-amp / base**2, a / (amp * base), b / (amp * base)])
    else:
        grad = np.array([0.0, 1.0 / base, 0.0])
    sigma = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    resid = (y - design @ coef) * np.sqrt(T / np.maximum(design @ coef, 1e-12))
    chi2 = float(resid @ resid)
    return FringeFit(float(amp_c), float(base), float(phase), float(V), sigma,
                     (float(max(V - sigma, 0.0)), float(min(V + sigma, 1.0))), chi2, n - 3, n)


# ---------------------------------------------------------------------------
# TOF denoising


def _mirror(idx, n):
    idx = np.mod(idx, 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def _gauss_smooth(counts, width):
    n = counts.size
    half = int(math.ceil(4 * width))
    offs = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (offs / width) ** 2)
    k /= k.sum()
    padded = counts[_mirror(np.arange(-half, n + half), n)]
    return np.convolve(padded, k, mode="valid")


def denoise_tof(trace, w_min=1.0, w_max=None, target_quantile=90.0):
    """Adaptive Gaussian smoothing of a TOF histogram.

    Each bin's counts are scattered with a Gaussian of width
    ``w_min * max(1, sqrt(c90 / c_local))`` bins (``c90`` the 90th percentile
    bin count, ``c_local`` the counts smoothed at ``w_min``).  Kernels are
    normalised before mirror folding at the edges, so totals are preserved.
    """
    c = np.asarray(trace.counts, dtype=float)
    n = c.size
    if n < 16:
        raise ValueError("denoising needs at least 16 bins")
    if not w_min > 0:
        raise ValueError("w_min must be positive")
    w_max = n / 8.0 if w_max is None else w_max
    target = np.percentile(c, target_quantile)
    local = _gauss_smooth(c, w_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(local > 0, target / local, np.inf)
    widths = np.clip(w_min * np.sqrt(np.maximum(ratio, 1.0)), w_min, max(w_min, w_max))
    out = np.zeros(n)
    for i in np.nonzero(c)[0]:
        w = widths[i]
        half = int(math.ceil(4 * w))
        offs = np.arange(-half, half + 1)
        k = np.exp(-0.5 * (offs / w) ** 2)
        k *= c[i] / k.sum()
        np.add.at(out, _mirror(i + offs, n), k)
    return trace.with_counts(out)


# ---------------------------------------------------------------------------
# TOF velocity fit


@dataclass(frozen=True)
class VelocityEstimate:
    v_mean: float
    v_sigma: float
    t_center: float
    t_sigma: float
    background: float
    amplitude: float
    velocity_gain: float
    cost: float
    nfev: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def relative_width(self):
        return self.v_sigma / self.v_mean

    def as_dict(self):
        return {
            "v_mean_m_per_s": self.v_mean,
            "v_sigma_m_per_s": self.v_sigma,
            "relative_width": self.relative_width,
            "t_center_s": self.t_center,
            "t_sigma_s": self.t_sigma,
            "background_per_bin": self.background,
            "amplitude": self.amplitude,
            "velocity_gain_m_per_s": self.velocity_gain,
            "cost": self.cost,
            "nfev": self.nfev,
        }


def _int_phi(x):
    """Antiderivative of the standard normal CDF."""
    return x * special.ndtr(x) + np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def tof_model(edges, amplitude, t_center, t_sigma, chopper, background):
    """Expected counts per bin: Gaussian(t_center, t_sigma) * rect[0, chopper] plus flat background."""
    t_sigma = abs(t_sigma)
    widths = np.diff(edges)
    if chopper <= 0:
        cdf = special.ndtr((edges - t_center) / t_sigma)
    else:
        u0 = (edges - t_center) / t_sigma
        u1 = (edges - t_center - chopper) / t_sigma
        cdf = t_sigma * (_int_phi(u0) - _int_phi(u1)) / chopper
    return amplitude * np.diff(cdf) + background * widths / widths.mean()


def _velocity_drift_cdf(t, flight_path, v_center, v_sigma):
    """``P(L / V <= t)`` for ``V ~ N(v_center, v_sigma)`` (positive branch)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    pos = t > 0
    out[pos] = special.ndtr((v_center - flight_path / t[pos]) / v_sigma)
    return out


def tof_model_velocity(edges, amplitude, v_center, v_sigma, flight_path, chopper, background):
    """Expected counts per bin for Gaussian velocities, drift ``L / v`` plus a uniform chopper delay."""
    v_sigma = abs(v_sigma)
    widths = np.diff(edges)
    if chopper <= 0:
        cdf = _velocity_drift_cdf(edges, flight_path, v_center, v_sigma)
    else:
        # average of shifted CDFs over the opening; panels resolve the drift-time width
        t_sigma = flight_path * v_sigma / max(v_center, 1e-9) ** 2
        panels = int(min(400, max(1, math.ceil(4.0 * chopper / max(t_sigma, 1e-300)))))
        x, w = np.polynomial.legendre.leggauss(8)
        left = np.arange(panels) * chopper / panels
        u = (left[:, None] + 0.5 * chopper / panels * (x[None, :] + 1.0)).ravel()
        wu = np.tile(w, panels) / (2.0 * panels)
        cdf = _velocity_drift_cdf(edges[:, None] - u[None, :], flight_path, v_center, v_sigma) @ wu
    return amplitude * np.diff(cdf) + background * widths / widths.mean()


def fit_velocity(trace, mass=None, charge_state=None, denoise=True, model="velocity", max_nfev=2000):
    """Velocity mean and width from a TOF trace.

    A Gaussian drift-time distribution convolved with the chopper window is
    fitted first in the time domain; the arrival-time centre converts to
    ``v' = L / t_c`` and the width as ``sigma_v = v'^2 sigma_t / L``.  With
    ``model="velocity"`` (default) this is refined by fitting drift times
    ``L / v'`` with ``v'`` Gaussian, which removes the skew bias of the
    time-domain Gaussian.  The entrance-voltage gain is subtracted at the end.
    """
    if model not in ("velocity", "time"):
        raise ValueError("model must be 'velocity' or 'time'")
    mass = trace.mass if mass is None else mass
    if mass is None or not mass > 0:
        raise ValueError("a positive mass is required")
    q = trace.charge_state if charge_state is None else charge_state
    data = denoise_tof(trace) if denoise else trace
    y = data.counts
    edges = data.bin_edges
    total = y.sum()
    if not total > 0:
        raise FitError("trace has no counts")
    centers = data.centers
    mean_t = float(np.dot(centers, y) / total)
    sd_t = float(math.sqrt(max(np.dot((centers - mean_t) ** 2, y) / total - trace.chopper_open**2 / 12, 0.0)))
    sd_t = max(sd_t, np.diff(edges).min())
    x0 = np.array([total, mean_t - 0.5 * trace.chopper_open, sd_t, max(np.percentile(y, 5), 0.0)])
    scale = np.array([total, sd_t, sd_t, max(total / y.size, 1.0)])
    weights = 1.0 / np.sqrt(np.maximum(trace.counts, 1.0))
    L = trace.flight_path

    def resid(p):
        return (tof_model(edges, p[0], p[1], p[2], trace.chopper_open, p[3]) - y) * weights

    sol = optimize.least_squares(resid, x0, x_scale=scale, method="trf", max_nfev=max_nfev,
                                 bounds=([0, 0, 0, 0], [np.inf, np.inf, np.inf, np.inf]))
    diag = {"status": int(sol.status), "message": sol.message, "nfev": int(sol.nfev), "model": model}
    if not sol.success or sol.x[2] <= 0:
        raise FitError("TOF fit did not converge", diag)
    amp, t_c, s_t, bg = sol.x
    v_prime = L / t_c
    v_sig = v_prime**2 * s_t / L
    nfev = int(sol.nfev)
    if model == "velocity":
        def resid_v(p):
            return (tof_model_velocity(edges, p[0], p[1], p[2], L, trace.chopper_open, p[3]) - y) * weights

        sol = optimize.least_squares(resid_v, [amp, v_prime, v_sig, bg], method="trf", max_nfev=max_nfev,
                                     x_scale=[max(amp, 1.0), v_sig, v_sig, max(bg, 1.0)],
                                     bounds=([0, 0, 0, 0], [np.inf, np.inf, np.inf, np.inf]))
        nfev += int(sol.nfev)
        diag.update(status=int(sol.status), message=sol.message, nfev=nfev)
        if not sol.success or sol.x[2] <= 0:
            raise FitError("TOF velocity-domain fit did not converge", diag)
        amp, v_prime, v_sig, bg = sol.x
        t_c = L / v_prime
        s_t = L * v_sig / v_prime**2
    gain = entrance_velocity_gain(trace.entrance_voltage, mass, q)
    return VelocityEstimate(float(v_prime - gain), float(v_sig), float(t_c), float(s_t), float(bg),
                            float(amp), gain, float(sol.cost), nfev, diag)
