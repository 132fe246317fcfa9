"""Bayesian exclusion of minimal macrorealistic modifications (MMM).

An MMM with classicalization time ``tau_e`` and momentum spread ``sigma_q``
multiplies each Fourier coefficient ``S_l`` by ``R_l = exp(-Gamma_l / tau_e)``.
Fringe scans are compared with the ideal (unscaled) quantum prediction damped
by ``R_1``; all missing contrast is attributed to the modification.  The
posterior over ``log10 tau_e`` starts from a flat prior (Jeffreys' prior for a
scale parameter) and its lower 5% quantile, maximised over ``sigma_q``, gives
the macroscopicity ``mu``.
"""
from dataclasses import dataclass, field
import math
import warnings

import numpy as np
from scipy import integrate, interpolate, optimize, special

from . import _kernels
from . import constants as const
from .ensemble import BeamEnsemble, default_ensemble
from .physics import (
    ClusterMaterial,
    DegenerateSignalError,
    DomainError,
    InterferometerSetup,
    coefficient,
    default_setup,
    orders,
    signal_nodes,
    talbot_length,
)

Z_MAX = 8.0
NUISANCE_MODES = ("profile", "profile-dark", "marginal")


class GridBoundaryWarning(UserWarning):
    """Posterior mass piles up at the edge of the log-tau grid."""


@dataclass(frozen=True)
class MmmParams:
    tau_e: float
    sigma_q: float
    sigma_s: float = None  # carried for completeness; negligible for this geometry

    def __post_init__(self):
        if not self.tau_e > 0:
            raise DomainError("tau_e must be positive")
        if not self.sigma_q > 0:
            raise DomainError("sigma_q must be positive")

    @classmethod
    def from_length(cls, tau_e, hbar_over_sigma_q, sigma_s=None):
        return cls(tau_e, const.hbar / hbar_over_sigma_q, sigma_s)


# ---------------------------------------------------------------------------
# the z integral


_j1 = _kernels.j1_numpy
_f = _kernels.f_numpy


def _integrand(z, a, b):
    return np.exp(-0.5 * z * z) * _j1(a * z) ** 2 * _f(b * z)


def mmm_integral(a, b, epsrel=1e-12):
    """``int_0^inf exp(-z^2/2) j1(a z)^2 f(b z) dz`` (cut at z = 8) by adaptive quadrature."""
    a, b = abs(a), abs(b)
    if b == 0 or a == 0:
        return 0.0
    # break points at the half periods of the fastest factor keep QUADPACK on track
    n_break = int(min(20000, Z_MAX * max(2.0 * a, b) / math.pi))
    points = np.linspace(0, Z_MAX, n_break + 2)[1:-1] if n_break > 0 else None
    val, _ = integrate.quad(lambda z: float(_integrand(np.array([z]), a, b)[0]), 0.0, Z_MAX,
                            epsabs=0.0, epsrel=epsrel, limit=max(50, 4 * n_break), points=points)
    return val


def _gl_panels(n_panels, order=16):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, Z_MAX, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    z = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wz = (half[:, None] * w[None, :]).ravel()
    return z, wz


def _panel_count(a_max, b_max):
    freq = max(2.0 * a_max, b_max)
    return 24 + int(math.ceil(Z_MAX * freq / math.pi))


def mmm_integral_fixed(a, b, a_index=None):
    """Vectorised integral using composite Gauss-Legendre.

    ``a`` may hold only the distinct values, with ``a_index`` mapping each
    entry of ``b`` to its ``a``; the ``j1`` factor is then evaluated once per
    distinct value.  Panel count follows the fastest oscillation of the
    integrand; agrees with :func:`mmm_integral` to ~1e-10 relative.
    """
    a = np.abs(np.atleast_1d(np.asarray(a, dtype=float)))
    b = np.abs(np.asarray(b, dtype=float))
    if a_index is None:
        a, b = np.broadcast_arrays(a, b)
        shape = b.shape
        a, b = a.ravel(), b.ravel()
        a_index = np.arange(a.size)
    else:
        shape = b.shape
        b = b.ravel()
        a_index = np.asarray(a_index).ravel()
    z, wz = _gl_panels(_panel_count(a.max(initial=0.0), b.max(initial=0.0)))
    j1sq = _j1(np.multiply.outer(a, z)) ** 2
    out = _kernels.mmm_integrals(j1sq, a_index, b, z, wz * np.exp(-0.5 * z * z))
    return out.reshape(shape)


def decoherence_rate(ell, sigma_q, mass, radius, v, setup, constants=const.CODATA2018, method="fixed"):
    """``Gamma_l`` (seconds) such that ``R_l = exp(-Gamma_l / tau_e)``.

    Broadcasts over ``mass``, ``radius`` and ``v``.
    """
    mass, radius, v = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (mass, radius, v)))
    hbar = constants.hbar
    L = setup.separation
    lt = talbot_length(mass, v, setup.period, constants)
    b = abs(ell) * setup.period * sigma_q * L / (hbar * lt)
    if method == "fixed":
        r_unique, r_index = np.unique(radius, return_inverse=True)
        integral = mmm_integral_fixed(r_unique * sigma_q / hbar, b, r_index.reshape(b.shape))
    else:
        integral = np.vectorize(mmm_integral)(radius * sigma_q / hbar, b)
    pref = 2.0 * math.sqrt(2.0 / math.pi) * (3.0 * hbar * mass / (radius * sigma_q * constants.m_electron)) ** 2
    return pref * (L / v) * integral


def mmm_reduction_factor(ell, params, species, setup, v, constants=const.CODATA2018):
    """``R_l`` for one particle (mass, radius from ``species``) at velocity ``v``."""
    if ell == 0:
        return 1.0
    if not v > 0:
        raise DomainError("velocity must be positive")
    rate = decoherence_rate(ell, params.sigma_q, species.mass, species.radius, v, setup, constants)
    return float(np.exp(-rate / params.tau_e))


def modified_signal(S, params, species, setup, v):
    """Coefficients damped by ``R_l``; ``S_0`` is left untouched."""
    S = np.asarray(S, dtype=complex)
    l_max = (S.shape[-1] - 1) // 2
    R = np.array([mmm_reduction_factor(ell, params, species, setup, v) for ell in orders(l_max)])
    return S * R


# ---------------------------------------------------------------------------
# prediction context and likelihood


@dataclass
class MacroModel:
    """Physics needed to turn MMM parameters into a predicted fringe visibility.

    Each scan is evaluated with ``setup`` re-powered to the scan's grating powers
    and ``ensemble`` centred on the scan's mass setting.
    """

    setup: InterferometerSetup = field(default_factory=default_setup)
    material: ClusterMaterial = field(default_factory=ClusterMaterial)
    ensemble: BeamEnsemble = field(default_factory=default_ensemble)
    nuisance: str = "profile"
    v_grid_points: int = 1025

    def __post_init__(self):
        if self.nuisance not in NUISANCE_MODES:
            raise ValueError(f"nuisance must be one of {NUISANCE_MODES}")
        self._contexts = {}

    def context(self, powers, mass_setting):
        key = (tuple(float(p) for p in powers), float(mass_setting))
        ctx = self._contexts.get(key)
        if ctx is None:
            ctx = PredictionContext(
                setup=self.setup.with_powers(*key[0]),
                material=self.material,
                ensemble=self.ensemble.with_mass_center(key[1]),
            )
            self._contexts[key] = ctx
        return ctx

    def context_for(self, scan):
        return self.context(scan.powers, scan.mass_setting)


class PredictionContext:
    """Ensemble nodes for one grating/mass configuration with cached MMM rates."""

    def __init__(self, setup, material, ensemble):
        self.setup = setup
        self.material = material
        self.ensemble = ensemble
        m, v, w = ensemble.nodes()
        S = signal_nodes(setup, material, m, v, model="quantum", l_max=1)
        self.mass = m
        self.velocity = v
        self.weights = w
        self.radius = material.radius(m)
        self.s0 = float(w @ coefficient(S, 0).real)
        if self.s0 <= 0:
            raise DegenerateSignalError("prediction context has no transmission")
        self.ws1 = w * coefficient(S, 1)
        self._rates = {}

    @property
    def ideal_visibility(self):
        return 2.0 * abs(self.ws1.sum()) / self.s0

    def rates(self, sigma_q):
        key = float(sigma_q)
        r = self._rates.get(key)
        if r is None:
            r = decoherence_rate(1, key, self.mass, self.radius, self.velocity, self.setup)
            self._rates[key] = r
        return r

    def visibility(self, params=None):
        if params is None:
            return self.ideal_visibility
        damp = np.exp(-self.rates(params.sigma_q) / params.tau_e)
        return 2.0 * abs(np.dot(self.ws1, damp)) / self.s0

    def visibility_vs_tau(self, sigma_qs, log10_tau):
        """Predicted visibility, shape ``(len(sigma_qs), len(log10_tau))``."""
        rates = np.array([self.rates(s) for s in np.atleast_1d(sigma_qs)])
        inv_tau = 10.0 ** (-np.asarray(log10_tau, dtype=float))
        return 2.0 * _kernels.damped_first_order(self.ws1, rates, inv_tau) / self.s0


def _scan_arrays(scan):
    theta = 2.0 * np.pi * scan.positions / scan.period
    return theta, scan.dwell_times, scan.counts.astype(float)


def _log_factorial_sum(counts):
    return float(special.gammaln(np.asarray(counts, float) + 1.0).sum())


def _marginal_grid(theta, dwell, counts, dark, v_grid, n_phase=48):
    """log of the phase-averaged, r0-Laplace-marginalised likelihood."""
    v_grid = np.asarray(v_grid, dtype=float)
    phases = 2.0 * np.pi * np.arange(n_phase) / n_phase
    y = counts / dwell
    r = np.full((v_grid.size, n_phase), max(y.mean() - dark, 1e-9))
    cosd = np.cos(theta[None, None, :] - phases[None, :, None])
    g = 1.0 + v_grid[:, None, None] * cosd
    for _ in range(80):
        lam = dwell * (r[..., None] * g + dark)
        lam = np.maximum(lam, 1e-300)
        grad = ((counts / lam - 1.0) * dwell * g).sum(-1)
        hess = -(counts / lam**2 * (dwell * g) ** 2).sum(-1)
        step = -grad / np.where(hess < 0, hess, -1.0)
        new = r + step
        r = np.where(new > 0, new, 0.5 * r)
        if np.all(np.abs(step) <= 1e-12 * np.abs(r)):
            break
    lam = np.maximum(dwell * (r[..., None] * g + dark), 1e-300)
    ll = (counts * np.log(lam) - lam).sum(-1)
    hess = -(counts / lam**2 * (dwell * g) ** 2).sum(-1)
    lap = ll + 0.5 * np.log(2.0 * np.pi / np.maximum(-hess, 1e-300))
    return special.logsumexp(lap, axis=1) - math.log(n_phase)


def scan_loglike_grid(scan, v_grid, nuisance="profile"):
    """Log-likelihood of one scan on a grid of predicted visibilities.

    ``profile``: ``r0`` and fringe phase maximised, dark rate fixed to the
    recorded value.  ``profile-dark``: the dark rate is also maximised over
    ``[0, inf)``.  ``marginal``: phase averaged uniformly and ``r0``
    integrated by Laplace's method.
    """
    theta, dwell, counts = _scan_arrays(scan)
    if not counts.any():
        raise DegenerateSignalError("scan has no counts")
    v_grid = np.clip(np.asarray(v_grid, dtype=float), 0.0, 1.0)
    const_term = _log_factorial_sum(counts)
    if nuisance == "profile":
        ll, _, _ = _kernels.profile_grid(theta, dwell, counts, scan.dark_rate, v_grid)
    elif nuisance == "profile-dark":
        def neg(v):
            return -_kernels.profile_grid(theta, dwell, counts, 0.0, np.array([v]))[0][0]
        best = optimize.minimize_scalar(neg, bounds=(0.0, 1.0), method="bounded",
                                        options={"xatol": 1e-10})
        v_eff = np.minimum(v_grid, best.x)
        ll, _, _ = _kernels.profile_grid(theta, dwell, counts, 0.0, v_eff)
    elif nuisance == "marginal":
        ll = _marginal_grid(theta, dwell, counts, scan.dark_rate, v_grid)
    else:
        raise ValueError(f"unknown nuisance mode {nuisance!r}")
    return ll - const_term


def scan_log_likelihood(scan, params, context, nuisance="profile"):
    """Log-likelihood of one fringe scan under MMM ``params`` (``None``: no MMM)."""
    V = context.visibility(params)
    return float(scan_loglike_grid(scan, [V], nuisance)[0])


# ---------------------------------------------------------------------------
# posterior


@dataclass(frozen=True)
class LogTauGrid:
    start: float = 0.0
    stop: float = 25.0
    points: int = 2001

    def __post_init__(self):
        if not self.stop > self.start or self.points < 3:
            raise ValueError("log-tau grid needs stop > start and >= 3 points")

    @property
    def values(self):
        return np.linspace(self.start, self.stop, self.points)

    @property
    def decades(self):
        return self.stop - self.start


@dataclass
class MacroPosterior:
    log10_tau: np.ndarray
    weights: np.ndarray
    sigma_q: float
    n_data_used: int
    prior_support: tuple = (0.0, 25.0)
    boundary_warning: bool = False
    log_weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.log10_tau = np.asarray(self.log10_tau, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(np.diff(self.log10_tau) <= 0):
            raise ValueError("log10_tau grid must be strictly increasing")

    @property
    def hbar_over_sigma_q(self):
        return const.hbar / self.sigma_q

    def cell_edges(self):
        u = self.log10_tau
        mid = 0.5 * (u[1:] + u[:-1])
        return np.concatenate([[u[0] - 0.5 * (u[1] - u[0])], mid, [u[-1] + 0.5 * (u[-1] - u[-2])]])

    def cdf(self):
        """CDF at the right edge of each grid cell."""
        return np.cumsum(self.weights)

    def quantile(self, q=0.05):
        """Linear interpolation of the cell-mass CDF (exact for piecewise-uniform densities)."""
        if not 0 < q < 1:
            raise ValueError("quantile level must lie in (0, 1)")
        edges = self.cell_edges()
        cdf = np.concatenate([[0.0], self.cdf()])
        cdf[-1] = 1.0
        i = int(np.searchsorted(cdf, q, side="left"))
        i = min(max(i, 1), cdf.size - 1)
        lo, hi = cdf[i - 1], cdf[i]
        if hi == lo:
            return float(edges[i])
        return float(edges[i - 1] + (q - lo) / (hi - lo) * (edges[i] - edges[i - 1]))

    def mean(self):
        return float(np.dot(self.weights, self.log10_tau))

    def std(self):
        m = self.mean()
        return float(math.sqrt(max(np.dot(self.weights, (self.log10_tau - m) ** 2), 0.0)))


def _normalise(log_post):
    log_post = np.asarray(log_post, dtype=float)
    top = np.max(log_post)
    if not np.isfinite(top):
        raise DegenerateSignalError("posterior vanishes everywhere on the grid")
    w = np.exp(log_post - top)
    return w / w.sum(), log_post - top - math.log(w.sum())


def _boundary_flag(weights, edge_cells=None, threshold=1e-3):
    n = weights.size
    k = edge_cells or max(1, n // 100)
    return bool(weights[:k].sum() > threshold or weights[-k:].sum() > threshold)


def _group_scans(scans, model):
    groups = {}
    for idx, scan in enumerate(scans):
        ctx = model.context_for(scan)
        groups.setdefault(id(ctx), (ctx, []))[1].append(idx)
    return list(groups.values())


class LikelihoodTable:
    """Per-scan log-likelihoods tabulated on a visibility grid per context."""

    def __init__(self, scans, model):
        self.scans = list(scans)
        self.model = model
        self.groups = []
        for ctx, idx in _group_scans(self.scans, model):
            v_hi = min(1.0, 1.02 * ctx.ideal_visibility + 1e-6)
            v_grid = np.linspace(0.0, v_hi, model.v_grid_points)
            table = np.array([scan_loglike_grid(self.scans[i], v_grid, model.nuisance) for i in idx])
            self.groups.append((ctx, np.array(idx), v_grid, table))
        self.n_points = [len(s) for s in self.scans]

    def log_likelihood(self, sigma_q, log10_tau, upto=None):
        """Summed log-likelihood over scans (optionally only scans ``< upto``)."""
        total = np.zeros(np.size(log10_tau))
        for ctx, idx, v_grid, table in self.groups:
            sel = idx < (len(self.scans) if upto is None else upto)
            if not sel.any():
                continue
            spline = interpolate.CubicSpline(v_grid, table[sel].sum(axis=0))
            V = ctx.visibility_vs_tau([sigma_q], log10_tau)[0]
            total += spline(np.clip(V, v_grid[0], v_grid[-1]))
        return total


def _posterior_on(grid_values, sigma_q, table, prior_log, n_used, upto, support):
    ll = table.log_likelihood(sigma_q, grid_values, upto)
    w, lw = _normalise(ll + prior_log)
    return MacroPosterior(grid_values, w, sigma_q, n_used, support, False, lw)


def _refined_grid(coarse, grid, points, span_nats=60.0):
    lw = coarse.log_weights
    keep = np.nonzero(lw > lw.max() - span_nats)[0]
    lo = coarse.log10_tau[max(keep[0] - 1, 0)]
    hi = coarse.log10_tau[min(keep[-1] + 1, lw.size - 1)]
    pad = 0.1 * (hi - lo)
    return np.linspace(max(grid.start, lo - pad), min(grid.stop, hi + pad), points)


def bayesian_update(scans, sigma_q, model=None, grid=LogTauGrid(), prior=None, table=None,
                    refine=False):
    """Posterior over ``log10 tau_e`` at fixed ``sigma_q``.

    ``prior`` may be a previous :class:`MacroPosterior` on the same grid, which
    makes sequential updating equivalent to a single batch update.
    """
    model = model or MacroModel()
    if grid.decades < 20:
        raise ValueError("log-tau grid must cover at least 20 decades")
    u = grid.values
    support = (grid.start, grid.stop)
    n_prev = 0
    if prior is None:
        prior_log = np.zeros(u.size)
    else:
        if prior.log10_tau.shape != u.shape or not np.allclose(prior.log10_tau, u, rtol=0, atol=1e-12):
            raise ValueError("prior lives on a different grid")
        prior_log = prior.log_weights if prior.log_weights is not None else np.log(prior.weights)
        n_prev = prior.n_data_used
    scans = list(scans)
    n_used = n_prev + sum(len(s) for s in scans)
    if not scans:
        w, lw = _normalise(prior_log)
        return MacroPosterior(u, w, sigma_q, n_used, support, _boundary_flag(w), lw)
    table = table or LikelihoodTable(scans, model)
    post = _posterior_on(u, sigma_q, table, prior_log, n_used, None, support)
    post.boundary_warning = _boundary_flag(post.weights)
    if refine and prior is None:
        fine = _refined_grid(post, grid, grid.points)
        flag = post.boundary_warning
        post = _posterior_on(fine, sigma_q, table, np.zeros(fine.size), n_used, None, support)
        post.boundary_warning = flag
    return post


@dataclass
class GaussianCheck:
    kl_divergence: float
    mean: float
    std: float


def gaussian_posterior_check(posterior):
    """KL(posterior || moment-matched Gaussian in log10 tau) by grid summation."""
    p = np.asarray(posterior.weights, dtype=float)
    u = posterior.log10_tau
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("posterior is not normalised")
    mu = float(np.dot(p, u))
    var = float(np.dot(p, (u - mu) ** 2))
    if not var > 0:
        raise DegenerateSignalError("posterior has zero variance")
    logq = -0.5 * (u - mu) ** 2 / var
    logq -= special.logsumexp(logq)
    nz = p > 0
    kl = float(np.sum(p[nz] * (np.log(p[nz]) - logq[nz])))
    return GaussianCheck(max(kl, 0.0), mu, math.sqrt(var))


@dataclass
class MacroscopicityResult:
    mu: float
    argmax_sigma_q: float
    sigma_q_grid: np.ndarray
    tau_m_log10: np.ndarray      # per sigma_q
    posterior: MacroPosterior    # at the maximising sigma_q
    gaussian_check: GaussianCheck
    boundary_warning: bool
    quantile_level: float
    n_data: int
    convergence: list = field(default_factory=list)  # (n_points, log10 tau_m)
    grid: LogTauGrid = None

    @property
    def argmax_hbar_over_sigma_q(self):
        return const.hbar / self.argmax_sigma_q


def default_sigma_q_grid(points=31, lo=0.1e-9, hi=10e-6):
    """Log-spaced ``sigma_q`` with ``hbar/sigma_q`` spanning ``[lo, hi]``."""
    lengths = np.logspace(math.log10(lo), math.log10(hi), points)
    return const.hbar / lengths


def macroscopicity(scans, model=None, sigma_q_grid=None, grid=LogTauGrid(), quantile=0.05,
                   refine=True, convergence=True):
    """Macroscopicity ``mu = max_sigma_q log10(tau_m(sigma_q) / 1 s)``.

    ``tau_m`` is the lower ``quantile`` of the posterior over ``log10 tau_e``.
    With ``convergence`` the quantile at the maximising ``sigma_q`` is also
    traced against the number of data points used (scans in given order).
    """
    scans = list(scans)
    if not scans:
        raise ValueError("no fringe scans supplied")
    model = model or MacroModel()
    sigma_q_grid = default_sigma_q_grid() if sigma_q_grid is None else np.asarray(sigma_q_grid, float)
    table = LikelihoodTable(scans, model)
    n_data = sum(table.n_points)
    posts = []
    flags = []
    for sq in sigma_q_grid:
        post = bayesian_update(scans, sq, model, grid, table=table, refine=refine)
        posts.append(post)
        flags.append(post.boundary_warning)
    taus = np.array([p.quantile(quantile) for p in posts])
    best = int(np.argmax(taus))
    post = posts[best]
    boundary = bool(flags[best])
    if boundary:
        warnings.warn("posterior mass at the log-tau grid boundary; widen the grid", GridBoundaryWarning)
    curve = []
    if convergence:
        cum = np.cumsum(table.n_points)
        sq = sigma_q_grid[best]
        for k in range(1, len(scans) + 1):
            coarse = _posterior_on(grid.values, sq, table, np.zeros(grid.points), int(cum[k - 1]),
                                   k, (grid.start, grid.stop))
            if refine:
                fine = _refined_grid(coarse, grid, grid.points)
                coarse = _posterior_on(fine, sq, table, np.zeros(fine.size), int(cum[k - 1]), k,
                                       (grid.start, grid.stop))
            curve.append((int(cum[k - 1]), coarse.quantile(quantile)))
    return MacroscopicityResult(
        mu=float(taus[best]),
        argmax_sigma_q=float(sigma_q_grid[best]),
        sigma_q_grid=sigma_q_grid,
        tau_m_log10=taus,
        posterior=post,
        gaussian_check=gaussian_posterior_check(post),
        boundary_warning=boundary,
        quantile_level=quantile,
        n_data=n_data,
        convergence=curve,
        grid=grid,
    )


def convergence_stable(curve, decimals=3, tail_fraction=0.15):
    """True if the quantile, rounded to ``decimals``, is constant over the final data fraction."""
    if not curve:
        return False
    n_total = curve[-1][0]
    final = round(curve[-1][1], decimals)
    return all(round(q, decimals) == final for n, q in curve if n >= (1 - tail_fraction) * n_total)
