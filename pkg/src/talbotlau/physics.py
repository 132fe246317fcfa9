"""Single-particle Talbot-Lau model for photodepletion light gratings.

The detection probability behind the third grating is a Fourier series in the
grating shift ``x3``,

    S(x3) = sum_l S_l exp(2 pi i l x3 / d),
    S_l   = B^(1)_{-l}(0) B^(2)_{2l}(l L / L_T) B^(3)_l(0),

with Talbot-Lau coefficients ``B_n(xi)`` of a standing-wave grating that both
ionizes (mean photon number ``n0`` per antinode) and imprints a dipole phase
(peak phase ``phi0``).  The classical model uses the same expression with the
short-wavelength limits of the two grating parameters.

Coefficient arrays returned here are ordered ``l = -l_max .. l_max``; use
:func:`coefficient` to index them by order.
"""
from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy import special

from . import constants as const


class DomainError(ValueError):
    """Input outside the physical domain of a model."""


class DegenerateSignalError(ValueError):
    """Signal with non-positive mean transmission."""


MODELS = ("quantum", "classical")


# ---------------------------------------------------------------------------
# species


@dataclass(frozen=True)
class ClusterMaterial:
    """Mass-independent description of a family of spherical metal clusters.

    ``at_mass`` turns it into a concrete :class:`ClusterSpecies`.  The
    ionization cross section is affine in mass,
    ``sigma_ion(m) = sigma_ion_slope * m + sigma_ion_intercept``.
    """

    atomic_mass: float = const.SODIUM_ATOMIC_MASS
    density: float = const.SODIUM_DENSITY
    alpha_per_atom: float = -4.0 * math.pi * const.eps0 * 4.5e-30
    sigma_ion_slope: float = 0.537e-20 / const.kDa
    sigma_ion_intercept: float = -1.5e-20
    work_function: float = 2.4 * const.eV

    def sigma_ion(self, mass):
        return self.sigma_ion_slope * np.asarray(mass, dtype=float) + self.sigma_ion_intercept

    @property
    def min_valid_mass(self):
        """Mass below which the affine cross-section model is not positive."""
        return -self.sigma_ion_intercept / self.sigma_ion_slope

    def n_atoms(self, mass):
        return np.rint(np.asarray(mass, dtype=float) / self.atomic_mass)

    def radius(self, mass):
        mass = np.asarray(mass, dtype=float)
        return np.cbrt(3.0 * mass / (4.0 * math.pi * self.density))

    def polarizability(self, mass):
        return self.n_atoms(mass) * self.alpha_per_atom

    def at_mass(self, mass):
        if mass <= 0:
            raise DomainError(f"cluster mass must be positive, got {mass!r}")
        return ClusterSpecies(
            mass=float(mass),
            n_atoms=int(self.n_atoms(mass)),
            radius=float(self.radius(mass)),
            alpha_per_atom=self.alpha_per_atom,
            sigma_ion_slope=self.sigma_ion_slope,
            sigma_ion_intercept=self.sigma_ion_intercept,
            work_function=self.work_function,
        )


@dataclass(frozen=True)
class ClusterSpecies:
    mass: float
    n_atoms: int
    radius: float
    alpha_per_atom: float
    sigma_ion_slope: float
    sigma_ion_intercept: float
    work_function: float

    @property
    def polarizability(self):
        return self.n_atoms * self.alpha_per_atom

    @property
    def sigma_ion(self):
        return self.sigma_ion_slope * self.mass + self.sigma_ion_intercept


def sodium_cluster(mass, **overrides):
    return ClusterMaterial(**overrides).at_mass(mass)


def ionization_threshold(species, charge_state=0, constants=const.CODATA2018):
    """Energy (J) to remove the next electron from a cluster of charge ``q``.

    Charged conducting sphere: ``W + (q + 3/8) e^2 / (4 pi eps0 R)``.
    """
    if charge_state < 0:
        raise DomainError("charge state must be >= 0")
    if species.radius <= 0:
        raise DomainError("cluster radius must be positive")
    e2 = constants.e_charge**2 / (4.0 * math.pi * constants.eps0 * species.radius)
    return species.work_function + (charge_state + 0.375) * e2


# ---------------------------------------------------------------------------
# gratings


@dataclass(frozen=True)
class GratingSettings:
    power: float
    waist_y: float
    wavelength: float = 266e-9

    def __post_init__(self):
        if not self.power >= 0:
            raise DomainError(f"grating power must be >= 0, got {self.power!r}")
        if not self.waist_y > 0:
            raise DomainError(f"grating waist must be > 0, got {self.waist_y!r}")
        if not self.wavelength > 0:
            raise DomainError(f"grating wavelength must be > 0, got {self.wavelength!r}")

    @property
    def period(self):
        return self.wavelength / 2.0

    def with_power(self, power):
        return replace(self, power=power)


@dataclass(frozen=True)
class InterferometerSetup:
    g1: GratingSettings
    g2: GratingSettings
    g3: GratingSettings
    separation: float = 0.983

    def __post_init__(self):
        if not self.separation > 0:
            raise DomainError("grating separation must be > 0")
        periods = {self.g1.period, self.g2.period, self.g3.period}
        if len(periods) != 1:
            raise DomainError("all three gratings must share one period")

    @property
    def period(self):
        return self.g1.period

    @property
    def gratings(self):
        return (self.g1, self.g2, self.g3)

    @property
    def powers(self):
        return (self.g1.power, self.g2.power, self.g3.power)

    def with_powers(self, p1=None, p2=None, p3=None):
        return replace(
            self,
            g1=self.g1 if p1 is None else self.g1.with_power(p1),
            g2=self.g2 if p2 is None else self.g2.with_power(p2),
            g3=self.g3 if p3 is None else self.g3.with_power(p3),
        )


def default_setup(p1=62e-3, p2=15.2e-3, p3=68e-3):
    """Grating settings of the 172 kDa sodium measurement."""
    return InterferometerSetup(
        g1=GratingSettings(p1, 620e-6),
        g2=GratingSettings(p2, 575e-6),
        g3=GratingSettings(p3, 575e-6),
        separation=0.983,
    )


@dataclass(frozen=True)
class GratingInteraction:
    n0: float
    phi0: float


def _require_positive(**values):
    for name, value in values.items():
        arr = np.asarray(value, dtype=float)
        if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
            raise DomainError(f"{name} must be positive and finite")


def de_broglie_wavelength(mass, v, constants=const.CODATA2018):
    _require_positive(mass=mass, v=v)
    return constants.h / (np.asarray(mass, dtype=float) * np.asarray(v, dtype=float))


def talbot_length(mass, v, period, constants=const.CODATA2018):
    _require_positive(mass=mass, v=v, period=period)
    return np.asarray(mass, dtype=float) * v * np.asarray(period, dtype=float) ** 2 / constants.h


def talbot_mass(length, v, period, constants=const.CODATA2018):
    """Mass whose Talbot length at velocity ``v`` equals ``length``."""
    _require_positive(length=length, v=v, period=period)
    return constants.h * np.asarray(length, dtype=float) / (np.asarray(v, dtype=float) * period**2)


def interaction_parameters(material, grating, mass, v, constants=const.CODATA2018):
    """Vectorised ``(n0, phi0)`` for arrays of masses and velocities."""
    mass = np.asarray(mass, dtype=float)
    v = np.asarray(v, dtype=float)
    sigma = material.sigma_ion(mass)
    if np.any(sigma <= 0):
        raise DomainError("ionization cross section not positive: mass below model validity")
    alpha = material.polarizability(mass)
    n0 = (8.0 * sigma * grating.power * grating.wavelength
          / (math.sqrt(2.0 * math.pi) * constants.h * constants.c * grating.waist_y * v))
    phi0 = (math.sqrt(8.0 / math.pi) * alpha * grating.power
            / (constants.hbar * constants.c * constants.eps0 * grating.waist_y * v))
    return n0, phi0


def grating_interaction(species, grating, v, constants=const.CODATA2018):
    _require_positive(v=v)
    if species.sigma_ion <= 0:
        raise DomainError("ionization cross section not positive: mass below model validity")
    n0 = (8.0 * species.sigma_ion * grating.power * grating.wavelength
          / (math.sqrt(2.0 * math.pi) * constants.h * constants.c * grating.waist_y * v))
    phi0 = (math.sqrt(8.0 / math.pi) * species.polarizability * grating.power
            / (constants.hbar * constants.c * constants.eps0 * grating.waist_y * v))
    return GratingInteraction(float(n0), float(phi0))


# ---------------------------------------------------------------------------
# Talbot-Lau coefficients

# Below this |a*b| the power series of the generating coefficient is used.
_SERIES_LIMIT = 1.0
_SERIES_TERMS = 24


def _generating_coefficient(k, a, b, n0):
    """``exp(-n0/2)`` times the coefficient of ``t**k`` in ``exp(a t/2 - b/(2 t))``.

    This is the entire function ``(a/2)^k sum_m (-ab/4)^m / (m! (m+k)!)``; the
    ordinary Bessel form is used for ``ab > 0`` and the modified Bessel form for
    ``ab < 0``.  ``n0/2`` bounds the modified-Bessel argument, which keeps the
    exponentially scaled product finite.
    """
    if k < 0:
        return (-1) ** k * _generating_coefficient(-k, b, a, n0)
    a, b, n0 = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(n0, float))
    ab = a * b
    out = np.empty(ab.shape, dtype=float)
    damp = np.exp(-0.5 * n0)

    small = np.abs(ab) < _SERIES_LIMIT
    if np.any(small):
        x = -0.25 * ab[small]
        term = np.full(x.shape, 1.0 / math.factorial(k))
        total = term.copy()
        for m in range(1, _SERIES_TERMS):
            term = term * x / (m * (m + k))
            total += term
        out[small] = damp[small] * (0.5 * a[small]) ** k * total

    pos = (ab > 0) & ~small
    if np.any(pos):
        ratio = np.sqrt(a[pos] / b[pos])
        z = np.sign(b[pos]) * np.sqrt(ab[pos])
        out[pos] = damp[pos] * ratio**k * special.jv(k, z)

    neg = (ab < 0) & ~small
    if np.any(neg):
        y = np.sqrt(-ab[neg])
        ratio = np.sign(a[neg]) * np.sqrt(np.abs(a[neg] / b[neg]))
        out[neg] = ratio**k * special.ive(k, y) * np.exp(y - 0.5 * n0[neg])
    return out


def _zetas(n0, phi0, xi, model):
    if model == "quantum":
        return phi0 * np.sin(np.pi * xi), 0.5 * n0 * np.cos(np.pi * xi)
    if model == "classical":
        return phi0 * np.pi * xi, 0.5 * n0 * np.ones_like(xi)
    raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")


def tl_coefficient(n, n0, phi0, xi, model="quantum"):
    """Vectorised Talbot-Lau coefficient ``B_n(xi)`` (real valued).

    Normalised as the Fourier coefficient
    ``(1/d) int t(x - xi d/2) t*(x + xi d/2) exp(2 pi i n x/d) dx`` with the
    grating transmission ``t(x) = exp[(i phi0 - n0/2) cos^2(pi x/d)]``.
    """
    n0, phi0, xi = np.broadcast_arrays(np.asarray(n0, float), np.asarray(phi0, float),
                                       np.asarray(xi, float))
    if not (np.all(np.isfinite(n0)) and np.all(np.isfinite(phi0)) and np.all(np.isfinite(xi))):
        raise DomainError("non-finite grating parameters")
    zc, zi = _zetas(n0, phi0, xi, model)
    # Integrand exponent is -n0/2 + (a/2) e^{i theta} - (b/2) e^{-i theta};
    # the e^{i n theta} kernel selects the t^{-n} coefficient.
    return _generating_coefficient(-int(n), zc - zi, zc + zi, n0)


def talbot_lau_coefficient(interaction, n, xi):
    return complex(tl_coefficient(n, interaction.n0, interaction.phi0, xi, "quantum"))


def talbot_lau_coefficient_classical(interaction, n, xi):
    return complex(tl_coefficient(n, interaction.n0, interaction.phi0, xi, "classical"))


def orders(l_max):
    return np.arange(-l_max, l_max + 1)


def coefficient(S, ell):
    """Pick ``S_ell`` from an array ordered ``-l_max..l_max`` on its last axis."""
    l_max = (np.shape(S)[-1] - 1) // 2
    if abs(ell) > l_max:
        return np.zeros(np.shape(S)[:-1], dtype=complex)[()]
    return np.asarray(S)[..., ell + l_max]


def signal_from_interactions(i1, i2, i3, xi, model="quantum", l_max=5):
    """Fourier coefficients for given grating parameters and ``xi = L/L_T``.

    ``i1, i2, i3`` are ``(n0, phi0)`` pairs (scalars or broadcastable arrays).
    Returns an array with trailing axis of length ``2 l_max + 1``.
    """
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    xi = np.asarray(xi, dtype=float)
    zero = np.zeros_like(xi)
    out = []
    for ell in orders(l_max):
        b1 = tl_coefficient(-ell, i1[0], i1[1], zero, model)
        b2 = tl_coefficient(2 * ell, i2[0], i2[1], ell * xi, model)
        b3 = tl_coefficient(ell, i3[0], i3[1], zero, model)
        out.append(b1 * b2 * b3)
    return np.stack(out, axis=-1).astype(complex)


def signal_nodes(setup, material, mass, v, model="quantum", l_max=5, constants=const.CODATA2018):
    """Coefficients for arrays of (mass, velocity) nodes; shape ``(..., 2 l_max + 1)``."""
    mass = np.asarray(mass, dtype=float)
    v = np.asarray(v, dtype=float)
    _require_positive(mass=mass, v=v)
    xi = setup.separation / talbot_length(mass, v, setup.period, constants)
    inter = [interaction_parameters(material, g, mass, v, constants) for g in setup.gratings]
    return signal_from_interactions(*inter, xi, model=model, l_max=l_max)


def fourier_signal(setup, species, v, model="quantum", l_max=5, constants=const.CODATA2018):
    """Coefficients ``S_l`` for one cluster species at one velocity."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    _require_positive(v=v)
    xi = setup.separation / float(talbot_length(species.mass, v, setup.period, constants))
    inter = []
    for g in setup.gratings:
        gi = grating_interaction(species, g, v, constants)
        inter.append((gi.n0, gi.phi0))
    return signal_from_interactions(*inter, xi, model=model, l_max=l_max)


def visibility_from_coefficients(S):
    S = np.asarray(S)
    s0 = coefficient(S, 0).real
    if np.any(s0 <= 0):
        raise DegenerateSignalError("mean transmission S_0 must be positive")
    return 2.0 * np.abs(coefficient(S, 1)) / s0


def reconstruct_signal(S, x3, period):
    """Evaluate ``S(x3)`` (real part) from coefficients ordered ``-l_max..l_max``."""
    S = np.asarray(S)
    ells = orders((S.shape[-1] - 1) // 2)
    phase = np.exp(2j * np.pi * np.multiply.outer(np.asarray(x3, float), ells) / period)
    return (phase @ S).real
