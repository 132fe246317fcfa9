"""Physical constants (CODATA 2018) used throughout the package.

Values are pinned here instead of taken from ``scipy.constants`` so results do
not drift when scipy updates its CODATA revision.
"""
from dataclasses import dataclass
import math


@dataclass(frozen=True)
class PhysicalConstants:
    h: float = 6.62607015e-34            # J s (exact)
    c: float = 299792458.0               # m/s (exact)
    eps0: float = 8.8541878128e-12       # F/m
    e_charge: float = 1.602176634e-19    # C (exact)
    m_electron: float = 9.1093837015e-31  # kg
    dalton: float = 1.66053906660e-27    # kg

    @property
    def hbar(self):
        return self.h / (2.0 * math.pi)

    def as_dict(self):
        return {
            "h": self.h,
            "hbar": self.hbar,
            "c": self.c,
            "eps0": self.eps0,
            "e_charge": self.e_charge,
            "m_electron": self.m_electron,
            "dalton": self.dalton,
        }


CODATA2018 = PhysicalConstants()

h = CODATA2018.h
hbar = CODATA2018.hbar
c = CODATA2018.c
eps0 = CODATA2018.eps0
e_charge = CODATA2018.e_charge
m_electron = CODATA2018.m_electron
dalton = CODATA2018.dalton
kDa = 1e3 * dalton
eV = e_charge

SODIUM_ATOMIC_MASS = 22.98977 * dalton
SODIUM_DENSITY = 968.0  # kg/m^3, bulk
