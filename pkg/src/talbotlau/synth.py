"""Synthetic raw data: fringe scans, G2 power scans and time-of-flight traces.

Every generator takes an explicit seed and draws from a single
``numpy.random.Generator`` (PCG64) stream; the seed and stream index are
written into the record metadata.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import constants as const
from .ensemble import DEFAULT_CONTRAST_SCALE, visibility_vs_power
from .physics import DomainError
from .records import FringeScanRecord, TofTrace


class SeedRequiredError(ValueError):
    """Raised when a generator is called without a seed."""


def _rng(seed, stream=None):
    if seed is None:
        raise SeedRequiredError("an explicit seed is required")
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=() if stream is None else (int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ScanProtocol:
    points: int = 60
    step: float = 15e-9       # m
    dwell: float = 4.0        # s
    start: float = 0.0        # m
    settle: float = 0.0       # s between points

    def __post_init__(self):
        if self.points < 1 or not self.step > 0 or not self.dwell > 0:
            raise DomainError("scan protocol needs points >= 1, step > 0 and dwell > 0")

    def positions(self):
        return self.start + self.step * np.arange(self.points)

    def timestamps(self):
        return (self.dwell + self.settle) * np.arange(self.points)

    @property
    def duration(self):
        return self.points * (self.dwell + self.settle)


@dataclass(frozen=True)
class NoiseModel:
    dark_rate: float = 30.0   # counts/s
    drift_rate: float = 0.0   # m/s of fringe phase drift

    def __post_init__(self):
        if self.dark_rate < 0:
            raise DomainError("dark rate must be non-negative")


@dataclass(frozen=True)
class FringeTruth:
    """Ground truth of one scan: visibility, mean interfering rate and phase."""

    visibility: float
    rate: float                        # r0, counts/s
    phase_offset: float = 0.0          # x̄ in m
    powers: tuple = (62e-3, 15.2e-3, 68e-3)
    mass_setting: float = 170.0 * const.kDa
    period: float = 133e-9

    def __post_init__(self):
        if not 0 <= self.visibility <= 1:
            raise DomainError("visibility must lie in [0, 1]")
        if self.rate < 0:
            raise DomainError("rate must be non-negative")

    @classmethod
    def from_context(cls, context, rate, params=None, contrast_scale=DEFAULT_CONTRAST_SCALE,
                     phase_offset=0.0, mass_setting=None):
        """Truth from a macroscopicity prediction context, optionally with MMM damping."""
        V = contrast_scale * context.visibility(params)
        return cls(float(min(V, 1.0)), rate, phase_offset, context.setup.powers,
                   context.ensemble.mass_center if mass_setting is None else mass_setting,
                   context.setup.period)


def expected_counts(truth, protocol=ScanProtocol(), noise=NoiseModel(), t0=0.0):
    x = protocol.positions()
    t = t0 + protocol.timestamps()
    drift = noise.drift_rate * t
    arg = 2.0 * np.pi * (x - truth.phase_offset - drift) / truth.period
    return protocol.dwell * (truth.rate * (1.0 + truth.visibility * np.cos(arg)) + noise.dark_rate)


def synth_fringe_scan(truth, protocol=ScanProtocol(), noise=NoiseModel(), seed=None, stream=None,
                      t0=0.0, asimov=False):
    """One fringe scan with Poisson counts.

    ``asimov=True`` replaces the draw by the rounded expectation (still requires
    a seed so call sites stay uniform).
    """
    rng = _rng(seed, stream)
    lam = expected_counts(truth, protocol, noise, t0)
    counts = np.rint(lam).astype(np.int64) if asimov else rng.poisson(lam)
    meta = {
        "seed": int(seed) if not isinstance(seed, np.random.SeedSequence) else None,
        "stream": stream,
        "truth_visibility": truth.visibility,
        "truth_rate": truth.rate,
        "truth_phase_offset_m": truth.phase_offset,
        "drift_rate_m_per_s": noise.drift_rate,
        "scan_start_s": t0,
        "asimov": bool(asimov),
    }
    return FringeScanRecord(
        positions=protocol.positions(),
        dwell_times=np.full(protocol.points, protocol.dwell),
        counts=counts,
        powers=truth.powers,
        mass_setting=truth.mass_setting,
        timestamp_offsets=protocol.timestamps(),
        dark_rate=noise.dark_rate,
        period=truth.period,
        metadata=meta,
    )


def synth_dataset(context, total_points=3895, protocol=ScanProtocol(), noise=NoiseModel(),
                  seed=None, rate_range=(50.0, 200.0), params=None,
                  contrast_scale=DEFAULT_CONTRAST_SCALE, asimov=False):
    """A sequence of scans adding up to ``total_points`` at one grating setting.

    Rates are drawn uniformly from ``rate_range`` and fringe phases uniformly
    over one period, per scan.  The final scan is shortened if needed.
    """
    if total_points < 1:
        raise DomainError("total_points must be positive")
    rng = _rng(seed)
    scans = []
    left = total_points
    t0 = 0.0
    k = 0
    while left > 0:
        n = min(protocol.points, left)
        proto = ScanProtocol(n, protocol.step, protocol.dwell, protocol.start, protocol.settle)
        rate = float(rng.uniform(*rate_range))
        phase = float(rng.uniform(0.0, context.setup.period))
        truth = FringeTruth.from_context(context, rate, params, contrast_scale, phase)
        scans.append(synth_fringe_scan(truth, proto, noise, seed=seed, stream=k, t0=t0, asimov=asimov))
        left -= n
        t0 += proto.duration
        k += 1
    return scans


def synth_power_scan(p2_grid, setup, material, ensemble, rate0=100.0, protocol=ScanProtocol(),
                     noise=NoiseModel(), seed=None, scans_per_point=1, model="quantum",
                     contrast_scale=DEFAULT_CONTRAST_SCALE):
    """Scans along a G2 power grid with model visibility and transmission-scaled rates."""
    if seed is None:
        raise SeedRequiredError("an explicit seed is required")
    p2 = np.atleast_1d(np.asarray(p2_grid, dtype=float))
    curve = visibility_vs_power(setup, material, ensemble, p2, model=model, contrast_scale=contrast_scale)
    V = curve.V_quantum if model == "quantum" else curve.V_classical
    records = []
    t0 = 0.0
    stream = 0
    for i, p in enumerate(p2):
        powers = (setup.g1.power, float(p), setup.g3.power)
        vis = 0.0 if not np.isfinite(V[i]) else float(min(V[i], 1.0))
        for _ in range(scans_per_point):
            truth = FringeTruth(vis, rate0 * float(curve.transmission[i]), 0.0, powers,
                                ensemble.mass_center, setup.period)
            rec = synth_fringe_scan(truth, protocol, noise, seed=seed, stream=stream, t0=t0)
            rec.metadata["P2_W"] = float(p)
            records.append(rec)
            t0 += protocol.duration
            stream += 1
    return records


def entrance_velocity_gain(voltage, mass, charge_state=1, constants=const.CODATA2018):
    """``sqrt(2 q e U / m)``: velocity added by the quadrupole entrance voltage."""
    if voltage < 0 or not mass > 0:
        raise DomainError("voltage must be >= 0 and mass > 0")
    return math.sqrt(2.0 * charge_state * constants.e_charge * voltage / mass)


def synth_tof_trace(v_mean=160.0, v_sigma=10.0, flight_path=2.5, chopper_open=0.2e-3,
                    voltage=5.0, mass=200.0 * const.kDa, counts_total=200_000, seed=None,
                    charge_state=1, bins=400, bin_edges=None):
    """Binned arrival times ``flight_path / v' + U(0, chopper_open)``."""
    if not (v_mean > 0 and v_sigma >= 0 and flight_path > 0 and chopper_open >= 0 and counts_total >= 0):
        raise DomainError("TOF inputs must be positive")
    rng = _rng(seed)
    gain = entrance_velocity_gain(voltage, mass, charge_state)
    v = rng.normal(v_mean, v_sigma, counts_total) if v_sigma > 0 else np.full(counts_total, v_mean)
    v = v[v > 0]
    t = flight_path / (v + gain) + chopper_open * rng.random(v.size)
    if bin_edges is None:
        vp = v_mean + gain
        tc = flight_path / vp
        st = flight_path * max(v_sigma, 1e-3 * v_mean) / vp**2
        lo = max(tc - 8.0 * st, 0.0)
        hi = tc + 8.0 * st + chopper_open
        bin_edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(t, bins=bin_edges)
    meta = {"seed": int(seed), "truth_v_mean": v_mean, "truth_v_sigma": v_sigma}
    return TofTrace(bin_edges, counts.astype(float), chopper_open, flight_path, voltage, mass,
                    charge_state, meta)
