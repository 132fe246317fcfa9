import math

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from talbotlau import constants as const
from talbotlau.config import ConfigError, RunConfig, parse_quantity
from talbotlau.ensemble import default_ensemble


@pytest.fixture(scope="module")
def cfg():
    return RunConfig.default()


def test_default_values_are_si(cfg):
    v = cfg.values
    assert v["setup"]["g2"]["power"] == pytest.approx(15.2e-3, rel=1e-14)
    assert v["setup"]["g1"]["waist_y"] == pytest.approx(620e-6, rel=1e-14)
    assert v["scan"]["step"] == pytest.approx(15e-9, rel=1e-14)
    assert v["species"]["atomic_mass"] == pytest.approx(22.98977 * const.dalton, rel=1e-14)
    assert v["tof"]["chopper_open"] == pytest.approx(2e-4, rel=1e-14)
    assert v["scan"]["drift_rate"] == pytest.approx(4e-9 / 3600, rel=1e-12)
    assert cfg.seed is None


def test_default_builders_match_library_defaults(cfg):
    assert cfg.setup().powers == pytest.approx((62e-3, 15.2e-3, 68e-3))
    ens = cfg.ensemble()
    ref = default_ensemble()
    assert ens.source_weight.median == pytest.approx(ref.source_weight.median, rel=1e-7)
    assert ens.effective_mass() == pytest.approx(ref.effective_mass(), rel=1e-9)
    sp_a = cfg.material().at_mass(172 * const.kDa)
    from talbotlau.physics import ClusterMaterial
    sp_b = ClusterMaterial().at_mass(172 * const.kDa)
    assert sp_a.polarizability == pytest.approx(sp_b.polarizability, rel=1e-12)
    assert sp_a.sigma_ion == pytest.approx(sp_b.sigma_ion, rel=1e-12)


def test_round_trip_is_stable(cfg):
    text = cfg.dump()
    again = RunConfig.from_text(text, defaults=False)
    assert again.values == cfg.values
    assert again.dump() == text
    assert again.digest() == cfg.digest()


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 200), st.floats(1, 500), st.integers(8, 200))
def test_round_trip_with_random_values(power_mw, waist_um, points):
    c = RunConfig.default().with_overrides([f"setup.g2.power={power_mw!r} mW", f"setup.g1.waist_y={waist_um!r} um",
                                            f"scan.points={points}"])
    back = RunConfig.from_text(c.dump(), defaults=False)
    assert back.values["scan"]["points"] == points
    assert back.values["setup"]["g2"]["power"] == pytest.approx(c.values["setup"]["g2"]["power"], rel=1e-14, abs=1e-300)
    assert back.dump() == c.dump()


def test_digest_ignores_seed_only(cfg):
    seeded = cfg.with_overrides(["seed=7"])
    assert seeded.seed == 7
    assert seeded.digest() == cfg.digest()
    other = cfg.with_overrides(["setup.g2.power=16 mW"])
    assert other.digest() != cfg.digest()


def test_units_are_converted():
    c = RunConfig.from_text("setup:\n  g2: {power: 0.0152 W}\n")
    assert c.values["setup"]["g2"]["power"] == pytest.approx(15.2e-3, rel=1e-14)
    assert parse_quantity("10 nm", "nm") == pytest.approx(1e-8, rel=1e-14)
    assert parse_quantity("1 um", "nm") == pytest.approx(1e-6, rel=1e-14)
    assert parse_quantity("172 kDa", "kDa") == pytest.approx(172 * const.kDa, rel=1e-14)


@pytest.mark.parametrize("text,line,field,fragment", [
    ("setup:\n  separation: 1 m\n  g2:\n    power: -3 mW\n", 4, "setup.g2.power", ">= 0"),
    ("setup:\n  g2:\n    power: 15\n", 3, "setup.g2.power", "missing unit"),
    ("setup:\n  g2:\n    power: 15 m\n", 3, "setup.g2.power", "dimension"),
    ("scan:\n  dwell: 4 s\n  bogus: 3\n", 3, "scan.bogus", "unknown field"),
    ("ensemble:\n  velocity_nodes: 2.5\n", 2, "ensemble.velocity_nodes", "integer"),
    ("macro:\n  nuisance: fancy\n", 2, "macro.nuisance", "one of"),
])
def test_errors_name_line_and_field(text, line, field, fragment):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_text(text)
    assert err.value.line == line
    assert err.value.field == field
    assert fragment in str(err.value)
    assert str(err.value).startswith(f"line {line}: {field}:")


def test_cross_field_checks():
    with pytest.raises(ConfigError, match="20 decades"):
        RunConfig.from_text("macro:\n  log10_tau_max: 10\n")
    with pytest.raises(ConfigError, match="wavelength"):
        RunConfig.from_text("setup:\n  g3: {wavelength: 300 nm}\n")
    with pytest.raises(ConfigError, match="rate_max"):
        RunConfig.from_text("scan:\n  rate_min: 300 1/s\n")


def test_malformed_yaml_reports_line():
    with pytest.raises(ConfigError) as err:
        RunConfig.from_text("setup:\n  g2: {power: 3 mW\n")
    assert err.value.line is not None


def test_overrides():
    c = RunConfig.default().with_overrides(["setup.g2.power=20 mW", "macro.sigma_q_points=5"])
    assert c.values["setup"]["g2"]["power"] == pytest.approx(0.02)
    assert len(c.sigma_q_grid()) == 5
    with pytest.raises(ConfigError):
        RunConfig.default().with_overrides(["setup.g2.power"])
    with pytest.raises(ConfigError):
        RunConfig.default().with_overrides(["setup.g2.power=-1 mW"])


def test_grids(cfg):
    g = cfg.sigma_q_grid()
    assert const.hbar / g[0] == pytest.approx(0.1e-9, rel=1e-12)
    assert const.hbar / g[-1] == pytest.approx(10e-6, rel=1e-12)
    tg = cfg.log_tau_grid()
    assert (tg.start, tg.stop, tg.points) == (0.0, 25.0, 2001)
    masses = cfg.mass_grid()
    assert masses.size == 50 and masses[0] == pytest.approx(50 * const.kDa)
    assert cfg.p2_grid("map").size == 50
    assert cfg.quantile == 0.05
    assert cfg.macro_model().nuisance == "profile"


def test_dump_is_valid_yaml_with_units(cfg):
    doc = yaml.safe_load(cfg.dump())
    assert doc["setup"]["g2"]["power"] == "15.2 mW"
    assert doc["contrast_scale"] == 0.78
    assert math.isclose(float(doc["ensemble"]["v_mean"].split()[0]), 160.0)
