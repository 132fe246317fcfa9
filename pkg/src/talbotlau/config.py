"""Run configuration: YAML with explicit units, normalised to SI.

Each dimensional entry is a string such as ``"62 mW"`` or ``"133 nm"``; the
parser converts it with pint and checks its dimensionality.  Errors name the
dotted field path and the line in the source file.
"""
from dataclasses import dataclass
from importlib import resources
import copy
import math

import numpy as np
import pint
import yaml

from . import constants as const
from .ensemble import BeamEnsemble, SourceWeight
from .macroscopicity import NUISANCE_MODES, LogTauGrid, MacroModel, default_sigma_q_grid
from .physics import ClusterMaterial, DomainError, GratingSettings, InterferometerSetup
from .records import digest
from .synth import NoiseModel, ScanProtocol

ureg = pint.UnitRegistry()


class ConfigError(ValueError):
    def __init__(self, message, field=None, line=None):
        loc = ""
        if field:
            loc += f"{field}: "
        if line is not None:
            loc = f"line {line}: " + loc
        super().__init__(loc + message)
        self.field = field
        self.line = line


def _q(unit, lo=None, hi=None, lo_open=False, hi_open=False):
    return {"kind": "quantity", "unit": unit, "lo": lo, "hi": hi, "lo_open": lo_open, "hi_open": hi_open}


def _num(lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    return {"kind": "int" if integer else "number", "lo": lo, "hi": hi, "lo_open": lo_open,
            "hi_open": hi_open}


# display units double as the canonical units of the dumped document
_GRATING = {
    "power": _q("mW", lo=0.0),
    "waist_y": _q("um", lo=0.0, lo_open=True),
    "wavelength": _q("nm", lo=0.0, lo_open=True),
}

SCHEMA = {
    "species": {
        "atomic_mass": _q("Da", lo=0.0, lo_open=True),
        "density": _q("kg/m^3", lo=0.0, lo_open=True),
        "alpha_volume_per_atom": _q("angstrom^3"),
        "sigma_ion_slope": _q("m^2/kDa", lo=0.0, lo_open=True),
        "sigma_ion_intercept": _q("m^2"),
        "work_function": _q("eV", lo=0.0, lo_open=True),
    },
    "setup": {
        "separation": _q("m", lo=0.0, lo_open=True),
        "g1": _GRATING,
        "g2": _GRATING,
        "g3": _GRATING,
    },
    "ensemble": {
        "v_mean": _q("m/s", lo=0.0, lo_open=True),
        "v_sigma": _q("m/s", lo=0.0),
        "mass_center": _q("kDa", lo=0.0, lo_open=True),
        "mass_rel_width": _num(0.0, 1.0, hi_open=True),
        "edge_fraction": _num(0.0, 1.0),
        "source_median": _q("kDa", lo=0.0, lo_open=True),
        "source_shape": _num(0.0, lo_open=True),
        "velocity_nodes": _num(1, integer=True),
        "mass_nodes": _num(1, integer=True),
        "l_max": _num(1, integer=True),
    },
    "contrast_scale": _num(0.0, 1.0, lo_open=True),
    "scan": {
        "points": _num(1, integer=True),
        "step": _q("nm", lo=0.0, lo_open=True),
        "dwell": _q("s", lo=0.0, lo_open=True),
        "dark_rate": _q("1/s", lo=0.0),
        "drift_rate": _q("nm/hour"),
        "rate_min": _q("1/s", lo=0.0),
        "rate_max": _q("1/s", lo=0.0),
        "total_points": _num(1, integer=True),
    },
    "power_scan": {
        "p2_min": _q("mW", lo=0.0),
        "p2_max": _q("mW", lo=0.0),
        "points": _num(1, integer=True),
        "scans_per_point": _num(1, integer=True),
        "rate0": _q("1/s", lo=0.0),
    },
    "map": {
        "mass_min": _q("kDa", lo=0.0, lo_open=True),
        "mass_max": _q("kDa", lo=0.0, lo_open=True),
        "mass_points": _num(1, integer=True),
        "p2_min": _q("mW", lo=0.0),
        "p2_max": _q("mW", lo=0.0),
        "p2_points": _num(1, integer=True),
        "p1": _q("mW", lo=0.0),
        "p3": _q("mW", lo=0.0),
    },
    "tof": {
        "flight_path": _q("m", lo=0.0, lo_open=True),
        "chopper_open": _q("ms", lo=0.0),
        "entrance_voltage": _q("V", lo=0.0),
        "mass": _q("kDa", lo=0.0, lo_open=True),
        "charge_state": _num(1, integer=True),
        "counts_total": _num(1, integer=True),
        "bins": _num(16, integer=True),
    },
    "macro": {
        "log10_tau_min": _num(),
        "log10_tau_max": _num(),
        "tau_points": _num(3, integer=True),
        "hbar_over_sigma_q_min": _q("nm", lo=0.0, lo_open=True),
        "hbar_over_sigma_q_max": _q("nm", lo=0.0, lo_open=True),
        "sigma_q_points": _num(1, integer=True),
        "quantile": _num(0.0, 1.0, lo_open=True, hi_open=True),
        "nuisance": {"kind": "choice", "choices": NUISANCE_MODES},
    },
    "seed": {"kind": "seed"},
}


def _si_factor(unit):
    """SI magnitude of one display unit; masses use the pinned dalton."""
    if unit == "kDa":
        return const.kDa
    if unit == "Da":
        return const.dalton
    if unit == "m^2/kDa":
        return 1.0 / const.kDa
    if unit == "eV":
        return const.eV
    return float(ureg.Quantity(1.0, unit).to_base_units().magnitude)


def _parse_quantity(text, spec, path, line):
    if isinstance(text, bool) or not isinstance(text, (str, int, float)):
        raise ConfigError("expected a quantity with unit, e.g. '62 mW'", path, line)
    if not isinstance(text, str):
        if spec["unit"] in ("", "1"):
            return float(text)
        raise ConfigError(f"missing unit (expected something like {spec['unit']!r})", path, line)
    try:
        q = ureg.Quantity(text)
    except Exception as exc:  # pint raises several unrelated exception types
        raise ConfigError(f"cannot parse quantity {text!r}: {exc}", path, line) from None
    target = spec["unit"]
    tq = ureg.Quantity(1.0, target)
    if not isinstance(q, ureg.Quantity) or q.dimensionality != tq.dimensionality:
        raise ConfigError(f"{text!r} does not have the dimension of {target}", path, line)
    # express in the display unit (15 significant digits, the precision of the
    # dumped document, so that parse(dump(x)) == x), then scale to SI
    return float(f"{float(q.to(tq.units).magnitude):.15g}") * _si_factor(target)


def parse_quantity(text, unit, field=None):
    """SI value of ``text`` (e.g. ``"10 nm"``), which must have the dimension of ``unit``."""
    return _parse_quantity(text, {"unit": unit}, field, None)


def _check_range(value, spec, path, line):
    lo, hi = spec.get("lo"), spec.get("hi")
    if lo is not None and (value < lo or (spec.get("lo_open") and value == lo)):
        op = ">" if spec.get("lo_open") else ">="
        raise ConfigError(f"must be {op} {lo}, got {value!r}", path, line)
    if hi is not None and (value > hi or (spec.get("hi_open") and value == hi)):
        op = "<" if spec.get("hi_open") else "<="
        raise ConfigError(f"must be {op} {hi}, got {value!r}", path, line)


def _parse_leaf(value, spec, path, line):
    kind = spec["kind"]
    if kind == "quantity":
        out = _parse_quantity(value, spec, path, line)
        if not math.isfinite(out):
            raise ConfigError("must be finite", path, line)
        _check_range(out, spec, path, line)
        return out
    if kind in ("number", "int"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path, line)
        if kind == "int" and not float(value).is_integer():
            raise ConfigError(f"expected an integer, got {value!r}", path, line)
        out = int(value) if kind == "int" else float(value)
        if not math.isfinite(out):
            raise ConfigError("must be finite", path, line)
        _check_range(out, spec, path, line)
        return out
    if kind == "choice":
        if value not in spec["choices"]:
            raise ConfigError(f"must be one of {list(spec['choices'])}, got {value!r}", path, line)
        return value
    if kind == "seed":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ConfigError("seed must be a non-negative integer or null", path, line)
        return int(value)
    raise AssertionError(kind)


def _line_map(text):
    """Dotted path -> 1-based line of the value node."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = v.start_mark.line + 1
                out.setdefault(path + "#key", k.start_mark.line + 1)
                walk(v, path)

    walk(root, "")
    return out


def _merge(base, override, schema, lines, prefix=""):
    if not isinstance(override, dict):
        raise ConfigError("expected a mapping", prefix or None, lines.get(prefix))
    out = dict(base)
    for key, value in override.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in schema:
            raise ConfigError("unknown field", path, lines.get(path + "#key"))
        sub = schema[key]
        if "kind" in sub:
            out[key] = _parse_leaf(value, sub, path, lines.get(path))
        else:
            out[key] = _merge(base[key], value, sub, lines, path)
    return out


def _validate_cross(values, lines):
    s = values["scan"]
    if s["rate_max"] < s["rate_min"]:
        raise ConfigError("rate_max must be >= rate_min", "scan.rate_max", lines.get("scan.rate_max"))
    m = values["macro"]
    if m["log10_tau_max"] - m["log10_tau_min"] < 20:
        raise ConfigError("log-tau grid must span at least 20 decades", "macro.log10_tau_max",
                          lines.get("macro.log10_tau_max"))
    if m["hbar_over_sigma_q_max"] <= m["hbar_over_sigma_q_min"]:
        raise ConfigError("upper bound must exceed lower bound", "macro.hbar_over_sigma_q_max",
                          lines.get("macro.hbar_over_sigma_q_max"))
    e = values["ensemble"]
    if e["v_sigma"] > 0.2 * e["v_mean"]:
        raise ConfigError("v_sigma / v_mean must not exceed 0.2", "ensemble.v_sigma",
                          lines.get("ensemble.v_sigma"))
    for key in ("map.mass_max", "map.p2_max", "power_scan.p2_max"):
        sec, name = key.split(".")
        lo = values[sec][name.replace("max", "min")]
        if values[sec][name] < lo:
            raise ConfigError("maximum below minimum", key, lines.get(key))
    waves = {values["setup"][g]["wavelength"] for g in ("g1", "g2", "g3")}
    if len(waves) != 1:
        raise ConfigError("all gratings must share one wavelength", "setup.g2.wavelength",
                          lines.get("setup.g2.wavelength"))


def _default_text():
    return resources.files("talbotlau").joinpath("data/default.yaml").read_text(encoding="utf-8")


def _parse_text(text, base=None, source="<config>"):
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML in {source}: {getattr(exc, 'problem', exc)}",
                          None, None if mark is None else mark.line + 1) from None
    if doc is None:
        doc = {}
    lines = _line_map(text)
    if base is None:
        return _merge(_empty(SCHEMA), doc, SCHEMA, lines)
    return _merge(base, doc, SCHEMA, lines)


def _empty(schema):
    return {k: (None if "kind" in v else _empty(v)) for k, v in schema.items()}


def _missing(values, schema, prefix=""):
    for k, sub in schema.items():
        path = f"{prefix}.{k}" if prefix else k
        if "kind" in sub:
            if values[k] is None and sub["kind"] != "seed":
                yield path
        else:
            yield from _missing(values[k], sub, path)


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration; ``values`` is a nested dict of SI floats."""

    values: dict

    # -- construction -----------------------------------------------------

    @classmethod
    def default(cls):
        return cls.from_text(_default_text(), source="default.yaml", defaults=False)

    @classmethod
    def from_text(cls, text, source="<config>", defaults=True):
        """Parse a document; with ``defaults`` missing fields fall back to the defaults."""
        base = cls.default().values if defaults else None
        values = _parse_text(text, copy.deepcopy(base) if base else None, source)
        missing = list(_missing(values, SCHEMA))
        if missing:
            raise ConfigError("required field missing", missing[0])
        _validate_cross(values, _line_map(text))
        return cls(values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=str(path))

    def with_overrides(self, assignments):
        """Apply ``section.field=value`` strings (values parsed as YAML scalars)."""
        doc = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = doc
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = yaml.safe_load(raw)
        values = _merge(copy.deepcopy(self.values), doc, SCHEMA, {})
        _validate_cross(values, {})
        return RunConfig(values)

    # -- serialisation ----------------------------------------------------

    def to_document(self):
        """Nested dict in display units, suitable for YAML dumping."""
        def conv(values, schema):
            out = {}
            for k, sub in schema.items():
                v = values[k]
                if "kind" not in sub:
                    out[k] = conv(v, sub)
                elif sub["kind"] == "quantity":
                    out[k] = f"{v / _si_factor(sub['unit']):.15g} {sub['unit']}"
                else:
                    out[k] = v
            return out
        return conv(self.values, SCHEMA)

    def dump(self):
        return yaml.safe_dump(self.to_document(), sort_keys=False, default_flow_style=False)

    def digest(self):
        """SHA-256 of the SI values; the seed is excluded so datasets differing
        only in seed share a digest."""
        vals = {k: v for k, v in self.values.items() if k != "seed"}
        return digest(vals)

    @property
    def seed(self):
        return self.values["seed"]

    # -- builders ---------------------------------------------------------

    def material(self):
        s = self.values["species"]
        return ClusterMaterial(
            atomic_mass=s["atomic_mass"],
            density=s["density"],
            alpha_per_atom=4.0 * math.pi * const.eps0 * s["alpha_volume_per_atom"],
            sigma_ion_slope=s["sigma_ion_slope"],
            sigma_ion_intercept=s["sigma_ion_intercept"],
            work_function=s["work_function"],
        )

    def setup(self):
        st = self.values["setup"]
        gs = [GratingSettings(st[g]["power"], st[g]["waist_y"], st[g]["wavelength"]) for g in ("g1", "g2", "g3")]
        try:
            return InterferometerSetup(*gs, separation=st["separation"])
        except DomainError as exc:
            raise ConfigError(str(exc), "setup") from None

    def ensemble(self):
        e = self.values["ensemble"]
        return BeamEnsemble(
            v_mean=e["v_mean"],
            v_sigma=e["v_sigma"],
            mass_center=e["mass_center"],
            mass_rel_width=e["mass_rel_width"],
            source_weight=SourceWeight(e["source_median"], e["source_shape"]),
            edge_fraction=e["edge_fraction"],
            velocity_nodes=e["velocity_nodes"],
            mass_nodes=e["mass_nodes"],
        )

    @property
    def l_max(self):
        return self.values["ensemble"]["l_max"]

    @property
    def contrast_scale(self):
        return self.values["contrast_scale"]

    def protocol(self):
        s = self.values["scan"]
        return ScanProtocol(points=s["points"], step=s["step"], dwell=s["dwell"])

    def noise(self):
        s = self.values["scan"]
        return NoiseModel(dark_rate=s["dark_rate"], drift_rate=s["drift_rate"])

    def rate_range(self):
        s = self.values["scan"]
        return (s["rate_min"], s["rate_max"])

    def p2_grid(self, section="power_scan"):
        s = self.values[section]
        n = s["points"] if section == "power_scan" else s["p2_points"]
        return np.linspace(s["p2_min"], s["p2_max"], n)

    def mass_grid(self):
        s = self.values["map"]
        return np.linspace(s["mass_min"], s["mass_max"], s["mass_points"])

    def macro_model(self):
        return MacroModel(self.setup(), self.material(), self.ensemble(), self.values["macro"]["nuisance"])

    def log_tau_grid(self):
        m = self.values["macro"]
        return LogTauGrid(m["log10_tau_min"], m["log10_tau_max"], m["tau_points"])

    def sigma_q_grid(self):
        m = self.values["macro"]
        return default_sigma_q_grid(m["sigma_q_points"], m["hbar_over_sigma_q_min"], m["hbar_over_sigma_q_max"])

    @property
    def quantile(self):
        return self.values["macro"]["quantile"]
