"""Flat ``key = value`` run configuration with unit-suffixed keys.

Lines starting with '#' and blank lines are ignored.  Every key has a type
and a default; unknown keys, malformed values and conflicting alternatives
raise ConfigError.  ``resolve`` turns a validated mapping into the library
objects a subcommand needs.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import cavity
from .engine import DEFAULT_MOD_RATIO
from .transfer import InputNoiseSpec


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help); a default of None means "not set"
SCHEMA = {
    # cavity
    "coupler_reflectance": (float, 0.983, "coupling-mirror power reflectance R_c"),
    "round_trip_loss": (float, None, "intra-cavity round-trip power loss (default 0.005)"),
    "escape_efficiency": (float, None, "alternative to round_trip_loss"),
    "half_bandwidth_Hz": (float, None, "linear half-bandwidth gamma/2pi (default 4.5e6)"),
    "length_m": (float, None, "alternative to half_bandwidth_Hz: mirror separation L"),
    "theta_over_critical": (float, None, "Kerr coefficient as a multiple of the critical value (default 1)"),
    "theta_per_W": (float, None, "Kerr coefficient theta in rad/W"),
    "n2_m2_per_W": (float, None, "Kerr medium: non-linear index"),
    "medium_length_m": (float, None, "Kerr medium: length"),
    "beam_area_m2": (float, None, "Kerr medium: effective beam area"),
    "wavelength_m": (float, 1.064e-6, "Kerr medium: vacuum wavelength"),
    "drive_power_W": (float, 0.75, "mean drive power"),
    # operating point
    "operating_point": (str, "critical", "critical | fraction | optimize"),
    "power_fraction": (float, None, "intra-cavity power over P_res when operating_point = fraction"),
    "omega_target_over_gamma": (float, 0.01, "optimisation frequency"),
    "scan_step": (float, 0.01, "power-fraction step of the optimiser scan"),
    # input noise
    "noise_major_dB": (float, 0.0, "input noise power along vartheta, dB re vacuum"),
    "noise_minor_dB": (float, 0.0, "input noise power along vartheta + 90 deg, dB re vacuum"),
    "noise_vartheta_deg": (float, 0.0, "input ellipse orientation"),
    # frequency grid
    "freq_min_over_gamma": (float, 0.001, "lowest analysis frequency"),
    "freq_max_over_gamma": (float, 10.0, "highest analysis frequency"),
    "points_per_decade": (int, 5, "frequency points per decade"),
    # resonance
    "resonance_theta_over_critical": (_floats, (0.0, 1.0, 2.0), "curves to tabulate"),
    "resonance_points": (int, 401, "power samples per curve"),
    # wigner
    "wigner_freqs_over_gamma": (_floats, (0.1, 1.0), "tile frequencies"),
    "wigner_fractions": (_floats, (0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95), "tile operating points"),
    "wigner_resolution": (int, 201, "grid points per axis"),
    "wigner_sigmas": (float, 6.0, "half-width of the grid in standard deviations"),
    "wigner_binary": (_bool, False, "also write row-major binary grids"),
    # experiment
    "measured_spectrum_path": (str, None, "CSV (Hz, dB re shot noise); synthetic when unset"),
    "target_spectrum_path": (str, None, "CSV (Hz, dB re input peak) for the phase-noise fit"),
    "relaxation_Hz": (float, None, "laser relaxation oscillation (default: measured maximum)"),
    "minor_pole_Hz": (float, None, "pole of the minor-axis noise (default: relaxation_Hz)"),
    "minor_offset_dB": (float, -33.0, "minor-axis level relative to the major axis at the relaxation frequency"),
    "vartheta_deg": (float, 10.0, "input ellipse orientation in the experiment model"),
    "mode_cleaner_pole_Hz": (float, 2.0e6, "mode-cleaner low-pass pole"),
    "kappa": (float, 0.0, "intra-cavity 1/f phase-noise strength"),
    "phase_noise_port": (str, "loss", "loss | input"),
    "detection_power_W": (float, 0.15, "power on the detector"),
    "experiment_fractions": (_floats, (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9), "operating points"),
    "freq_min_Hz": (float, 1.0e5, "experiment band start"),
    "freq_max_Hz": (float, 1.0e7, "experiment band end"),
    "experiment_points_per_decade": (int, 10, "experiment grid density"),
    "relaxation_min_cycles": (int, 256, "modulation periods per record at the relaxation frequency"),
    # engine
    "mod_ratio": (float, DEFAULT_MOD_RATIO, "modulation depth relative to the drive amplitude"),
    "tolerance": (float, None, "engine convergence tolerance (default per run kind)"),
    "linearity_limit": (float, 1e-4, "harmonic content that triggers a rerun at smaller depth (inf: never)"),
    "threads": (int, 1, "worker threads for independent runs"),
}

_EXCLUSIVE = [
    ("round_trip_loss", "escape_efficiency"),
    ("half_bandwidth_Hz", "length_m"),
    ("theta_over_critical", "theta_per_W", "n2_m2_per_W"),
]


def parse_text(text, source="<config>"):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, val = s.partition("=")
        key = key.strip()
        val = val.split(" #", 1)[0].strip()
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = val
    return raw


def load(path=None, overrides=()):
    """Parse ``path`` (optional) and ``key=value`` overrides into a typed mapping."""
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            raw.update(parse_text(fh.read(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, _, v = item.partition("=")
        raw[k.strip()] = v.strip()
    return validate(raw)


def validate(raw):
    cfg = {}
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            cfg[key] = parser(text) if isinstance(text, str) else text
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    for group in _EXCLUSIVE:
        present = [k for k in group if cfg.get(k) is not None]
        if len(present) > 1:
            raise ConfigError(f"keys {present} are mutually exclusive")
    kerr = ("n2_m2_per_W", "medium_length_m", "beam_area_m2")
    if any(k in cfg for k in kerr) and not all(k in cfg for k in kerr):
        raise ConfigError(f"a Kerr medium needs all of {kerr}")
    for key in ("measured_spectrum_path", "target_spectrum_path"):
        if cfg.get(key) and not os.path.isfile(cfg[key]):
            raise ConfigError(f"{key}: file not found: {cfg[key]}")
    if cfg.get("operating_point", "critical") not in ("critical", "fraction", "optimize"):
        raise ConfigError("operating_point must be critical, fraction or optimize")
    if cfg.get("operating_point") == "fraction" and cfg.get("power_fraction") is None:
        raise ConfigError("operating_point = fraction needs power_fraction")
    pf = cfg.get("power_fraction")
    if pf is not None and not 0 < pf <= 1:
        raise ConfigError("power_fraction must lie in (0, 1]")
    if cfg.get("phase_noise_port", "loss") not in ("loss", "input"):
        raise ConfigError("phase_noise_port must be loss or input")
    full = {k: v[1] for k, v in SCHEMA.items()}
    full.update(cfg)
    for key in ("points_per_decade", "resonance_points", "experiment_points_per_decade", "threads"):
        if full[key] < 1:
            raise ConfigError(f"{key} must be at least 1")
    if full["wigner_resolution"] < 2:
        raise ConfigError("wigner_resolution must be at least 2")
    if not 0 < full["freq_min_over_gamma"] < full["freq_max_over_gamma"]:
        raise ConfigError("need 0 < freq_min_over_gamma < freq_max_over_gamma")
    if not 0 < full["mod_ratio"]:
        raise ConfigError("mod_ratio must be positive")
    if not 0 < full["linearity_limit"]:
        raise ConfigError("linearity_limit must be positive")
    if full["drive_power_W"] <= 0:
        raise ConfigError("drive_power_W must be positive")
    return full


@dataclass
class Resolved:
    spec: cavity.CavitySpec
    drive_power: float
    gamma: float
    theta_crit: float
    noise: InputNoiseSpec


def base_spec(cfg):
    """Cavity mirrors and length, with theta = 0."""
    try:
        rc = cfg["coupler_reflectance"]
        if cfg.get("escape_efficiency") is not None:
            spec = cavity.CavitySpec.from_escape_efficiency(rc, cfg["escape_efficiency"])
        else:
            loss = cfg["round_trip_loss"] if cfg.get("round_trip_loss") is not None else 0.005
            spec = cavity.CavitySpec.from_power(rc, loss)
        if cfg.get("length_m") is not None:
            length = cfg["length_m"]
        else:
            hb = cfg["half_bandwidth_Hz"] if cfg.get("half_bandwidth_Hz") is not None else 4.5e6
            if hb <= 0:
                raise ConfigError("half_bandwidth_Hz must be positive")
            length = cavity.length_for_half_bandwidth(spec, 2 * math.pi * hb)
        return cavity.CavitySpec(spec.rho_c, spec.tau_c, spec.rho_end, spec.l_rt, length)
    except cavity.CavityError as exc:
        raise ConfigError(f"invalid cavity: {exc}") from None


def resolve(cfg):
    spec0 = base_spec(cfg)
    p = cfg["drive_power_W"]
    theta_crit = cavity.find_critical_theta(spec0, p)
    if cfg.get("theta_per_W") is not None:
        theta = cfg["theta_per_W"]
    elif cfg.get("n2_m2_per_W") is not None:
        try:
            medium = cavity.KerrMediumSpec(
                cfg["n2_m2_per_W"],
                cfg["medium_length_m"],
                cfg["beam_area_m2"],
                2 * math.pi * cavity.SPEED_OF_LIGHT / cfg["wavelength_m"],
            )
        except cavity.CavityError as exc:
            raise ConfigError(f"invalid Kerr medium: {exc}") from None
        theta = medium.theta
    else:
        mult = cfg["theta_over_critical"] if cfg.get("theta_over_critical") is not None else 1.0
        theta = mult * theta_crit
    if theta < 0:
        raise ConfigError("Kerr coefficient must be non-negative")
    spec = spec0.with_theta(theta)
    try:
        noise = InputNoiseSpec.from_db(cfg["noise_major_dB"], cfg["noise_minor_dB"], cfg["noise_vartheta_deg"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Resolved(spec, p, cavity.half_bandwidth(spec), theta_crit, noise)


def frequency_grid(cfg, gamma):
    lo, hi = cfg["freq_min_over_gamma"], cfg["freq_max_over_gamma"]
    n = max(2, int(round(math.log10(hi / lo) * cfg["points_per_decade"])) + 1)
    return gamma * np.geomspace(lo, hi, n)
