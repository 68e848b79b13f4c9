"""Command-line front end.

    knlc <subcommand> [--config FILE] [--set key=value ...] [--out DIR]
                      [--format csv|json] [--threads N] [--mod-ratio X] [--tolerance X]

Exit status: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import __version__, cavity, config, experiment, io, phasespace
from .engine import EngineError
from .transfer import TransferError, TransferMatrix, dress_with_input_noise, spectral_density

log = logging.getLogger("knlc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
SUBCOMMANDS = ("resonance", "spectrum", "wigner", "optimize", "experiment", "critical")


class _Run:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = args.out
        self.fmt = args.format
        self.outputs = []
        self.results = {}

    @property
    def engine_kw(self):
        return {
            "mod_ratio": self.cfg["mod_ratio"],
            "tolerance": self.cfg["tolerance"],
            "linearity_limit": self.cfg["linearity_limit"],
        }

    def path(self, stem, ext=None):
        p = os.path.join(self.out, f"{stem}.{ext or self.fmt}")
        self.outputs.append(os.path.basename(p))
        return p

    def manifest(self):
        doc = {
            "format": "knlc-manifest",
            "version": io.FORMAT_VERSION,
            "package_version": __version__,
            "command": self.args.command,
            "config": self.cfg,
            "outputs": self.outputs,
            "results": self.results,
        }
        io.atomic_write(os.path.join(self.out, "manifest.json"), io.dumps_json(doc))


def _operating_point(run, res):
    cfg = run.cfg
    mode = cfg["operating_point"]
    if mode == "fraction":
        return cavity.operating_point_for_fraction(res.spec, res.drive_power, cfg["power_fraction"])
    if mode == "optimize":
        opt = _optimize(run, res)
        return opt.operating_point
    return cavity.critical_operating_point(res.spec, res.drive_power)


def _optimize(run, res):
    cfg = run.cfg
    step = cfg["scan_step"]
    fractions = np.round(np.arange(0.25, 0.99 + 1e-9, step), 10)
    opt = phasespace.optimize_operating_point(
        res.spec,
        res.drive_power,
        cfg["omega_target_over_gamma"] * res.gamma,
        res.noise,
        fractions=fractions,
        threads=cfg["threads"],
        **run.engine_kw,
    )
    run.results["optimized"] = {
        "power_fraction": opt.operating_point.power_fraction,
        "phi_rad": opt.operating_point.phi,
        "intracavity_power_W": opt.operating_point.intracavity_power,
        "angle_rad": opt.angle,
        "crossing_brackets": [list(b) for b in opt.crossings],
        "note": opt.note,
    }
    return opt


def _describe(res, op=None):
    d = {
        "cavity": res.spec,
        "gamma_rad_per_s": res.gamma,
        "theta_crit_rad_per_W": res.theta_crit,
        "escape_efficiency": cavity.escape_efficiency(res.spec),
        "round_trip_time_s": cavity.round_trip_time(res.spec),
        "p_res_W": cavity.resonant_power(res.spec, res.drive_power),
    }
    if op is not None:
        d["operating_point"] = op
    return d


def cmd_resonance(run):
    cfg = run.cfg
    spec0 = config.base_spec(cfg)
    p_in = cfg["drive_power_W"]
    theta_crit = cavity.find_critical_theta(spec0, p_in)
    t_rt = cavity.round_trip_time(spec0)
    gamma = cavity.half_bandwidth(spec0)
    p_res = cavity.resonant_power(spec0, p_in)
    p_min = spec0.tau_c**2 * p_in / (1 + spec0.rho) ** 2
    grid = np.linspace(p_min, p_res, cfg["resonance_points"])
    rows = []
    for mult in cfg["resonance_theta_over_critical"]:
        curve = cavity.solve_resonance_curve(spec0.with_theta(mult * theta_crit), p_in, grid)
        for phi, p, ph, br in zip(curve.phi, curve.power, curve.phase, curve.branch):
            rows.append((mult, br, phi, 2 * phi / (t_rt * gamma), p / p_res, ph))
    cols = ("theta_over_critical", "branch", "phi_rad", "detuning_over_gamma", "power_over_p_res", "phase_rad")
    path = run.path("resonance")
    if run.fmt == "csv":
        io.write_rows_csv(path, "resonance", cols, rows)
    else:
        arr = np.array(rows)
        io.atomic_write(path, io.dumps_json({"format": "knlc-resonance", "version": io.FORMAT_VERSION,
                                             "columns": {c: arr[:, i] for i, c in enumerate(cols)}}))
    run.results.update({"theta_crit_rad_per_W": theta_crit, "p_res_W": p_res, "gamma_rad_per_s": gamma})


def cmd_critical(run):
    res = config.resolve(run.cfg)
    spec = res.spec.with_theta(res.theta_crit)
    frac = cavity.critical_fraction(spec, res.drive_power)
    op = cavity.critical_operating_point(spec, res.drive_power)
    run.results.update(_describe(res, op))
    run.results.update({"critical_fraction": frac, "theta_crit_rad_per_W": res.theta_crit})
    path = run.path("critical")
    cols = ("theta_crit_rad_per_W", "critical_fraction", "phi_rad", "intracavity_power_W", "p_res_W")
    row = (res.theta_crit, frac, op.phi, op.intracavity_power, cavity.resonant_power(spec, res.drive_power))
    if run.fmt == "csv":
        io.write_rows_csv(path, "critical", cols, [row])
    else:
        io.atomic_write(path, io.dumps_json(dict(zip(cols, row))))


def cmd_spectrum(run):
    res = config.resolve(run.cfg)
    op = _operating_point(run, res)
    grid = config.frequency_grid(run.cfg, res.gamma)
    table = phasespace.sweep_spectrum(res.spec, op, res.noise, grid, threads=run.cfg["threads"], **run.engine_kw)
    table.metadata["snapped_omega_over_gamma"] = table.omega_over_gamma
    path = run.path("spectrum")
    (io.write_spectrum_csv if run.fmt == "csv" else io.write_spectrum_json)(table, path)
    run.results.update(_describe(res, op))
    run.results["max_linearity"] = float(np.max(table.linearity))


def cmd_optimize(run):
    res = config.resolve(run.cfg)
    opt = _optimize(run, res)
    run.results.update(_describe(res, opt.operating_point))
    path = run.path("optimize")
    cols = ("power_fraction", "phi_rad", "intracavity_power_W", "angle_rad", "omega_target_over_gamma")
    op = opt.operating_point
    row = (op.power_fraction, op.phi, op.intracavity_power, opt.angle, run.cfg["omega_target_over_gamma"])
    if run.fmt == "csv":
        io.write_rows_csv(path, "optimize", cols, [row], {"note": opt.note})
    else:
        io.atomic_write(path, io.dumps_json(dict(zip(cols, row), note=opt.note)))


def cmd_wigner(run):
    cfg = run.cfg
    res = config.resolve(cfg)
    tiles = []
    inp = phasespace.ellipse_from_spectral(
        spectral_density(dress_with_input_noise(TransferMatrix(np.eye(2), 0.0), res.noise))
    )
    tiles.append(("input", None, None, inp))
    for w in cfg["wigner_freqs_over_gamma"]:
        for f in cfg["wigner_fractions"]:
            op = cavity.operating_point_for_fraction(res.spec, res.drive_power, f)
            meas = phasespace.measure_transfer(res.spec, op, w * res.gamma, **run.engine_kw)
            _, ell = phasespace.spectral_row(meas, res.noise)
            tiles.append((f"w{w:g}_f{f:g}", meas.omega / res.gamma, f, ell))
    summary = []
    for name, w, f, ell in tiles:
        grid = phasespace.wigner_grid(ell, resolution=cfg["wigner_resolution"], bounds=_bounds(ell, cfg["wigner_sigmas"]))
        extra = {"omega_over_gamma": w, "power_fraction": f}
        stem = f"wigner_{name}"
        if run.fmt == "csv":
            io.write_wigner_csv(grid, run.path(stem), extra)
        else:
            io.write_wigner_json(grid, run.path(stem), extra)
        if cfg["wigner_binary"]:
            p = run.path(stem, "bin")
            io.write_wigner_binary(grid, p, extra)
            run.outputs.append(os.path.basename(p) + ".json")
        summary.append({"tile": name, "omega_over_gamma": w, "power_fraction": f, "ellipse": ell,
                        "purity": ell.purity})
    run.results.update(_describe(res))
    run.results["tiles"] = summary


def _bounds(ell, sigmas):
    r = sigmas * math.sqrt(ell.var_max / 2.0)
    return (-r, r, -r, r)


def cmd_experiment(run):
    cfg = run.cfg
    # the same cavity keys as every other subcommand
    res = config.resolve(cfg)
    kerr_keys = ("theta_over_critical", "theta_per_W", "n2_m2_per_W")
    try:
        pcfg = experiment.PipelineConfig(
            coupler_reflectance=cfg["coupler_reflectance"],
            round_trip_loss=res.spec.l_rt**2,
            half_bandwidth_hz=res.gamma / (2 * math.pi),
            drive_power_W=cfg["drive_power_W"],
            theta=res.spec.theta if any(cfg.get(k) is not None for k in kerr_keys) else None,
            vartheta_deg=cfg["vartheta_deg"],
            minor_offset_db=cfg["minor_offset_dB"],
            relaxation_hz=cfg["relaxation_Hz"],
            minor_pole_hz=cfg["minor_pole_Hz"],
            mode_cleaner_pole_hz=cfg["mode_cleaner_pole_Hz"],
            kappa=cfg["kappa"],
            phase_noise_port=cfg["phase_noise_port"],
            detection_power_W=cfg["detection_power_W"],
            fractions=tuple(cfg["experiment_fractions"]),
            freq_min_hz=cfg["freq_min_Hz"],
            freq_max_hz=cfg["freq_max_Hz"],
            points_per_decade=cfg["experiment_points_per_decade"],
            relaxation_min_cycles=cfg["relaxation_min_cycles"],
            mod_ratio=cfg["mod_ratio"],
            linearity_limit=cfg["linearity_limit"],
            tolerance=cfg["tolerance"],
        )
    except experiment.PipelineError as exc:
        raise config.ConfigError(str(exc)) from None
    if cfg["measured_spectrum_path"]:
        meas = experiment.ingest_spectrum(cfg["measured_spectrum_path"])
    else:
        band = np.geomspace(pcfg.freq_min_hz / 2, pcfg.freq_max_hz * 2, 400)
        meas = experiment.synthetic_laser_spectrum(band)
        run.results["input_spectrum"] = "synthetic"
    target = experiment.ingest_spectrum(cfg["target_spectrum_path"]) if cfg["target_spectrum_path"] else None
    result = experiment.run_experiment_model(pcfg, meas, target)
    cols = ("freq_Hz", "reduction_dB", "S11", "S22", "S12")

    def emit(stem, sp):
        rows = [(f, r, s.s11, s.s22, s.s12) for f, r, s in zip(sp.freq_hz, sp.reduction_db, sp.detected)]
        path = run.path(stem)
        meta = {"power_fraction": sp.fraction, "phi_rad": sp.operating_point.phi}
        if run.fmt == "csv":
            io.write_rows_csv(path, "experiment", cols, rows, meta)
        else:
            arr = np.array(rows)
            io.atomic_write(path, io.dumps_json(dict(meta, columns={c: arr[:, i] for i, c in enumerate(cols)})))

    for sp in result.spectra:
        emit(f"experiment_f{sp.fraction:g}", sp)
    emit("experiment_best", result.best)
    ref_rows = list(zip(result.freq_hz, result.reference_db))
    if run.fmt == "csv":
        io.write_rows_csv(run.path("experiment_reference"), "experiment-reference", ("freq_Hz", "level_dB"), ref_rows)
    else:
        arr = np.array(ref_rows)
        io.atomic_write(run.path("experiment_reference"), io.dumps_json({"freq_Hz": arr[:, 0], "level_dB": arr[:, 1]}))
    run.results.update(
        {
            "pipeline": result.config.as_dict(),
            "cavity": result.spec,
            "escape_efficiency": cavity.escape_efficiency(result.spec),
            "normalization": result.normalization,
            "best_fraction": result.best.fraction,
            "kappa_fit": result.kappa_fit,
            "snapped_freq_Hz": result.freq_hz,
        }
    )


COMMANDS = {
    "resonance": cmd_resonance,
    "spectrum": cmd_spectrum,
    "wigner": cmd_wigner,
    "optimize": cmd_optimize,
    "experiment": cmd_experiment,
    "critical": cmd_critical,
}


def build_parser():
    p = argparse.ArgumentParser(prog="knlc", description="Kerr non-linear cavity noise simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--threads", type=int)
    p.add_argument("--mod-ratio", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    for flag, key in (("threads", "threads"), ("mod_ratio", "mod_ratio"), ("tolerance", "tolerance")):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={val}")
    try:
        cfg = config.load(args.config, overrides)
        run = _Run(args, cfg)
        COMMANDS[args.command](run)
        run.manifest()
    except (config.ConfigError, experiment.SpectrumFormatError) as exc:
        print(f"knlc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineError, TransferError, cavity.CavityError, experiment.PipelineError, FloatingPointError) as exc:
        print(f"knlc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
