"""Command-line driver: configuration, experiment presets, report emission.

Subcommands: profiles, spectral, hardy, evolve, modulate, shoot, ode, report.
Configuration can come from a key-value file with TOML-style sections; flags
override file values.  All floating output uses 17 significant digits so CSV
round-trips are exact, and each CSV carries a comment line with the full
resolved configuration.  Exit codes: 2 usage, 3 configuration/domain error,
4 numeric failure (with a diagnostics file in the output directory).
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evolution, gauge, hardy, linops, modulation, profiles
from .errors import ConfigurationError, CsslabError, DomainError, NumericsError
from .grid import EquivariantField, integrate, make_grid, sobolev_norm

CHECKPOINT_MAGIC = b"CSSB"
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    command: str = ""
    m: int = 1
    grid_n: int = 4096
    rmax: float = 40.0
    grading: str = "uniform"
    scheme: str = "crank-nicolson-picard"
    dt: float = 1e-3
    frame: str = "fixed"
    t0: float = 0.0
    t_end: float | None = None
    s_end: float | None = None
    lambda_min: float | None = None
    b0: float = 0.1
    eta0: float = 0.0
    K: float = 10.0
    M: float = 20.0
    bstar: float = 0.2
    init: str = "q"
    theta: str = "constant"
    outdir: str = "."
    seed: int = 0
    snapshot_every: int = 0
    checkpoint_every: int = 0
    max_runs: int = 15

    def validate(self):
        if self.m < 1:
            raise ConfigurationError("equivariance index must be >= 1")
        if self.grid_n < 16:
            raise ConfigurationError("grid n must be >= 16")
        if self.rmax <= 0 or self.dt <= 0:
            raise ConfigurationError("rmax and dt must be positive")
        if self.frame not in ("fixed", "renorm"):
            raise ConfigurationError("frame must be 'fixed' or 'renorm'")
        if not 0.0 < self.b0 < self.bstar:
            raise ConfigurationError("b0 must lie in (0, bstar)")


def parse_config_file(path):
    """Key-value text with [section] headers; returns a flat dict."""
    values = {}
    section = ""
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigurationError(f"cannot parse config line: {raw!r}")
        key, val = (tok.strip() for tok in line.split("=", 1))
        val = val.strip('"').strip("'")
        values[f"{section}.{key}" if section else key] = val
    return values

# config-file keys (section.name) mapped onto RunConfig fields
_CONFIG_KEYS = {
    "run.m": ("m", int), "run.outdir": ("outdir", str), "run.seed": ("seed", int),
    "grid.n": ("grid_n", int), "grid.r_max": ("rmax", float),
    "grid.grading": ("grading", str),
    "solver.scheme": ("scheme", str), "solver.dt": ("dt", float),
    "solver.frame": ("frame", str), "solver.t_end": ("t_end", float),
    "solver.s_end": ("s_end", float), "solver.lambda_min": ("lambda_min", float),
    "profile.b0": ("b0", float), "profile.eta0": ("eta0", float),
    "trapped.K": ("K", float), "trapped.M": ("M", float),
    "trapped.bstar": ("bstar", float),
}


def _apply_config_file(cfg: RunConfig, path):
    for key, raw in parse_config_file(path).items():
        if key not in _CONFIG_KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        name, typ = _CONFIG_KEYS[key]
        setattr(cfg, name, typ(raw))


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{x:.17g}"
    return str(x)


def write_csv(path, columns, rows, config: RunConfig):
    """CSV with a config comment line and 17-significant-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# config: " + json.dumps(asdict(config), default=str,
                                           sort_keys=True) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def write_checkpoint(path, field_: EquivariantField, t):
    """Binary snapshot: magic, version, m, n, r_max, t, interleaved Re/Im."""
    grid = field_.grid
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<i", field_.m))
        fh.write(struct.pack("<I", grid.n_points))
        fh.write(struct.pack("<d", grid.r_max))
        fh.write(struct.pack("<d", t))
        inter = np.empty(2 * grid.n_points)
        inter[0::2] = field_.values.real
        inter[1::2] = field_.values.imag
        fh.write(inter.astype("<f8").tobytes())


def read_checkpoint(path):
    """Read a binary snapshot; the node layout is reconstructed as uniform."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigurationError("not a checkpoint file")
        version, = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        m, = struct.unpack("<i", fh.read(4))
        n, = struct.unpack("<I", fh.read(4))
        r_max, = struct.unpack("<d", fh.read(8))
        t, = struct.unpack("<d", fh.read(8))
        inter = np.frombuffer(fh.read(16 * n), dtype="<f8")
    grid = make_grid(n, r_max, "uniform")
    values = inter[0::2] + 1j * inter[1::2]
    return EquivariantField(grid, m, values), t


def _grid_from(cfg: RunConfig):
    return make_grid(cfg.grid_n, cfg.rmax, cfg.grading)


def _initial_field(cfg: RunConfig, grid):
    if cfg.init == "q":
        q, _ = profiles.static_q(cfg.m, grid)
        return EquivariantField(grid, cfg.m, q.astype(complex)), cfg.t0
    if cfg.init == "s":
        t0 = cfg.t0 if cfg.t0 < 0 else -1.0
        return profiles.pseudoconformal_s(cfg.m, t0, grid), t0
    if cfg.init.startswith("profile:"):
        b0s, eta0s = cfg.init.split(":", 1)[1].split(",")
        prof = profiles.modified_profile(cfg.m, float(b0s), float(eta0s), grid)
        return prof.field(grid), cfg.t0
    if cfg.init.startswith("file:"):
        fld, t0 = read_checkpoint(cfg.init.split(":", 1)[1])
        return fld, t0
    raise ConfigurationError(f"unknown initial data {cfg.init!r}")


# -- subcommand implementations ------------------------------------------------


def cmd_profiles(cfg: RunConfig):
    grid = _grid_from(cfg)
    tables = profiles.build_profile_tables(cfg.m, grid)
    eta = cfg.eta0 if cfg.eta0 != 0.0 else 1e-3
    prof_eta = profiles.solve_q_eta(cfg.m, eta, grid)
    mod = profiles.modified_profile(cfg.m, cfg.b0, min(eta, 0.2 * cfg.b0 ** 1.5),
                                    grid)
    rows = zip(grid.nodes, tables.q, tables.lambda_q, tables.rho,
               prof_eta.q_eta, prof_eta.dq_eta, mod.p.real, mod.p.imag)
    path = write_csv(Path(cfg.outdir) / "profiles.csv",
                     ["r", "Q", "LambdaQ", "rho", "Qeta", "dQeta",
                      "ReP", "ImP"], rows, cfg)
    rho_q = integrate(grid, tables.rho * tables.q)
    print(f"profiles written to {path}; (rho,Q)_r = {rho_q:.17g}")
    return 0


def cmd_spectral(cfg: RunConfig):
    rows = []
    for n in (cfg.grid_n // 2, cfg.grid_n):
        grid = make_grid(n, cfg.rmax, cfg.grading)
        ctx = linops.build_context(cfg.m, grid)
        oset = linops.build_ortho_set(ctx, min(cfg.M, 0.45 * cfg.rmax))
        checks = linops.nullspace_check(ctx)
        tabs = ctx.tables
        f_test = (grid.nodes * tabs.q * np.exp(-grid.nodes ** 2 / 8.0)
                  ).astype(complex)
        conj = linops.conjugation_residual(ctx, f_test)
        levels = [1, 3] + ([5] if cfg.m >= 3 else [])
        coercs = {lv: linops.coercivity_estimate(ctx, lv, oset) for lv in levels}
        gram = oset.gram
        row = [n, conj] + [checks[k] for k in sorted(checks)] \
            + [coercs.get(1, np.nan), coercs.get(3, np.nan),
               coercs.get(5, np.nan)] \
            + list(gram.ravel())
        rows.append(row)
    cols = (["n", "conjugation_residual"] + sorted(
        linops.nullspace_check(linops.build_context(
            cfg.m, make_grid(64, cfg.rmax, cfg.grading))).keys())
        + ["coercivity_l1", "coercivity_l3", "coercivity_l5"]
        + [f"gram_{j}{k}" for j in range(4) for k in range(4)])
    path = write_csv(Path(cfg.outdir) / "spectral_report.csv", cols, rows, cfg)
    print(f"spectral report written to {path}")
    return 0


def cmd_hardy(cfg: RunConfig):
    grid = _grid_from(cfg)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for ell, k in ((cfg.m, 0), (cfg.m, 1), (-(cfg.m + 2), 0), (cfg.m + 1, 1)):
        sup = hardy.noncritical_family_sup(ell, k, grid, cfg.m, n_fields=100,
                                           seed=cfg.seed)
        rows.append(["noncritical", ell, k, sup])
    ctx = linops.build_context(cfg.m, grid)
    ratios = [hardy.subcoercivity_ratio_L(
        ctx, hardy.random_smooth_field(grid, cfg.m, rng)) for _ in range(100)]
    rows.append(["subcoercivity_min", np.nan, np.nan, float(np.min(ratios))])
    gen = [hardy.gen_hardy_ratio(
        min(1, cfg.m), hardy.random_smooth_field(grid, cfg.m, rng))
        for _ in range(100)]
    rows.append(["gen_hardy_min", np.nan, 1, float(np.min(gen))])
    rows.append(["gen_hardy_max", np.nan, 1, float(np.max(gen))])
    deep = make_grid(4096, 2.0, "geometric", alpha=40.0)
    unlogged, logged = hardy.critical_kernel_family(deep, cfg.m, k=cfg.m)
    rows.append(["critical_unlogged_growth", cfg.m, cfg.m,
                 float(unlogged.max() / unlogged.min())])
    rows.append(["critical_logged_variation", cfg.m, cfg.m,
                 float(logged.max() / logged.min())])
    path = write_csv(Path(cfg.outdir) / "hardy_report.csv",
                     ["check", "ell", "k", "value"], rows, cfg)
    print(f"hardy report written to {path}")
    return 0


def _trajectory_rows(rec):
    cols = ["t", "s", "charge", "energy", "virial1", "virial2", "hdot1"]
    data = [rec.times, rec.s_times,
            rec.diagnostics["charge"], rec.diagnostics["energy"],
            rec.diagnostics["virial1"], rec.diagnostics["virial2"],
            rec.diagnostics["hdot1"]]
    if rec.mod_series:
        for name in ("lambda", "gamma", "b", "eta", "eps_l2", "eps1_l2",
                     "eps3_l2", "eps5_l2", "mod_res_1", "mod_res_2",
                     "mod_res_3", "mod_res_4"):
            series = rec.mod_series.get(name)
            if series is None:
                series = np.full(len(rec.times), np.nan)
            else:
                pad = len(rec.times) - len(series)
                if pad > 0:
                    series = np.concatenate([series, np.full(pad, np.nan)])
            cols.append(name)
            data.append(series[:len(rec.times)])
    return cols, list(zip(*data))


def cmd_evolve(cfg: RunConfig):
    grid = _grid_from(cfg)
    u0, t0 = _initial_field(cfg, grid)
    solver = evolution.SolverConfig(
        scheme=cfg.scheme, dt=cfg.dt, t_end=cfg.t_end, s_end=cfg.s_end,
        lambda_min=cfg.lambda_min, snapshot_every=cfg.snapshot_every or 0)
    if cfg.frame == "fixed":
        if cfg.t_end is None:
            raise ConfigurationError("fixed-frame evolve needs t_end")
        rec = evolution.evolve(u0, solver, t0=t0)
    else:
        if cfg.s_end is None and cfg.lambda_min is None:
            raise ConfigurationError("renorm evolve needs s_end or lambda_min")
        dec = modulation.make_decomposer(
            cfg.m, grid, modulation.TrappedConfig(K=cfg.K, M=cfg.M,
                                                  b_star=cfg.bstar))
        hook = modulation._TrackingHook(dec, dec.trapped, cfg.dt)
        rec = evolution.evolve_renormalized(u0, solver, hook)
        if "lambda_fit" in rec.mod_series:
            fit = np.nan_to_num(rec.mod_series["lambda_fit"], nan=1.0)
            rec.mod_series["lambda"] = \
                rec.diagnostics["lambda_frame"][:len(fit)] * fit
            rec.mod_series["gamma"] = \
                rec.diagnostics["gamma_frame"][:len(fit)] \
                + np.nan_to_num(rec.mod_series.get("gamma_fit"), nan=0.0)
    cols, rows = _trajectory_rows(rec)
    path = write_csv(Path(cfg.outdir) / "trajectory.csv", cols, rows, cfg)
    if cfg.checkpoint_every:
        for idx, fld in rec.snapshots:
            tval = rec.times[min(idx, len(rec.times) - 1)]
            write_checkpoint(Path(cfg.outdir) / f"checkpoint_{idx:08d}.cssb",
                             fld, tval)
    print(f"trajectory written to {path} (stop: {rec.stop_reason})")
    if cfg.init == "s" and cfg.frame == "fixed" and cfg.t_end is not None:
        t_final = t0 + sum(np.diff(rec.times))
        exact = profiles.pseudoconformal_s(cfg.m, min(t_final, -1e-6), grid)
        err = np.sqrt(integrate(
            grid, np.abs(rec.snapshots[-1][1].values - exact.values) ** 2))
        print(f"closed-form comparison at t = {t_final:.6g}: "
              f"L2 error {err:.6e}")
    return 0


def cmd_modulate(cfg: RunConfig):
    grid = _grid_from(cfg)
    u0, _ = _initial_field(cfg, grid)
    dec = modulation.make_decomposer(
        cfg.m, grid, modulation.TrappedConfig(K=cfg.K, M=cfg.M,
                                              b_star=cfg.bstar))
    result = dec.decompose(u0)
    st = result.state
    rows = [[st.lam, st.gamma, st.b, st.eta,
             result.eps_norms["eps_l2"], result.eps_norms["eps1_l2"],
             result.eps_norms["eps3_l2"],
             result.eps_norms.get("eps5_l2", np.nan),
             *result.ortho_residuals]]
    path = write_csv(Path(cfg.outdir) / "modulation.csv",
                     ["lambda", "gamma", "b", "eta", "eps_l2", "eps1_l2",
                      "eps3_l2", "eps5_l2", "mod_res_1", "mod_res_2",
                      "mod_res_3", "mod_res_4"], rows, cfg)
    print(f"modulation written to {path}")
    return 0


def cmd_shoot(cfg: RunConfig):
    grid = _grid_from(cfg)
    trapped = modulation.TrappedConfig(K=cfg.K, M=cfg.M, b_star=cfg.bstar)
    dec = modulation.make_decomposer(cfg.m, grid, trapped)
    solver = evolution.SolverConfig(
        dt=cfg.dt, s_end=cfg.s_end or 150.0,
        lambda_min=cfg.lambda_min or 0.1)
    report = modulation.shoot_eta(cfg.b0, None, dec, solver, trapped,
                                  max_runs=cfg.max_runs)
    rows = [[r.eta0, r.exit_reason, r.exit_sign, r.lambda_final, r.s_final]
            for r in report.runs]
    path = write_csv(Path(cfg.outdir) / "shoot_report.csv",
                     ["eta0", "exit_reason", "exit_sign", "lambda_final",
                      "s_final"], rows, cfg)
    print(f"shoot report written to {path}; eta* = {report.eta_star:.17g} "
          f"bracket width {report.bracket_width:.3e}")
    return 0


def cmd_ode(cfg: RunConfig):
    eta0 = cfg.eta0 if cfg.eta0 != 0.0 else 1e-3
    s_end = cfg.s_end or 4.0 * np.pi / abs(eta0)
    curves = modulation.integrate_formal_ode(
        cfg.m, cfg.b0, eta0, s_end, theta_mode="constant"
        if cfg.theta == "constant" else "table",
        theta_table=_theta_table(cfg) if cfg.theta != "constant" else None)
    rows = zip(curves["s"], curves["t"], curves["lambda"], curves["gamma"],
               curves["b"], curves["eta"])
    path = write_csv(Path(cfg.outdir) / "ode_curves.csv",
                     ["s", "t", "lambda", "gamma", "b", "eta"], rows, cfg)
    dgamma = abs(curves["gamma"][-1] - curves["gamma"][0])
    print(f"ode curves written to {path}; total |dgamma| = {dgamma:.17g} "
          f"({dgamma / np.pi:.6f} pi)")
    return 0


def _theta_table(cfg: RunConfig):
    grid = make_grid(min(cfg.grid_n, 2048), cfg.rmax, cfg.grading)
    bs = np.linspace(0.02, cfg.bstar * 0.9, 8)
    vals = [profiles.profile_error(cfg.m, b, 0.0, grid).theta_eta + (cfg.m + 1)
            for b in bs]

    def theta(b, eta):
        return np.interp(abs(b), bs, vals)
    return theta


def cmd_report(cfg: RunConfig):
    outdir = Path(cfg.outdir)
    merged = []
    for csv in sorted(outdir.glob("*.csv")):
        if csv.name == "report.csv":
            continue
        lines = csv.read_text().splitlines()
        header = next((l for l in lines if not l.startswith("#")), "")
        n_rows = sum(1 for l in lines if not l.startswith("#")) - 1
        merged.append([csv.name, header.count(",") + 1, max(n_rows, 0)])
    path = write_csv(outdir / "report.csv",
                     ["file", "columns", "rows"], merged, cfg)
    print(f"report written to {path}")
    return 0


COMMANDS = {
    "profiles": cmd_profiles,
    "spectral": cmd_spectral,
    "hardy": cmd_hardy,
    "evolve": cmd_evolve,
    "modulate": cmd_modulate,
    "shoot": cmd_shoot,
    "ode": cmd_ode,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csslab",
        description="numerical laboratory for the equivariant self-dual "
                    "gauged Schrodinger equation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--grid-n", type=int, default=None)
        p.add_argument("--rmax", type=float, default=None)
        p.add_argument("--grading", type=str, default=None,
                       choices=["uniform", "geometric", "geometric-near-origin"])
        p.add_argument("--scheme", type=str, default=None,
                       choices=list(evolution.SCHEMES))
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--frame", type=str, default=None,
                       choices=["fixed", "renorm"])
        p.add_argument("--t0", type=float, default=None)
        p.add_argument("--t-end", type=float, default=None)
        p.add_argument("--s-end", type=float, default=None)
        p.add_argument("--lambda-min", type=float, default=None)
        p.add_argument("--b0", type=float, default=None)
        p.add_argument("--eta0", type=float, default=None)
        p.add_argument("--K", type=float, default=None)
        p.add_argument("--M", type=float, default=None)
        p.add_argument("--bstar", type=float, default=None)
        p.add_argument("--init", type=str, default=None)
        p.add_argument("--theta", type=str, default=None,
                       choices=["constant", "table"])
        p.add_argument("--outdir", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--snapshot-every", type=int, default=None)
        p.add_argument("--checkpoint-every", type=int, default=None)
        p.add_argument("--max-runs", type=int, default=None)
    return parser


_FLAG_FIELDS = {
    "m": "m", "grid_n": "grid_n", "rmax": "rmax", "grading": "grading",
    "scheme": "scheme", "dt": "dt", "frame": "frame", "t0": "t0",
    "t_end": "t_end", "s_end": "s_end", "lambda_min": "lambda_min",
    "b0": "b0", "eta0": "eta0", "K": "K", "M": "M", "bstar": "bstar",
    "init": "init", "theta": "theta", "outdir": "outdir", "seed": "seed",
    "snapshot_every": "snapshot_every", "checkpoint_every": "checkpoint_every",
    "max_runs": "max_runs",
}


def parse_and_dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = RunConfig(command=args.command)
    try:
        if args.config:
            _apply_config_file(cfg, args.config)
        for flag, fieldname in _FLAG_FIELDS.items():
            val = getattr(args, flag, None)
            if val is not None:
                setattr(cfg, fieldname, val)
        if cfg.grading == "geometric-near-origin":
            cfg.grading = "geometric"
        cfg.validate()
    except (ConfigurationError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    np.random.seed(cfg.seed)
    try:
        return COMMANDS[cfg.command](cfg)
    except (ConfigurationError, DomainError) as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return 3
    except (CsslabError, FloatingPointError, np.linalg.LinAlgError) as exc:
        diag = Path(cfg.outdir) / "failure_diagnostics.json"
        diag.parent.mkdir(parents=True, exist_ok=True)
        diag.write_text(json.dumps({
            "error": repr(exc),
            "traceback": traceback.format_exc(),
            "config": asdict(cfg),
        }, default=str, indent=2))
        print(f"numeric failure: {exc} (diagnostics in {diag})",
              file=sys.stderr)
        return 4


def main():
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
