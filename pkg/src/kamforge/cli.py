"""Command-line front end.

Usage::

    kamforge COMMAND --config PATH [--seed INT] [--workers INT] [--out DIR]

Commands are ``blocks``, ``measure-scan``, ``homological-test``,
``kam-run`` and ``beam-run``. The config is an INI file with the sections
``model``, ``lattice``, ``kam``, ``scan`` and ``output``; every value is
validated when the file is read. Outputs are TSV tables and a plain-text
summary written to the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, KamforgeError

log = logging.getLogger("kamforge")

EXIT_OK, EXIT_ERROR, EXIT_EXCLUDED, EXIT_STALLED = 0, 1, 2, 3
DIAMETER_EXPONENT = 3.0
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


# ------------------------------------------------------------ config

def _parse_sites(text: str) -> tuple:
    """``"1,0; -1,2"`` -> ``((1, 0), (-1, 2))``; empty text -> ``()``."""
    text = text.strip()
    if not text:
        return ()
    return tuple(tuple(int(v) for v in part.split(","))
                 for part in text.split(";") if part.strip())


def _parse_floats(text: str) -> tuple:
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _parse_delta(text: str):
    from .lattice_blocks import INF_DELTA
    t = text.strip().lower()
    return INF_DELTA if t in ("inf", "infinity") else float(t)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


# section -> key -> (parser, default, check, constraint text)
_POS = (lambda v: v > 0, "must be > 0")
_NONNEG = (lambda v: v >= 0, "must be >= 0")
_ANY = (lambda v: True, "")
_UNIT = (lambda v: 0 < v <= 1, "must be in (0, 1]")
_POSINT = (lambda v: v >= 1, "must be an integer >= 1")

SCHEMA = {
    "lattice": {
        "d_star": (int, 1, *_POSINT),
        "R_lat": (float, 8.0, *_POS),
        "setF": (_parse_sites, (), *_ANY),
        "delta_grid": (_parse_floats, (1.0, 2.0, 3.0, 4.0),
                       lambda v: len(v) > 0 and all(x > 0 for x in v),
                       "must be a nonempty list of positive numbers"),
    },
    "model": {
        "m": (float, 1.0, *_POS),
        "setA": (_parse_sites, None, lambda v: len(v) > 0,
                 "must list at least one site"),
        "amplitudes": (_parse_floats, (1.0,),
                       lambda v: len(v) > 0 and all(x > 0 for x in v),
                       "must be positive numbers"),
        "eps": (float, 1e-6, *_NONNEG),
        "rho": (_parse_floats, (), lambda v: all(x > -1 for x in v),
                "must exceed -1 so that the tangential frequencies are real"),
        "n_theta": (int, 16, *_POSINT),
        "c": (float, 3.0, *_POS),
        "c_prime": (float, 0.4, *_POS),
    },
    "kam": {
        "sigma": (float, 0.5, *_UNIT),
        "mu": (float, 0.5, *_UNIT),
        "Delta": (_parse_delta, None,
                  lambda v: v is None or not isinstance(v, float) or v >= 1,
                  "must be >= 1 or inf"),
        "eps_tol": (float, 1e-12, *_NONNEG),
        "max_steps": (int, 5, *_POSINT),
        "K": (int, 2, *_POSINT),
        "C": (float, 10.0, *_POS),
        "exp2": (float, 4.0, *_POS),
        "s_star": (int, 1, lambda v: 1 <= v <= 2, "must be 1 or 2"),
        "chi": (float, 1.0, *_POS),
        "delta": (float, 0.0, *_NONNEG),
        "kappa_cap": (float, 1e-3, *_POS),
        "gamma2": (float, 3.0, *_ANY),
        "kappa_decay": (float, 1.0, *_POS),
        "verify": (_parse_bool, True, *_ANY),
        "n_norm": (int, 64, *_POSINT),
        "n_check": (int, 32, *_POSINT),
    },
    "scan": {
        "model": (str, "scalar", lambda v: v in ("scalar", "power"),
                  "must be 'scalar' or 'power'"),
        "kappa": (_parse_floats, (1e-3, 3e-3, 1e-2, 3e-2),
                  lambda v: len(v) > 0 and all(x > 0 for x in v),
                  "must be a nonempty list of positive numbers"),
        "N": (int, 1, *_POSINT),
        "samples": (int, 10000, lambda v: v >= 100, "must be >= 100"),
        "seed": (int, 0, *_NONNEG),
        "power": (int, 1, *_POSINT),
    },
    "output": {
        "dir": (str, "out", lambda v: len(v) > 0, "must be nonempty"),
        "formats": (str, "tsv", lambda v: v == "tsv", "only 'tsv' is supported"),
        "n_t": (int, 64, *_POSINT),
        "n_x": (int, 64, *_POSINT),
    },
}


@dataclass
class RunConfig:
    lattice: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    kam: dict = field(default_factory=dict)
    scan: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)


def _line_index(text: str) -> dict:
    """``(section, key) -> line number`` of each assignment."""
    out, sec = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            sec = m.group(1).strip()
            out[(sec, None)] = n
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and sec is not None:
            out[(sec, m.group(1).strip())] = n
    return out


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text."""
    lines = _line_index(text)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError("?", "?", f"malformed config: {exc.message}"
                          if hasattr(exc, "message") else str(exc), line)
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(sec, "-", "unknown section", lines.get((sec, None)))
    for sec, keys in SCHEMA.items():
        vals = {}
        given = cp[sec] if cp.has_section(sec) else {}
        for key in given:
            if key not in keys:
                raise ConfigError(sec, key, "unknown key", lines.get((sec, key)))
        for key, (parser, default, check, constraint) in keys.items():
            if key in given:
                raw = given[key]
                try:
                    val = parser(raw)
                except (ValueError, TypeError):
                    raise ConfigError(sec, key, f"cannot parse {raw!r}",
                                      lines.get((sec, key)))
                if not check(val):
                    raise ConfigError(sec, key, constraint, lines.get((sec, key)))
            else:
                val = default
            vals[key] = val
        setattr(cfg, sec, vals)
    d = cfg.lattice["d_star"]
    if cfg.model["setA"] is None:
        cfg.model["setA"] = ((1,) + (0,) * (d - 1),)
    for sec, key in (("model", "setA"), ("lattice", "setF")):
        src = cfg.model if sec == "model" else cfg.lattice
        if any(len(s) != d for s in src[key]):
            raise ConfigError(sec, key, f"sites must have {d} coordinates",
                              lines.get((sec, key)))
    if len(cfg.model["amplitudes"]) != len(cfg.model["setA"]):
        raise ConfigError("model", "amplitudes", "need one per tangential site",
                          lines.get(("model", "amplitudes")))
    if cfg.model["rho"] and len(cfg.model["rho"]) != len(cfg.model["setA"]):
        raise ConfigError("model", "rho", "need one value per tangential site",
                          lines.get(("model", "rho")))
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("-", "-", f"cannot read config: {exc.strerror}")
    return parse_config(text)


# ------------------------------------------------------------ output

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "inf" if math.isinf(v) else f"{float(v):.10e}"
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


def write_tsv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_summary(path: Path, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}: {_fmt(v)}\n")


# ------------------------------------------------------------ builders

def _beam_config(cfg: RunConfig):
    from .beam_model import BeamConfig
    m = cfg.model
    return BeamConfig(d_star=cfg.lattice["d_star"], m=m["m"], setA=m["setA"],
                      amplitudes=m["amplitudes"], eps=m["eps"],
                      R_lat=cfg.lattice["R_lat"], rho=m["rho"] or None,
                      n_theta=m["n_theta"], c=m["c"], c_prime=m["c_prime"])


def _kam_config(cfg: RunConfig, seed: int):
    from .kam_engine import KamConfig
    from .lattice_blocks import INF_DELTA
    k = cfg.kam
    return KamConfig(sigma=k["sigma"], mu=k["mu"],
                     Delta=INF_DELTA if k["Delta"] is None else k["Delta"],
                     eps_tol=k["eps_tol"], max_steps=k["max_steps"], K=k["K"],
                     C=k["C"], exp2=k["exp2"], s_star=k["s_star"],
                     chi=k["chi"], delta=k["delta"],
                     kappa_cap=k["kappa_cap"], gamma2=k["gamma2"],
                     kappa_decay=k["kappa_decay"],
                     c_prime=cfg.model["c_prime"], verify=k["verify"],
                     n_norm=k["n_norm"], n_check=k["n_check"], seed=seed)


# ------------------------------------------------------------ commands

def cmd_blocks(cfg: RunConfig, out: Path, seed: int, workers: int) -> int:
    from .lattice_blocks import (INF_DELTA, LatticeModel, block_diameter,
                                 decompose, fit_diameter_constant, norm2)
    lat = cfg.lattice
    model = LatticeModel(lat["d_star"], cfg.model["setA"], lat["setF"],
                         lat["R_lat"])
    rows, part, diams = [], [], []
    deltas = list(lat["delta_grid"])
    for D in deltas + [INF_DELTA]:
        dec = decompose(model, D)
        n_inf = sum(1 for b in range(dec.n_blocks) if not dec.is_F(b))
        label = "inf" if D is INF_DELTA else D
        if n_inf and D is not INF_DELTA:
            dd = block_diameter(dec)
            diams.append(dd)
            rows.append((label, n_inf, dd))
        for b in range(dec.n_blocks):
            part.append((label, b,
                         "F" if dec.is_F(b) else dec.block_norm2(b),
                         ";".join(",".join(str(c) for c in s)
                                  for s in dec.blocks[b])))
    write_tsv(out / "blocks.tsv", ["Delta", "n_blocks", "d_Delta"], rows)
    write_tsv(out / "partition.tsv", ["Delta", "block", "norm2", "sites"], part)
    dec = decompose(model, INF_DELTA)
    counts: dict = {}
    for s in model.lambda_inf:
        counts.setdefault(norm2(s), [0, 0])[0] += 1
    for b in range(dec.n_blocks):
        if not dec.is_F(b):
            counts[dec.block_norm2(b)][1] += 1
    write_tsv(out / "spheres.tsv", ["norm2", "n_sites", "n_blocks"],
              [(k, v[0], v[1]) for k, v in sorted(counts.items())])
    summary = {"n_lambda_inf": len(model.lambda_inf),
               "delta_grid": tuple(deltas)}
    if diams:
        C = fit_diameter_constant(deltas, diams, DIAMETER_EXPONENT)
        summary.update({"diameter_exponent": DIAMETER_EXPONENT,
                        "fitted_C": C,
                        "nondecreasing": bool(np.all(np.diff(diams) >= 0))})
    write_summary(out / "summary.txt", summary)
    return EXIT_OK


def cmd_measure_scan(cfg: RunConfig, out: Path, seed: int, workers: int) -> int:
    from .lattice_blocks import LatticeModel
    from .small_divisors import (NormalFormData, ParamDomain, sampled_measure,
                                 scan_measure)
    sc = cfg.scan
    dom = ParamDomain.random(1, sc["samples"], seed)
    kappas = list(sc["kappa"])
    if sc["model"] == "scalar":
        model = LatticeModel(1, ((0,),), (), 0.5)

        def h(rho):
            return NormalFormData(model, np.asarray(rho, float).reshape(1),
                                  np.zeros((0, 0)))
        rep = scan_measure(h, kappas, sc["N"], dom, None, ("scalar",),
                           workers=workers)
        fracs, slope = rep.excluded_fraction, rep.slope
        # excluded set is |rho| < kappa: measure 2 kappa out of 2
        oracle = [min(kp, 1.0) for kp in kappas]
    else:
        j = sc["power"]
        fracs, slope = sampled_measure(lambda r: float(r[0]) ** j, kappas, dom)
        oracle = [min(kp ** (1.0 / j), 1.0) for kp in kappas]
        if len(kappas) < 2:
            slope = None
    write_tsv(out / "scan.tsv", ["kappa", "N", "excluded_fraction", "oracle"],
              [(kp, sc["N"], fr, orc)
               for kp, fr, orc in zip(kappas, fracs, oracle)])
    write_summary(out / "summary.txt", {"model": sc["model"],
                                        "samples": sc["samples"],
                                        "seed": seed, "slope": slope})
    return EXIT_OK


def cmd_homological_test(cfg: RunConfig, out: Path, seed: int,
                         workers: int) -> int:
    from .beam_model import build_beam
    from .homological import mode_residuals, nonlinear_residual, solve_nonlinear
    from .kam_engine import retained_modes, sample_real_points
    from .lattice_blocks import INF_DELTA, decompose
    sys_ = build_beam(_beam_config(cfg))
    k = cfg.kam
    D = INF_DELTA if k["Delta"] is None else k["Delta"]
    dec = decompose(sys_.model, D)
    N = retained_modes(D, sys_.model.n_angles, sys_.f.N)
    nf = sys_.h.evaluate(sys_.rho)
    sol = solve_nonlinear(nf, sys_.f, k["kappa_cap"], N, D, dec, sys_.momentum)
    pts = sample_real_points(sys_.model, k["mu"], 64, seed)
    res = nonlinear_residual(nf, sys_.f, sol, *pts)
    lin = mode_residuals(nf, sys_.f.jet(), sol.stages[0])
    # stage 0 solves the linear equation for the jet of f
    write_tsv(out / "diagnostics.tsv", ["k", "blocks", "divisor", "excluded",
                                        "kind"],
              [(d.k, d.blocks, d.divisor, int(d.excluded), d.kind)
               for d in sol.diagnostics])
    write_summary(out / "summary.txt", {
        "n_solves": len(sol.diagnostics), "worst_divisor": sol.worst_divisor,
        "mode_residual": lin, "equation_residual": res,
        "remainder_max": sol.R.max_abs()})
    return EXIT_OK


def _run(cfg: RunConfig, seed: int):
    from .beam_model import build_beam
    from .kam_engine import run_kam
    sys_ = build_beam(_beam_config(cfg))
    res = run_kam(sys_.h, sys_.f, sys_.rho, _kam_config(cfg, seed),
                  sys_.momentum)
    return sys_, res


def _exit_for(verdict) -> int:
    return {"converged": EXIT_OK, "excluded": EXIT_EXCLUDED,
            "stalled": EXIT_STALLED}[verdict.kind]


def _run_summary(res) -> dict:
    return {"verdict": str(res.verdict), "eps_trail": tuple(res.eps_trail),
            "conjugacy_residuals": tuple(res.residuals),
            "n_generators": len(res.generators),
            **{k: v for k, v in res.checks.items()}}


def cmd_kam_run(cfg: RunConfig, out: Path, seed: int, workers: int) -> int:
    _, res = _run(cfg, seed)
    (out / "run_log.tsv").write_text(res.log_tsv())
    write_summary(out / "summary.txt", _run_summary(res))
    return _exit_for(res.verdict)


def cmd_beam_run(cfg: RunConfig, out: Path, seed: int, workers: int) -> int:
    from .beam_model import beam_frequencies, reconstruct_solution, x_grid
    sys_, res = _run(cfg, seed)
    (out / "run_log.tsv").write_text(res.log_tsv())
    summary = _run_summary(res)
    freq = beam_frequencies(sys_.cfg)
    summary.update({f"A1_margin_{k}": v for k, v in freq.a1.worst.items()})
    if res.verdict.kind == "converged":
        o = cfg.output
        omega = sys_.omega
        T = 2 * np.pi / max(float(np.abs(omega).min()), 1e-12)
        t = np.linspace(0.0, T, o["n_t"], endpoint=False)
        xs = x_grid(sys_.model.d_star, o["n_x"])
        rec = reconstruct_solution(sys_, res, t_grid=t, x_grid_pts=xs)
        rows = [(t[i], tuple(xs[j]), rec.u[i, j])
                for i in range(len(t)) for j in range(len(xs))]
        write_tsv(out / "solution.tsv", ["t", "x", "u"], rows)
        eps = sys_.cfg.eps
        summary.update({"pde_residual": rec.residual,
                        "hs_distance": rec.hs_distance,
                        "beta": rec.beta(eps),
                        "omega_shift": rec.omega_shift,
                        "omega_prime": tuple(rec.omega_prime)})
    write_summary(out / "summary.txt", summary)
    return _exit_for(res.verdict)


COMMANDS = {"blocks": cmd_blocks, "measure-scan": cmd_measure_scan,
            "homological-test": cmd_homological_test,
            "kam-run": cmd_kam_run, "beam-run": cmd_beam_run}


# ------------------------------------------------------------ entry

def configure_logging() -> None:
    level = os.environ.get("KAMFORGE_LOG", "quiet").strip().lower()
    if level not in LOG_LEVELS:
        level = "quiet"
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kamforge",
                                description="Lattice KAM normal-form toolkit")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="override seeds")
    p.add_argument("--workers", type=int, default=1,
                   help="worker threads for sample-parallel work")
    p.add_argument("--out", default=None, help="output directory")
    return p


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ERROR
    seed = cfg.scan["seed"] if args.seed is None else args.seed
    if args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out or cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        code = COMMANDS[args.command](cfg, out, seed, args.workers)
    except KamforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{args.command}: wrote {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
