"""Command-line driver for the benchmark experiments.

Experiments are described by small sectioned ``key = value`` files::

    [experiment]
    problem = circular_obstacle
    method = fospg
    levels = 3

    [mesh]
    nx = 32

    [proximal]
    stop_tol = 1e-10

``proxgal run convergence`` resolves the name to a packaged config; a path to a
file works as well.  Artifacts go to ``$PROXGAL_OUTPUT_ROOT/<output>``
(default ``./proxgal-output``).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .conforming import NewtonFailure, PGConfig, ProximalLimitReached, rate, run
from .fem.solve import SingularSystemError
from .fospg import bounded_reconstruction, clement_interpolate, run_fospg
from .mesh import MeshError, load_mesh
from .output import export_field, export_fields, write_csv
from .problems import PROBLEMS
from .problems.dam import SecantDivergence, dam_config, dam_mesh, free_surface_extract, secant_discharge
from .problems.hemker import hemker_problem
from .problems.heston import REFERENCE_LATENT, REFERENCE_PRICES, heston_mesh, heston_problem, price_american_put
from .problems.meshes import packaged_mesh
from .problems.obstacle import biactive_problem, circular_obstacle_problem, square_mesh
from .problems.semipermeable import semipermeable_problem

log = logging.getLogger("proxgal")

OUTPUT_ENV = "PROXGAL_OUTPUT_ROOT"
CONVERGENCE_COLUMNS = ["h_ratio", "prox_iters", "err_u_L2", "rate_u", "err_avg_L2", "rate_avg", "err_q_L2", "rate_q"]
SECANT_COLUMNS = ["r", "q", "f_q", "inner_iters"]


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _show_floats(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


#: section -> key -> (parser, printer)
_STR = (str, str)
_INT = (int, str)
_FLOAT = (float, repr)
_BOOL = (_parse_bool, lambda b: "true" if b else "false")
_FLOATS = (_parse_floats, _show_floats)

SCHEMA = {
    "experiment": {"problem": _STR, "method": _STR, "levels": _INT, "output": _STR, "vtk": _BOOL},
    "mesh": {"source": _STR, "nx": _INT, "ny": _INT, "resolution": _STR, "diagonal": _STR},
    "discretization": {"p": _INT, "q": _INT, "trial": _STR, "latent": _STR},
    "proximal": {
        "alpha0": _FLOAT, "growth": _FLOAT, "stop_tol": _FLOAT, "stop_norm": _STR, "stop_on": _STR,
        "max_prox_iters": _INT, "newton_tol": _FLOAT, "max_newton_iters": _INT, "min_prox_iters": _INT,
    },
    "problem": {
        "diffusion": _FLOAT, "thresholds": _FLOATS, "n_steps": _INT, "h0": _FLOAT, "seeds": _FLOATS,
        "secant_tol": _FLOAT, "max_outer": _INT, "level": _FLOAT, "latent_floor": _FLOAT,
    },
}

METHODS = {
    "circular_obstacle": ("fospg", "conforming"),
    "biactive": ("fospg", "conforming"),
    "heston": ("fospg",),
    "semipermeable": ("fospg",),
    "hemker": ("fospg",),
    "dam": ("conforming",),
}


@dataclass
class RunConfig:
    """Typed view of a config file; absent keys mean "use the problem default"."""

    values: dict = field(default_factory=dict)
    name: str = "experiment"

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def set(self, section: str, key: str, raw) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        parser = SCHEMA[section][key][0]
        try:
            value = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}' in [{section}]: {exc}") from None
        self.values.setdefault(section, {})[key] = value

    @property
    def problem(self) -> str:
        return self.get("experiment", "problem")

    @classmethod
    def parse(cls, text: str, name: str = "experiment") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        cfg = cls(name=name)
        for section in cp.sections():
            for key, raw in cp.items(section):
                cfg.set(section, key, raw)
        if cfg.problem is None:
            raise ConfigError("missing key 'problem' in section [experiment]")
        if cfg.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem '{cfg.problem}' (see list-problems)")
        method = cfg.get("experiment", "method", METHODS[cfg.problem][0])
        if method not in METHODS[cfg.problem]:
            raise ConfigError(f"method '{method}' is not available for {cfg.problem}; use one of {METHODS[cfg.problem]}")
        return cfg

    def serialize(self) -> str:
        lines = []
        for section in SCHEMA:
            entries = self.values.get(section)
            if not entries:
                continue
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                if key in entries:
                    lines.append(f"{key} = {SCHEMA[section][key][1](entries[key])}")
            lines.append("")
        return "\n".join(lines)

    def pg_config(self, **defaults) -> PGConfig:
        opts = dict(defaults)
        opts.update(self.values.get("proximal", {}))
        return PGConfig(**opts)


def packaged_config_names() -> list:
    root = resources.files("proxgal") / "data" / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(spec: str) -> RunConfig:
    """Read a config from a path or a packaged name such as ``convergence``."""
    path = Path(spec)
    if path.is_file():
        return RunConfig.parse(path.read_text(encoding="utf-8"), name=path.stem)
    packaged = resources.files("proxgal") / "data" / "configs" / f"{spec}.cfg"
    if packaged.is_file():
        return RunConfig.parse(packaged.read_text(encoding="utf-8"), name=spec)
    raise ConfigError(f"no config file or packaged experiment named '{spec}' (packaged: {packaged_config_names()})")


# --------------------------------------------------------------- drivers
def _square_problem(cfg: RunConfig, level: int):
    nx = cfg.get("mesh", "nx", 32) * 2**level
    mesh = square_mesh(nx, diagonal=cfg.get("mesh", "diagonal", "right"))
    factory = circular_obstacle_problem if cfg.problem == "circular_obstacle" else biactive_problem
    return factory(mesh)


def run_convergence(cfg: RunConfig, out: Path) -> dict:
    method = cfg.get("experiment", "method", "fospg")
    levels = cfg.get("experiment", "levels", 3)
    pg = cfg.pg_config()
    rows = []
    last = None
    for level in range(levels):
        problem = _square_problem(cfg, level)
        if method == "fospg":
            res = run_fospg(problem, pg, p=cfg.get("discretization", "p", 1), q=cfg.get("discretization", "q", 0))
            flux_key = "err_q_L2"
        else:
            pair = (cfg.get("discretization", "trial", "P1-bubble"), cfg.get("discretization", "latent", "DG-P0"))
            res = run(problem, pg, pair=pair)
            flux_key = "err_flux_L2"
        final = res.log[-1]
        rows.append({
            "h_ratio": 2.0**-level,
            "prox_iters": len(res.log),
            "err_u_L2": final.get("err_u_L2"),
            "err_avg_L2": final.get("err_avg_L2"),
            "err_q_L2": final.get(flux_key),
            "converged": res.converged,
        })
        write_csv(out / f"iterations_level{level}.csv", res.log)
        log.info("level %d: %d proximal iterations, L2 error %.4e", level, len(res.log), final.get("err_u_L2", math.nan))
        last = res
    for err, rk in (("err_u_L2", "rate_u"), ("err_avg_L2", "rate_avg"), ("err_q_L2", "rate_q")):
        values = [r[err] if r[err] is not None else math.nan for r in rows]
        for r, v in zip(rows, rate(values)):
            r[rk] = v
    write_csv(out / "convergence.csv", rows, CONVERGENCE_COLUMNS + ["converged"])
    if cfg.get("experiment", "vtk", True):
        disc = last.discretization
        if method == "fospg":
            export_field(disc.cell_means(last.state.u), disc.mesh, out / "solution.vtk", name="u", kind="DG-P0")
        else:
            export_field(last.state.u, disc.V.mesh, out / "solution.vtk", name="u", kind=disc.V.kind)
    return {"rows": rows}


def run_dam(cfg: RunConfig, out: Path) -> dict:
    mesh = dam_mesh(cfg.get("mesh", "nx", 50), cfg.get("mesh", "ny", 20), diagonal=cfg.get("mesh", "diagonal", "left"))
    h0 = cfg.get("problem", "h0", 0.05)
    pg = dam_config(**cfg.values.get("proximal", {}))
    rows = []
    result = secant_discharge(
        mesh, h0=h0, seeds=cfg.get("problem", "seeds", (0.25, 0.30)), tol=cfg.get("problem", "secant_tol", 1e-6),
        max_outer=cfg.get("problem", "max_outer", 10), config=pg, callback=rows.append,
    )
    write_csv(out / "dam_secant.csv", result.rows, SECANT_COLUMNS)
    level = cfg.get("problem", "level", 1e-4)
    surface = free_surface_extract(mesh, result.solution, level)
    write_csv(out / "free_surface.csv", [{"x": x, "y": y} for x, y in surface], ["x", "y"])
    if cfg.get("experiment", "vtk", True):
        export_field(result.solution, mesh, out / "solution.vtk", name="u", kind="P1-bubble")
    return {"rows": result.rows, "converged": result.converged}


def run_heston(cfg: RunConfig, out: Path) -> dict:
    problem = heston_problem(heston_mesh(cfg.get("mesh", "nx", 48), cfg.get("mesh", "ny", 24)))
    pg = cfg.pg_config(alpha0=1.0, growth=2.0, stop_tol=1e-6, max_prox_iters=60, newton_tol=1e-8)
    res = price_american_put(
        problem, n_steps=cfg.get("problem", "n_steps", 64), config=pg, p=cfg.get("discretization", "p", 1),
        q=cfg.get("discretization", "q", 0), latent_floor=cfg.get("problem", "latent_floor", -30.0),
    )
    rows = []
    for variance, (u_vals, latent_vals) in res.prices().items():
        for i, asset in enumerate((8.0, 9.0, 10.0, 11.0, 12.0)):
            rows.append({
                "variance": variance, "asset": asset, "u_h": u_vals[i], "latent": latent_vals[i],
                "reference_u_h": REFERENCE_PRICES[variance][i], "reference_latent": REFERENCE_LATENT[variance][i],
            })
    write_csv(out / "option_prices.csv", rows)
    write_csv(out / "time_steps.csv", res.steps)
    if cfg.get("experiment", "vtk", True):
        disc = res.disc
        export_fields(disc.mesh, out / "solution.vtk", cell_data={
            "u": disc.cell_means(res.state.u),
            "latent": np.einsum("tq,tq->t", disc.wq, disc.observable(res.state.psi)) / disc.mesh.areas,
        })
    return {"rows": rows}


def run_hemker(cfg: RunConfig, out: Path) -> dict:
    mesh = _builtin_or_file(cfg, "hemker")
    problem = hemker_problem(mesh, diffusion=cfg.get("problem", "diffusion", 1e-3))
    pg = cfg.pg_config(stop_tol=1e-8, max_prox_iters=60)
    res = run_fospg(problem, pg, p=cfg.get("discretization", "p", 1), q=cfg.get("discretization", "q", 0))
    disc, st = res.discretization, res.state
    recon = bounded_reconstruction(disc, st.psi, st.u_hat)
    raw_recon = clement_interpolate(disc, st.u, st.u_hat)
    write_csv(out / "iterations.csv", res.log)
    summary = {
        "prox_iters": len(res.log), "converged": res.converged,
        "u_min": res.log[-1]["u_min"], "u_max": res.log[-1]["u_max"],
        "latent_min": min(e["dmp_min"] for e in res.log), "latent_max": max(e["dmp_max"] for e in res.log),
        "reconstruction_min": float(recon.min()), "reconstruction_max": float(recon.max()),
        "raw_reconstruction_min": float(raw_recon.min()), "raw_reconstruction_max": float(raw_recon.max()),
    }
    write_csv(out / "summary.csv", [summary])
    if cfg.get("experiment", "vtk", True):
        latent = np.einsum("tq,tq->t", disc.wq, disc.observable(st.psi)) / disc.mesh.areas
        export_fields(disc.mesh, out / "solution.vtk", point_data={"reconstruction": recon},
                      cell_data={"u": disc.cell_means(st.u), "latent": latent})
    return summary


def run_semipermeable(cfg: RunConfig, out: Path) -> dict:
    mesh = _builtin_or_file(cfg, "channel")
    diffusion = cfg.get("problem", "diffusion", 0.04)
    pg = cfg.pg_config(stop_tol=1e-8, max_prox_iters=60)
    rows = []
    for threshold in cfg.get("problem", "thresholds", (0.90, 0.95, 1.0)):
        problem = semipermeable_problem(threshold, mesh, diffusion=diffusion)
        res = run_fospg(problem, pg, p=cfg.get("discretization", "p", 1), q=cfg.get("discretization", "q", 0))
        stats = membrane_statistics(res)
        rows.append({"threshold": threshold, "prox_iters": len(res.log), "converged": res.converged, **stats})
        write_csv(out / f"iterations_threshold_{threshold:g}.csv", res.log)
    write_csv(out / "semipermeable_sweep.csv", rows)
    return {"rows": rows}


def membrane_statistics(res, tol: float = 1e-6) -> dict:
    """Active facets, active length and complementarity on the constrained boundary."""
    disc, st = res.discretization, res.state
    lam = (st.psi_previous - st.psi) / st.alpha_last
    lam = lam.reshape(len(disc.S_facets), -1).mean(axis=1)
    lengths = disc.mesh.facet_lengths[disc.S_facets]
    u_mean = st.u_hat.reshape(-1, disc.nf)[disc.S_facets].mean(axis=1)
    phi = disc.problem.meta["threshold"]
    active = lam > tol
    return {
        "active_facets": int(active.sum()),
        "total_facets": int(len(lam)),
        "active_length": float(lengths[active].sum()),
        "max_complementarity": float(np.max(np.abs((u_mean - phi) * lam))),
        "min_trace_slack": float(np.min(u_mean - phi)),
    }


def _builtin_or_file(cfg: RunConfig, family: str):
    source = cfg.get("mesh", "source", "builtin")
    if source == "builtin":
        return packaged_mesh(f"{family}_{cfg.get('mesh', 'resolution', 'coarse')}")
    return load_mesh(source)


DRIVERS = {
    "circular_obstacle": run_convergence,
    "biactive": run_convergence,
    "dam": run_dam,
    "heston": run_heston,
    "hemker": run_hemker,
    "semipermeable": run_semipermeable,
}


def output_root(explicit: str | None = None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV) or "proxgal-output")


def run_experiment(cfg: RunConfig, root: Path | None = None) -> tuple[int, Path]:
    out = (root or output_root()) / cfg.get("experiment", "output", cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.serialize(), encoding="utf-8")
    t0 = time.perf_counter()
    DRIVERS[cfg.problem](cfg, out)
    log.info("%s finished in %.1f s; artifacts in %s", cfg.name, time.perf_counter() - t0, out)
    return 0, out


# ------------------------------------------------------------------ main
SOLVER_ERRORS = (NewtonFailure, ProximalLimitReached, SecantDivergence, SingularSystemError)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    for entry in args.set or []:
        key, sep, value = entry.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override '{entry}' must look like section.key=value")
        cfg.set(section, name, value.strip())
    if args.levels is not None:
        cfg.set("experiment", "levels", args.levels)
    root = Path(args.output_root) if args.output_root else None
    status, out = run_experiment(cfg, root)
    print(out)
    return status


def _cmd_list(args) -> int:
    width = max(len(n) for n in PROBLEMS)
    for name, text in PROBLEMS.items():
        print(f"{name:<{width}}  {text}")
    print("\npackaged experiments: " + ", ".join(packaged_config_names()))
    return 0


def _cmd_validate(args) -> int:
    try:
        mesh = load_mesh(args.file)
        mesh.validate()
    except (OSError, MeshError) as exc:
        print(f"invalid mesh: {exc}", file=sys.stderr)
        return 1
    tags = {t: len(mesh.facets_with_tag(t)) for t in mesh.tags()}
    print(f"vertices {mesh.n_vertices}, cells {mesh.n_cells}, mesh size {mesh.mesh_size():.4g}, "
          f"shape regularity {mesh.shape_regularity():.3g}")
    print("boundary tags: " + ", ".join(f"{t} ({n} facets)" for t, n in sorted(tags.items())))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxgal", description="Proximal Galerkin solvers for obstacle-type problems.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a config file or packaged name")
    p_run.add_argument("config")
    p_run.add_argument("--levels", type=int, help="number of refinement levels (convergence studies)")
    p_run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")
    p_run.add_argument("--output-root", help=f"output directory root (default ${OUTPUT_ENV} or ./proxgal-output)")
    p_run.set_defaults(func=_cmd_run)
    p_list = sub.add_parser("list-problems", help="list available problems and packaged experiments")
    p_list.set_defaults(func=_cmd_list)
    p_val = sub.add_parser("validate-mesh", help="check a vi-mesh file")
    p_val.add_argument("file")
    p_val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SOLVER_ERRORS as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
