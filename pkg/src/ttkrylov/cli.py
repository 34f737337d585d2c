"""Batch experiment harness: declarative configs in, CSV/JSON histories out.

Config files are flat ``key = value`` text (# comments allowed); every value
can be overridden from the command line with ``--set key=value``.  Each run
writes a convergence trace, an optional bound report and a manifest; the
process exits nonzero when the solver did not converge (except for the
relaxed-compare experiment, whose relaxed branch is expected not to
converge in the backward-error sense).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import verify_bounds
from .operators import (
    Grid1D,
    ParamSet,
    convection_diffusion_problem,
    default_addend_count,
    heat_parametrized_problem,
    inv_laplacian_preconditioner,
    kron_leading_identity,
    laplacian_eigen_rhs,
    multi_rhs_problem,
    parametric_convection_diffusion_problem,
    poisson_problem,
    tt_laplacian,
)
from .solver import (
    GmresConfig,
    OperatorChain,
    estimate_l2_norm,
    relaxed_tt_gmres,
    tt_gmres,
    tt_right_gmres,
)
from .tt import TTError, tt_norm

EXPERIMENTS = (
    "poisson",
    "convdiff",
    "param-convdiff",
    "heat-param",
    "multi-rhs-poisson",
    "multi-rhs-convdiff",
    "eigen-rhs",
    "prec-sweep",
    "relaxed-compare",
)

TRACE_COLUMNS = ("iter", "eta_b", "eta_Ab", "eta_AMb", "eta_tilde_b",
                 "lsq_residual", "true_residual", "max_rank_v", "max_rank_x",
                 "cr_last_vec", "cr_basis", "delta_used")
BOUND_COLUMNS = ("iter", "ell", "eta_b_slice", "eta_Ab_slice", "rho_ell",
                 "rho_star", "psi_ell")

_PARAM_EXPERIMENTS = ("param-convdiff", "heat-param", "multi-rhs-poisson",
                      "multi-rhs-convdiff")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


@dataclasses.dataclass
class ExperimentConfig:
    """Declarative description of one experiment run."""

    experiment: str
    n: int = 15
    d: int = 3
    p: int = 0
    m: int = 25
    epsilon: float = 1e-5
    delta: float = 1e-5
    maxit: int = 100
    q: int = 0                 # 0: default round(n / 4) when preconditioned
    tau: float = 1e-2
    precondition: bool = False
    seed: int = 0
    output: str = "run"
    format: str = "csv"
    j: int = 10                # eigen-rhs: eigenvector count of the slow rhs
    rank_cap: int = 8          # multi-rhs perturbation rank cap
    bounds: bool = False       # evaluate the per-slice bound report
    assembly_every: int = 1
    plateau_window: int = 0

    def validate(self) -> list[str]:
        """Raise ConfigError on invalid fields, return warnings."""
        warnings = []
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment: unknown value {self.experiment!r}; pick one of "
                + ", ".join(EXPERIMENTS))
        if self.n < 2:
            raise ConfigError("n: must be >= 2")
        if self.d != 3 and self.experiment != "poisson":
            raise ConfigError("d: only d=3 problem builders are available")
        if self.experiment in _PARAM_EXPERIMENTS and self.p < 1:
            raise ConfigError(
                f"p: required (>= 1) for experiment {self.experiment}")
        if self.experiment == "eigen-rhs" and self.j < 1:
            raise ConfigError("j: must be >= 1 for eigen-rhs")
        if self.format not in ("csv", "json"):
            raise ConfigError("format: must be csv or json")
        if self.delta > self.epsilon:
            warnings.append(
                "delta > epsilon: the rounding accuracy should be chosen "
                "lower or equal than the GMRES target accuracy")
        return warnings

    def gmres_config(self, **overrides) -> GmresConfig:
        base = dict(m=self.m, epsilon=self.epsilon, delta=self.delta,
                    maxit=self.maxit, seed=self.seed,
                    assembly_every=self.assembly_every,
                    plateau_window=self.plateau_window)
        base.update(overrides)
        return GmresConfig(**base)


_BOOL_FIELDS = {"precondition", "bounds"}
_INT_FIELDS = {"n", "d", "p", "m", "maxit", "q", "seed", "j", "rank_cap",
               "assembly_every", "plateau_window"}
_FLOAT_FIELDS = {"epsilon", "delta", "tau"}


def parse_config_text(text: str) -> dict:
    """Parse the flat key = value format into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def build_config(pairs: dict) -> ExperimentConfig:
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, val in pairs.items():
        if key not in fields:
            raise ConfigError(f"{key}: unknown configuration key")
        if key in _BOOL_FIELDS:
            if val not in ("0", "1", "true", "false"):
                raise ConfigError(f"{key}: expected 0/1/true/false")
            kwargs[key] = val in ("1", "true")
        elif key in _INT_FIELDS:
            try:
                kwargs[key] = int(val)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {val!r}")
        elif key in _FLOAT_FIELDS:
            try:
                kwargs[key] = float(val)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {val!r}")
        else:
            kwargs[key] = val
    if "experiment" not in kwargs:
        raise ConfigError("experiment: required key is missing")
    return ExperimentConfig(**kwargs)


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _trace_rows(trace):
    for r in trace:
        yield (r.k, r.eta_b, r.eta_Ab, r.eta_AMb, r.eta_tilde_b,
               r.lsq_residual, r.true_residual, r.max_rank_v, r.max_rank_x,
               r.cr_last_vec, r.cr_basis, r.delta_used)


def emit_trace(outcome, report, prefix: Path, fmt: str) -> list[Path]:
    """Write the convergence trace (and bound report) next to `prefix`."""
    written = []
    if fmt == "csv":
        path = prefix.with_name(prefix.name + "_trace.csv")
        with open(path, "w") as f:
            f.write(",".join(TRACE_COLUMNS) + "\n")
            for row in _trace_rows(outcome.trace):
                f.write(",".join(_fmt(v) for v in row) + "\n")
        written.append(path)
    else:
        path = prefix.with_name(prefix.name + "_trace.json")
        payload = {
            "converged": outcome.converged,
            "iterations": outcome.iterations,
            "estimated_opnorm": outcome.estimated_opnorm,
            "trace": [dict(zip(TRACE_COLUMNS, row))
                      for row in _trace_rows(outcome.trace)],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=1, default=_json_float)
        written.append(path)
    if report is not None:
        path = prefix.with_name(prefix.name + "_bounds."
                                + ("csv" if fmt == "csv" else "json"))
        rows = []
        for k in range(report.iterations):
            for ell in range(report.p):
                rows.append((k + 1, ell + 1,
                             report.eta_b_slice[k][ell],
                             report.eta_Ab_slice[k][ell],
                             report.rho_ell[k][ell],
                             report.rho_star[k],
                             report.psi_ell[k][ell]))
        if fmt == "csv":
            with open(path, "w") as f:
                f.write(",".join(BOUND_COLUMNS) + "\n")
                for row in rows:
                    f.write(",".join(_fmt(v) for v in row) + "\n")
        else:
            payload = {
                "ell_min": report.ell_min, "ell_max": report.ell_max,
                "nu": report.nu, "k_star": report.k_star,
                "selector": report.selector,
                "violations": report.violations,
                "rows": [dict(zip(BOUND_COLUMNS, row)) for row in rows],
            }
            with open(path, "w") as f:
                json.dump(payload, f, indent=1, default=_json_float)
        written.append(path)
    return written


def _json_float(x):
    if isinstance(x, (np.floating, np.integer)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


def _grid(cfg: ExperimentConfig) -> Grid1D:
    if cfg.experiment in ("poisson", "multi-rhs-poisson", "eigen-rhs",
                          "prec-sweep"):
        return Grid1D(cfg.n, 0.0, 1.0)
    return Grid1D(cfg.n, -1.0, 1.0)


def _preconditioner(cfg: ExperimentConfig, g: Grid1D, p: int = 0):
    if not cfg.precondition:
        return None
    q = cfg.q if cfg.q > 0 else default_addend_count(cfg.n)
    m = inv_laplacian_preconditioner(3, g, q, cfg.tau)
    if p > 0:
        m = kron_leading_identity(p, m)
    return m


def _build_instance(cfg: ExperimentConfig, g: Grid1D):
    if cfg.experiment == "poisson":
        return poisson_problem(g), None
    if cfg.experiment == "convdiff":
        return convection_diffusion_problem(g), None
    if cfg.experiment == "param-convdiff":
        params = ParamSet.log_spaced(cfg.p)
        return parametric_convection_diffusion_problem(g, params), params
    if cfg.experiment == "heat-param":
        params = ParamSet.uniform(cfg.p)
        return heat_parametrized_problem(g, params), params
    if cfg.experiment == "multi-rhs-poisson":
        base = poisson_problem(g)
        return multi_rhs_problem(base, cfg.p, cfg.rank_cap, cfg.seed), None
    if cfg.experiment == "multi-rhs-convdiff":
        base = convection_diffusion_problem(g)
        return multi_rhs_problem(base, cfg.p, cfg.rank_cap, cfg.seed), None
    raise ConfigError(f"experiment: no builder for {cfg.experiment}")


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None):
    """Build, solve, diagnose and write one experiment; returns the manifest."""
    warnings = cfg.validate()
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    t_start = time.time()
    stamp_start = time.strftime("%Y-%m-%dT%H:%M:%S")
    out_dir = Path(out_dir) if out_dir is not None else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = out_dir / cfg.output
    phases = {}
    files: list[Path] = []
    g = _grid(cfg)

    if cfg.experiment == "prec-sweep":
        converged, extra = _run_prec_sweep(cfg, g, prefix, phases)
        files.extend(extra)
    elif cfg.experiment == "relaxed-compare":
        converged, extra = _run_relaxed_compare(cfg, g, prefix, phases)
        files.extend(extra)
    elif cfg.experiment == "eigen-rhs":
        converged, extra = _run_eigen_rhs(cfg, g, prefix, phases)
        files.extend(extra)
    else:
        t0 = time.time()
        instance, _params = _build_instance(cfg, g)
        p = instance.rhs.modes[0] if cfg.experiment in _PARAM_EXPERIMENTS \
            else 0
        precond = _preconditioner(cfg, g, p)
        phases["build"] = time.time() - t0

        t0 = time.time()
        gcfg = cfg.gmres_config(keep_iterates=cfg.bounds)
        outcome = tt_right_gmres(instance.operator, precond, instance.rhs,
                                 None, gcfg)
        phases["solve"] = time.time() - t0
        converged = outcome.converged

        report = None
        if cfg.bounds:
            t0 = time.time()
            chain = [instance.operator] if precond is None \
                else [instance.operator, precond]
            report = verify_bounds(OperatorChain(chain), instance.rhs,
                                   outcome.iterates,
                                   outcome.estimated_opnorm,
                                   seed=cfg.seed)
            phases["diagnose"] = time.time() - t0

        t0 = time.time()
        files.extend(emit_trace(outcome, report, prefix, cfg.format))
        phases["write"] = time.time() - t0

    manifest = {
        "config": dataclasses.asdict(cfg),
        "version": __version__,
        "started": stamp_start,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "wall_clock": phases,
        "total_seconds": time.time() - t_start,
        "converged": converged,
        "files": [str(f) for f in files],
    }
    mpath = prefix.with_name(prefix.name + "_manifest.json")
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=1, default=_json_float)
    manifest["manifest_path"] = str(mpath)
    return manifest


def _run_prec_sweep(cfg: ExperimentConfig, g: Grid1D, prefix: Path, phases):
    """Preconditioner q/tau sweep: max TT-rank and sampled |A M|_2."""
    qs = (2, 8, 16, 32, 64)
    taus = (1e-2, 1e-8)
    t0 = time.time()
    a = tt_laplacian(3, g, negate=True)
    rows = []
    for tau in taus:
        for q in qs:
            m = inv_laplacian_preconditioner(3, g, q, tau)
            est = estimate_l2_norm(OperatorChain([a, m]), seed=cfg.seed)
            rows.append((q, tau, m.max_rank, est))
    phases["build"] = time.time() - t0
    t0 = time.time()
    path = prefix.with_name(prefix.name + "_sweep.csv")
    with open(path, "w") as f:
        f.write("q,tau,max_rank,opnorm_AM\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    phases["write"] = time.time() - t0
    return True, [path]


def _run_relaxed_compare(cfg: ExperimentConfig, g: Grid1D, prefix: Path,
                         phases):
    """Constant-delta control versus the relaxed policy on the same system."""
    t0 = time.time()
    instance = convection_diffusion_problem(g)
    precond = _preconditioner(cfg, g)
    chain = OperatorChain([instance.operator] if precond is None
                          else [instance.operator, precond])
    phases["build"] = time.time() - t0

    t0 = time.time()
    const_cfg = cfg.gmres_config(m=cfg.maxit,
                                 plateau_window=cfg.plateau_window or 4,
                                 epsilon=1e-15)
    constant = tt_gmres(chain, instance.rhs, const_cfg)
    relaxed = relaxed_tt_gmres(chain, instance.rhs,
                               cfg.gmres_config(m=cfg.maxit, epsilon=1e-15))
    phases["solve"] = time.time() - t0

    t0 = time.time()
    files = []
    for tag, outcome in (("constant", constant), ("relaxed", relaxed)):
        sub = prefix.with_name(prefix.name + f"_{tag}")
        files.extend(emit_trace(outcome, None, sub, cfg.format))
    phases["write"] = time.time() - t0
    return True, files


def _run_eigen_rhs(cfg: ExperimentConfig, g: Grid1D, prefix: Path, phases):
    """Two stacked systems: a single eigenvector rhs and a sum of j of them.

    Also solves the slow (sum) system alone so the traces can be compared.
    """
    from .operators import all_in_one_rhs
    t0 = time.time()
    a0 = tt_laplacian(3, g, negate=True)
    fast = laplacian_eigen_rhs(g, [(1, 1, 1)])
    slow = laplacian_eigen_rhs(g, [(l, l, l) for l in range(2, cfg.j + 2)])
    rhs = all_in_one_rhs([fast, slow])
    a = kron_leading_identity(2, a0)
    phases["build"] = time.time() - t0

    t0 = time.time()
    gcfg = cfg.gmres_config(m=cfg.maxit)
    joint = tt_gmres(a, rhs, gcfg)
    alone = tt_gmres(a0, slow, gcfg)
    phases["solve"] = time.time() - t0

    t0 = time.time()
    files = list(emit_trace(joint, None, prefix, cfg.format))
    files.extend(emit_trace(alone, None,
                            prefix.with_name(prefix.name + "_slow"),
                            cfg.format))
    phases["write"] = time.time() - t0
    return joint.converged and alone.converged, files


def presets_dir() -> Path:
    return Path(__file__).parent / "presets"


def _resolve_config(arg: str) -> Path:
    path = Path(arg)
    if path.exists():
        return path
    candidate = presets_dir() / f"{arg}.cfg"
    if candidate.exists():
        return candidate
    raise ConfigError(f"config {arg!r}: no such file or preset")


def _run_one(args_tuple):
    path_str, overrides, out_dir, fmt = args_tuple
    pairs = parse_config_text(Path(path_str).read_text())
    pairs.update(overrides)
    if fmt:
        pairs["format"] = fmt
    cfg = build_config(pairs)
    manifest = run_experiment(cfg, out_dir)
    return cfg.experiment, manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ttkrylov",
        description="Tensor-train GMRES experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run one or more experiment configs")
    runp.add_argument("config", nargs="+",
                      help="config file path or preset name")
    runp.add_argument("--set", action="append", default=[], metavar="K=V",
                      help="override a config key")
    runp.add_argument("--output", default=".", help="output directory")
    runp.add_argument("--format", choices=("csv", "json"), default=None)
    runp.add_argument("--jobs", type=int, default=1,
                      help="run independent configs concurrently")

    sub.add_parser("presets", help="list built-in experiment presets")

    args = parser.parse_args(argv)

    if args.command == "presets":
        for path in sorted(presets_dir().glob("*.cfg")):
            head = ""
            for line in path.read_text().splitlines():
                if line.startswith("#"):
                    head = line.lstrip("# ").strip()
                    break
            print(f"{path.stem:28s} {head}")
        return 0

    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects key=value, got {item!r}",
                  file=sys.stderr)
            return 2
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()

    try:
        paths = [_resolve_config(c) for c in args.config]
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    jobs = [(str(p), overrides, args.output, args.format) for p in paths]
    failures = 0
    try:
        if args.jobs > 1 and len(jobs) > 1:
            with concurrent.futures.ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(_run_one, jobs))
        else:
            results = [_run_one(j) for j in jobs]
    except (ConfigError, TTError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for experiment, manifest in results:
        status = "converged" if manifest["converged"] else "NOT CONVERGED"
        print(f"{experiment}: {status} "
              f"({manifest['total_seconds']:.1f}s, "
              f"files: {', '.join(manifest['files'])})")
        if not manifest["converged"] and experiment != "relaxed-compare":
            failures += 1
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
