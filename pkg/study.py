"""Convergence studies and verification suites for the FEM-BEM coupling.

    python study.py run --config study.cfg --set degrees=[1,2] --threads 4
    python study.py verify --suite energy-k0
"""
import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.io

import bem
import coupling
import solver
from analysis import QUANTITIES, compute_errors, convergence_rates, energy_identity_probe
from bem import QuadratureSettings, assemble_operators, build_trace_spaces
from fem import MediumCoefficients, build_fe_space
from meshes import cube_mesh, load_gmsh, mesh_size, refine_uniform, tagged_box_mesh
from solver import DIRECT_CAP, GMRES_MAXIT, GMRES_TOL

OUTPUT_DIR = Path("results")
STATUS_DIR = Path("status")
RUN_LOCK = threading.Lock()
ACTIVE_RUNS = {}

SQRT3_PI = np.sqrt(3.0) * np.pi
MODES = ("h-version", "p-version")
SOLVERS = ("schur", "direct", "gmres")
SUITES = ("kernels", "jumps", "calderon", "energy-k0", "conventions")
POLLUTION_LIMIT = 2.0

CSV_COLUMNS = [
    "level", "h", "p", "dofs_u", "dofs_m", "dofs_uext",
    "rel_l2_omega", "rel_h1_omega", "scaled_l2_mortar", "scaled_l2_ext",
    "rate_l2_omega", "rate_h1_omega", "rate_mortar", "rate_ext",
    "solver", "residual", "iterations",
]
RATE_COLUMNS = {
    "rel_l2_omega": "rate_l2_omega", "rel_h1_omega": "rate_h1_omega",
    "scaled_l2_mortar": "rate_mortar", "scaled_l2_ext": "rate_ext",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    case: str = "tc1"
    k_multiplier: float = 1.5
    degrees: list = field(default_factory=lambda: [1])
    levels: int = 3
    mode: str = "h-version"
    solver: str = "schur"
    output_dir: str = str(OUTPUT_DIR)
    base_subdivisions: int = 2
    p_levels: list = field(default_factory=lambda: [1])
    far_points: int = None
    near_points: int = None
    singular_order: int = 8
    near_factor: float = 2.0
    gmres_tol: float = GMRES_TOL
    gmres_maxit: int = GMRES_MAXIT
    preconditioner: str = "none"
    direct_cap: int = DIRECT_CAP
    threads: int = 1
    export_matrices: bool = False
    residual_limit: float = None
    h1_rate_window: list = None
    mesh_file: str = None

    @property
    def wavenumber(self):
        return SQRT3_PI if self.case == "tc2" else self.k_multiplier * SQRT3_PI

    @property
    def run_name(self):
        return f"{self.case}_k{self.k_multiplier:g}_{self.mode}"

    @property
    def residual_threshold(self):
        if self.residual_limit is not None:
            return self.residual_limit
        return 10 * self.gmres_tol if self.solver == "gmres" else 1e-10

    def quadrature(self):
        return QuadratureSettings(far_points=self.far_points, near_points=self.near_points,
                                  singular_order=self.singular_order, near_factor=self.near_factor)


INT_KEYS = {"levels", "base_subdivisions", "far_points", "near_points", "singular_order", "gmres_maxit",
            "direct_cap", "threads"}
FLOAT_KEYS = {"k_multiplier", "near_factor", "gmres_tol", "residual_limit"}
STR_KEYS = {"case", "mode", "solver", "output_dir", "preconditioner", "mesh_file"}
OPTIONAL_KEYS = {"far_points", "near_points", "residual_limit", "h1_rate_window", "mesh_file"}


def _check_type(key, value):
    if value is None and key in OPTIONAL_KEYS:
        return value
    if key in INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    elif key in FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        value = float(value)
    elif key in STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
    elif key == "export_matrices":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
    elif key in ("degrees", "p_levels"):
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not value or not all(isinstance(v, int) and not isinstance(v, bool)
                                                                for v in value):
            raise ConfigError(f"{key} must be a nonempty list of integers, got {value!r}")
    elif key == "h1_rate_window":
        if not isinstance(value, list) or len(value) != 2 or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{key} must be [low, high], got {value!r}")
    return value


def validate(config):
    if config.case not in coupling.CASE_NAMES:
        raise ConfigError(f"case must be one of {', '.join(coupling.CASE_NAMES)}, got '{config.case}'")
    if config.k_multiplier <= 0:
        raise ConfigError(f"k_multiplier must be positive, got {config.k_multiplier}")
    if config.levels < 1:
        raise ConfigError(f"levels must be at least 1, got {config.levels}")
    if config.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got '{config.mode}'")
    if config.solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {', '.join(SOLVERS)}, got '{config.solver}'")
    if config.preconditioner not in solver.PRECONDITIONERS:
        raise ConfigError(f"preconditioner must be one of {', '.join(solver.PRECONDITIONERS)}")
    bad = [p for p in config.degrees if p not in (1, 2, 3)]
    if bad:
        raise ConfigError(f"degrees must lie in {{1, 2, 3}}, got {bad}")
    if any(level < 0 for level in config.p_levels):
        raise ConfigError("p_levels must be nonnegative mesh levels")
    for key in ("base_subdivisions", "threads", "singular_order", "gmres_maxit", "direct_cap"):
        if getattr(config, key) < 1:
            raise ConfigError(f"{key} must be positive")
    if config.case == "tc2" and config.k_multiplier != 1:
        logging.warning("tc2 fixes k = sqrt(3) pi; k_multiplier %s replaced by 1", config.k_multiplier)
        config = replace(config, k_multiplier=1.0)
    return config


def parse_value(text):
    """JSON value when possible, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_lines(lines, source):
    values = {}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(value)
    return values


def config_from_mapping(values):
    known = {f.name for f in fields(StudyConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown configuration key '{unknown[0]}'")
    checked = {key: _check_type(key, value) for key, value in values.items()}
    return validate(StudyConfig(**checked))


def load_config(path=None, overrides=()):
    """File values over defaults, ``key=value`` overrides over both."""
    values = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        with path.open("r", encoding="utf-8") as f:
            values.update(parse_lines(f.read().splitlines(), path))
    values.update(parse_lines(overrides, "--set"))
    return config_from_mapping(values)


def ensure_dirs(output_dir=OUTPUT_DIR):
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    STATUS_DIR.mkdir(parents=True, exist_ok=True)


def status_path(run_name):
    return STATUS_DIR / f"{run_name}.json"


def load_status(run_name):
    path = status_path(run_name)
    if not path.exists():
        return {"status": "not_started", "progress": 0}
    try:
        with path.open("r") as f:
            return json.load(f)
    except Exception:
        return {"status": "unknown", "progress": 0}


def write_status(run_name, status, progress, message=None, artifact=None):
    payload = {
        "run": run_name,
        "status": status,
        "progress": progress,
        "timestamp": int(time.time()),
    }
    if message:
        payload["message"] = message
    if artifact:
        payload["artifact"] = artifact
    with RUN_LOCK:
        with status_path(run_name).open("w") as f:
            json.dump(payload, f)
            f.flush()
            os.fsync(f.fileno())


def write_csv(path, rows):
    """Write rows under CSV_COLUMNS through a temporary file and an atomic rename."""
    path = Path(path)
    handle = tempfile.NamedTemporaryFile("w", dir=path.parent, prefix=f".{path.stem}-", suffix=".csv",
                                         delete=False, newline="", encoding="utf-8")
    try:
        with handle:
            writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(handle.name, path)
    except Exception:
        Path(handle.name).unlink(missing_ok=True)
        raise
    return path


def level_meshes(config, levels):
    """Meshes for levels 0..levels-1 by uniform refinement of the base mesh."""
    if config.mesh_file:
        mesh = load_gmsh(config.mesh_file)
    elif config.case == "tc2":
        mesh = tagged_box_mesh([-0.5, -0.2, 0.2, 0.5], coupling.INNER_BOX)
    else:
        mesh = cube_mesh(1.0, config.base_subdivisions)
    meshes = [mesh]
    for _ in range(1, levels):
        meshes.append(refine_uniform(meshes[-1]))
    return meshes


def _fmt(value):
    return "" if value is None else f"{value:.6e}"


def solve_level(config, mesh, level, p):
    """Assemble, solve and measure one (level, degree) pair."""
    k = config.wavenumber
    case = coupling.make_case(config.case, k, p)
    V_h = build_fe_space(mesh, p)
    spaces = build_trace_spaces(V_h.surface, p)
    operators = assemble_operators(k, spaces, bem.KERNELS, config.quadrature(), config.threads)
    system = coupling.assemble_block_system(case, V_h, spaces, operators, threads=config.threads)
    solution = solver.solve(system, config.solver, cap=config.direct_cap, tol=config.gmres_tol,
                            maxit=config.gmres_maxit, preconditioner=config.preconditioner)
    if config.export_matrices:
        export_system(config, system, level, p)
    zero_norm = "absolute" if config.case == "poly-exact" else "raise"
    return compute_errors(solution, case, V_h, spaces, zero_norm=zero_norm)


def export_system(config, system, level, p):
    directory = Path(config.output_dir) / "matrices" / f"{config.run_name}_L{level}_p{p}"
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("A", "B1", "B2", "B3", "B4", "B5", "B6"):
        scipy.io.mmwrite(str(directory / f"{name}.mtx"), getattr(system, name))
    np.savetxt(directory / "rhs.txt", system.rhs.view(float).reshape(-1, 2))
    bem.export_operators(system.operators, directory)
    logging.info("Exported block matrices to %s", directory)


def report_row(level, report):
    stats = report.stats
    nv, nw, nz = report.dofs
    return {
        "level": level, "h": _fmt(report.h), "p": report.p,
        "dofs_u": nv, "dofs_m": nw, "dofs_uext": nz,
        "rel_l2_omega": _fmt(report.rel_l2_omega), "rel_h1_omega": _fmt(report.rel_h1_omega),
        "scaled_l2_mortar": _fmt(report.scaled_l2_mortar), "scaled_l2_ext": _fmt(report.scaled_l2_ext),
        "rate_l2_omega": "", "rate_h1_omega": "", "rate_mortar": "", "rate_ext": "",
        "solver": stats.method if stats else "", "residual": _fmt(stats.residual) if stats else "",
        "iterations": stats.iterations if stats else "",
    }


def _plan(config):
    if config.mode == "h-version":
        return [(level, p) for p in config.degrees for level in range(config.levels)]
    return [(level, p) for level in config.p_levels for p in config.degrees]


BOUNDARY_QUANTITIES = ("scaled_l2_mortar", "scaled_l2_ext")


def boundary_rate_failures(p, rates):
    """Boundary errors must converge at least as fast as the H1 error."""
    h1 = rates.least_squares["rel_h1_omega"]
    return [f"p={p}: {name} rate {rates.least_squares[name]:.3f} below H1 rate {h1:.3f}"
            for name in BOUNDARY_QUANTITIES if rates.least_squares[name] < h1]


def degree_monotonicity_failures(level, reports):
    """All four errors must strictly decrease with the degree on a fixed mesh."""
    ordered = sorted(reports, key=lambda report: report.p)
    failures = []
    for name in QUANTITIES:
        values = [report.quantity(name) for report in ordered]
        if any(b >= a for a, b in zip(values[:-1], values[1:])):
            failures.append(f"level {level}: {name} not decreasing in p: "
                            + ", ".join(f"{v:.3e}" for v in values))
    return failures


def execute_run(config):
    """One CSV for (case, k, mode); returns (passed, csv path)."""
    run_name = config.run_name
    plan = _plan(config)
    meshes = level_meshes(config, max(level for level, _ in plan) + 1)
    rows, reports, failures = [], [], []
    by_degree = {}
    write_status(run_name, "running", 0, message=f"{len(plan)} solves planned")
    for index, (level, p) in enumerate(plan):
        report = solve_level(config, meshes[level], level, p)
        if report.stats and not report.stats.residual <= config.residual_threshold:
            failures.append(f"level {level} p={p}: residual {report.stats.residual:.3e}")
        rows.append(report_row(level, report))
        reports.append(report)
        by_degree.setdefault(p, []).append((len(rows) - 1, report))
        write_status(run_name, "running", int(100 * (index + 1) / len(plan)), message=f"level {level} p={p} done")
        logging.info("%s: level %d p=%d h=%.4g H1 error %.3e", run_name, level, p, report.h, report.rel_h1_omega)

    finest = meshes[max(level for level, _ in plan)]
    ratio = config.wavenumber * mesh_size(finest) / min(config.degrees)
    if ratio > POLLUTION_LIMIT:
        logging.warning("%s: k h / p = %.2f on the finest mesh, expect pollution", run_name, ratio)

    if config.mode == "h-version":
        for p, entries in by_degree.items():
            if len(entries) < 2:
                continue
            rates = convergence_rates([report for _, report in entries])
            for i, (row_index, _) in enumerate(entries[1:]):
                for quantity, column in RATE_COLUMNS.items():
                    rows[row_index][column] = f"{rates.pairwise[quantity][i]:.4f}"
            slope = rates.least_squares["rel_h1_omega"]
            logging.info("%s: p=%d least-squares H1 rate %.3f", run_name, p, slope)
            if config.h1_rate_window is not None:
                low, high = config.h1_rate_window
                if not low <= slope <= high:
                    failures.append(f"p={p}: H1 rate {slope:.3f} outside [{low}, {high}]")
            if config.case != "poly-exact":
                failures.extend(boundary_rate_failures(p, rates))
    elif config.case != "poly-exact":
        by_level = {}
        for (level, _), report in zip(plan, reports):
            by_level.setdefault(level, []).append(report)
        for level, level_reports in by_level.items():
            failures.extend(degree_monotonicity_failures(level, level_reports))

    path = write_csv(Path(config.output_dir) / f"{run_name}.csv", rows)
    if failures:
        write_status(run_name, "failed", 100, message="; ".join(failures), artifact=str(path))
        logging.error("Run %s failed checks: %s", run_name, "; ".join(failures))
        return False, path
    write_status(run_name, "done", 100, artifact=str(path))
    return True, path


def run_study(config):
    """Run the configured study; exit code 0 iff every run completed and passed its checks."""
    ensure_dirs(config.output_dir)
    run_name = config.run_name
    with RUN_LOCK:
        if run_name in ACTIVE_RUNS:
            raise ConfigError(f"run {run_name} is already active")
        ACTIVE_RUNS[run_name] = time.time()
    try:
        passed, _ = execute_run(config)
    except Exception as e:
        logging.error("Run %s failed: %s", run_name, e)
        write_status(run_name, "error", 0, message=f"{type(e).__name__}: {e}")
        passed = False
    finally:
        with RUN_LOCK:
            ACTIVE_RUNS.pop(run_name, None)
    return 0 if passed else 1


# --- verification suites -------------------------------------------------------

KERNEL_TOL = 1e-12
CONSTANT_TOL = 1e-3
JUMP_TOL = 1e-3
CALDERON_RATIO = 1.5
ENERGY_TOL = 1e-10


def _surface_spaces(n=1, levels=0, p=1):
    mesh = cube_mesh(1.0, n)
    for _ in range(levels):
        mesh = refine_uniform(mesh)
    V_h = build_fe_space(mesh, p)
    return V_h, build_trace_spaces(V_h.surface, p)


def _relative(a, b):
    scale = max(np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


def verify_kernels(threads=1):
    """Operator symmetries and the double layer applied to constants."""
    _, spaces = _surface_spaces(n=1, levels=1)
    ops = assemble_operators(1.5 * SQRT3_PI, spaces, threads=threads)
    static = assemble_operators(0.0, spaces, threads=threads)
    ones = np.ones(spaces.num_z)
    mass_wz = static.block("M", "W", "Z")
    values = {
        "V_symmetry": _relative(ops.Vm, ops.Vm.T),
        "W_symmetry": _relative(ops.Wm, ops.Wm.T),
        "K_Kp_transpose": _relative(ops.Km, ops.Kpm.T),
        "K0_constant": _relative(static.Km @ ones, -0.5 * mass_wz @ ones),
        "W0_constant": float(np.abs(static.Wm @ ones).max() / np.abs(static.Wm).max()),
        "V0_min_eigenvalue": float(np.linalg.eigvalsh(static.Vm.real).min()),
        "W0_second_eigenvalue": float(np.linalg.eigvalsh(static.Wm.real)[1]),
    }
    passed = (values["V_symmetry"] <= KERNEL_TOL and values["W_symmetry"] <= KERNEL_TOL
              and values["K_Kp_transpose"] <= KERNEL_TOL and values["K0_constant"] <= CONSTANT_TOL
              and values["W0_constant"] <= KERNEL_TOL and values["V0_min_eigenvalue"] > 0
              and values["W0_second_eigenvalue"] > 0)
    return passed, values


def jumps_converged(sweep, floor):
    """Every relation is within JUMP_TOL at the finest order and never grows with the order above ``floor``."""
    for residuals in sweep.values():
        if residuals[-1] > JUMP_TOL:
            return False
        if any(b > max(a, floor) for a, b in zip(residuals[:-1], residuals[1:])):
            return False
    return True


def verify_jumps(threads=1, offset=1e-5, orders=(4, 8, 16)):
    """Jump relations at offset points over increasing potential quadrature orders."""
    _, spaces = _surface_spaces(n=1, levels=1)
    phi = bem.project_w(spaces, lambda x, n: 1.0 + x[..., 0] - 0.5 * x[..., 2])
    psi = bem.interpolate_z(spaces, lambda x: 1.0 + x[..., 1] ** 2)
    estimates = [bem.jump_relation_probe(2.0, spaces, phi, psi, offset, order) for order in orders]
    sweep = {name: [jumps[name] for jumps in estimates] for name in estimates[0]}
    # O(offset) truncation of the one-sided limits
    floor = 10 * offset
    return jumps_converged(sweep, floor), {"orders": list(orders), **sweep}


def calderon_study(k, case, levels=3, n=2, threads=1):
    """Summed Calderon residual norms on successive refinements for the exterior traces of ``case``."""
    residuals = []
    for level in range(levels):
        _, spaces = _surface_spaces(n=n, levels=level)
        ops = assemble_operators(k, spaces, threads=threads)
        g0 = bem.interpolate_z(spaces, case.uext_exact)
        g1 = bem.project_w(spaces, case.neumann_ext)
        residuals.append(float(sum(bem.calderon_residual(k, ops, g0, g1))))
    return residuals


def verify_calderon(threads=1):
    """Radiating traces satisfy the Calderon identities in the limit, a plane wave does not."""
    k = 1.5 * SQRT3_PI
    point = calderon_study(k, coupling.tc1(k), threads=threads)
    plane = calderon_study(k, coupling.plane_wave(k), levels=2, threads=threads)
    ratios = [a / b for a, b in zip(point[:-1], point[1:])]
    values = {"point_source": point, "ratios": ratios, "plane_wave": plane}
    passed = all(r >= CALDERON_RATIO for r in ratios) and plane[-1] > 10 * point[-1]
    return passed, values


def energy_gap(mesh, trials=50, threads=1, k=0.0):
    """Energy identity gap of T assembled at ``k`` against the k = 0 component matrices."""
    V_h = build_fe_space(mesh, 1)
    spaces = build_trace_spaces(V_h.surface, 1)
    static = coupling.assemble_blocks(0.0, MediumCoefficients(0.0), V_h, spaces, threads=threads)
    system = static if k == 0 else coupling.assemble_blocks(k, MediumCoefficients(k), V_h, spaces, threads=threads)
    T = coupling.assemble_T_matrix(k, MediumCoefficients(k), V_h, spaces, system=system)
    return energy_identity_probe(T, static.S, static.operators.Wm, static.operators.Vm, static.dims, trials)


def verify_energy(threads=1, levels=3):
    """k = 0 identity x^H T x = |u|_S^2 + <W uext, uext> + <V m, m> on refined cube meshes."""
    mesh = cube_mesh(1.0, 1)
    gaps = []
    for level in range(levels):
        if level:
            mesh = refine_uniform(mesh)
        gaps.append(energy_gap(mesh, threads=threads))
    return all(g <= ENERGY_TOL for g in gaps), {"gaps": gaps}


def verify_conventions(threads=1):
    """Kernel normalisation and the interior and exterior double layer potential of 1."""
    k = 2.0
    x, y = np.array([0.3, 0.1, -0.2]), np.array([-0.1, 0.2, 0.4])
    r = np.linalg.norm(x - y)
    _, spaces = _surface_spaces(n=1, levels=1)
    ones = np.ones(spaces.num_z)
    inner = bem.eval_potentials(0.0, spaces, ones, np.array([[0.05, -0.1, 0.1]]), "double")
    outer = bem.eval_potentials(0.0, spaces, ones, np.array([[1.2, 0.3, -0.4]]), "double")
    values = {
        "kernel": abs(bem.green_kernel(k, x, y) - np.exp(1j * k * r) / (4 * np.pi * r)),
        "double_layer_inside": float(abs(inner[0] + 1.0)),
        "double_layer_outside": float(abs(outer[0])),
    }
    passed = values["kernel"] <= KERNEL_TOL and max(values["double_layer_inside"],
                                                    values["double_layer_outside"]) <= CONSTANT_TOL
    return passed, values


VERIFY_SUITES = {
    "kernels": verify_kernels,
    "jumps": verify_jumps,
    "calderon": verify_calderon,
    "energy-k0": verify_energy,
    "conventions": verify_conventions,
}


def verify(suite, threads=1):
    """Run a named suite; returns a machine-readable summary."""
    if suite not in VERIFY_SUITES:
        raise ConfigError(f"unknown suite '{suite}', choose from {', '.join(SUITES)}")
    started = time.time()
    try:
        passed, values = VERIFY_SUITES[suite](threads=threads)
    except Exception as e:
        logging.error("Suite %s failed: %s", suite, e)
        return {"suite": suite, "passed": False, "error": f"{type(e).__name__}: {e}"}
    logging.info("Suite %s: %s in %.1fs", suite, "pass" if passed else "fail", time.time() - started)
    return {"suite": suite, "passed": bool(passed), "values": values, "seconds": round(time.time() - started, 3)}


# --- command line ----------------------------------------------------------------

def configure_logging(output_dir, verbose=False):
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    logging.basicConfig(filename=str(Path(output_dir) / "study.log"), level=logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    if verbose:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
        logging.getLogger().addHandler(handler)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="assembly threads")
    common.add_argument("--export-matrices", action="store_true", help="write block matrices in Matrix Market format")
    common.add_argument("--verbose", action="store_true", help="mirror the log to stderr")

    parser = argparse.ArgumentParser(description="FEM-BEM coupling convergence studies")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run a convergence study")
    run.add_argument("--config", help="key = value configuration file")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
    check = sub.add_parser("verify", parents=[common], help="run an invariant suite")
    check.add_argument("--suite", required=True, choices=SUITES)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        configure_logging(OUTPUT_DIR, args.verbose)
        summary = verify(args.suite, threads=args.threads or 1)
        print(json.dumps(summary, default=float, indent=2))
        return 0 if summary["passed"] else 1

    overrides = list(args.set)
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.export_matrices:
        overrides.append("export_matrices=true")
    try:
        config = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    configure_logging(config.output_dir, args.verbose)
    logging.info("Starting %s with %s", config.run_name, json.dumps(asdict(config)))
    code = run_study(config)
    print(f"{config.run_name}: {load_status(config.run_name).get('status')}")
    return code


if __name__ == "__main__":
    sys.exit(main())
