"""Relative errors, convergence rates and the k = 0 energy identity probe."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from bem import surface_values
from meshes import mesh_size
from quadrature import MAX_VOLUME_DEGREE, triangle_rule, volume_quadrature

log = logging.getLogger(__name__)

QUANTITIES = ("rel_l2_omega", "rel_h1_omega", "scaled_l2_mortar", "scaled_l2_ext")


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorReport:
    h: float
    p: int
    k: float
    rel_l2_omega: float
    rel_h1_omega: float
    scaled_l2_mortar: float
    scaled_l2_ext: float
    dofs: tuple = (0, 0, 0)
    stats: object = None

    def __post_init__(self):
        for name in QUANTITIES:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise AnalysisError(f"{name} must be finite and nonnegative, got {value}")

    def quantity(self, name):
        return getattr(self, name)


def _ratio(error, exact, label, zero_norm):
    if exact > 0:
        return float(np.sqrt(error / exact))
    if zero_norm == "absolute":
        return float(np.sqrt(error))
    raise AnalysisError(f"exact {label} norm is zero")


def volume_error_integrals(solution_u, case, V_h, degree):
    """Squared L2 and H1-seminorm integrals of the error and of the exact field."""
    rule = volume_quadrature(min(degree, MAX_VOLUME_DEGREE))
    values, grads = V_h.evaluate(solution_u, rule)
    points = V_h.physical_points(rule)
    _, jac = V_h.jacobians()
    wdet = rule.weights[None, :] * np.abs(np.linalg.det(jac))[:, None]
    exact = case.u_int(points)
    exact_grad = case.grad_u_int(points)
    return (
        float(np.sum(wdet * np.abs(exact - values) ** 2)),
        float(np.sum(wdet * np.abs(exact) ** 2)),
        float(np.sum(wdet * np.sum(np.abs(exact_grad - grads) ** 2, axis=-1))),
        float(np.sum(wdet * np.sum(np.abs(exact_grad) ** 2, axis=-1))),
    )


def surface_error_integrals(coefficients, exact, spaces, which, degree):
    """Squared L2(boundary) error and exact norm of a W_h or Z_h function."""
    tri = triangle_rule(degree)
    bary = tri.barycentric()
    ntri = spaces.surface.num_triangles
    points = spaces.points(np.arange(ntri), np.broadcast_to(bary, (ntri,) + bary.shape))
    normals = np.broadcast_to(spaces.surface.normals[:, None, :], points.shape)
    target = exact(points, normals) if which == "W" else exact(points)
    discrete = surface_values(spaces, coefficients, which, bary)
    weights = spaces.jac2[:, None] * tri.weights[None, :]
    return float(np.sum(weights * np.abs(target - discrete) ** 2)), float(np.sum(weights * np.abs(target) ** 2))


def compute_errors(solution, case, V_h, spaces, degree=None, zero_norm="raise"):
    """The four relative errors, boundary ones scaled by h^(1/2) and h^(-1/2).

    ``zero_norm="absolute"`` reports absolute errors where the exact norm
    vanishes instead of rejecting the case.
    """
    p = V_h.degree
    degree = degree or 2 * p + 2
    h = mesh_size(V_h.mesh)
    l2_err, l2_ref, h1_err, h1_ref = volume_error_integrals(solution.u, case, V_h, degree)
    m_err, m_ref = surface_error_integrals(solution.m, case.m_exact, spaces, "W", degree)
    e_err, e_ref = surface_error_integrals(solution.uext, case.uext_exact, spaces, "Z", degree)
    report = ErrorReport(
        h=h, p=p, k=case.k,
        rel_l2_omega=_ratio(l2_err, l2_ref, "L2(omega)", zero_norm),
        rel_h1_omega=_ratio(h1_err, h1_ref, "H1 seminorm", zero_norm),
        scaled_l2_mortar=np.sqrt(h) * _ratio(m_err, m_ref, "mortar", zero_norm),
        scaled_l2_ext=_ratio(e_err, e_ref, "exterior trace", zero_norm) / np.sqrt(h),
        dofs=(V_h.num_dofs, spaces.num_w, spaces.num_z),
        stats=getattr(solution, "stats", None),
    )
    log.info("errors h=%.4g p=%d: L2 %.3e H1 %.3e mortar %.3e ext %.3e", h, p, report.rel_l2_omega,
             report.rel_h1_omega, report.scaled_l2_mortar, report.scaled_l2_ext)
    return report


@dataclass(frozen=True)
class ConvergenceRates:
    pairwise: dict
    least_squares: dict


def _rates(h, errors):
    with np.errstate(divide="ignore", invalid="ignore"):
        log_h, log_e = np.log(h), np.log(errors)
    pairwise = (log_e[:-1] - log_e[1:]) / (log_h[:-1] - log_h[1:])
    if np.all(np.isfinite(log_e)):
        slope = float(np.polyfit(log_h, log_e, 1)[0])
    else:
        slope = float("nan")
    return [float(r) for r in pairwise], slope


def rates_from(h, errors):
    """Consecutive log-ratio rates and the least-squares slope of log e against log h."""
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(h) < 2:
        raise AnalysisError("at least two levels are needed for a rate")
    if np.any(np.diff(h) >= 0):
        raise AnalysisError(f"mesh sizes must decrease strictly, got {h.tolist()}")
    return _rates(h, errors)


def convergence_rates(reports):
    h = [r.h for r in reports]
    pairwise, least_squares = {}, {}
    for name in QUANTITIES:
        pairwise[name], least_squares[name] = rates_from(h, [r.quantity(name) for r in reports])
    return ConvergenceRates(pairwise, least_squares)


def _random_triple(rng, dims, complex_coefficients):
    n = sum(dims)
    x = rng.standard_normal(n)
    if complex_coefficients:
        x = x + 1j * rng.standard_normal(n)
    return x


def energy_identity_probe(T0, S, W0, V0, dims, trials=50, seed=0, complex_coefficients=False):
    """Max relative gap between x^H T x and |u|_S^2 + <W uext, uext> + <V m, m> at k = 0.

    Real triples check the full quadratic form; complex triples only its real part,
    since the mortar coupling contributes a purely imaginary term.
    """
    if trials < 1:
        raise AnalysisError("no trials")
    nv, nw, nz = dims
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = _random_triple(rng, dims, complex_coefficients)
        u, m, uext = x[:nv], x[nv:nv + nw], x[nv + nw:]
        form = np.vdot(x, T0 @ x)
        energy = (np.vdot(u, S @ u) + np.vdot(uext, W0 @ uext) + np.vdot(m, V0 @ m)).real
        gap = abs(form.real - energy) if complex_coefficients else abs(form - energy)
        worst = max(worst, gap / abs(energy))
    log.info("energy identity probe: %d trials, max relative gap %.3e", trials, worst)
    return float(worst)


def energy_lower_bound(T0, dims, trials=50, seed=0):
    """Smallest Re(x^H T x) over random complex triples."""
    if trials < 1:
        raise AnalysisError("no trials")
    rng = np.random.default_rng(seed)
    return float(min(np.vdot(x, T0 @ x).real for x in (_random_triple(rng, dims, True) for _ in range(trials))))
