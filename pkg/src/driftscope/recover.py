"""End-to-end drift recovery: orchestrates dataset -> chord fits -> sinogram
-> filtered back-projection -> Dirichlet solve -> log -> gradient, persists
every intermediate artifact, and computes error metrics against an optional
ground truth.  Also provides the product construction that lifts a 1-D
reconstruction problem to the planar pipeline.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import __version__
from .elliptic import (
    BoundaryPsi,
    BvpSolution,
    assemble_dirichlet_system,
    boundary_psi_from_fits,
    boundary_values_from_psi,
    solve_bvp,
)
from .errors import ConfigError, DataError, DriftscopeError
from .fields import (
    DiffusionField,
    DiscDomain,
    Domain,
    Grid,
    RectangleDomain,
    ScalarField,
    VectorField,
    domain_from_config,
    gradient,
    write_dgf,
)
from .kernels import BrownianKernel, Kernel, OrnsteinUhlenbeckKernel, ProductKernel, kernel_from_config
from .smalltime import (
    BoundaryDataset,
    build_boundary_dataset,
    fit_dataset,
    write_dataset_csv,
    write_fits_csv,
)
from .xray import Sinogram, fbp_invert, sinogram_from_fits, write_sinogram_csv

_CONFIG_KEYS = {
    "domain",
    "grid",
    "geometry",
    "ladder",
    "kernels",
    "filter",
    "solver",
    "seed",
    "density_floor",
    "boundary_knots",
    "gauge_param",
    "metric_fraction",
    "output_dir",
    "workers",
    "ground_truth",
}


@dataclass(frozen=True)
class PipelineConfig:
    domain_spec: dict
    kernels: dict
    grid_spec: dict | None = None
    n_angles: int = 180
    n_offsets: int = 181
    ladder: tuple | None = None
    filter_name: str = "hann"
    solver_tol: float = 1e-10
    solver_max_iter: int = 20000
    seed: int = 0
    density_floor: float = 1e-30
    boundary_knots: int = 256
    gauge_param: float = 0.0
    metric_fraction: float = 0.8
    output_dir: str = "out"
    workers: int | None = None
    ground_truth: dict | None = None

    def resolved_grid(self) -> Grid:
        if self.grid_spec is not None:
            s = self.grid_spec
            return Grid.from_extent(
                float(s["x0"]), float(s["y0"]), float(s["x1"]), float(s["y1"]),
                int(s["nx"]), int(s["ny"]),
            )
        return default_grid(self.domain_spec)

    def resolved_domain(self) -> Domain:
        return domain_from_config(self.domain_spec, self.resolved_grid())

    def resolved_ladder(self) -> np.ndarray:
        if self.ladder is not None:
            return np.asarray(self.ladder, dtype=float)
        return default_ladder(self.resolved_domain().circumradius)

    def echo(self) -> dict:
        grid = self.resolved_grid()
        return {
            "domain": self.domain_spec,
            "grid": {"x0": grid.x0, "y0": grid.y0, "x1": grid.x1, "y1": grid.y1,
                     "nx": grid.nx, "ny": grid.ny},
            "geometry": {"n_angles": self.n_angles, "n_offsets": self.n_offsets},
            "ladder": [float(t) for t in self.resolved_ladder()],
            "kernels": self.kernels,
            "filter": self.filter_name,
            "solver": {"tol": self.solver_tol, "max_iter": self.solver_max_iter},
            "seed": self.seed,
            "density_floor": self.density_floor,
            "boundary_knots": self.boundary_knots,
            "gauge_param": self.gauge_param,
            "metric_fraction": self.metric_fraction,
            "output_dir": self.output_dir,
        }


def default_ladder(radius: float, m: int = 4) -> np.ndarray:
    """Geometric ladder t_k = t1 / 2^{k-1} with t1 = 0.02 * radius^2."""
    t1 = 0.02 * radius * radius
    return t1 * 0.5 ** np.arange(m)


def default_grid(domain_spec: dict, n: int = 129, margin: float = 1.15) -> Grid:
    kind = domain_spec.get("kind")
    if kind == "disc":
        cx, cy = domain_spec.get("center", (0.0, 0.0))
        r = float(domain_spec["radius"]) * margin
        return Grid.from_extent(cx - r, cy - r, cx + r, cy + r, n, n)
    if kind == "rectangle":
        (x0, y0), (x1, y1) = domain_spec["corners"]
        mx = 0.5 * (margin - 1.0) * (x1 - x0)
        my = 0.5 * (margin - 1.0) * (y1 - y0)
        aspect = (y1 - y0 + 2 * my) / (x1 - x0 + 2 * mx)
        ny = max(3, int(round((n - 1) * aspect)) + 1)
        if ny % 2 == 0:
            ny += 1
        return Grid.from_extent(x0 - mx, y0 - my, x1 + mx, y1 + my, n, ny)
    raise ConfigError(f"unknown domain kind {kind!r}")


def _require_keys(d: dict, allowed: set, required: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"missing required key {sorted(missing)[0]!r} in {where}")


def config_from_dict(raw: dict) -> PipelineConfig:
    """Strict parse: unknown keys are rejected, defaults are filled."""
    _require_keys(raw, _CONFIG_KEYS, {"domain", "kernels"}, "config")
    dom = raw["domain"]
    _require_keys(dom, {"kind", "center", "radius", "corners"}, {"kind"}, "domain")
    if dom["kind"] not in ("disc", "rectangle"):
        raise ConfigError(f"unknown domain kind {dom['kind']!r}")
    if dom["kind"] == "disc" and "radius" not in dom:
        raise ConfigError("missing required key 'radius' in domain")
    if dom["kind"] == "rectangle" and "corners" not in dom:
        raise ConfigError("missing required key 'corners' in domain")
    kern = raw["kernels"]
    _require_keys(kern, {"observed", "reference"}, {"observed", "reference"}, "kernels")
    for side in ("observed", "reference"):
        _require_keys(
            kern[side],
            {"kind", "theta", "theta1", "theta2", "offset"},
            {"kind"},
            f"kernels.{side}",
        )
    geometry = raw.get("geometry", {})
    _require_keys(geometry, {"n_angles", "n_offsets"}, set(), "geometry")
    n_angles = int(geometry.get("n_angles", 180))
    n_offsets = int(geometry.get("n_offsets", 181))
    if n_angles < 2:
        raise ConfigError("geometry.n_angles must be at least 2")
    if n_offsets < 1:
        raise ConfigError("geometry.n_offsets must be positive")
    grid_spec = raw.get("grid")
    if grid_spec is not None:
        _require_keys(grid_spec, {"x0", "y0", "x1", "y1", "nx", "ny"},
                      {"x0", "y0", "x1", "y1", "nx", "ny"}, "grid")
    ladder = raw.get("ladder")
    if ladder is not None:
        ladder = tuple(float(t) for t in ladder)
        if len(ladder) < 3:
            raise ConfigError("ladder must hold at least 3 times")
        if any(t <= 0 for t in ladder):
            raise ConfigError("ladder times must be positive")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("ladder times must be decreasing")
    filter_name = raw.get("filter", "hann")
    if filter_name not in ("hann", "ram-lak"):
        raise ConfigError(f"unknown filter {filter_name!r}")
    solver = raw.get("solver", {})
    _require_keys(solver, {"tol", "max_iter"}, set(), "solver")
    gt = raw.get("ground_truth")
    if gt is not None:
        _require_keys(gt, {"kind", "theta"}, {"kind"}, "ground_truth")
        if gt["kind"] not in ("ou", "zero"):
            raise ConfigError(f"unknown ground_truth kind {gt['kind']!r}")
    return PipelineConfig(
        domain_spec=dom,
        kernels=kern,
        grid_spec=grid_spec,
        n_angles=n_angles,
        n_offsets=n_offsets,
        ladder=ladder,
        filter_name=filter_name,
        solver_tol=float(solver.get("tol", 1e-10)),
        solver_max_iter=int(solver.get("max_iter", 20000)),
        seed=int(raw.get("seed", 0)),
        density_floor=float(raw.get("density_floor", 1e-30)),
        boundary_knots=int(raw.get("boundary_knots", 256)),
        gauge_param=float(raw.get("gauge_param", 0.0)),
        metric_fraction=float(raw.get("metric_fraction", 0.8)),
        output_dir=str(raw.get("output_dir", "out")),
        workers=(None if raw.get("workers") in (None, "null") else int(raw["workers"])),
        ground_truth=gt,
    )


def ground_truth_from_config(gt: dict | None):
    if gt is None:
        return None
    if gt["kind"] == "zero":
        return {"c": lambda p: np.zeros_like(np.asarray(p, dtype=float))}
    theta = float(gt.get("theta", 1.0))
    return {
        "c": lambda p: -theta * np.asarray(p, dtype=float),
        "psi": lambda p: -0.5 * theta * np.sum(np.asarray(p, dtype=float) ** 2, axis=-1),
        "V": lambda p: 0.5 * (theta**2 * np.sum(np.asarray(p, dtype=float) ** 2, axis=-1) - 2 * theta),
    }


# ---------------------------------------------------------------------------
# Recovery operations
# ---------------------------------------------------------------------------


def psi_from_u(u: ScalarField, boundary_psi: BoundaryPsi, domain: Domain,
               min_u: float | None = None) -> ScalarField:
    """Drift potential log(u) inside the domain, gauged at the boundary
    reference point; outside, the boundary data extended along the projection
    onto the boundary (keeps finite differences sane near the edge).
    """
    inside = domain.contains(u.grid.node_points()).reshape(u.grid.shape)
    interior_vals = u.values[inside]
    lowest = float(interior_vals.min()) if min_u is None else min_u
    if lowest <= 0.0:
        raise DataError(
            f"cannot take log of the solution: min_u = {lowest:.6g} is not positive"
        )
    psi = np.empty(u.grid.shape)
    psi[inside] = np.log(u.values[inside])
    pts = u.grid.node_points().reshape(*u.grid.shape, 2)
    outside_pts = pts[~inside]
    proj = domain.project_to_boundary(outside_pts)
    psi[~inside] = boundary_psi.value_at(proj)
    return ScalarField(u.grid, psi)


def drift_from_psi(psi: ScalarField, a: DiffusionField, domain: Domain | None = None) -> VectorField:
    """Drift c = a * grad(psi); zeroed outside the domain when one is given."""
    if a.grid != psi.grid:
        raise DataError("drift_from_psi requires a shared grid")
    grad = gradient(psi).values
    cx = a.a11 * grad[..., 0] + a.a12 * grad[..., 1]
    cy = a.a12 * grad[..., 0] + a.a22 * grad[..., 1]
    c = np.stack([cx, cy], axis=-1)
    if domain is not None:
        inside = domain.contains(psi.grid.node_points()).reshape(psi.grid.shape)
        c = np.where(inside[..., None], c, 0.0)
    return VectorField(psi.grid, c)


def _erode(mask: np.ndarray, n: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(n):
        nxt = out.copy()
        nxt[1:, :] &= out[:-1, :]
        nxt[:-1, :] &= out[1:, :]
        nxt[:, 1:] &= out[:, :-1]
        nxt[:, :-1] &= out[:, 1:]
        nxt[0, :] = nxt[-1, :] = nxt[:, 0] = nxt[:, -1] = False
        out = nxt
    return out


def gradient_consistency(c: VectorField, a: DiffusionField, domain: Domain | None = None,
                         erode: int = 2) -> float:
    """L2 norm over the domain of d_y (a^{-1} c)_1 - d_x (a^{-1} c)_2: the
    discrete test that a^{-1} c is a gradient field (zero for exact data).
    """
    if a.grid != c.grid:
        raise DataError("gradient_consistency requires a shared grid")
    g = c.grid
    det = a.a11 * a.a22 - a.a12**2
    w1 = (a.a22 * c.values[..., 0] - a.a12 * c.values[..., 1]) / det
    w2 = (-a.a12 * c.values[..., 0] + a.a11 * c.values[..., 1]) / det
    from .fields import _d1  # shared stencils with gradient()

    curl = _d1(w1, g.dy, 1) - _d1(w2, g.dx, 0)
    if domain is not None:
        inside = domain.contains(g.node_points()).reshape(g.shape)
        region = _erode(inside, erode)
    else:
        region = np.ones(g.shape, dtype=bool)
        region[:erode, :] = region[-erode:, :] = region[:, :erode] = region[:, -erode:] = False
    return float(np.sqrt(np.sum(curl[region] ** 2) * g.cell_area))


def metric_region(domain: Domain, fraction: float) -> Domain:
    """Shrunk copy of the domain about its center (metrics avoid the edge)."""
    if isinstance(domain, DiscDomain):
        return DiscDomain(domain.grid, domain.center_x, domain.center_y,
                          domain.radius * fraction)
    if isinstance(domain, RectangleDomain):
        cx, cy = domain.center
        hx = 0.5 * (domain.xmax - domain.xmin) * fraction
        hy = 0.5 * (domain.ymax - domain.ymin) * fraction
        return RectangleDomain(domain.grid, cx - hx, cy - hy, cx + hx, cy + hy)
    raise DataError("unsupported domain type")


def drift_metrics(c_hat: VectorField, c_true_fn, domain: Domain, fraction: float) -> dict:
    region = metric_region(domain, fraction)
    g = c_hat.grid
    inside = region.contains(g.node_points()).reshape(g.shape)
    pts = g.node_points().reshape(*g.shape, 2)[inside]
    truth = np.asarray(c_true_fn(pts), dtype=float)
    diff = c_hat.values[inside] - truth
    err2 = float(np.sum(diff**2))
    ref2 = float(np.sum(truth**2))
    return {
        "rel_l2": float(np.sqrt(err2 / ref2)) if ref2 > 0 else None,
        "max_abs": float(np.sqrt((diff**2).sum(axis=-1)).max()),
        "n_metric_nodes": int(inside.sum()),
    }


# ---------------------------------------------------------------------------
# 1-D lifting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LiftedProblem:
    observed: Kernel
    reference: Kernel
    domain: Domain
    x1_shift: float  # planar x1 = original coordinate - x1_shift


def lift_1d(
    p1: Kernel,
    c2_kernel: Kernel,
    interval: tuple[float, float] = (0.0, 1.0),
    half_width: float = 3.0,
    grid: Grid | None = None,
    ny: int = 513,
    nx: int = 129,
) -> LiftedProblem:
    """Lift a 1-D reconstruction problem on an interval to the plane by
    pairing it with an independent second component.

    The planar observed kernel is the product p1 (x1) x p2 (x2); the
    reference is the product of the matching driftless kernels.  The strip
    interval x (-inf, inf) is truncated to a rectangle of the given
    half-width, and the whole problem is shifted so the rectangle is centered
    at the origin (the parallel-beam raster assumes a centered domain).
    """
    if p1.dim != 1 or c2_kernel.dim != 1:
        raise DataError("lift_1d needs one-dimensional kernels")
    lo, hi = float(interval[0]), float(interval[1])
    if hi <= lo:
        raise DataError("empty interval")
    shift = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    observed = ProductKernel(p1, c2_kernel, offset=(shift, 0.0))
    reference = ProductKernel(BrownianKernel(dim=1), BrownianKernel(dim=1), offset=(shift, 0.0))
    if grid is None:
        mx = 0.3 * half
        my = 0.15 * half_width
        grid = Grid.from_extent(-half - mx, -half_width - my, half + mx, half_width + my, nx, ny)
    domain = RectangleDomain(grid, -half, -half_width, half, half_width)
    return LiftedProblem(observed, reference, domain, shift)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReconstructionReport:
    psi_hat: ScalarField
    V_hat: ScalarField
    c_hat: VectorField
    u: ScalarField
    metrics: dict | None
    diagnostics: dict
    config: dict = dc_field(default_factory=dict)


def solve_stage(cfg: PipelineConfig, V_hat: ScalarField, chords, fits, domain: Domain):
    """Dirichlet solve plus potential-log extraction.

    The system is always solved in the canonical gauge (boundary potential
    vanishing at parameter 0); the configured gauge is applied afterwards as
    an exact scaling of the solution.  The boundary data enter linearly, so
    this is the same solution the requested gauge would give, and the
    recovered drift is bit-independent of the gauge choice.
    """
    grid = V_hat.grid
    bpsi0 = boundary_psi_from_fits(chords, fits, domain, n_knots=cfg.boundary_knots,
                                   gauge_param=0.0)
    g = boundary_values_from_psi(bpsi0)
    a = DiffusionField.identity(grid)
    b = VectorField(grid, np.zeros((*grid.shape, 2)))
    system = assemble_dirichlet_system(a, b, V_hat, domain, g)
    solution = solve_bvp(system, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
    shift = float(bpsi0.value_at_param(cfg.gauge_param))
    if shift != 0.0:
        scale = float(np.exp(-shift))
        solution = BvpSolution(
            u=ScalarField(grid, solution.u.values * scale),
            interior_mask=solution.interior_mask,
            residual_norm=solution.residual_norm,
            iterations=solution.iterations,
            min_u=solution.min_u * scale,
        )
        bpsi = BoundaryPsi(domain, bpsi0.knot_params, bpsi0.knot_values - shift,
                           cfg.gauge_param, bpsi0.n_missing)
    else:
        bpsi = bpsi0
    psi_hat = psi_from_u(solution.u, bpsi, domain, min_u=solution.min_u)
    return solution, system, psi_hat, bpsi


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, DriftscopeError):
            exc.args = (f"[stage {self.name}] {exc.args[0] if exc.args else ''}",)
        return False


def run_pipeline(cfg: PipelineConfig, ground_truth: dict | None = None,
                 out_dir: str | Path | None = None, persist: bool = True,
                 kernels: tuple[Kernel, Kernel] | None = None) -> ReconstructionReport:
    """Execute the full reconstruction and persist all artifacts.

    ground_truth (optional): dict with callables "c" (and optionally "psi",
    "V") on (n, 2) point arrays; overrides any ground truth in the config.
    kernels (optional): (observed, reference) kernel objects that take
    precedence over the config's kernel section (for tabulated sources).
    """
    from . import parallel

    if cfg.workers is not None:
        parallel.set_workers(cfg.workers)
    grid = cfg.resolved_grid()
    domain = cfg.resolved_domain()
    ladder = cfg.resolved_ladder()
    if ground_truth is None:
        ground_truth = ground_truth_from_config(cfg.ground_truth)

    with _Stage("gen-data"):
        if kernels is not None:
            observed, reference = kernels
        else:
            observed = kernel_from_config(cfg.kernels["observed"])
            reference = kernel_from_config(cfg.kernels["reference"])
        dataset = build_boundary_dataset(
            observed, reference, domain, (cfg.n_angles, cfg.n_offsets), ladder,
            floor=cfg.density_floor,
        )
    with _Stage("fit"):
        fits, excluded = fit_dataset(dataset)
    with _Stage("sinogram"):
        sino = sinogram_from_fits(fits, dataset.chords, (cfg.n_angles, cfg.n_offsets), domain)
    with _Stage("invert"):
        V_hat = fbp_invert(sino, grid, cfg.filter_name, domain)
    with _Stage("solve"):
        solution, system, psi_hat, bpsi = solve_stage(cfg, V_hat, dataset.chords, fits, domain)
    with _Stage("recover"):
        a = DiffusionField.identity(grid)
        c_hat = drift_from_psi(psi_hat, a, domain)
        curl = gradient_consistency(c_hat, a, domain)

    residuals = np.array([f.residual for f in fits if f is not None])
    diagnostics = {
        "n_chords": dataset.n_chords,
        "n_chords_excluded": len(excluded),
        "n_lines_skipped": len(dataset.skipped),
        "n_dropped_observations": dataset.provenance.get("n_dropped", 0),
        "fit_residual_median": float(np.median(residuals)) if len(residuals) else 0.0,
        "fit_residual_max": float(residuals.max()) if len(residuals) else 0.0,
        "sinogram_masked_bins": int((~sino.mask).sum()),
        "solver_residual": solution.residual_norm,
        "solver_iterations": solution.iterations,
        "min_u": solution.min_u,
        "peclet_max": system.peclet_max,
        "curl_norm": curl,
        "boundary_knots_missing": bpsi.n_missing,
    }
    metrics = None
    if ground_truth is not None and "c" in ground_truth:
        metrics = drift_metrics(c_hat, ground_truth["c"], domain, cfg.metric_fraction)
        metrics["curl_norm"] = curl

    report = ReconstructionReport(
        psi_hat=psi_hat, V_hat=V_hat, c_hat=c_hat, u=solution.u,
        metrics=metrics, diagnostics=diagnostics, config=cfg.echo(),
    )
    if persist:
        write_artifacts(Path(out_dir if out_dir is not None else cfg.output_dir),
                        report, dataset, fits, sino)
    return report


def write_artifacts(out: Path, report: ReconstructionReport,
                    dataset: BoundaryDataset | None = None, fits=None,
                    sino: Sinogram | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is not None:
        write_dataset_csv(out / "dataset.csv", dataset)
        if fits is not None:
            write_fits_csv(out / "fits.csv", dataset.chords, fits)
    if sino is not None:
        write_sinogram_csv(out / "sinogram.csv", sino)
    write_dgf(out / "V_hat.dgf", report.V_hat)
    write_dgf(out / "u.dgf", report.u)
    write_dgf(out / "psi_hat.dgf", report.psi_hat)
    g = report.c_hat.grid
    write_dgf(out / "c_hat_x.dgf", ScalarField(g, report.c_hat.values[..., 0]))
    write_dgf(out / "c_hat_y.dgf", ScalarField(g, report.c_hat.values[..., 1]))
    write_report_json(out / "report.json", report)


def write_report_json(path, report: ReconstructionReport) -> None:
    payload: dict = dict(report.diagnostics)
    if report.metrics is not None:
        payload.update(report.metrics)
    payload["config"] = report.config
    payload["meta"] = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
                       "version": __version__}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
