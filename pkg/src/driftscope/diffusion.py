"""Forward machinery: path simulation, bridge functionals, density
representation, a Fokker-Planck solver, and a Feynman-Kac exit solver.

Monte Carlo reproducibility: all randomness comes from counter-based Philox
streams keyed by (seed, block index) over fixed-size path blocks, and block
results are reduced in index order.  Outputs are therefore bit-identical
across runs and across worker counts.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import parallel
from .errors import DataError, SimulationError, SolverError
from .fields import (
    DiffusionField,
    Domain,
    Grid,
    ScalarField,
    VectorField,
    interp,
    interp_vector,
)
from .kernels import (  # noqa: F401  (re-exported: kernels are part of this module's surface)
    BrownianKernel,
    CallableKernel,
    Kernel,
    OrnsteinUhlenbeckKernel,
    ProductKernel,
    TabulatedKernel,
    gaussian_kernel,
    ou_kernel,
)

_MASK64 = (1 << 64) - 1


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one path block: Philox keyed by (seed, index)."""
    key = np.array([seed & _MASK64, index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class McConfig:
    n_paths: int
    n_steps: int
    seed: int = 0

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1:
            raise DataError("n_paths and n_steps must be at least 1")


@dataclass(frozen=True)
class Path:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or s.shape != (len(t), 2):
            raise DataError("path needs times (n,) and states (n, 2)")
        if len(t) < 1 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise DataError("path times must start at 0 and strictly increase")
        if not np.all(np.isfinite(s)):
            raise DataError("path states must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    n_paths: int
    n_capped: int = 0

    def __float__(self):
        return self.value


def _mean_stderr(samples: np.ndarray) -> tuple[float, float]:
    """Sample mean and standard error; exactly zero spread for bit-identical
    samples (np.std would report one-ulp noise from the mean subtraction).
    """
    if len(samples) > 1 and np.ptp(samples) == 0.0:
        return float(samples[0]), 0.0
    value = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(len(samples))) if len(samples) > 1 else 0.0
    return value, stderr


def matrix_sqrt_2x2(a11, a12, a22):
    """Symmetric square root of SPD 2x2 matrices (vectorized closed form)."""
    s = np.sqrt(a11 * a22 - a12 * a12)
    tr = np.sqrt(a11 + a22 + 2.0 * s)
    return (a11 + s) / tr, a12 / tr, (a22 + s) / tr


def _drift_eval(c, pts):
    if isinstance(c, VectorField):
        return interp_vector(c, pts, mode="clamp")
    return np.asarray(c(pts), dtype=float)


def _diffusion_eval(a, pts):
    """Return (a11, a12, a22) arrays at pts."""
    if isinstance(a, DiffusionField):
        g = a.grid
        return (
            interp(ScalarField(g, a.a11), pts, mode="clamp"),
            interp(ScalarField(g, a.a12), pts, mode="clamp"),
            interp(ScalarField(g, a.a22), pts, mode="clamp"),
        )
    m = np.asarray(a(pts), dtype=float)
    return m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]


def _scalar_eval(V, pts):
    if isinstance(V, ScalarField):
        # zero extension outside the grid: the potential enters all path
        # functionals only through its restriction to the bounded region
        return interp(V, pts, mode="zero")
    return np.asarray(V(pts), dtype=float)


def euler_maruyama(c, a, x0, t: float, cfg: McConfig, path_index: int = 0) -> Path:
    """One Euler-Maruyama path of dx = c dt + sqrt(a) dw from x0 over [0, t].

    c: VectorField or callable(points (n,2)) -> (n,2);
    a: DiffusionField or callable(points) -> (n,2,2).  Field inputs are
    clamp-extrapolated outside their grid.
    """
    if t <= 0:
        raise DataError("horizon t must be positive")
    n = cfg.n_steps
    h = t / n
    rng = substream(cfg.seed, path_index)
    xi = rng.standard_normal((n, 2))
    states = np.empty((n + 1, 2))
    states[0] = np.asarray(x0, dtype=float)
    sq_h = np.sqrt(h)
    x = states[0][None, :]
    for k in range(n):
        drift = _drift_eval(c, x)
        a11, a12, a22 = _diffusion_eval(a, x)
        s11, s12, s22 = matrix_sqrt_2x2(a11, a12, a22)
        dw = xi[k]
        dx0 = drift[..., 0] + (s11 * dw[0] + s12 * dw[1]) / sq_h
        dx1 = drift[..., 1] + (s12 * dw[0] + s22 * dw[1]) / sq_h
        x = x + h * np.stack([dx0, dx1], axis=-1)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {k + 1} of {n}")
        states[k + 1] = x[0]
    return Path(np.linspace(0.0, t, n + 1), states)


def _bridge_block(x, y, t, n_steps, seed, block_index, block_size) -> np.ndarray:
    """Brownian bridges for one path block, shape (block_size, n_steps+1, 2).

    Sequential conditional-Gaussian construction; endpoints exact.
    """
    rng = substream(seed, block_index)
    xi = rng.standard_normal((block_size, n_steps, 2))
    times = np.linspace(0.0, t, n_steps + 1)
    states = np.empty((block_size, n_steps + 1, 2))
    states[:, 0, :] = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    cur = states[:, 0, :].copy()
    for k in range(n_steps):
        remain = t - times[k]
        dt = times[k + 1] - times[k]
        frac = dt / remain
        var = dt * (remain - dt) / remain
        cur = cur + (yv - cur) * frac + np.sqrt(max(var, 0.0)) * xi[:, k, :]
        states[:, k + 1, :] = cur
    states[:, n_steps, :] = yv
    return states


def brownian_bridge(x, y, t: float, n_steps: int, seed: int = 0) -> Path:
    """A Brownian bridge from x at time 0 to y at time t (single path)."""
    if t <= 0:
        raise DataError("bridge horizon t must be positive")
    if n_steps < 1:
        raise DataError("n_steps must be at least 1")
    states = _bridge_block(x, y, t, n_steps, seed, 0, 1)[0]
    return Path(np.linspace(0.0, t, n_steps + 1), states)


def bridge_functional(V, x, y, t: float, cfg: McConfig) -> McEstimate:
    """Monte Carlo estimate of E[exp(-int_0^t V(bridge_s) ds)] over Brownian
    bridges pinned at (x, 0) and (y, t); trapezoid time integral.
    """
    if t <= 0:
        raise DataError("bridge horizon t must be positive")
    n_steps = cfg.n_steps
    times = np.linspace(0.0, t, n_steps + 1)
    dt = np.diff(times)
    w = np.zeros(n_steps + 1)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt

    blocks = parallel.block_ranges(cfg.n_paths, parallel.MC_BLOCK)

    def run_block(args):
        bi, (lo, hi) = args
        states = _bridge_block(x, y, t, n_steps, cfg.seed, bi, hi - lo)
        vals = _scalar_eval(V, states.reshape(-1, 2)).reshape(hi - lo, n_steps + 1)
        # ufunc reduction, not BLAS: rows with identical integrands must give
        # bit-identical results (a constant potential has zero sample variance)
        expo = -(vals * w).sum(axis=1)
        if np.any(expo > 700.0):
            raise DataError(
                "exp overflow in bridge functional; use a smaller t or a potential bounded below"
            )
        return np.exp(expo)

    samples = np.concatenate(parallel.map_blocks(run_block, list(enumerate(blocks))))
    value, stderr = _mean_stderr(samples)
    return McEstimate(value, stderr, len(samples))


def density_via_representation(pb: Kernel, psi, V, x, y, t: float, cfg: McConfig) -> McEstimate:
    """Synthesize p(x, t, y) for drift a*grad(psi) on top of the reference
    kernel pb:  pb(x,t,y) * exp(psi(y) - psi(x)) * E[exp(-int V)] over bridges.
    """
    pb_val = float(pb.density(x, t, y))
    if isinstance(psi, ScalarField):
        dpsi = float(interp(psi, np.asarray(y, dtype=float)) - interp(psi, np.asarray(x, dtype=float)))
    else:
        dpsi = float(psi(np.asarray(y, dtype=float)) - psi(np.asarray(x, dtype=float)))
    bridge = bridge_functional(V, x, y, t, cfg)
    scale = pb_val * np.exp(dpsi)
    return McEstimate(scale * bridge.value, scale * bridge.stderr, bridge.n_paths)


# ---------------------------------------------------------------------------
# Fokker-Planck forward solver (Crank-Nicolson on the divergence form)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FokkerPlanckResult:
    slices: list
    times: list
    mass_drift: list
    boundary_mass: list
    mollifier_sigma: float


def _forward_operator(c: VectorField, a: DiffusionField, grid: Grid) -> sp.csr_matrix:
    """Conservative discretization of p -> div( 1/2 grad.(a p) - c p ).

    Fluxes live at cell faces; boundary faces carry zero flux, so total mass
    is conserved to round-off.
    """
    nx, ny = grid.nx, grid.ny
    dx, dy = grid.dx, grid.dy
    n = nx * ny

    def idx(i, j):
        return i * ny + j

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def add(r, c_, v):
        rows.append(r.ravel())
        cols.append(c_.ravel())
        vals.append(v.ravel())

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    a11, a12, a22 = a.a11, a.a12, a.a22
    c1, c2 = c.values[..., 0], c.values[..., 1]

    # F^x at face (i+1/2, j), for i in [0, nx-2]:
    #   0.5 * ((a11 p)_{i+1} - (a11 p)_i)/dx            diffusive, normal part
    # + 0.25 * (dy(a12 p)_i + dy(a12 p)_{i+1})          diffusive, cross part
    # - 0.5 * ((c1 p)_i + (c1 p)_{i+1})                 advective
    # and (A p)_i += (F^x_{i+1/2} - F^x_{i-1/2}) / dx.
    # The cross part uses centered y-derivatives, one-sided at j-edges.
    def dy_coeffs(j):
        """(j_lo, j_hi, coeff) triplets for d/dy at column j."""
        if j == 0:
            return [(0, -1.0 / dy), (1, 1.0 / dy)]
        if j == ny - 1:
            return [(ny - 2, -1.0 / dy), (ny - 1, 1.0 / dy)]
        return [(j - 1, -0.5 / dy), (j + 1, 0.5 / dy)]

    def dx_coeffs(i):
        if i == 0:
            return [(0, -1.0 / dx), (1, 1.0 / dx)]
        if i == nx - 1:
            return [(nx - 2, -1.0 / dx), (nx - 1, 1.0 / dx)]
        return [(i - 1, -0.5 / dx), (i + 1, 0.5 / dx)]

    # x-direction faces
    iw, jw = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="ij")
    rec_lo = idx(iw, jw)      # cell left of the face
    rec_hi = idx(iw + 1, jw)  # cell right of the face
    # each face contributes +F/dx to its left cell's row... sign: (Ap)_i gets
    # (F_{i+1/2} - F_{i-1/2})/dx, so face (i+1/2) adds +1/dx to row i and
    # -1/dx to row i+1.
    for sign, rec in ((1.0 / dx, rec_lo), (-1.0 / dx, rec_hi)):
        # normal diffusive part
        add(rec, rec_hi, sign * 0.5 * a11[iw + 1, jw] / dx)
        add(rec, rec_lo, -sign * 0.5 * a11[iw, jw] / dx)
        # advective part
        add(rec, rec_lo, -sign * 0.5 * c1[iw, jw])
        add(rec, rec_hi, -sign * 0.5 * c1[iw + 1, jw])
    if np.any(a12 != 0):
        for j in range(ny):
            for jj, cc in dy_coeffs(j):
                ii = np.arange(nx - 1)
                for di in (0, 1):
                    col = idx(ii + di, np.full(nx - 1, jj))
                    coef = 0.25 * cc * a12[ii + di, jj]
                    add(idx(ii, np.full(nx - 1, j)), col, coef / dx)
                    add(idx(ii + 1, np.full(nx - 1, j)), col, -coef / dx)

    # y-direction faces
    iw, jw = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="ij")
    rec_lo = idx(iw, jw)
    rec_hi = idx(iw, jw + 1)
    for sign, rec in ((1.0 / dy, rec_lo), (-1.0 / dy, rec_hi)):
        add(rec, rec_hi, sign * 0.5 * a22[iw, jw + 1] / dy)
        add(rec, rec_lo, -sign * 0.5 * a22[iw, jw] / dy)
        add(rec, rec_lo, -sign * 0.5 * c2[iw, jw])
        add(rec, rec_hi, -sign * 0.5 * c2[iw, jw + 1])
    if np.any(a12 != 0):
        for i in range(nx):
            for ii, cc in dx_coeffs(i):
                jj = np.arange(ny - 1)
                for dj in (0, 1):
                    col = idx(np.full(ny - 1, ii), jj + dj)
                    coef = 0.25 * cc * a12[ii, jj + dj]
                    add(idx(np.full(ny - 1, i), jj), col, coef / dy)
                    add(idx(np.full(ny - 1, i), jj + 1), col, -coef / dy)

    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return A.tocsr()


class FokkerPlanckStepper:
    """Crank-Nicolson marcher for the forward equation; build once, then
    propagate from many initial points (the factorized time-step operators
    are cached and shared across runs).
    """

    def __init__(self, c: VectorField, a: DiffusionField, grid: Grid, dt: float):
        if dt <= 0:
            raise DataError("dt must be positive")
        self.grid = grid
        self.dt = float(dt)
        self.A = _forward_operator(c, a, grid)
        self._eye = sp.identity(self.A.shape[0], format="csr")
        self._lu: dict[float, object] = {}
        self._rhs: dict[float, sp.csr_matrix] = {}
        rim = np.zeros(grid.shape, dtype=bool)
        rim[0, :] = rim[-1, :] = rim[:, 0] = rim[:, -1] = True
        self._rim = rim.ravel()

    def _ops(self, dt_loc: float):
        key = round(dt_loc, 15)
        if key not in self._lu:
            self._lu[key] = splu((self._eye - 0.5 * dt_loc * self.A).tocsc())
            self._rhs[key] = (self._eye + 0.5 * dt_loc * self.A).tocsr()
        return self._lu[key], self._rhs[key]

    def propagate(self, x0, t_out, mollifier_width: float | None = None) -> FokkerPlanckResult:
        grid = self.grid
        t_out = sorted(float(t) for t in t_out)
        if len(t_out) == 0 or t_out[0] <= 0:
            raise DataError("output times must be positive")
        x0 = np.asarray(x0, dtype=float)
        sigma = 2.0 * max(grid.dx, grid.dy) if mollifier_width is None else float(mollifier_width)
        X, Y = grid.nodes()
        p = np.exp(-((X - x0[0]) ** 2 + (Y - x0[1]) ** 2) / (2 * sigma**2)).ravel()
        p /= p.sum() * grid.cell_area

        slices, drifts, bdry = [], [], []
        t_now = 0.0
        area = grid.cell_area
        for t_target in t_out:
            gap = t_target - t_now
            if gap <= 1e-14:
                raise DataError("output times must be strictly increasing")
            n_sub = max(1, int(np.ceil(gap / self.dt - 1e-12)))
            lu, M2 = self._ops(gap / n_sub)
            for _ in range(n_sub):
                p = lu.solve(M2 @ p)
                if not np.all(np.isfinite(p)):
                    raise SolverError(f"Fokker-Planck blow-up near t={t_now:.6g}")
            t_now = t_target
            mass = p.sum() * area
            neg = p.min()
            if neg < -1e-8 * max(p.max(), 1e-300) or abs(mass - 1.0) > 1e-3:
                raise SolverError(
                    f"Fokker-Planck instability at t={t_now:.6g}: mass={mass:.6g}, min={neg:.3g}"
                )
            q = np.clip(p, 0.0, None)
            bmass = float(q[self._rim].sum() * area)
            if bmass > 1e-6:
                warnings.warn(
                    f"boundary mass {bmass:.2e} at t={t_now:.6g} exceeds 1e-6; enlarge the grid",
                    stacklevel=2,
                )
            qmass = q.sum() * area
            slices.append(ScalarField(grid, (q / qmass).reshape(grid.shape)))
            drifts.append(float(mass - 1.0))
            bdry.append(bmass)

        return FokkerPlanckResult(slices, t_out, drifts, bdry, sigma)


def fokker_planck_forward(
    c: VectorField,
    a: DiffusionField,
    x0,
    t_out,
    grid: Grid,
    dt: float,
    mollifier_width: float | None = None,
) -> FokkerPlanckResult:
    """March the forward (Fokker-Planck) equation from a mollified point mass.

    The point initial condition is replaced by a Gaussian of standard
    deviation 2h (h = max grid spacing) unless mollifier_width is given.
    Returns renormalized density slices at the requested times together with
    per-slice mass drift and boundary-mass diagnostics.
    """
    return FokkerPlanckStepper(c, a, grid, dt).propagate(x0, t_out, mollifier_width)


# ---------------------------------------------------------------------------
# Feynman-Kac exit solver
# ---------------------------------------------------------------------------


def feynman_kac_exit(
    V,
    f,
    domain: Domain,
    x,
    cfg: McConfig,
    h: float,
    max_steps: int | None = None,
) -> McEstimate:
    """Estimate u(x) = E[exp(-int_0^tau V(w_s) ds) f(w_tau)] with w Brownian
    motion started at x and tau its first exit from the domain.

    Paths step with Euler increments of size h; the boundary crossing is
    located by linear interpolation of the exiting segment.  Paths running
    beyond max_steps are capped (counted; more than 1% is an error).
    """
    x = np.asarray(x, dtype=float)
    if not bool(domain.contains(x[None, :])[0]):
        raise DataError("start point must lie inside the domain")
    if h <= 0:
        raise DataError("step size h must be positive")
    if max_steps is None:
        max_steps = max(1000, int(50.0 * domain.circumradius**2 / h))
    sq_h = np.sqrt(h)

    blocks = parallel.block_ranges(cfg.n_paths, parallel.MC_BLOCK)

    def run_block(args):
        bi, (lo, hi) = args
        m = hi - lo
        rng = substream(cfg.seed, bi)
        pos = np.tile(x, (m, 1))
        integ = np.zeros(m)
        v_prev = _scalar_eval(V, pos)
        out_vals = np.empty(m)
        done = np.zeros(m, dtype=bool)
        alive_idx = np.arange(m)
        capped = 0
        for _ in range(max_steps):
            if alive_idx.size == 0:
                break
            step = sq_h * rng.standard_normal((alive_idx.size, 2))
            new_pos = pos + step
            inside = domain.contains(new_pos)
            if np.any(~inside):
                exit_rows = np.nonzero(~inside)[0]
                for r in exit_rows:
                    cross, theta = domain.boundary_crossing(pos[r], new_pos[r])
                    v_cross = float(_scalar_eval(V, cross[None, :])[0])
                    itotal = integ[r] + 0.5 * theta * h * (v_prev[r] + v_cross)
                    out_vals[alive_idx[r]] = np.exp(-itotal) * float(f(cross[None, :])[0])
                    done[alive_idx[r]] = True
            v_new = _scalar_eval(V, new_pos)
            integ = integ + 0.5 * h * (v_prev + v_new)
            keep = np.nonzero(inside)[0]
            alive_idx = alive_idx[keep]
            pos = new_pos[keep]
            integ = integ[keep]
            v_prev = v_new[keep]
        if alive_idx.size:
            # capped paths: score them at their current position
            capped = alive_idx.size
            proj = domain.project_to_boundary(pos)
            out_vals[alive_idx] = np.exp(-integ) * np.asarray(f(proj), dtype=float)
            done[alive_idx] = True
        assert done.all()
        return out_vals, capped

    results = parallel.map_blocks(run_block, list(enumerate(blocks)))
    samples = np.concatenate([r[0] for r in results])
    n_capped = sum(r[1] for r in results)
    if n_capped > 0.01 * cfg.n_paths:
        raise SimulationError(
            f"{n_capped} of {cfg.n_paths} paths exceeded the {max_steps}-step cap"
        )
    value, stderr = _mean_stderr(samples)
    return McEstimate(value, stderr, len(samples), n_capped)


def write_mc_csv(path, rows) -> None:
    """Rows of (x, y, t, estimate) records: x and y are points, serialized as
    'x1;x2'.  Columns: x, y, t, estimate, stderr, n_paths, seed.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "estimate", "stderr", "n_paths", "seed"])
        for x, y, t, est, seed in rows:
            w.writerow(
                [
                    f"{float(x[0])!r};{float(x[1])!r}",
                    f"{float(y[0])!r};{float(y[1])!r}",
                    repr(float(t)),
                    repr(float(est.value)),
                    repr(float(est.stderr)),
                    est.n_paths,
                    seed,
                ]
            )


def read_mc_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            x = tuple(float(v) for v in row["x"].split(";"))
            y = tuple(float(v) for v in row["y"].split(";"))
            est = McEstimate(float(row["estimate"]), float(row["stderr"]), int(row["n_paths"]))
            out.append((x, y, float(row["t"]), est, int(row["seed"])))
    return out
