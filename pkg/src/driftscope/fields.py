"""Grids, sampled fields, finite-difference operators, and field I/O.

Conventions: node (i, j) of a Grid sits at (x0 + i*dx, y0 + j*dy); field
values are stored as (nx, ny) arrays so that C-order flattening gives the
row-major node index i*ny + j.  All field objects are immutable (arrays are
frozen) and safe to share across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DataError, GeometryError

_DGF_MAGIC = b"DGF1"

EXTERIOR = 0
INTERIOR = 1
BOUNDARY_ADJACENT = 2


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid."""

    x0: float
    y0: float
    dx: float
    dy: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise DataError(f"grid spacings must be positive, got dx={self.dx}, dy={self.dy}")
        if self.nx < 2 or self.ny < 2:
            raise DataError(f"grid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")

    @classmethod
    def from_extent(cls, x0: float, y0: float, x1: float, y1: float, nx: int, ny: int) -> "Grid":
        return cls(x0, y0, (x1 - x0) / (nx - 1), (y1 - y0) / (ny - 1), nx, ny)

    @property
    def x1(self) -> float:
        return self.x0 + (self.nx - 1) * self.dx

    @property
    def y1(self) -> float:
        return self.y0 + (self.ny - 1) * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def xs(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.nx)

    def ys(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.ny)

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays X, Y of shape (nx, ny)."""
        return np.meshgrid(self.xs(), self.ys(), indexing="ij")

    def node_points(self) -> np.ndarray:
        """All node coordinates as an (nx*ny, 2) array in row-major order."""
        X, Y = self.nodes()
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        sx = tol * max(abs(self.x0), abs(self.x1), 1.0)
        sy = tol * max(abs(self.y0), abs(self.y1), 1.0)
        return (
            (p[..., 0] >= self.x0 - sx)
            & (p[..., 0] <= self.x1 + sx)
            & (p[..., 1] >= self.y0 - sy)
            & (p[..., 1] <= self.y1 + sy)
        )


@dataclass(frozen=True)
class ScalarField:
    """Real function sampled on a grid; values shape (nx, ny)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            if v.size == self.grid.nx * self.grid.ny:
                v = v.reshape(self.grid.shape)
            else:
                raise DataError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))[0]
            raise DataError(f"non-finite field value at node ({bad[0]}, {bad[1]})")
        object.__setattr__(self, "values", _frozen(v))

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)


@dataclass(frozen=True)
class VectorField:
    """R^2-valued function sampled on a grid; values shape (nx, ny, 2)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (*self.grid.shape, 2):
            raise DataError(f"vector values shape {v.shape}, expected {(*self.grid.shape, 2)}")
        if not np.all(np.isfinite(v)):
            raise DataError("non-finite vector field value")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True)
class DiffusionField:
    """Symmetric positive-definite 2x2 matrix per node (a11, a12, a22).

    Uniform ellipticity is checked at construction: the minimum over nodes
    of the smallest eigenvalue is stored as `delta` and must be > 0.
    """

    grid: Grid
    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    delta: float = dc_field(init=False)

    def __post_init__(self):
        for name in ("a11", "a12", "a22"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != self.grid.shape:
                raise DataError(f"{name} shape {v.shape} does not match grid {self.grid.shape}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"non-finite entries in {name}")
            object.__setattr__(self, name, _frozen(v))
        tr = self.a11 + self.a22
        disc = np.sqrt((self.a11 - self.a22) ** 2 + 4.0 * self.a12**2)
        lam_min = 0.5 * (tr - disc)
        delta = float(lam_min.min())
        if not (np.all(self.a11 > 0) and delta > 0):
            raise DataError(f"diffusion matrix not SPD everywhere (min eigenvalue {delta:.3e})")
        object.__setattr__(self, "delta", delta)

    @classmethod
    def constant(cls, grid: Grid, a11: float, a12: float, a22: float) -> "DiffusionField":
        one = np.ones(grid.shape)
        return cls(grid, a11 * one, a12 * one, a22 * one)

    @classmethod
    def identity(cls, grid: Grid) -> "DiffusionField":
        return cls.constant(grid, 1.0, 0.0, 1.0)

    def matrices(self) -> np.ndarray:
        """Per-node matrices, shape (nx, ny, 2, 2)."""
        m = np.empty((*self.grid.shape, 2, 2))
        m[..., 0, 0] = self.a11
        m[..., 0, 1] = self.a12
        m[..., 1, 0] = self.a12
        m[..., 1, 1] = self.a22
        return m


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


class Domain:
    """Bounded region whose closure lies strictly inside its enclosing grid."""

    grid: Grid

    def contains(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def boundary_param(self, points: np.ndarray) -> np.ndarray:
        """Map boundary points to arclength-like parameter in [0, param_length)."""
        raise NotImplementedError

    def boundary_point(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project_to_boundary(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def chord_endpoints(self, omega: np.ndarray, z: float):
        """Entry/exit points of the line {z*omega_perp + s*omega}, or None."""
        raise NotImplementedError

    def boundary_crossing(self, p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, float]:
        """Point where segment p->q (p inside, q outside) meets the boundary."""
        raise NotImplementedError

    @property
    def param_length(self) -> float:
        raise NotImplementedError

    @property
    def circumradius(self) -> float:
        raise NotImplementedError

    @property
    def center(self) -> np.ndarray:
        raise NotImplementedError

    def _check_inside_grid(self):
        g = self.grid
        c = self.center
        r = self.circumradius
        lo = np.array([g.x0, g.y0])
        hi = np.array([g.x1, g.y1])
        if np.any(c - r <= lo) or np.any(c + r >= hi):
            # circumradius is conservative for rectangles; refine per corner
            if isinstance(self, RectangleDomain):
                if (
                    self.xmin <= g.x0
                    or self.xmax >= g.x1
                    or self.ymin <= g.y0
                    or self.ymax >= g.y1
                ):
                    raise GeometryError("domain closure must lie strictly inside the grid extent")
            else:
                raise GeometryError("domain closure must lie strictly inside the grid extent")

    def classify_nodes(self) -> np.ndarray:
        """Node classes: 0 exterior, 1 interior, 2 interior with a leg crossing the boundary."""
        inside = self.contains(self.grid.node_points()).reshape(self.grid.shape)
        cls = np.where(inside, INTERIOR, EXTERIOR).astype(np.int8)
        pad = np.zeros((self.grid.nx + 2, self.grid.ny + 2), dtype=bool)
        pad[1:-1, 1:-1] = inside
        nbr_out = (
            (~pad[:-2, 1:-1]) | (~pad[2:, 1:-1]) | (~pad[1:-1, :-2]) | (~pad[1:-1, 2:])
        )
        cls[inside & nbr_out] = BOUNDARY_ADJACENT
        return cls


@dataclass(frozen=True)
class DiscDomain(Domain):
    grid: Grid
    center_x: float
    center_y: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError("disc radius must be positive")
        self._check_inside_grid()

    @property
    def center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y])

    @property
    def circumradius(self) -> float:
        return self.radius

    @property
    def param_length(self) -> float:
        return 2.0 * np.pi

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        d = p - self.center
        return d[..., 0] ** 2 + d[..., 1] ** 2 < self.radius**2

    def boundary_param(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float) - self.center
        return np.mod(np.arctan2(p[..., 1], p[..., 0]), 2.0 * np.pi)

    def boundary_point(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.stack(
            [self.center_x + self.radius * np.cos(s), self.center_y + self.radius * np.sin(s)],
            axis=-1,
        )

    def project_to_boundary(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        d = p - self.center
        r = np.maximum(np.hypot(d[..., 0], d[..., 1]), 1e-300)
        return self.center + d * (self.radius / r)[..., None]

    def chord_endpoints(self, omega: np.ndarray, z: float):
        # line: z*omega_perp + s*omega, offsets measured from the origin
        perp = np.array([-omega[1], omega[0]])
        p0 = z * perp
        # solve |p0 + s*omega - c|^2 = R^2
        d = p0 - self.center
        b = float(d @ omega)
        cterm = float(d @ d) - self.radius**2
        disc = b * b - cterm
        if disc <= 0:
            return None
        s = np.sqrt(disc)
        return p0 + (-b - s) * omega, p0 + (-b + s) * omega

    def boundary_crossing(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        d = q - p
        f = p - self.center
        a = float(d @ d)
        b = float(f @ d)
        c = float(f @ f) - self.radius**2
        disc = b * b - a * c
        if a == 0 or disc < 0:
            raise GeometryError("segment does not cross the disc boundary")
        theta = (-b + np.sqrt(disc)) / a
        if not (0.0 <= theta <= 1.0 + 1e-12):
            raise GeometryError("segment does not cross the disc boundary")
        theta = min(theta, 1.0)
        return p + theta * d, theta


@dataclass(frozen=True)
class RectangleDomain(Domain):
    grid: Grid
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise GeometryError("rectangle corners must satisfy xmin < xmax, ymin < ymax")
        self._check_inside_grid()

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)])

    @property
    def circumradius(self) -> float:
        return float(np.hypot(self.xmax - self.xmin, self.ymax - self.ymin)) / 2.0

    @property
    def param_length(self) -> float:
        return 2.0 * ((self.xmax - self.xmin) + (self.ymax - self.ymin))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (
            (p[..., 0] > self.xmin)
            & (p[..., 0] < self.xmax)
            & (p[..., 1] > self.ymin)
            & (p[..., 1] < self.ymax)
        )

    def boundary_param(self, points: np.ndarray) -> np.ndarray:
        """Perimeter arclength from (xmin, ymin), counterclockwise."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        w = self.xmax - self.xmin
        h = self.ymax - self.ymin
        x = np.clip(p[:, 0], self.xmin, self.xmax) - self.xmin
        y = np.clip(p[:, 1], self.ymin, self.ymax) - self.ymin
        # distance to each edge decides which side the point belongs to
        d_bottom = np.abs(p[:, 1] - self.ymin)
        d_right = np.abs(p[:, 0] - self.xmax)
        d_top = np.abs(p[:, 1] - self.ymax)
        d_left = np.abs(p[:, 0] - self.xmin)
        side = np.argmin(np.stack([d_bottom, d_right, d_top, d_left]), axis=0)
        s = np.where(
            side == 0,
            x,
            np.where(side == 1, w + y, np.where(side == 2, w + h + (w - x), 2 * w + h + (h - y))),
        )
        out = np.mod(s, self.param_length)
        return out if np.asarray(points).ndim > 1 else out[0]

    def boundary_point(self, s: np.ndarray) -> np.ndarray:
        s = np.mod(np.atleast_1d(np.asarray(s, dtype=float)), self.param_length)
        w = self.xmax - self.xmin
        h = self.ymax - self.ymin
        pts = np.empty((len(s), 2))
        for k, sk in enumerate(s):
            if sk < w:
                pts[k] = (self.xmin + sk, self.ymin)
            elif sk < w + h:
                pts[k] = (self.xmax, self.ymin + (sk - w))
            elif sk < 2 * w + h:
                pts[k] = (self.xmax - (sk - w - h), self.ymax)
            else:
                pts[k] = (self.xmin, self.ymax - (sk - 2 * w - h))
        return pts if np.asarray(s).shape != () else pts[0]

    def project_to_boundary(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        inside = self.contains(p)
        # outside: clamp; inside: push to the nearest edge
        p[:, 0] = np.clip(p[:, 0], self.xmin, self.xmax)
        p[:, 1] = np.clip(p[:, 1], self.ymin, self.ymax)
        for k in np.nonzero(inside)[0]:
            x, y = p[k]
            d = [
                (y - self.ymin, (x, self.ymin)),
                (self.xmax - x, (self.xmax, y)),
                (self.ymax - y, (x, self.ymax)),
                (x - self.xmin, (self.xmin, y)),
            ]
            p[k] = min(d, key=lambda e: e[0])[1]
        return p if np.asarray(points).ndim > 1 else p[0]

    def chord_endpoints(self, omega: np.ndarray, z: float):
        perp = np.array([-omega[1], omega[0]])
        p0 = z * perp
        # Liang-Barsky clip of the infinite line against the box
        t_lo, t_hi = -np.inf, np.inf
        for axis, (lo, hi) in enumerate([(self.xmin, self.xmax), (self.ymin, self.ymax)]):
            d = omega[axis]
            p = p0[axis]
            if abs(d) < 1e-15:
                if p <= lo or p >= hi:
                    return None
            else:
                t1, t2 = (lo - p) / d, (hi - p) / d
                t_lo = max(t_lo, min(t1, t2))
                t_hi = min(t_hi, max(t1, t2))
        if not (t_hi - t_lo > 1e-12):
            return None
        return p0 + t_lo * omega, p0 + t_hi * omega

    def boundary_crossing(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        d = q - p
        best = None
        for axis, (lo, hi) in enumerate([(self.xmin, self.xmax), (self.ymin, self.ymax)]):
            if abs(d[axis]) < 1e-15:
                continue
            for edge in (lo, hi):
                theta = (edge - p[axis]) / d[axis]
                if 0.0 <= theta <= 1.0 + 1e-12 and (best is None or theta < best):
                    best = min(theta, 1.0)
        if best is None:
            raise GeometryError("segment does not cross the rectangle boundary")
        return p + best * d, best


def domain_from_config(spec: dict, grid: Grid) -> Domain:
    kind = spec.get("kind")
    if kind == "disc":
        cx, cy = spec.get("center", (0.0, 0.0))
        return DiscDomain(grid, float(cx), float(cy), float(spec["radius"]))
    if kind == "rectangle":
        (x0, y0), (x1, y1) = spec["corners"]
        return RectangleDomain(grid, float(x0), float(y0), float(x1), float(y1))
    raise DataError(f"unknown domain kind {kind!r}")


# ---------------------------------------------------------------------------
# Sampling and interpolation
# ---------------------------------------------------------------------------


def sample_scalar(f, grid: Grid) -> ScalarField:
    """Sample a pointwise function f(x, y) on every node."""
    X, Y = grid.nodes()
    vals = np.asarray(f(X, Y), dtype=np.float64)
    if vals.shape != grid.shape:
        vals = np.broadcast_to(vals, grid.shape).copy()
    if not np.all(np.isfinite(vals)):
        i, j = np.argwhere(~np.isfinite(vals))[0]
        raise DataError(f"sampled function is not finite at node ({i}, {j}) = "
                        f"({grid.x0 + i * grid.dx:.6g}, {grid.y0 + j * grid.dy:.6g})")
    return ScalarField(grid, vals)


def sample_vector(f, grid: Grid) -> VectorField:
    X, Y = grid.nodes()
    fx, fy = f(X, Y)
    return VectorField(grid, np.stack([fx, fy], axis=-1))


def interp(field: ScalarField, points: np.ndarray, mode: str = "strict") -> np.ndarray:
    """Bilinear interpolation at points (..., 2).

    mode: "strict" raises outside the grid extent, "zero" extends by zero,
    "clamp" extends by the value at the nearest edge point.
    """
    g = field.grid
    p = np.asarray(points, dtype=float)
    scalar_in = p.ndim == 1
    p = np.atleast_2d(p)
    fx = (p[..., 0] - g.x0) / g.dx
    fy = (p[..., 1] - g.y0) / g.dy
    eps = 1e-9
    inside = (fx >= -eps) & (fx <= g.nx - 1 + eps) & (fy >= -eps) & (fy <= g.ny - 1 + eps)
    if mode == "strict":
        if not np.all(inside):
            bad = p[~inside][0]
            raise GeometryError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) outside grid extent")
    elif mode == "clamp":
        fx = np.clip(fx, 0, g.nx - 1)
        fy = np.clip(fy, 0, g.ny - 1)
    elif mode != "zero":
        raise ValueError(f"unknown interp mode {mode!r}")
    fxc = np.clip(fx, 0, g.nx - 1)
    fyc = np.clip(fy, 0, g.ny - 1)
    ix = np.clip(np.floor(fxc).astype(np.int64), 0, g.nx - 2)
    iy = np.clip(np.floor(fyc).astype(np.int64), 0, g.ny - 2)
    tx = fxc - ix
    ty = fyc - iy
    v = field.values
    out = (
        v[ix, iy] * (1 - tx) * (1 - ty)
        + v[ix + 1, iy] * tx * (1 - ty)
        + v[ix, iy + 1] * (1 - tx) * ty
        + v[ix + 1, iy + 1] * tx * ty
    )
    if mode == "zero":
        out = np.where(inside, out, 0.0)
    return out[0] if scalar_in else out


def interp_vector(field: VectorField, points: np.ndarray, mode: str = "clamp") -> np.ndarray:
    fx = ScalarField(field.grid, field.values[..., 0])
    fy = ScalarField(field.grid, field.values[..., 1])
    return np.stack([interp(fx, points, mode), interp(fy, points, mode)], axis=-1)


# ---------------------------------------------------------------------------
# Finite-difference operators
# ---------------------------------------------------------------------------


def _d1(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central differences inside, second-order one-sided at the edges."""
    v = np.moveaxis(v, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - v[:-2]) / (2 * h)
    # difference form of the one-sided stencils: exact on constants
    out[0] = (4 * (v[1] - v[0]) - (v[2] - v[0])) / (2 * h)
    out[-1] = -(4 * (v[-2] - v[-1]) - (v[-3] - v[-1])) / (2 * h)
    return np.moveaxis(out, 0, axis)


def _d2(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Three-point second derivative; zero (masked) on the outermost ring."""
    v = np.moveaxis(v, axis, 0)
    out = np.zeros_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / (h * h)
    return np.moveaxis(out, 0, axis)


def gradient(field: ScalarField) -> VectorField:
    g = field.grid
    if g.nx < 3 or g.ny < 3:
        raise DataError("gradient needs at least 3 nodes per axis")
    gx = _d1(field.values, g.dx, 0)
    gy = _d1(field.values, g.dy, 1)
    return VectorField(g, np.stack([gx, gy], axis=-1))


def laplacian(field: ScalarField) -> ScalarField:
    g = field.grid
    if g.nx < 3 or g.ny < 3:
        raise DataError("laplacian needs at least 3 nodes per axis")
    lap = _d2(field.values, g.dx, 0) + _d2(field.values, g.dy, 1)
    return ScalarField(g, lap)


def mixed_derivative(field: ScalarField) -> ScalarField:
    """Cross derivative by the 4-point centered stencil; zero on the ring."""
    g = field.grid
    v = field.values
    out = np.zeros_like(v)
    out[1:-1, 1:-1] = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4 * g.dx * g.dy)
    return ScalarField(g, out)


def potential_from_psi(psi: ScalarField, a: DiffusionField, b: VectorField) -> ScalarField:
    """Scalar potential 1/2 tr(a D2 psi) + <b, grad psi> + 1/2 <a grad psi, grad psi>."""
    if a.grid != psi.grid or b.grid != psi.grid:
        raise DataError("potential_from_psi requires fields on a shared grid")
    g = psi.grid
    pxx = _d2(psi.values, g.dx, 0)
    pyy = _d2(psi.values, g.dy, 1)
    grad = gradient(psi).values
    gx, gy = grad[..., 0], grad[..., 1]
    quad = a.a11 * gx * gx + 2.0 * a.a12 * gx * gy + a.a22 * gy * gy
    v = 0.5 * (a.a11 * pxx + a.a22 * pyy) + b.values[..., 0] * gx + b.values[..., 1] * gy + 0.5 * quad
    if np.any(a.a12 != 0.0):
        pxy = mixed_derivative(psi).values
        v = v + a.a12 * pxy
    return ScalarField(g, v)


# ---------------------------------------------------------------------------
# DGF1 binary field format
# ---------------------------------------------------------------------------


def write_dgf(path, field: ScalarField) -> None:
    g = field.grid
    header = _DGF_MAGIC + struct.pack("<II", g.nx, g.ny) + struct.pack("<4d", g.x0, g.y0, g.dx, g.dy)
    data = np.ascontiguousarray(field.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def read_dgf(path) -> ScalarField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _DGF_MAGIC:
        raise DataError(f"{path}: not a DGF1 file (bad magic {raw[:4]!r})")
    nx, ny = struct.unpack("<II", raw[4:12])
    x0, y0, dx, dy = struct.unpack("<4d", raw[12:44])
    expected = 44 + 8 * nx * ny
    if len(raw) != expected:
        raise DataError(f"{path}: truncated DGF1 file ({len(raw)} bytes, expected {expected})")
    vals = np.frombuffer(raw[44:], dtype="<f8").reshape(nx, ny)
    return ScalarField(Grid(x0, y0, dx, dy, nx, ny), vals)
