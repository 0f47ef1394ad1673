"""Extract potential-difference intercepts and chord-averaged potentials from
density ratios over a ladder of small times.

For each chord (x, y) the log density ratio behaves like
    log(p_obs / p_ref)(t) = dpsi - F t + o(t),
so a weighted affine fit in t yields the drift-potential difference
dpsi = psi(y) - psi(x) (intercept) and the chord average F of the scalar
potential (minus the slope) in one pass.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DataError, GeometryError
from .fields import Domain
from .kernels import Kernel

DEFAULT_DENSITY_FLOOR = 1e-30


@dataclass(frozen=True)
class Chord:
    """Oriented segment between two boundary points of the domain."""

    x: np.ndarray
    y: np.ndarray
    angle_index: int = -1
    offset_index: int = -1

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.shape != (2,) or y.shape != (2,):
            raise DataError("chord endpoints must be planar points")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise DataError("chord endpoints must be finite")
        if np.allclose(x, y):
            raise GeometryError("chord endpoints coincide")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.y - self.x)))

    @property
    def omega(self) -> np.ndarray:
        return (self.y - self.x) / self.length

    @property
    def z(self) -> float:
        """Signed offset of the chord's line from the origin."""
        om = self.omega
        return float(self.x[0] * (-om[1]) + self.x[1] * om[0])

    def point_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return self.x + np.multiply.outer(s, self.y - self.x)

    def reversed(self) -> "Chord":
        return Chord(self.y, self.x, self.angle_index, self.offset_index)


def chord_offsets(radius: float, n_offsets: int) -> np.ndarray:
    """Equi-spaced offsets strictly inside (-R, R): z_j = -R + (j+1) * 2R/(n+1)."""
    if n_offsets < 1:
        raise DataError("n_offsets must be positive")
    step = 2.0 * radius / (n_offsets + 1)
    return -radius + step * (1.0 + np.arange(n_offsets))


def chord_angles(n_angles: int) -> np.ndarray:
    if n_angles < 1:
        raise DataError("n_angles must be positive")
    return np.pi * np.arange(n_angles) / n_angles


def make_parallel_chords(domain: Domain, n_angles: int, n_offsets: int):
    """Chords of the domain on a parallel-beam (angle, offset) raster.

    Offsets are measured from the origin, so the domain must be centered there.
    Returns (chords, skipped) where skipped records (angle_index, offset_index)
    pairs whose line misses the domain.
    """
    if np.max(np.abs(domain.center)) > 1e-9:
        raise GeometryError(
            "parallel-beam sampling assumes the domain is centered at the origin"
        )
    angles = chord_angles(n_angles)
    offsets = chord_offsets(domain.circumradius, n_offsets)
    chords, skipped = [], []
    for ia, phi in enumerate(angles):
        omega = np.array([np.cos(phi), np.sin(phi)])
        for io, z in enumerate(offsets):
            ends = domain.chord_endpoints(omega, float(z))
            if ends is None:
                skipped.append((ia, io))
                continue
            chords.append(Chord(ends[0], ends[1], ia, io))
    return chords, skipped


@dataclass(frozen=True)
class ChordFit:
    """Affine fit of the log ratio over the time ladder."""

    delta_psi: float
    F: float
    residual: float
    covariance: np.ndarray
    n_times: int

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2):
            raise DataError("covariance must be 2x2")
        if self.residual < 0 or not np.all(np.isfinite(cov)):
            raise DataError("fit results must be finite with nonnegative residual")
        object.__setattr__(self, "covariance", cov)

    @property
    def se_delta_psi(self) -> float:
        return float(np.sqrt(max(self.covariance[0, 0], 0.0)))

    @property
    def se_F(self) -> float:
        return float(np.sqrt(max(self.covariance[1, 1], 0.0)))


def log_ratio(p_obs: float, p_ref: float, floor: float = DEFAULT_DENSITY_FLOOR) -> float:
    """log(p_obs / p_ref) with a positivity floor on both densities."""
    if not (np.isfinite(p_obs) and np.isfinite(p_ref)) or p_obs <= floor or p_ref <= floor:
        raise DataError(
            f"density pair ({p_obs:.3e}, {p_ref:.3e}) at or below the floor {floor:.1e}"
        )
    return float(np.log(p_obs) - np.log(p_ref))


def _wls_moments(times: np.ndarray):
    w = 1.0 / times
    s0 = w.sum()
    s1 = (w * times).sum()
    s2 = (w * times * times).sum()
    det = s0 * s2 - s1 * s1
    return w, s0, s1, s2, det


def fit_small_time(times, logratios) -> ChordFit:
    """Weighted least squares of r(t) ~ dpsi - F t, weights 1/t.

    Returns the intercept dpsi, the slope magnitude F, the weighted RMS
    residual, and the parameter covariance for (dpsi, F).
    """
    t = np.asarray(times, dtype=float)
    r = np.asarray(logratios, dtype=float)
    if t.shape != r.shape or t.ndim != 1:
        raise DataError("times and logratios must be 1-D arrays of equal length")
    if len(t) < 3:
        raise DataError(f"need at least 3 times to fit, got {len(t)}")
    if np.any(t <= 0) or not np.all(np.isfinite(r)):
        raise DataError("times must be positive and log ratios finite")
    if np.ptp(t) <= 1e-15 * t.max():
        raise DataError("time ladder is rank deficient (all times equal)")
    w, s0, s1, s2, det = _wls_moments(t)
    b0 = (w * r).sum()
    b1 = (w * t * r).sum()
    dpsi = (s2 * b0 - s1 * b1) / det
    slope = (s0 * b1 - s1 * b0) / det
    resid = r - (dpsi + slope * t)
    wss = float((w * resid * resid).sum())
    sigma2 = max(wss, 0.0) / (len(t) - 2)
    cov = sigma2 / det * np.array([[s2, s1], [s1, s0]])
    return ChordFit(float(dpsi), float(-slope), float(np.sqrt(sigma2)), cov, len(t))


def fit_ladder_batch(times: np.ndarray, logratios: np.ndarray):
    """Vectorized fit for many chords sharing one full ladder.

    logratios has shape (n_chords, m).  Returns arrays
    (dpsi, F, residual, var_dpsi, var_F, cov_dpsi_F).
    """
    t = np.asarray(times, dtype=float)
    r = np.asarray(logratios, dtype=float)
    w, s0, s1, s2, det = _wls_moments(t)
    b0 = r @ w
    b1 = r @ (w * t)
    dpsi = (s2 * b0 - s1 * b1) / det
    slope = (s0 * b1 - s1 * b0) / det
    resid = r - (dpsi[:, None] + slope[:, None] * t[None, :])
    wss = (resid * resid) @ w
    sigma2 = np.maximum(wss, 0.0) / (len(t) - 2)
    return dpsi, -slope, np.sqrt(sigma2), sigma2 * s2 / det, sigma2 * s0 / det, sigma2 * s1 / det


@dataclass(frozen=True)
class BoundaryDataset:
    """Observed density ratios per chord over a decreasing time ladder.

    log_ratios holds log(p_obs/p_ref) with NaN marking dropped observations;
    p_obs/p_ref hold the raw densities when they are representable (NaN
    otherwise; exact-log kernels can produce valid ratios for density values
    far below the smallest float).
    """

    chords: tuple
    times: np.ndarray
    log_ratios: np.ndarray
    p_obs: np.ndarray
    p_ref: np.ndarray
    skipped: tuple = ()
    provenance: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if len(t) < 3:
            raise DataError("time ladder must hold at least 3 times")
        if np.any(np.diff(t) >= 0):
            raise DataError("times must be decreasing")
        lr = np.asarray(self.log_ratios, dtype=float)
        if lr.shape != (len(self.chords), len(t)):
            raise DataError("log_ratios shape must be (n_chords, n_times)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "log_ratios", lr)

    @property
    def n_chords(self) -> int:
        return len(self.chords)


def build_boundary_dataset(
    observed: Kernel,
    reference: Kernel,
    domain: Domain,
    geometry: tuple[int, int],
    ladder,
    floor: float = DEFAULT_DENSITY_FLOOR,
) -> BoundaryDataset:
    """Tabulate density ratios for every chord of a parallel-beam raster.

    Kernels exposing exact log densities are evaluated in log space (no
    underflow); otherwise densities below `floor` are dropped and recorded.
    """
    n_angles, n_offsets = geometry
    times = np.asarray(sorted(ladder, reverse=True), dtype=float)
    if np.any(times <= 0):
        raise DataError("ladder times must be positive")
    chords, skipped = make_parallel_chords(domain, n_angles, n_offsets)
    nc = len(chords)
    xs = np.array([c.x for c in chords])
    ys = np.array([c.y for c in chords])
    log_ratios = np.full((nc, len(times)), np.nan)
    p_obs = np.full((nc, len(times)), np.nan)
    p_ref = np.full((nc, len(times)), np.nan)
    exact = observed.exact_log and reference.exact_log
    n_dropped = 0
    for k, t in enumerate(times):
        try:
            if exact:
                lo = np.asarray(observed.log_density(xs, float(t), ys), dtype=float)
                lref = np.asarray(reference.log_density(xs, float(t), ys), dtype=float)
                log_ratios[:, k] = lo - lref
                with np.errstate(under="ignore"):
                    p_obs[:, k] = np.exp(lo)
                    p_ref[:, k] = np.exp(lref)
            else:
                po = np.asarray(observed.density(xs, float(t), ys), dtype=float)
                pr = np.asarray(reference.density(xs, float(t), ys), dtype=float)
                ok = (po > floor) & (pr > floor) & np.isfinite(po) & np.isfinite(pr)
                n_dropped += int((~ok).sum())
                log_ratios[ok, k] = np.log(po[ok]) - np.log(pr[ok])
                p_obs[:, k] = po
                p_ref[:, k] = pr
        except DataError as exc:
            raise DataError(f"kernel evaluation failed at t={t}: {exc}") from exc
    if n_dropped:
        warnings.warn(f"dropped {n_dropped} sub-floor density observations", stacklevel=2)
    return BoundaryDataset(
        chords=tuple(chords),
        times=times,
        log_ratios=log_ratios,
        p_obs=p_obs,
        p_ref=p_ref,
        skipped=tuple(skipped),
        provenance={
            "observed": observed.describe(),
            "reference": reference.describe(),
            "floor": floor,
            "n_dropped": n_dropped,
            "n_angles": n_angles,
            "n_offsets": n_offsets,
            "exact_log": exact,
        },
    )


def fit_dataset(dataset: BoundaryDataset):
    """Fit every chord; returns (fits, excluded) where fits[i] is None for
    chords with fewer than 3 surviving observations (recorded in excluded).
    """
    lr = dataset.log_ratios
    t = dataset.times
    fits: list[ChordFit | None] = [None] * dataset.n_chords
    excluded = []
    full = np.all(np.isfinite(lr), axis=1)
    if np.any(full):
        idx = np.nonzero(full)[0]
        dpsi, F, resid, vd, vf, cdf = fit_ladder_batch(t, lr[idx])
        for row, i in enumerate(idx):
            cov = np.array([[vd[row], cdf[row]], [cdf[row], vf[row]]])
            fits[i] = ChordFit(float(dpsi[row]), float(F[row]), float(resid[row]), cov, len(t))
    for i in np.nonzero(~full)[0]:
        ok = np.isfinite(lr[i])
        if ok.sum() < 3:
            excluded.append(i)
            continue
        fits[i] = fit_small_time(t[ok], lr[i, ok])
    return fits, excluded


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

DATASET_COLUMNS = [
    "angle_index",
    "offset_index",
    "x1",
    "x2",
    "y1",
    "y2",
    "t",
    "p_obs",
    "p_ref",
    "log_ratio",
]

FITS_COLUMNS = [
    "angle_index",
    "offset_index",
    "delta_psi",
    "F",
    "residual",
    "se_delta_psi",
    "se_F",
    "n_times",
]


def write_dataset_csv(path, dataset: BoundaryDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_COLUMNS)
        for i, c in enumerate(dataset.chords):
            for k, t in enumerate(dataset.times):
                w.writerow(
                    [
                        c.angle_index,
                        c.offset_index,
                        repr(float(c.x[0])),
                        repr(float(c.x[1])),
                        repr(float(c.y[0])),
                        repr(float(c.y[1])),
                        repr(float(t)),
                        repr(float(dataset.p_obs[i, k])),
                        repr(float(dataset.p_ref[i, k])),
                        repr(float(dataset.log_ratios[i, k])),
                    ]
                )


def read_dataset_csv(path, floor: float = DEFAULT_DENSITY_FLOOR) -> BoundaryDataset:
    """Rebuild a dataset from CSV; prefers the exact log_ratio column and
    falls back to floored densities when it is absent or non-finite.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    by_chord: dict[tuple[int, int], dict] = {}
    times_seen: dict[float, None] = {}
    for row in rows:
        key = (int(row["angle_index"]), int(row["offset_index"]))
        t = float(row["t"])
        times_seen.setdefault(t, None)
        entry = by_chord.setdefault(
            key,
            {
                "x": np.array([float(row["x1"]), float(row["x2"])]),
                "y": np.array([float(row["y1"]), float(row["y2"])]),
                "obs": {},
            },
        )
        p_o = float(row["p_obs"])
        p_r = float(row["p_ref"])
        lr = float(row.get("log_ratio", "nan") or "nan")
        if not np.isfinite(lr):
            if p_o > floor and p_r > floor and np.isfinite(p_o) and np.isfinite(p_r):
                lr = float(np.log(p_o) - np.log(p_r))
            else:
                raise DataError(
                    f"{path}: unusable density pair ({p_o:.3e}, {p_r:.3e}) for chord "
                    f"angle={key[0]} offset={key[1]} at t={t}"
                )
        entry["obs"][t] = (lr, p_o, p_r)
    times = np.asarray(sorted(times_seen, reverse=True), dtype=float)
    keys = sorted(by_chord)
    chords = []
    nc = len(keys)
    log_ratios = np.full((nc, len(times)), np.nan)
    p_obs = np.full((nc, len(times)), np.nan)
    p_ref = np.full((nc, len(times)), np.nan)
    for i, key in enumerate(keys):
        e = by_chord[key]
        chords.append(Chord(e["x"], e["y"], key[0], key[1]))
        for k, t in enumerate(times):
            if t in e["obs"]:
                log_ratios[i, k], p_obs[i, k], p_ref[i, k] = e["obs"][t]
    return BoundaryDataset(
        chords=tuple(chords),
        times=times,
        log_ratios=log_ratios,
        p_obs=p_obs,
        p_ref=p_ref,
        provenance={"source": str(path)},
    )


def write_fits_csv(path, chords, fits) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FITS_COLUMNS)
        for c, f in zip(chords, fits):
            if f is None:
                continue
            w.writerow(
                [
                    c.angle_index,
                    c.offset_index,
                    repr(f.delta_psi),
                    repr(f.F),
                    repr(f.residual),
                    repr(f.se_delta_psi),
                    repr(f.se_F),
                    f.n_times,
                ]
            )


def read_fits_csv(path) -> dict[tuple[int, int], ChordFit]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            se_d = float(row["se_delta_psi"])
            se_f = float(row["se_F"])
            cov = np.array([[se_d**2, 0.0], [0.0, se_f**2]])
            out[(int(row["angle_index"]), int(row["offset_index"]))] = ChordFit(
                float(row["delta_psi"]),
                float(row["F"]),
                float(row["residual"]),
                cov,
                int(row["n_times"]),
            )
    return out
