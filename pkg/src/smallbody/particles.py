"""Particle clouds: lattice placement from densities, impedances, validation.

Placement is deterministic.  The box is tiled by cubic cells of side b
(aligned with the medium grid); each cell receives a particle count equal to
its node-integrated density divided by the per-particle weight (a for the
impedance counting, c3*a^3 for the hard counting), rounded to the nearest
integer.  Counts are realized on a centered rectangular sublattice: an exact
(s1, s2, s3) factorization when a balanced one exists, otherwise a partially
filled cubic sublattice chosen in antipodal pairs so the selection carries no
dipole moment.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InfeasibleDesign, InvariantViolation
from .medium import BackgroundMedium

logger = logging.getLogger(__name__)

BALL_SHAPE_CONSTANTS = (4.0 * np.pi, 16.0 * np.pi ** 2, 4.0 * np.pi / 3.0)

KA_MAX = 0.1            # small-particle regime ka <= 0.1
SPACING_FACTOR = 10.0   # d >= 10 a
M_CAP = 200_000         # desk-scale particle cap
HARD_COMPAT_MAX = 0.1   # (nu/c3)^(1/3) <= 0.1 wherever nu > 0

FORMAT_VERSION = 1


@dataclass
class ParticleCloud:
    """Centers plus per-particle data for one species of small scatterers."""

    centers: np.ndarray            # (M, 3)
    a: float                       # particle radius
    d: float                       # minimum center spacing (inf for M <= 1)
    kind: str                      # "impedance" | "hard"
    zeta: np.ndarray | None = None     # (M,) complex boundary impedances
    beta: np.ndarray | None = None     # (3, 3) polarizability tensor
    shape_constants: tuple = BALL_SHAPE_CONSTANTS

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        if self.kind not in ("impedance", "hard"):
            raise InvariantViolation(f"unknown particle kind {self.kind!r}")
        if self.kind == "impedance":
            if self.zeta is None:
                raise InvariantViolation("impedance cloud requires zeta values")
            self.zeta = np.asarray(self.zeta, dtype=complex).reshape(-1)
            if len(self.zeta) != len(self.centers):
                raise InvariantViolation("zeta count must match centers")
        else:
            if self.beta is None:
                raise InvariantViolation("hard cloud requires a polarizability tensor")
            self.beta = np.asarray(self.beta, dtype=float).reshape(3, 3)

    def __len__(self):
        return len(self.centers)

    @property
    def volume_per_particle(self) -> float:
        return self.shape_constants[2] * self.a ** 3

    def to_json_dict(self) -> dict:
        out = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "a": self.a,
            "d": self.d if np.isfinite(self.d) else None,
            "shape_constants": list(self.shape_constants),
            "centers": [[float(c) for c in row] for row in self.centers],
        }
        if self.zeta is not None:
            out["zeta"] = [{"re": z.real, "im": z.imag} for z in self.zeta]
        if self.beta is not None:
            out["beta"] = [[float(v) for v in row] for row in self.beta]
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "ParticleCloud":
        zeta = None
        if "zeta" in data:
            zeta = np.array([complex(z["re"], z["im"]) for z in data["zeta"]])
        beta = np.asarray(data["beta"], dtype=float) if "beta" in data else None
        d = data.get("d")
        return cls(
            centers=np.asarray(data["centers"], dtype=float).reshape(-1, 3),
            a=float(data["a"]),
            d=float(d) if d is not None else np.inf,
            kind=data["kind"],
            zeta=zeta,
            beta=beta,
            shape_constants=tuple(data.get("shape_constants", BALL_SHAPE_CONSTANTS)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParticleCloud":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True)
class CountingMeasure:
    """Particle-count density: N(x) per unit length weight, nu(x) per volume."""

    mode: str                     # "per_length" | "per_volume"
    density: np.ndarray
    shape_constants: tuple = BALL_SHAPE_CONSTANTS

    def __post_init__(self):
        object.__setattr__(self, "density", np.asarray(self.density, dtype=float).reshape(-1))
        if self.mode not in ("per_length", "per_volume"):
            raise InvariantViolation(f"unknown counting mode {self.mode!r}")
        if np.any(self.density < 0):
            raise InvariantViolation("counting density must be nonnegative")
        if self.mode == "per_volume":
            c3 = self.shape_constants[2]
            peak = np.max(self.density, initial=0.0)
            if peak > 0 and (peak / c3) ** (1.0 / 3.0) > HARD_COMPAT_MAX + 1e-12:
                raise InvariantViolation(
                    "volume density too large: (nu/c3)^(1/3) must stay <= "
                    f"{HARD_COMPAT_MAX} for d >> a, got {(peak / c3) ** (1.0 / 3.0):.4f}")

    def particle_weight(self, a: float) -> float:
        return a if self.mode == "per_length" else self.shape_constants[2] * a ** 3


def impedance_to_h(zeta, a: float, shape_constants=BALL_SHAPE_CONSTANTS) -> np.ndarray:
    """Dimensionless impedance parameter h = zeta * J / (4 pi |S|).

    With |S| = c1 a^2 and J = c2 a^3 this is zeta * a * c2 / (4 pi c1);
    for balls simply zeta * a.
    """
    c1, c2, _ = shape_constants
    return np.asarray(zeta, dtype=complex) * a * c2 / (4.0 * np.pi * c1)


def h_to_impedance(h, a: float, shape_constants=BALL_SHAPE_CONSTANTS) -> np.ndarray:
    """Boundary impedance realizing a given h at radius a (inverse of above)."""
    c1, c2, _ = shape_constants
    return np.asarray(h, dtype=complex) * 4.0 * np.pi * c1 / (c2 * a)


# ---------------------------------------------------------------------------
# lattice machinery
# ---------------------------------------------------------------------------

def _balanced_factorization(n: int):
    """Best (s1<=s2<=s3) with s1*s2*s3 = n, or None if too anisotropic."""
    best = None
    s1 = 1
    while s1 ** 3 <= n:
        if n % s1 == 0:
            rem = n // s1
            s2 = s1
            while s2 * s2 <= rem:
                if rem % s2 == 0:
                    s3 = rem // s2
                    key = (-s1, s3 - s1)
                    if best is None or key < best[0]:
                        best = (key, (s1, s2, s3))
                s2 += 1
        s1 += 1
    if best is not None and best[1][2] <= 2 * best[1][0]:
        return best[1]
    return None


def _antipodal_sites(n: int, s: int) -> np.ndarray:
    """n sites of the centered s^3 sublattice chosen in antipodal pairs.

    Offsets are in cell units (cell side 1, centered at the origin).  Even
    counts carry exactly zero dipole moment; odd counts place one site at the
    center when available.
    """
    idx = np.stack(np.meshgrid(*[np.arange(s)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = (idx + 0.5) / s - 0.5
    # antipode of site (i,j,l) is (s-1-i, s-1-j, s-1-l)
    mate = np.ravel_multi_index(tuple((s - 1 - idx).T), (s, s, s))
    r2 = np.sum(pts * pts, axis=1)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], np.round(r2, 12)))
    used = np.zeros(len(pts), dtype=bool)
    chosen = []
    remaining = n
    is_center = r2 < 1e-18
    if remaining % 2 == 1 and np.any(is_center):
        c = int(np.flatnonzero(is_center)[0])
        chosen.append(pts[c])
        used[c] = True
        remaining -= 1
    for i in order:
        if remaining <= 0:
            break
        if used[i] or is_center[i]:
            continue
        used[i] = True
        chosen.append(pts[i])
        remaining -= 1
        j = mate[i]
        if remaining > 0 and not used[j]:
            used[j] = True
            chosen.append(pts[j])
            remaining -= 1
    return np.asarray(chosen)


def _cell_sites(n: int, b: float, cell_lo: np.ndarray):
    """Positions of n particles in the cell [lo, lo+b)^3 and their spacing."""
    fac = _balanced_factorization(n)
    if fac is not None:
        axes = [cell_lo[i] + (np.arange(fac[i]) + 0.5) * b / fac[i] for i in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return pts, b / max(fac)
    s = int(np.ceil(round(n ** (1.0 / 3.0), 9)))
    while s ** 3 < n:
        s += 1
    offsets = _antipodal_sites(n, s)
    return cell_lo + b / 2.0 + offsets * b, b / s


def _cell_layout(medium: BackgroundMedium, cell_size: float | None):
    """Cell side b and per-axis cell counts; cells must align with the grid."""
    grid = medium.grid
    extent = np.asarray(grid.hi) - np.asarray(grid.lo)
    if cell_size is None:
        if not np.allclose(extent, extent[0], rtol=1e-12):
            raise InvariantViolation("cell_size is required for a non-cubic box")
        b = float(extent[0])
    else:
        b = float(cell_size)
    counts = extent / b
    if not np.allclose(counts, np.round(counts), rtol=0, atol=1e-9):
        raise InvariantViolation(f"cell size {b} does not tile the box {tuple(extent)}")
    ratio = b / grid.delta
    if abs(ratio - round(ratio)) > 1e-9:
        raise InvariantViolation("cell size must be a multiple of the grid spacing")
    return b, np.round(counts).astype(int)


def _iterate_cells(medium: BackgroundMedium, density: np.ndarray, b: float, ncells):
    """Yield (cell index triple, cell_lo, node-integrated density mass)."""
    nodes = medium.grid.nodes
    lo = np.asarray(medium.grid.lo)
    w = medium.weight
    idx = np.floor((nodes - lo) / b + 1e-12).astype(int)
    idx = np.minimum(idx, np.asarray(ncells) - 1)
    flat = np.ravel_multi_index(tuple(idx.T), tuple(ncells))
    masses = np.bincount(flat, weights=density.real, minlength=int(np.prod(ncells))) * w
    for ci in range(ncells[0]):
        for cj in range(ncells[1]):
            for cl in range(ncells[2]):
                f = np.ravel_multi_index((ci, cj, cl), tuple(ncells))
                yield (ci, cj, cl), lo + np.array([ci, cj, cl]) * b, masses[f]


def _place(medium, density, a, weight, cell_size):
    b, ncells = _cell_layout(medium, cell_size)
    cells = [(idx, lo, int(round(mass / weight)), mass)
             for idx, lo, mass in _iterate_cells(medium, density, b, ncells)]
    total = sum(c[2] for c in cells)
    if total > M_CAP:
        raise InfeasibleDesign(f"M = {total} exceeds the desk-scale cap {M_CAP}")
    # the densest cell bounds the sublattice spacing b/s from below
    for cell_idx, _, n_c, _ in cells:
        if n_c > 0 and b / np.ceil(n_c ** (1.0 / 3.0)) < SPACING_FACTOR * a * (1 - 1e-12):
            raise InfeasibleDesign(
                f"cell {cell_idx} needs {n_c} particles in side {b:.3g}: spacing "
                f"< {SPACING_FACTOR}a = {SPACING_FACTOR * a:.3g}")
    all_pts = []
    d_min = np.inf
    discrepancy = 0.0
    for cell_idx, cell_lo, n_c, mass in cells:
        discrepancy += mass - n_c * weight
        if n_c == 0:
            continue
        pts, spacing = _cell_sites(n_c, b, cell_lo)
        if spacing < SPACING_FACTOR * a * (1 - 1e-9):
            raise InfeasibleDesign(
                f"cell {cell_idx} needs {n_c} particles in side {b:.3g}: spacing "
                f"{spacing:.3g} < {SPACING_FACTOR}a = {SPACING_FACTOR * a:.3g}")
        all_pts.append(pts)
        d_min = min(d_min, spacing)
    if not all_pts:
        return np.zeros((0, 3)), np.inf, 0.0
    centers = np.vstack(all_pts)
    if len(centers) > 1:
        tree = cKDTree(centers)
        dist, _ = tree.query(centers, k=2)
        d_min = float(dist[:, 1].min())
    if discrepancy:
        logger.debug("lattice rounding discrepancy: %.3g (density mass units)", discrepancy)
    return centers, d_min, discrepancy


# ---------------------------------------------------------------------------
# builders and validation
# ---------------------------------------------------------------------------

def build_cloud_impedance(medium: BackgroundMedium, a: float, h_field, N_field,
                          cell_size: float | None = None,
                          shape_constants=BALL_SHAPE_CONSTANTS) -> ParticleCloud:
    """Realize the per-length counting N(x)/a with impedances zeta = H(x)/a.

    h and N are node fields on the medium grid.  Each cell of side b receives
    round(integral_cell N dx / a) particles; per-particle impedance comes from
    the h value of the containing grid cell.
    """
    if not a > 0:
        raise InvariantViolation("particle radius must be positive")
    if medium.k * a > KA_MAX + 1e-12:
        raise InvariantViolation(f"ka = {medium.k * a:.3g} exceeds the small-size regime {KA_MAX}")
    h = np.broadcast_to(np.asarray(h_field, dtype=complex).reshape(-1),
                        (medium.grid.size,)) if np.asarray(h_field).size == 1 \
        else np.asarray(h_field, dtype=complex).reshape(-1)
    N = np.broadcast_to(np.asarray(N_field, dtype=float).reshape(-1),
                        (medium.grid.size,)) if np.asarray(N_field).size == 1 \
        else np.asarray(N_field, dtype=float).reshape(-1)
    if h.size != medium.grid.size or N.size != medium.grid.size:
        raise InvariantViolation("h and N must be node fields on the medium grid")
    if np.any(N < 0):
        raise InvariantViolation("N must be nonnegative")
    if np.any(h.imag > 1e-14):
        raise InvariantViolation("Im h must be <= 0")
    active = N > 0
    if np.any(np.abs(h[active] + 1.0) < 1e-12):
        raise InvariantViolation("h = -1 where N > 0: singular charge denominator")

    centers, d_min, _ = _place(medium, N, a, a, cell_size)
    h_at = medium.grid.value_at_cells(h, centers, outside=0.0 + 0.0j) if len(centers) else h[:0]
    zeta = h_to_impedance(h_at, a, shape_constants)
    return ParticleCloud(centers=centers, a=a, d=d_min, kind="impedance",
                         zeta=zeta, shape_constants=shape_constants)


def build_cloud_hard(medium: BackgroundMedium, a: float, nu_field, beta,
                     cell_size: float | None = None,
                     shape_constants=BALL_SHAPE_CONSTANTS) -> ParticleCloud:
    """Realize the per-volume counting nu(x)/(c3 a^3) with hard particles."""
    if not a > 0:
        raise InvariantViolation("particle radius must be positive")
    if medium.k * a > KA_MAX + 1e-12:
        raise InvariantViolation(f"ka = {medium.k * a:.3g} exceeds the small-size regime {KA_MAX}")
    nu = np.broadcast_to(np.asarray(nu_field, dtype=float).reshape(-1),
                         (medium.grid.size,)) if np.asarray(nu_field).size == 1 \
        else np.asarray(nu_field, dtype=float).reshape(-1)
    if nu.size != medium.grid.size:
        raise InvariantViolation("nu must be a node field on the medium grid")
    # validates nu >= 0 and the d >> a compatibility bound
    measure = CountingMeasure(mode="per_volume", density=nu, shape_constants=shape_constants)
    weight = measure.particle_weight(a)
    centers, d_min, _ = _place(medium, nu, a, weight, cell_size)
    return ParticleCloud(centers=centers, a=a, d=d_min, kind="hard",
                         beta=np.asarray(beta, dtype=float).reshape(3, 3),
                         shape_constants=shape_constants)


@dataclass
class CloudReport:
    """Diagnostics from validate_cloud; empty flag list means all checks pass."""

    m: int
    ka: float
    min_spacing: float
    spacing_over_a: float
    max_zeta_times_a: float | None
    volume_fraction: float
    flags: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


def validate_cloud(cloud: ParticleCloud, medium: BackgroundMedium) -> CloudReport:
    """Check the small-size, spacing, and passivity invariants of a cloud."""
    m = len(cloud)
    ka = medium.k * cloud.a
    if m > 1:
        tree = cKDTree(cloud.centers)
        dist, _ = tree.query(cloud.centers, k=2)
        spacing = float(dist[:, 1].min())
    else:
        spacing = np.inf
    max_zeta_a = float(np.max(np.abs(cloud.zeta)) * cloud.a) if (
        cloud.kind == "impedance" and m > 0) else None
    fraction = m * cloud.volume_per_particle / medium.grid.volume
    flags = []
    if m == 0:
        return CloudReport(m=0, ka=ka, min_spacing=spacing, spacing_over_a=np.inf,
                           max_zeta_times_a=max_zeta_a, volume_fraction=0.0, flags=flags)
    if ka > KA_MAX + 1e-12:
        flags.append(f"ka = {ka:.3g} > {KA_MAX}")
    if spacing < SPACING_FACTOR * cloud.a * (1 - 1e-9):
        flags.append(f"min spacing {spacing:.3g} < {SPACING_FACTOR}a")
    if cloud.kind == "impedance" and np.any(cloud.zeta.imag > 1e-14):
        flags.append("Im zeta > 0 (active particle)")
    if m > M_CAP:
        flags.append(f"M = {m} exceeds cap {M_CAP}")
    return CloudReport(m=m, ka=ka, min_spacing=spacing,
                       spacing_over_a=spacing / cloud.a,
                       max_zeta_times_a=max_zeta_a,
                       volume_fraction=fraction, flags=flags)
