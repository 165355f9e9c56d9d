"""Frozen-flow passive-scalar transport on a cylindrical grid.

A steady velocity field (surrogate or exact) is sampled onto face-normal
velocities of a structured (r, theta, z) grid covering the liquid column,
then the scalar advection-diffusion equation is integrated with implicit
first-order upwinding.  Walls and the free surface are treated as a
closed box (zero normal velocity, zero flux).

Two spatial assemblies are offered: ``conservative`` (flux form; exactly
mass-conserving when the discrete field is solenoidal) and ``advective``
(u . grad c form with the divergence contribution removed; bounded for
any velocity field, which is the safe choice for learned fields).  The
implicit operator is constant over a run, so it is factorized once; every
solve is verified against a relative-residual bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .autodiff import Array
from .mms import MmsExactModel
from .model import SurrogateModel

log = logging.getLogger(__name__)

SOLVE_RESIDUAL_BOUND = 1e-10
DEFAULT_RESOLUTION = (32, 16, 48)


class StepError(RuntimeError):
    """The implicit solve failed its residual bound."""


@dataclass(frozen=True)
class CylGrid:
    """Uniform cylindrical grid over the liquid column (full azimuth)."""

    n_r: int
    n_theta: int
    n_z: int
    radius: float
    height: float

    def __post_init__(self):
        if min(self.n_r, self.n_theta, self.n_z) < 2:
            raise ValueError("need at least two cells per direction")
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("radius and height must be positive")

    @property
    def dr(self) -> float:
        return self.radius / self.n_r

    @property
    def dtheta(self) -> float:
        return 2.0 * np.pi / self.n_theta

    @property
    def dz(self) -> float:
        return self.height / self.n_z

    @property
    def n_cells(self) -> int:
        return self.n_r * self.n_theta * self.n_z

    def r_centers(self) -> Array:
        return (np.arange(self.n_r) + 0.5) * self.dr

    def theta_centers(self) -> Array:
        return (np.arange(self.n_theta) + 0.5) * self.dtheta

    def z_centers(self) -> Array:
        return (np.arange(self.n_z) + 0.5) * self.dz

    def volumes(self) -> Array:
        """Cell volumes [n_r, n_theta, n_z]; exact for the cylindrical metric."""
        v_r = self.r_centers() * self.dr * self.dtheta * self.dz
        return np.broadcast_to(
            v_r[:, None, None], (self.n_r, self.n_theta, self.n_z)
        ).copy()

    def index(self, i, j, k):
        return (i * self.n_theta + j) * self.n_z + k

    def cell_centers_cartesian(self) -> Array:
        r = self.r_centers()[:, None, None]
        th = self.theta_centers()[None, :, None]
        z = np.broadcast_to(
            self.z_centers()[None, None, :], (self.n_r, self.n_theta, self.n_z)
        )
        x = np.broadcast_to(r * np.cos(th), z.shape)
        y = np.broadcast_to(r * np.sin(th), z.shape)
        return np.stack([x, y, z], axis=-1)

    @property
    def liquid(self) -> Array:
        """The grid spans exactly the liquid column (rigid lid)."""
        return np.ones((self.n_r, self.n_theta, self.n_z), dtype=bool)


def build_grid(height: float, resolution=DEFAULT_RESOLUTION, radius: float = 2.09 / 2,
               tank_height: float = 8.12) -> CylGrid:
    if height > tank_height:
        raise ValueError("liquid height exceeds the tank height")
    n_r, n_theta, n_z = resolution
    return CylGrid(n_r=n_r, n_theta=n_theta, n_z=n_z, radius=radius, height=height)


@dataclass
class FrozenField:
    """Face-normal velocities (m/s) and cellwise diffusivity (m^2/s)."""

    grid: CylGrid
    u_r: Array      # [n_r + 1, n_theta, n_z], zero at axis and wall
    u_theta: Array  # [n_r, n_theta, n_z], face j sits between cells j-1 and j
    u_z: Array      # [n_r, n_theta, n_z + 1], zero at bottom and lid
    diffusivity: Array  # [n_r, n_theta, n_z]
    _steppers: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        g = self.grid
        if self.u_r.shape != (g.n_r + 1, g.n_theta, g.n_z):
            raise ValueError("u_r faces have the wrong shape")
        if self.u_theta.shape != (g.n_r, g.n_theta, g.n_z):
            raise ValueError("u_theta faces have the wrong shape")
        if self.u_z.shape != (g.n_r, g.n_theta, g.n_z + 1):
            raise ValueError("u_z faces have the wrong shape")
        if np.any(self.diffusivity < 0):
            raise ValueError("diffusivity must be non-negative")
        boundary = (
            np.abs(self.u_r[0]).max(initial=0.0),
            np.abs(self.u_r[-1]).max(initial=0.0),
            np.abs(self.u_z[:, :, 0]).max(initial=0.0),
            np.abs(self.u_z[:, :, -1]).max(initial=0.0),
        )
        if max(boundary) != 0.0:
            raise ValueError("boundary faces must carry zero normal velocity")


@dataclass(frozen=True)
class TracerConfig:
    """Numerical setup of a dispersion run."""

    d_m: float = 6e-10          # molecular diffusivity, m^2/s
    dt: float = 0.05            # s
    t_end: float = 200.0        # s
    patch_r: float = 0.7        # m; patch centre radius
    patch_below_surface: float = 0.5  # m below the static surface
    patch_radius: float = 0.1   # m
    patch_theta: float | None = None  # None: first cell-centre azimuth
    probe_r: float = 0.7
    probe_z: float = 0.5
    probe_theta: float = 0.0
    scheme: str | None = None   # None: advective for surrogates, else conservative
    d_mode: str = "molecular"   # or "turbulent": D_m + nu_t / Sc_t
    sc_t: float = 0.7
    resolution: tuple[int, int, int] = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        if self.scheme not in (None, "conservative", "advective"):
            raise ValueError("scheme must be conservative or advective")
        if self.d_mode not in ("molecular", "turbulent"):
            raise ValueError("d_mode must be molecular or turbulent")


@dataclass
class ProbeSeries:
    """Probe mass fraction (normalized by the fully mixed value) vs time."""

    times: Array
    values: Array
    total_mass: Array
    c_max: Array
    c_min: Array

    def __post_init__(self):
        n = len(self.times)
        for arr in (self.values, self.total_mass, self.c_max, self.c_min):
            if len(arr) != n:
                raise ValueError("probe series arrays must share one length")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")


# ---------------------------------------------------------------------------
# field sampling


def sample_frozen_field(source, grid: CylGrid, mu, d_mode: str = "molecular",
                        d_m: float = 6e-10, sc_t: float = 0.7) -> FrozenField:
    """Project a steady field onto face-normal grid velocities.

    ``source`` is a surrogate/exact model (``predict(points, mu)``) or a
    bare callable ``points -> [N, 7]``.  Wall, lid and bottom faces are
    forced to zero normal velocity.
    """
    if callable(source) and not hasattr(source, "predict"):
        predict = lambda pts: np.atleast_2d(source(pts))
    else:
        predict = lambda pts: np.atleast_2d(source.predict(pts, mu))

    g = grid
    rc, tc, zc = g.r_centers(), g.theta_centers(), g.z_centers()

    # interior radial faces at r = i dr, i = 1 .. n_r - 1
    rf = np.arange(1, g.n_r) * g.dr
    R, TH, Z = np.meshgrid(rf, tc, zc, indexing="ij")
    pts = np.column_stack(
        [(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel(), Z.ravel()]
    )
    f = predict(pts)
    u_n = f[:, 1] * np.cos(TH).ravel() + f[:, 2] * np.sin(TH).ravel()
    u_r = np.zeros((g.n_r + 1, g.n_theta, g.n_z))
    u_r[1:-1] = u_n.reshape(g.n_r - 1, g.n_theta, g.n_z)

    # azimuthal faces at theta = j dtheta (periodic, all interior)
    tf = np.arange(g.n_theta) * g.dtheta
    R, TH, Z = np.meshgrid(rc, tf, zc, indexing="ij")
    pts = np.column_stack(
        [(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel(), Z.ravel()]
    )
    f = predict(pts)
    u_n = -f[:, 1] * np.sin(TH).ravel() + f[:, 2] * np.cos(TH).ravel()
    u_theta = u_n.reshape(g.n_r, g.n_theta, g.n_z)

    # interior axial faces at z = k dz, k = 1 .. n_z - 1, sampled at the
    # area centroid radius (the r-weighted metric shifts it off the cell
    # centre; midpoint sampling would lose an order near the axis)
    zf = np.arange(1, g.n_z) * g.dz
    r_w = np.arange(g.n_r) * g.dr
    r_e = r_w + g.dr
    r_cent = (2.0 / 3.0) * (r_e**3 - r_w**3) / (r_e**2 - r_w**2)
    R, TH, Z = np.meshgrid(r_cent, tc, zf, indexing="ij")
    pts = np.column_stack(
        [(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel(), Z.ravel()]
    )
    f = predict(pts)
    u_z = np.zeros((g.n_r, g.n_theta, g.n_z + 1))
    u_z[:, :, 1:-1] = f[:, 3].reshape(g.n_r, g.n_theta, g.n_z - 1)

    if d_mode == "turbulent":
        centers = g.cell_centers_cartesian().reshape(-1, 3)
        fc = predict(centers)
        nu_t = np.maximum(fc[:, 5], 0.0) / np.maximum(fc[:, 6], 1e-8)
        diff = (d_m + nu_t / sc_t).reshape(g.n_r, g.n_theta, g.n_z)
    else:
        diff = np.full((g.n_r, g.n_theta, g.n_z), d_m)
    return FrozenField(grid=g, u_r=u_r, u_theta=u_theta, u_z=u_z, diffusivity=diff)


# ---------------------------------------------------------------------------
# operator assembly


def _face_tables(field: FrozenField):
    """Owner/neighbour indices, advective flux and diffusive coefficient
    per interior face, for all three face families."""
    g = field.grid
    rc = g.r_centers()
    ii, jj, kk = np.meshgrid(
        np.arange(g.n_r), np.arange(g.n_theta), np.arange(g.n_z), indexing="ij"
    )

    owners, neighbours, fluxes, dcoefs = [], [], [], []
    d = field.diffusivity

    def harmonic(a, b):
        return 2.0 * a * b / np.maximum(a + b, 1e-300)

    # radial faces i = 1 .. n_r - 1: P = (i-1, j, k), N = (i, j, k)
    area = (np.arange(1, g.n_r) * g.dr)[:, None, None] * g.dtheta * g.dz
    phi = field.u_r[1:-1] * area
    owners.append(g.index(ii[:-1], jj[:-1], kk[:-1]).ravel())
    neighbours.append(g.index(ii[1:], jj[1:], kk[1:]).ravel())
    fluxes.append(phi.ravel())
    dcoefs.append((harmonic(d[:-1], d[1:]) * area / g.dr).ravel())

    # azimuthal faces j = 0 .. n_theta - 1 (periodic): P = (i, j-1, k), N = (i, j, k)
    area = g.dr * g.dz
    phi = field.u_theta * area
    jprev = (jj - 1) % g.n_theta
    owners.append(g.index(ii, jprev, kk).ravel())
    neighbours.append(g.index(ii, jj, kk).ravel())
    fluxes.append(phi.ravel())
    dist = rc[:, None, None] * g.dtheta
    dprev = np.take(d, np.arange(-1, g.n_theta - 1), axis=1, mode="wrap")
    dcoefs.append((harmonic(dprev, d) * area / dist).ravel())

    # axial faces k = 1 .. n_z - 1: P = (i, j, k-1), N = (i, j, k)
    area = rc[:, None, None] * g.dr * g.dtheta
    phi = field.u_z[:, :, 1:-1] * area
    owners.append(g.index(ii[:, :, :-1], jj[:, :, :-1], kk[:, :, :-1]).ravel())
    neighbours.append(g.index(ii[:, :, 1:], jj[:, :, 1:], kk[:, :, 1:]).ravel())
    fluxes.append(phi.ravel())
    dcoefs.append((harmonic(d[:, :, :-1], d[:, :, 1:]) * area / g.dz).ravel())

    return (
        np.concatenate(owners),
        np.concatenate(neighbours),
        np.concatenate(fluxes),
        np.concatenate(dcoefs),
    )


def transport_operator(field: FrozenField, scheme: str) -> sp.csr_matrix:
    """Spatial operator A with dc/dt + A c = 0 (per unit volume)."""
    if scheme not in ("conservative", "advective"):
        raise ValueError("scheme must be conservative or advective")
    g = field.grid
    n = g.n_cells
    P, N, phi, dc = _face_tables(field)
    phi_p = np.maximum(phi, 0.0)
    phi_m = np.minimum(phi, 0.0)
    if scheme == "conservative":
        rows = np.concatenate([P, P, N, N])
        cols = np.concatenate([P, N, P, N])
        data = np.concatenate([phi_p, phi_m, -phi_p, -phi_m])
    else:
        # u . grad c: each cell sees only its upwind difference
        rows = np.concatenate([P, P, N, N])
        cols = np.concatenate([P, N, N, P])
        data = np.concatenate([-phi_m, phi_m, phi_p, -phi_p])
    rows = np.concatenate([rows, P, P, N, N])
    cols = np.concatenate([cols, P, N, N, P])
    data = np.concatenate([data, dc, -dc, dc, -dc])
    a = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    inv_v = 1.0 / field.grid.volumes().ravel()
    return sp.diags(inv_v) @ a


class ImplicitStepper:
    """(I + dt A) c' = c with a one-time sparse factorization."""

    def __init__(self, field: FrozenField, dt: float, scheme: str):
        g = field.grid
        self.matrix = (sp.identity(g.n_cells, format="csr")
                       + dt * transport_operator(field, scheme)).tocsc()
        self.lu = splu(self.matrix)

    def step(self, c: Array) -> Array:
        rhs = np.asarray(c, dtype=np.float64).ravel()
        out = self.lu.solve(rhs)
        denom = np.linalg.norm(rhs)
        residual = np.linalg.norm(self.matrix @ out - rhs) / max(denom, 1e-300)
        if not np.isfinite(out).all() or residual > SOLVE_RESIDUAL_BOUND:
            raise StepError(f"implicit solve residual {residual:.3e} "
                            f"exceeds {SOLVE_RESIDUAL_BOUND:.1e}")
        return out.reshape(np.shape(c))


def step(c: Array, field: FrozenField, grid: CylGrid, dt: float, scheme: str) -> Array:
    """One implicit transport step; the factorization is cached on the field."""
    if grid is not field.grid and grid != field.grid:
        raise ValueError("grid does not belong to this field")
    if not np.isfinite(c).all():
        raise ValueError("non-finite concentration state")
    key = (float(dt), scheme)
    stepper = field._steppers.get(key)
    if stepper is None:
        stepper = ImplicitStepper(field, dt, scheme)
        field._steppers[key] = stepper
    return stepper.step(c)


def cell_divergence(field: FrozenField, grid: CylGrid) -> Array:
    """Discrete conservative divergence (1/s) per cell."""
    P, N, phi, _ = _face_tables(field)
    net = np.zeros(grid.n_cells)
    np.add.at(net, P, phi)
    np.add.at(net, N, -phi)
    return (net / grid.volumes().ravel()).reshape(
        grid.n_r, grid.n_theta, grid.n_z
    )


def divergence_diagnostic(field: FrozenField, grid: CylGrid) -> tuple[float, float]:
    """(max, mean) absolute cell divergence, 1/s."""
    div = np.abs(cell_divergence(field, grid))
    return float(div.max()), float(div.mean())


# ---------------------------------------------------------------------------
# full simulation


def _trilinear_probe_weights(grid: CylGrid, r: float, theta: float, z: float):
    """Interpolation stencil over cell centers, periodic in theta."""
    idx = []
    wts = []

    def axis_weights(x, x0, dx, n, periodic):
        t = (x - x0) / dx - 0.5
        lo = int(np.floor(t))
        w_hi = t - lo
        if periodic:
            return [(lo % n, 1.0 - w_hi), ((lo + 1) % n, w_hi)]
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        return [(lo_c, 1.0 - w_hi), (hi_c, w_hi)]

    for ir, wr in axis_weights(r, 0.0, grid.dr, grid.n_r, periodic=False):
        for it, wt in axis_weights(theta % (2 * np.pi), 0.0, grid.dtheta,
                                   grid.n_theta, periodic=True):
            for iz, wz in axis_weights(z, 0.0, grid.dz, grid.n_z, periodic=False):
                idx.append(grid.index(ir, it, iz))
                wts.append(wr * wt * wz)
    return np.array(idx), np.array(wts)


def initial_patch(grid: CylGrid, config: TracerConfig, height: float) -> Array:
    """c = 1 in cells whose centre lies inside the patch sphere."""
    theta = (
        config.patch_theta
        if config.patch_theta is not None
        else 0.5 * grid.dtheta
    )
    center = np.array(
        [
            config.patch_r * np.cos(theta),
            config.patch_r * np.sin(theta),
            height - config.patch_below_surface,
        ]
    )
    if center[2] < 0 or center[2] > height:
        raise ValueError("patch centre lies outside the liquid")
    cells = grid.cell_centers_cartesian().reshape(-1, 3)
    dist = np.linalg.norm(cells - center, axis=1)
    c0 = (dist <= config.patch_radius).astype(np.float64)
    if not c0.any():
        c0[int(np.argmin(dist))] = 1.0
        log.warning("patch smaller than a cell; marking the nearest cell")
    return c0.reshape(grid.n_r, grid.n_theta, grid.n_z)


def default_scheme(source) -> str:
    """Advective for learned fields, conservative for analytic ones."""
    if isinstance(source, MmsExactModel):
        return "conservative"
    if isinstance(source, SurrogateModel):
        return "advective"
    return "advective"


def simulate(source, mu, config: TracerConfig = TracerConfig(),
             radius: float | None = None) -> ProbeSeries:
    """Integrate a tracer patch under the frozen field of ``source``.

    ``mu`` = (rpm, liquid height).  The probe value is normalized by the
    fully mixed concentration; total mass and extrema are recorded every
    step, and the divergence diagnostic of the sampled field is logged.
    """
    rpm, height = float(mu[0]), float(mu[1])
    if height <= config.probe_z:
        raise ValueError("probe sits above the liquid surface")
    r_tank = radius if radius is not None else getattr(
        source, "bounds", None
    ).radius if hasattr(source, "bounds") else 2.09 / 2
    grid = build_grid(height, config.resolution, radius=r_tank)
    field = sample_frozen_field(
        source, grid, (rpm, height), d_mode=config.d_mode,
        d_m=config.d_m, sc_t=config.sc_t,
    )
    scheme = config.scheme or default_scheme(source)
    dmax, dmean = divergence_diagnostic(field, grid)
    log.info(
        "tracer run: scheme=%s, divergence max %.3e mean %.3e 1/s",
        scheme, dmax, dmean,
    )

    volumes = grid.volumes()
    c = initial_patch(grid, config, height)
    mixed = float(np.sum(volumes * c) / np.sum(volumes))
    pidx, pw = _trilinear_probe_weights(
        grid, config.probe_r, config.probe_theta, config.probe_z
    )

    n_steps = int(np.floor(config.t_end / config.dt + 1e-9))
    times = np.arange(n_steps + 1) * config.dt
    values = np.empty(n_steps + 1)
    mass = np.empty(n_steps + 1)
    c_max = np.empty(n_steps + 1)
    c_min = np.empty(n_steps + 1)

    def record(i, state):
        values[i] = float(state.ravel()[pidx] @ pw) / mixed
        mass[i] = float(np.sum(volumes * state))
        c_max[i] = float(state.max())
        c_min[i] = float(state.min())

    record(0, c)
    for i in range(1, n_steps + 1):
        c = step(c, field, grid, config.dt, scheme)
        if not np.isfinite(c).all():
            raise StepError(f"non-finite concentration at step {i}")
        record(i, c)
    return ProbeSeries(times=times, values=values, total_mass=mass,
                       c_max=c_max, c_min=c_min)
