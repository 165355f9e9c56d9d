"""Manufactured stirred-vessel fields and the forcing that makes them exact.

The velocity field is built from an axisymmetric streamfunction (hence
exactly solenoidal) plus a swirl component; pressure, turbulent kinetic
energy and specific dissipation follow tip-speed scalings.  All closed
forms and their first/second derivatives are obtained symbolically with
sympy and compiled once.

`mms_forcing` states the momentum equation and the two transport
equations directly in terms of those analytic derivatives and returns the
body force and sources that zero the residuals.  It deliberately does not
call the residual operators in `physics`; agreement between the two
routes is the verification oracle for both.

Derivative evaluation assumes points strictly inside the liquid
(0 < z < H) and off the tank axis; field values are defined everywhere,
with velocities decaying to zero at and above the free surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sp

from . import physics
from .autodiff import Array
from .model import DomainBounds
from .physics import ClosureConstants, FluidProperties, RotatingZoneSpec


@dataclass(frozen=True)
class MmsSpec:
    """Dimensionless amplitudes of the manufactured fields.

    Velocity amplitudes scale with the impeller tip speed; k and omega
    with its square and its ratio to the tank radius.  ``delta`` is the
    free-surface interface thickness and ``q`` the wall-refinement
    exponent used when sampling points.
    """

    c_psi: float = 0.05
    c_theta: float = 1.0
    k0: float = 1e-4
    k1: float = 9e-3
    w0: float = 5.0
    w1: float = 5.0
    delta: float = 0.05
    q: float = 2.0

    def __post_init__(self):
        for name in ("c_psi", "c_theta", "k0", "k1", "w0", "w1", "delta", "q"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def provenance(self) -> dict:
        return {
            "c_psi": self.c_psi, "c_theta": self.c_theta,
            "k0": self.k0, "k1": self.k1, "w0": self.w0, "w1": self.w1,
            "delta": self.delta, "q": self.q,
        }


def tip_speed(rpm, tank_diameter: float):
    """Impeller tip speed; the impeller diameter is one third of the tank's."""
    return np.pi * (tank_diameter / 3.0) * np.asarray(rpm, dtype=np.float64) / 60.0


# ---------------------------------------------------------------------------
# symbolic construction, compiled once


_ARG_NAMES = "x y z rpm H R c_psi c_theta k0 k1 w0 w1 delta rho gmag nu"


@lru_cache(maxsize=1)
def _compiled():
    x, y, z, rpm, H, R, c_psi, c_theta, k0, k1, w0, w1, delta, rho, gmag, nu = sp.symbols(
        _ARG_NAMES, real=True
    )
    args = (x, y, z, rpm, H, R, c_psi, c_theta, k0, k1, w0, w1, delta, rho, gmag, nu)

    u_tip = sp.pi * (2 * R / 3) * rpm / 60
    zeta = z / H
    s2z = sp.sin(sp.pi * zeta) ** 2

    # streamfunction in (r, z); the 1/r factors cancel exactly
    r = sp.symbols("r", positive=True)
    s_r = r / R
    psi = c_psi * u_tip * R * r**2 * (1 - s_r) ** 2 * s2z
    ur_over_r = sp.cancel(-sp.diff(psi, z) / r**2)
    uz_in_r = sp.cancel(sp.diff(psi, r) / r)
    utheta_over_r = c_theta * u_tip * 4 * (1 / R) * (1 - s_r) * sp.sin(sp.pi * zeta)

    r_xy = sp.sqrt(x**2 + y**2)
    subs_r = {r: r_xy}
    g_r = ur_over_r.subs(subs_r)
    g_t = utheta_over_r.subs(subs_r)
    u = x * g_r - y * g_t
    v = y * g_r + x * g_t
    w = uz_in_r.subs(subs_r)

    s_xy = r_xy / R
    p_dyn = sp.Rational(1, 2) * rho * u_tip**2 * s_xy**2 * (1 - s_xy) ** 2 * s2z
    p_total = rho * gmag * (H - z) + p_dyn
    k_expr = u_tip**2 * (k0 + k1 * s_xy * (1 - s_xy) * s2z)
    w_expr = (u_tip / R) * (w0 + w1 * s_xy)
    alpha = (1 - sp.tanh((z - H) / delta)) / 2

    fields = [alpha, u, v, w, p_total, k_expr, w_expr]
    grads = [[sp.diff(f, c) for c in (x, y, z)] for f in fields]
    laps = [sum(sp.diff(f, c, 2) for c in (x, y, z)) for f in fields]

    value_fn = sp.lambdify(args, [u, v, w, p_dyn, k_expr, w_expr], modules="numpy", cse=True)
    deriv_fn = sp.lambdify(
        args,
        fields + [g for row in grads for g in row] + laps,
        modules="numpy",
        cse=True,
    )
    return value_fn, deriv_fn


def _num_args(points: Array, rpm, height, spec: MmsSpec, bounds: DomainBounds,
              props: FluidProperties):
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = p.shape[0]
    rpm_arr = np.broadcast_to(np.asarray(rpm, dtype=np.float64), (n,))
    h_arr = np.broadcast_to(np.asarray(height, dtype=np.float64), (n,))
    gmag = -props.gravity[2]
    const = (
        bounds.radius, spec.c_psi, spec.c_theta, spec.k0, spec.k1,
        spec.w0, spec.w1, spec.delta, props.rho, gmag, props.nu,
    )
    return p, rpm_arr, h_arr, const


def mms_fields(points, rpm, height, spec: MmsSpec, bounds: DomainBounds,
               props: FluidProperties = FluidProperties()) -> Array:
    """Exact field values [N, 7]; defined everywhere in the tank.

    Above the free surface the dynamic parts are held at their surface
    value (zero for the velocities) while the hydrostatic pressure and the
    phase indicator keep their closed forms.
    """
    single = np.asarray(points).ndim == 1
    p, rpm_arr, h_arr, const = _num_args(points, rpm, height, spec, bounds, props)
    value_fn, _ = _compiled()
    z_eff = np.minimum(p[:, 2], h_arr)
    u, v, w, p_dyn, k, om = [
        np.broadcast_to(np.asarray(a, dtype=np.float64), (p.shape[0],))
        for a in value_fn(p[:, 0], p[:, 1], z_eff, rpm_arr, h_arr, *const)
    ]
    gmag = -props.gravity[2]
    p_val = props.rho * gmag * (h_arr - p[:, 2]) + p_dyn
    alpha = 0.5 * (1.0 - np.tanh((p[:, 2] - h_arr) / spec.delta))
    out = np.column_stack([alpha, u, v, w, p_val, k, om])
    return out[0] if single else out


def mms_derivatives(points, rpm, height, spec: MmsSpec, bounds: DomainBounds,
                    props: FluidProperties = FluidProperties()):
    """Exact (fields, grad [N,7,3], lap [N,7]) for liquid-region points."""
    single = np.asarray(points).ndim == 1
    p, rpm_arr, h_arr, const = _num_args(points, rpm, height, spec, bounds, props)
    _, deriv_fn = _compiled()
    raw = deriv_fn(p[:, 0], p[:, 1], p[:, 2], rpm_arr, h_arr, *const)
    n = p.shape[0]
    raw = [np.broadcast_to(np.asarray(a, dtype=np.float64), (n,)) for a in raw]
    fields = np.column_stack(raw[:7])
    grad = np.stack([np.column_stack(raw[7 + 3 * i : 10 + 3 * i]) for i in range(7)], axis=1)
    lap = np.column_stack(raw[28:35])
    if single:
        return fields[0], grad[0], lap[0]
    return fields, grad, lap


# ---------------------------------------------------------------------------
# manufactured forcing and transport sources


@dataclass(frozen=True)
class MmsExactModel:
    """Model-shaped wrapper around the exact fields.

    Implements the surrogate evaluation surface (predict / net_std /
    spatial_derivs plus stats), which makes it a drop-in reference for
    metrics, profiles and tracer runs.
    """

    spec: MmsSpec
    bounds: DomainBounds
    stats: "object"  # OutputStats; typed loosely to avoid an import cycle
    props: FluidProperties = FluidProperties()

    def _mu(self, points, mu):
        n = np.atleast_2d(np.asarray(points)).shape[0]
        m = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        if m.shape[0] == 1 and n > 1:
            m = np.broadcast_to(m, (n, 2))
        return m

    def predict(self, points, mu) -> Array:
        m = self._mu(points, mu)
        return mms_fields(points, m[:, 0], m[:, 1], self.spec, self.bounds, self.props)

    def net_std(self, points, mu) -> Array:
        return self.stats.standardize(np.atleast_2d(self.predict(points, mu)))

    def spatial_derivs(self, points, mu):
        m = self._mu(points, mu)
        return mms_derivatives(
            points, m[:, 0], m[:, 1], self.spec, self.bounds, self.props
        )


def mms_forcing(points, rpm, height, spec: MmsSpec, bounds: DomainBounds,
                props: FluidProperties = FluidProperties(),
                zones: RotatingZoneSpec = RotatingZoneSpec(),
                consts: ClosureConstants = ClosureConstants()):
    """Body force and (S_k, S_omega) that make the manufactured fields exact.

    Each governing equation is written out here term by term from its
    statement, using the analytic derivatives; the residual operators in
    `physics` are intentionally not reused.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    single = np.asarray(points).ndim == 1
    fields, grad, lap = mms_derivatives(p, rpm, height, spec, bounds, props)
    x, y = p[:, 0], p[:, 1]
    oz = physics.omega_z_at(p, zones, rpm)

    u, v, w = fields[:, 1], fields[:, 2], fields[:, 3]
    k, om = fields[:, 5], fields[:, 6]
    du, dv, dw = grad[:, 1], grad[:, 2], grad[:, 3]
    dp, dk, dom = grad[:, 4], grad[:, 5], grad[:, 6]
    lap_u, lap_v, lap_w = lap[:, 1], lap[:, 2], lap[:, 3]
    lap_k, lap_om = lap[:, 5], lap[:, 6]

    # analytic fields keep k and omega strictly positive: no clamps
    nut = k / om
    dnut = [(dk[:, d] * om - k * dom[:, d]) / om**2 for d in range(3)]

    u_rel = u + oz * y
    v_rel = v - oz * x
    visc = props.nu + nut

    def advect(dq):
        return u_rel * dq[:, 0] + v_rel * dq[:, 1] + w * dq[:, 2]

    def nut_dot(dq):
        return dnut[0] * dq[:, 0] + dnut[1] * dq[:, 1] + dnut[2] * dq[:, 2]

    f_x = advect(du) - oz * v + dp[:, 0] / props.rho - visc * lap_u - nut_dot(du)
    f_y = advect(dv) + oz * u + dp[:, 1] / props.rho - visc * lap_v - nut_dot(dv)
    f_z = advect(dw) + dp[:, 2] / props.rho - visc * lap_w - nut_dot(dw)
    forcing = np.stack([f_x, f_y, f_z], axis=1)

    vel_grad = grad[:, 1:4, :]  # [N, i, j] = d u_i / d x_j
    strain = 0.5 * (vel_grad + np.swapaxes(vel_grad, 1, 2))
    s2 = 2.0 * np.sum(strain**2, axis=(1, 2))
    g_k = nut * s2
    y_k = consts.beta_star * k * om
    g_om = consts.alpha_omega * (om / k) * g_k
    y_om = consts.beta * om**2

    s_k = (
        advect(dk)
        - (props.nu + nut / consts.sigma_k) * lap_k
        - nut_dot(dk) / consts.sigma_k
        - g_k
        + y_k
    )
    s_om = (
        advect(dom)
        - (props.nu + nut / consts.sigma_omega) * lap_om
        - nut_dot(dom) / consts.sigma_omega
        - g_om
        + y_om
    )
    if single:
        return forcing[0], s_k[0], s_om[0]
    return forcing, s_k, s_om
