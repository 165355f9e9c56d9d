import numpy as np
import pytest

from vesselflow import mms, physics
from vesselflow.model import DomainBounds

from util import assert_close, rel_err


BOUNDS = DomainBounds()
SPEC = mms.MmsSpec()
PROPS = physics.FluidProperties()
ZONES = physics.RotatingZoneSpec.default()


def random_liquid_points(rng, n, height, r_max=None, z_margin=0.05):
    r_max = r_max if r_max is not None else BOUNDS.radius
    s = np.sqrt(rng.uniform(0.01, 0.96, n)) * r_max
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(z_margin, height - z_margin, n)
    return np.column_stack([s * np.cos(theta), s * np.sin(theta), z])


def test_axis_has_no_horizontal_velocity():
    f = mms.mms_fields([0.0, 0.0, 2.0], 100.0, 4.0, SPEC, BOUNDS)
    assert f[1] == 0.0 and f[2] == 0.0


def test_wall_velocities_vanish():
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta = rng.uniform(0, 2 * np.pi)
        p = [BOUNDS.radius * np.cos(theta), BOUNDS.radius * np.sin(theta), 2.0]
        f = mms.mms_fields(p, 120.0, 4.0, SPEC, BOUNDS)
        assert np.max(np.abs(f[1:4])) < 1e-12


def test_velocities_vanish_at_and_above_surface():
    h = 3.0
    for z in (h, h + 0.3, h + 2.0):
        f = mms.mms_fields([0.4, 0.1, z], 90.0, h, SPEC, BOUNDS)
        assert np.max(np.abs(f[1:4])) < 1e-12


def test_field_invariants():
    rng = np.random.default_rng(1)
    n = 2000
    pts = random_liquid_points(rng, n, 6.0, z_margin=0.0)
    pts[:, 2] = rng.uniform(0, BOUNDS.tank_height, n)  # include gas region
    f = mms.mms_fields(pts, 100.0, 4.0, SPEC, BOUNDS)
    assert np.all(f[:, 0] >= 0.0) and np.all(f[:, 0] <= 1.0)
    assert np.all(f[:, 5] > 0.0)
    assert np.all(f[:, 6] > 0.0)


def test_analytic_divergence_is_zero():
    rng = np.random.default_rng(2)
    for rpm, h in ((60.0, 2.0), (100.0, 4.5), (150.0, 6.5)):
        pts = random_liquid_points(rng, 1000, h)
        _, grad, _ = mms.mms_derivatives(pts, rpm, h, SPEC, BOUNDS)
        div = physics.continuity_residual(grad)
        assert np.max(np.abs(div)) < 1e-10


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(3)
    rpm, h = 110.0, 4.0
    pts = random_liquid_points(rng, 20, h, r_max=0.9 * BOUNDS.radius, z_margin=0.2)
    fields, grad, lap = mms.mms_derivatives(pts, rpm, h, SPEC, BOUNDS)
    assert_close(fields, mms.mms_fields(pts, rpm, h, SPEC, BOUNDS), rtol=1e-12)
    step = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = step
        fp = mms.mms_fields(pts + e, rpm, h, SPEC, BOUNDS)
        fm = mms.mms_fields(pts - e, rpm, h, SPEC, BOUNDS)
        assert_close(grad[:, :, d], (fp - fm) / (2 * step), rtol=1e-6, atol=1e-4)
    # second differences need a larger step: roundoff scales as eps |f| / h^2
    step = 1e-3
    lap_fd = np.zeros_like(lap)
    for d in range(3):
        e = np.zeros(3)
        e[d] = step
        fp = mms.mms_fields(pts + e, rpm, h, SPEC, BOUNDS)
        fm = mms.mms_fields(pts - e, rpm, h, SPEC, BOUNDS)
        lap_fd += (fp - 2 * fields + fm) / step**2
    assert_close(lap, lap_fd, rtol=1e-4, atol=1e-3)


def test_master_oracle_all_residuals_vanish():
    """Manufactured fields + manufactured forcing satisfy all four equations."""
    rng = np.random.default_rng(4)
    conditions = [(57.0, 1.8), (85.0, 3.1), (100.0, 4.0), (128.0, 5.2), (150.0, 6.5)]
    for rpm, h in conditions:
        pts = random_liquid_points(rng, 1000, h)
        fields, grad, lap = mms.mms_derivatives(pts, rpm, h, SPEC, BOUNDS)
        forcing, s_k, s_w = mms.mms_forcing(pts, rpm, h, SPEC, BOUNDS, PROPS, ZONES)
        bundle = physics.residual_bundle(
            fields, grad, lap, pts, rpm, PROPS, ZONES, forcing, sources=(s_k, s_w)
        )
        assert np.max(np.abs(bundle.r_cont)) < 1e-8
        assert np.max(np.abs(bundle.r_mom)) < 1e-8
        assert np.max(np.abs(bundle.r_k)) < 1e-8
        assert np.max(np.abs(bundle.r_omega)) < 1e-8


def test_quiescent_limit_forcing_is_gravity():
    rng = np.random.default_rng(5)
    pts = random_liquid_points(rng, 50, 3.0)
    forcing, s_k, s_w = mms.mms_forcing(pts, 1e-4, 3.0, SPEC, BOUNDS, PROPS, ZONES)
    assert np.max(np.abs(forcing - PROPS.gravity)) < 1e-8
    assert np.max(np.abs(s_k)) < 1e-8


def test_eddy_viscosity_regime():
    rng = np.random.default_rng(6)
    pts = random_liquid_points(rng, 2000, 4.0)
    f = mms.mms_fields(pts, 100.0, 4.0, SPEC, BOUNDS)
    nut = f[:, 5] / f[:, 6]
    ratio = nut / PROPS.nu
    assert np.median(ratio) > 10.0 and np.max(ratio) < 1e4


def test_velocity_scale_is_tip_speed_like():
    rng = np.random.default_rng(7)
    pts = random_liquid_points(rng, 5000, 4.0)
    f = mms.mms_fields(pts, 100.0, 4.0, SPEC, BOUNDS)
    speed = np.linalg.norm(f[:, 1:4], axis=1)
    u_tip = mms.tip_speed(100.0, BOUNDS.tank_diameter)
    assert 0.05 * u_tip < np.max(speed) < 1.5 * u_tip
