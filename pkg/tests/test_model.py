import dataclasses

import numpy as np
import pytest

from vesselflow import autodiff as ad
from vesselflow import model as md

from util import assert_close, rel_err


BOUNDS = md.DomainBounds()


def small_model(seed=0, depth=3, width=16, **kw):
    cfg = md.ModelConfig(depth=depth, width=width, seed=seed, **kw)
    return md.init_model(BOUNDS, cfg)


def zero_params_like(params):
    return ad.DenseParams(
        tuple((np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers)
    )


def test_normalize_center_is_zero():
    b = BOUNDS
    center = [0.0, 0.0, b.tank_height / 2]
    mu = [(b.rpm_min + b.rpm_max) / 2, (b.height_min + b.height_max) / 2]
    assert np.allclose(md.normalize_input(center, mu, b), 0.0)


def test_normalize_corner_maps_to_bound():
    b = BOUNDS
    v = md.normalize_input([b.radius, 0.3, 0.0], [150.0, 6.5], b)
    assert v[0] == pytest.approx(1.0)
    assert v[2] == pytest.approx(-1.0)
    assert v[3] == pytest.approx(1.0)
    assert v[4] == pytest.approx(1.0)


def test_normalize_round_trip():
    rng = np.random.default_rng(0)
    b = BOUNDS
    pts = rng.uniform(-1, 1, (100, 3)) * [b.radius, b.radius, b.tank_height / 2]
    pts[:, 2] += b.tank_height / 2
    mu = np.column_stack(
        [rng.uniform(b.rpm_min, b.rpm_max, 100), rng.uniform(b.height_min, b.height_max, 100)]
    )
    v = md.normalize_input(pts, mu, b)
    back = md.denormalize_input(v, b)
    assert rel_err(back, np.concatenate([pts, mu], axis=1)) < 1e-12


def test_normalize_rejects_non_finite():
    with pytest.raises(ad.DomainError):
        md.normalize_input([np.inf, 0, 0], [100.0, 3.0], BOUNDS)


def test_fourier_at_zero():
    model = small_model()
    m = model.fmap.B.shape[0]
    f = md.fourier_features(np.zeros(5), model.fmap)
    assert np.allclose(f[:m], 1.0)
    assert np.allclose(f[m:], 0.0)


def test_fourier_range_and_width():
    model = small_model(width=24)
    rng = np.random.default_rng(1)
    f = md.fourier_features(rng.uniform(-1, 1, (50, 5)), model.fmap)
    assert f.shape[1] == model.config.width  # feature count matches MLP width
    assert np.all(f >= -1.0) and np.all(f <= 1.0)


def test_fourier_derivative_finite_difference():
    model = small_model()
    rng = np.random.default_rng(2)
    v = rng.uniform(-0.5, 0.5, 5)
    h = 1e-6
    for j in range(5):
        e = np.zeros(5)
        e[j] = 1.0
        fd = (
            md.fourier_features(v + h * e, model.fmap)
            - md.fourier_features(v - h * e, model.fmap)
        ) / (2 * h)
        B = model.fmap.B
        theta = 2 * np.pi * (B @ v)
        exact = np.concatenate(
            [-np.sin(theta) * 2 * np.pi * B[:, j], np.cos(theta) * 2 * np.pi * B[:, j]]
        )
        assert_close(fd, exact, rtol=1e-8, atol=1e-6)


def test_seeded_init_is_deterministic():
    a = small_model(seed=7)
    b = small_model(seed=7)
    assert np.array_equal(a.fmap.B, b.fmap.B)
    for (Wa, ba), (Wb, bb) in zip(a.params.layers, b.params.layers):
        assert np.array_equal(Wa, Wb) and np.array_equal(ba, bb)
    c = small_model(seed=8)
    assert not np.array_equal(a.fmap.B, c.fmap.B)


def test_zero_network_predicts_the_mean():
    model = small_model()
    stats = md.OutputStats(np.arange(7.0), np.ones(7) * 2.0)
    model = md.with_stats(md.with_params(model, zero_params_like(model.params)), stats)
    y = md.predict(model, [0.3, -0.2, 1.0], [80.0, 4.0])
    assert np.allclose(y, np.arange(7.0))


def test_predict_is_continuous():
    model = small_model(seed=3)
    p = np.array([0.2, 0.1, 2.0])
    mu = [100.0, 3.5]
    base = md.predict(model, p, mu)
    for delta in (1e-3, 1e-5, 1e-7):
        moved = md.predict(model, p + [delta, 0, 0], mu)
        assert np.max(np.abs(moved - base)) < 1e3 * delta


def test_spatial_derivs_zero_network():
    model = small_model()
    model = md.with_params(model, zero_params_like(model.params))
    _, grad, lap = md.spatial_derivs(model, [0.1, 0.2, 1.5], [70.0, 2.5])
    assert np.all(grad == 0.0) and np.all(lap == 0.0)


def test_spatial_derivs_match_finite_differences():
    rng = np.random.default_rng(4)
    for seed in range(3):
        model = small_model(seed=seed)
        stats = md.OutputStats(rng.standard_normal(7), rng.uniform(0.5, 2.0, 7))
        model = md.with_stats(model, stats)
        for _ in range(4):
            p = np.array(
                [rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(0.5, 7.5)]
            )
            mu = np.array([rng.uniform(50, 150), rng.uniform(1.5, 6.5)])
            _, grad, lap = md.spatial_derivs(model, p, mu)
            h = 1e-4
            lap_fd = np.zeros(7)
            for d in range(3):
                e = np.zeros(3)
                e[d] = h
                yp = md.predict(model, p + e, mu)
                ym = md.predict(model, p - e, mu)
                y0 = md.predict(model, p, mu)
                assert_close(grad[:, d], (yp - ym) / (2 * h), rtol=1e-5, atol=1e-7)
                lap_fd += (yp - 2 * y0 + ym) / h**2
            assert_close(lap, lap_fd, rtol=1e-4, atol=1e-5)


def test_derivative_scales_with_z_half_range():
    cfg = md.ModelConfig(depth=2, width=12, seed=5)
    b1 = BOUNDS
    b2 = dataclasses.replace(b1, tank_height=2 * b1.tank_height)
    m1 = md.init_model(b1, cfg)
    m2 = dataclasses.replace(m1, bounds=b2)  # same network, wider z range
    v = np.array([0.1, -0.2, 0.3, 0.0, 0.0])
    p1 = md.denormalize_input(v, b1)
    p2 = md.denormalize_input(v, b2)
    _, g1, _ = md.spatial_derivs(m1, p1[:3], p1[3:])
    _, g2, _ = md.spatial_derivs(m2, p2[:3], p2[3:])
    assert rel_err(g2[:, 2], g1[:, 2] / 2.0) < 1e-12


def test_spatial_mode_shapes():
    model = small_model(fourier_mode="spatial", width=20, depth=2)
    assert model.params.n_in == 20 + 2
    y = md.predict(model, [0.1, 0.1, 2.0], [60.0, 3.0])
    assert y.shape == (7,)
    _, grad, lap = md.spatial_derivs(model, [0.1, 0.1, 2.0], [60.0, 3.0])
    assert grad.shape == (7, 3) and lap.shape == (7,)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = small_model(seed=11, depth=4, width=32)
    stats = md.OutputStats(np.random.default_rng(1).standard_normal(7), np.full(7, 0.37))
    model = md.with_stats(model, stats)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(model, path)
    loaded = md.load_checkpoint(path)
    assert np.array_equal(loaded.fmap.B, model.fmap.B)
    assert np.array_equal(loaded.stats.mean, model.stats.mean)
    assert np.array_equal(loaded.stats.std, model.stats.std)
    for (Wa, ba), (Wb, bb) in zip(loaded.params.layers, model.params.layers):
        assert np.array_equal(Wa, Wb) and np.array_equal(ba, bb)
    path2 = tmp_path / "model2.ckpt"
    md.save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()
