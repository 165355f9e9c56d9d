import numpy as np
import pytest

from vesselflow import autodiff as ad
from vesselflow import dataset as ds
from vesselflow import model as md
from vesselflow import objective as ob
from vesselflow import trainer as tr
from vesselflow.model import DomainBounds


BOUNDS = DomainBounds()

DESK_MODEL = md.ModelConfig(depth=3, width=16, sigma_b=0.5, fourier_mode="spatial")


def tiny_data(n_conditions=3, n_points=600, seed=0):
    conds = ds.sample_conditions(n_conditions, BOUNDS, seed)
    return ds.generate_dataset(conds, n_points, seed=seed)


def scalar_adam_oracle(theta0, lr, n_steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent scalar recurrence for f(theta) = theta^2."""
    theta, m, v = theta0, 0.0, 0.0
    for t in range(1, n_steps + 1):
        g = 2.0 * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        vh = v / (1 - beta2**t)
        theta -= lr * mh / (np.sqrt(vh) + eps)
    return theta


def one_param_net(value):
    return ad.DenseParams(((np.array([[value]]), np.array([0.0])),))


def test_adam_zero_gradient_is_identity():
    params = one_param_net(0.3)
    state = tr.AdamState.zeros(params)
    zero = ad.ParamGradient(((np.zeros((1, 1)), np.zeros(1)),))
    new, state = tr.adam_step(params, zero, state, lr=0.1)
    assert np.array_equal(new.layers[0][0], params.layers[0][0])
    assert state.t == 1
    assert np.all(state.m[0][0] == 0.0)


def test_adam_first_step_magnitude_is_lr():
    params = one_param_net(1.0)
    state = tr.AdamState.zeros(params)
    grad = ad.ParamGradient(((np.array([[0.37]]), np.array([0.0])),))
    new, _ = tr.adam_step(params, grad, state, lr=0.01)
    assert new.layers[0][0][0, 0] == pytest.approx(1.0 - 0.01, rel=1e-6)


def test_adam_quadratic_matches_scalar_recurrence():
    params = one_param_net(1.0)
    state = tr.AdamState.zeros(params)
    for _ in range(100):
        theta = params.layers[0][0][0, 0]
        grad = ad.ParamGradient(((np.array([[2.0 * theta]]), np.array([0.0])),))
        params, state = tr.adam_step(params, grad, state, lr=0.1)
    final = params.layers[0][0][0, 0]
    assert abs(final) < 0.05
    assert final == pytest.approx(scalar_adam_oracle(1.0, 0.1, 100), abs=1e-12)


def test_adam_rejects_non_finite_gradient():
    params = one_param_net(1.0)
    state = tr.AdamState.zeros(params)
    bad = ad.ParamGradient(((np.array([[np.nan]]), np.array([0.0])),))
    with pytest.raises(ad.DivergenceError):
        tr.adam_step(params, bad, state, lr=0.1)


def test_lr_schedule():
    cfg = tr.TrainConfig(model=DESK_MODEL)
    assert tr.lr_at(0, cfg) == pytest.approx(1e-3)
    assert tr.lr_at(99, cfg) == pytest.approx(1e-3)
    assert tr.lr_at(100, cfg) == pytest.approx(7.5e-4)
    assert tr.lr_at(999, cfg) == pytest.approx(1e-3 * 0.75**9)
    lrs = [tr.lr_at(e, cfg) for e in range(400)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=2000, model=DESK_MODEL)
    with pytest.raises(ValueError):
        tr.TrainConfig(lr0=-1.0, model=DESK_MODEL)
    assert tr.TrainConfig(batch=5000, model=DESK_MODEL).residual_points == 5000


def test_zero_epochs_returns_initial_model():
    data = tiny_data()
    cfg = tr.TrainConfig(epochs=0, batch=500, seed=3, model=DESK_MODEL)
    result = tr.train(data, cfg)
    assert result.history == []
    reference = md.init_model(
        BOUNDS,
        type(cfg.model)(**{**cfg.model.__dict__, "seed": 3}),
        stats=md.OutputStats.from_targets(data.targets),
    )
    for (Wa, ba), (Wb, bb) in zip(result.model.params.layers, reference.params.layers):
        assert np.array_equal(Wa, Wb) and np.array_equal(ba, bb)


def test_train_is_deterministic():
    data = tiny_data()
    cfg = tr.TrainConfig(epochs=3, batch=500, seed=5, model=DESK_MODEL)
    a = tr.train(data, cfg)
    b = tr.train(data, cfg)
    assert a.history == b.history
    for (Wa, _), (Wb, _) in zip(a.model.params.layers, b.model.params.layers):
        assert np.array_equal(Wa, Wb)


def test_train_seed_changes_run():
    data = tiny_data()
    a = tr.train(data, tr.TrainConfig(epochs=2, batch=500, seed=0, model=DESK_MODEL))
    b = tr.train(data, tr.TrainConfig(epochs=2, batch=500, seed=1, model=DESK_MODEL))
    assert a.history != b.history


def test_mlp_two_condition_smoke_regression():
    """Frozen regression bound: a small MLP fits a 2-condition split well."""
    from vesselflow import evaluation as ev

    data = tiny_data(n_conditions=2, n_points=4000, seed=7)
    cfg = tr.TrainConfig(
        epochs=200,
        batch=1000,
        seed=0,
        model=md.ModelConfig(depth=3, width=32, sigma_b=0.5, fourier_mode="spatial"),
    )
    result = tr.train(data, cfg)
    train_mse = ev.test_mse(result.model, data)["mse_aggregate"]
    assert train_mse < 0.05
    first = np.median([h["total"] for h in result.history[:10]])
    last = np.median([h["total"] for h in result.history[-10:]])
    assert last < first


def test_constrained_training_reduces_continuity_loss():
    data = tiny_data(n_conditions=2, n_points=1000, seed=2)
    cfg = tr.TrainConfig(
        variant=ob.Variant.C_MLP,
        epochs=30,
        batch=1000,
        m_residual=500,
        seed=0,
        model=DESK_MODEL,
    )
    result = tr.train(data, cfg)
    assert result.history[-1]["L_cont"] > 0.0
    early = np.median([h["L_cont"] for h in result.history[:5]])
    late = np.median([h["L_cont"] for h in result.history[-5:]])
    assert late < early


def test_divergence_aborts_with_report():
    data = tiny_data()
    cfg = tr.TrainConfig(epochs=3, batch=500, seed=0, lr0=1e200, model=DESK_MODEL)
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.train(data, cfg)
    assert info.value.epoch >= 0
    assert isinstance(info.value.history, list)


def test_fixed_residual_pool_mode():
    data = tiny_data(n_conditions=2, n_points=500, seed=4)
    cfg = tr.TrainConfig(
        variant=ob.Variant.C_MLP,
        epochs=2,
        batch=500,
        m_residual=200,
        residual_resample="fixed",
        seed=0,
        model=DESK_MODEL,
    )
    result = tr.train(data, cfg)
    assert len(result.history) == 2


def test_run_artifacts_round_trip(tmp_path):
    data = tiny_data()
    cfg = tr.TrainConfig(epochs=2, batch=500, seed=0, checkpoint_every=1,
                         model=DESK_MODEL)
    tr.train(data, cfg, run_dir=tmp_path)
    assert (tmp_path / "history.csv").exists()
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()
    assert (tmp_path / "checkpoints" / "epoch_0002.ckpt").exists()
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,L_data,L_cont,L_mom,total"
    loaded = md.load_checkpoint(tmp_path / "checkpoints" / "final.ckpt")
    assert loaded.params.n_out == 7
    cfg2 = tr.config_from_dict(tr.config_to_dict(cfg))
    assert cfg2 == cfg


def test_run_study_combinatorics_and_failures(tmp_path):
    data = tiny_data(n_conditions=6, n_points=400, seed=1)
    template = tr.TrainConfig(epochs=2, batch=400, m_residual=200, model=DESK_MODEL)
    study = tr.StudyConfig(
        sizes=(2, 4),
        seeds=(0, 1),
        variants=(ob.Variant.MLP, ob.Variant.C_MLP),
        template=template,
    )
    report = tr.run_study(data, study, out_dir=tmp_path)
    assert len(report["runs"]) == 8
    assert len(report["aggregate"]) == 4
    assert all(r["status"] == "ok" for r in report["runs"])
    tr.write_study_csv(report, tmp_path / "runs.csv", tmp_path / "agg.csv")
    lines = (tmp_path / "runs.csv").read_text().splitlines()
    assert len(lines) == 9

    diverging = tr.StudyConfig(
        sizes=(2,),
        seeds=(0,),
        variants=(ob.Variant.MLP,),
        template=tr.TrainConfig(epochs=2, batch=400, lr0=1e200, model=DESK_MODEL),
    )
    report = tr.run_study(data, diverging, out_dir=None)
    assert report["runs"][0]["status"].startswith("diverged")
    assert report["aggregate"][0]["n_runs"] == 0


def test_single_run_study_aggregate_matches_run():
    data = tiny_data(n_conditions=4, n_points=300, seed=5)
    template = tr.TrainConfig(epochs=2, batch=300, model=DESK_MODEL)
    study = tr.StudyConfig(
        sizes=(2,), seeds=(0,), variants=(ob.Variant.MLP,), template=template
    )
    report = tr.run_study(data, study)
    run = report["runs"][0]
    agg = report["aggregate"][0]
    assert agg["mse_aggregate_median"] == run["mse_aggregate"]
    assert agg["mse_aggregate_iqr"] == 0.0


def test_study_config_validation():
    template = tr.TrainConfig(model=DESK_MODEL)
    with pytest.raises(ValueError):
        tr.StudyConfig(sizes=(4, 2), seeds=(0,), variants=(ob.Variant.MLP,),
                       template=template)
    with pytest.raises(ValueError):
        tr.StudyConfig(sizes=(2,), seeds=(), variants=(ob.Variant.MLP,),
                       template=template)
