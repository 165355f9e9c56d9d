"""Training loop and the multi-size / multi-seed study orchestrator.

One epoch is a full pass over a seeded permutation of the labeled points
in mini-batches; constrained variants draw a fresh set of collocation
points every step (a fixed pool is available behind a config switch).
Adam with step-decayed learning rate, advanced once per epoch.  The
parameter update sequence is strictly serial; study-level parallelism
runs whole jobs in separate processes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import evaluation
from . import model as md
from . import objective as ob
from .dataset import ConditionDataset, sample_residual_points, split
from .objective import ResidualContext, Variant

HISTORY_COLUMNS = ("epoch", "lr", "L_data", "L_cont", "L_mom", "total")


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.MLP
    epochs: int = 300
    batch: int = 5000
    lr0: float = 1e-3
    step_size: int = 100        # epochs between learning-rate drops
    gamma: float = 0.75
    lambda_pde: float = ob.LAMBDA_PDE
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m_residual: int | None = None       # collocation points per step; None = batch
    residual_resample: str = "fresh"    # or "fixed": one pool for the whole run
    grad_clip: float | None = None
    checkpoint_every: int = 0           # epochs; 0 keeps only the final model
    model: md.ModelConfig = md.ModelConfig()

    def __post_init__(self):
        if self.lr0 <= 0 or not (0 < self.gamma <= 1) or self.batch < 1:
            raise ValueError("need lr0 > 0, 0 < gamma <= 1, batch >= 1")
        if not (0 <= self.epochs <= 1000):
            raise ValueError("epochs must lie in [0, 1000]")
        if self.residual_resample not in ("fresh", "fixed"):
            raise ValueError("residual_resample must be 'fresh' or 'fixed'")

    @property
    def residual_points(self) -> int:
        return self.batch if self.m_residual is None else self.m_residual


@dataclass
class RunResult:
    model: md.SurrogateModel
    history: list
    wall_time: float
    seed: int
    metrics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StudyConfig:
    sizes: tuple[int, ...]
    seeds: tuple[int, ...]
    variants: tuple[Variant, ...]
    template: TrainConfig
    workers: int = 1

    def __post_init__(self):
        if list(self.sizes) != sorted(set(self.sizes)):
            raise ValueError("sizes must be strictly increasing")
        if not self.seeds or not self.variants:
            raise ValueError("need at least one seed and one variant")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite during training."""

    def __init__(self, message, epoch: int, step: int, history: list):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.history = history


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params: ad.DenseParams) -> "AdamState":
        return cls(
            m=[(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers],
            v=[(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers],
        )


def adam_step(
    params: ad.DenseParams,
    grad: ad.ParamGradient,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ad.DenseParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    for gW, gb in grad.layers:
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise ad.DivergenceError("non-finite gradient in adam_step", term="gradient")
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_layers, new_m, new_v = [], [], []
    for (W, b), (gW, gb), (mW, mb), (vW, vb) in zip(
        params.layers, grad.layers, state.m, state.v
    ):
        mW = beta1 * mW + (1 - beta1) * gW
        mb = beta1 * mb + (1 - beta1) * gb
        vW = beta2 * vW + (1 - beta2) * gW * gW
        vb = beta2 * vb + (1 - beta2) * gb * gb
        W = W - lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
        b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ad.DivergenceError("parameters became non-finite", term="update")
        new_layers.append((W, b))
        new_m.append((mW, mb))
        new_v.append((vW, vb))
    return ad.DenseParams(tuple(new_layers)), AdamState(m=new_m, v=new_v, t=t)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step decay: lr0 * gamma ** floor(epoch / step_size), epoch from 0."""
    return config.lr0 * config.gamma ** (epoch // config.step_size)


def clip_gradient(grad: ad.ParamGradient, max_norm: float) -> ad.ParamGradient:
    total = math.sqrt(
        sum(float(np.sum(gW * gW) + np.sum(gb * gb)) for gW, gb in grad.layers)
    )
    if total <= max_norm:
        return grad
    scale = max_norm / total
    return ad.ParamGradient(
        tuple((gW * scale, gb * scale) for gW, gb in grad.layers)
    )


# ---------------------------------------------------------------------------
# single run


def _default_rctx(dataset: ConditionDataset) -> ResidualContext:
    """MMS forcing when the dataset was manufactured, else gravity."""
    from .physics import RotatingZoneSpec

    zones = RotatingZoneSpec.default(dataset.bounds.tank_diameter)
    if dataset.meta.get("generator") == "mms":
        from .mms import MmsSpec

        spec = MmsSpec(**dataset.meta["spec"])
        return ob.mms_residual_context(spec, dataset.bounds, zones=zones)
    return ResidualContext(zones=zones)


def train(
    train_ds: ConditionDataset,
    config: TrainConfig,
    rctx: ResidualContext | None = None,
    run_dir: str | Path | None = None,
) -> RunResult:
    """Train one surrogate on a condition split; deterministic given the seed.

    BLAS pools are limited to one thread for the duration of the run: the
    training graph interleaves small matrix products with elementwise
    kernels, where thread spin-waiting hurts, and a fixed thread count
    keeps reduction order (hence results) reproducible.
    """
    if train_ds.n_conditions == 0 or train_ds.n_points == 0:
        raise ValueError("empty training split")
    with threadpool_limits(limits=1):
        return _train_serial(train_ds, config, rctx, run_dir)


def _train_serial(
    train_ds: ConditionDataset,
    config: TrainConfig,
    rctx: ResidualContext | None,
    run_dir,
) -> RunResult:
    started = time.perf_counter()
    rctx = rctx if rctx is not None else _default_rctx(train_ds)
    stats = md.OutputStats.from_targets(train_ds.targets)
    model_cfg = dataclasses.replace(config.model, seed=config.seed)
    model = md.init_model(train_ds.bounds, model_cfg, stats=stats)

    points, mu, targets = train_ds.flat()
    n_total = points.shape[0]
    steps_per_epoch = math.ceil(n_total / config.batch)

    ss = np.random.SeedSequence(config.seed)
    batch_ss, residual_ss = ss.spawn(2)
    batch_rng = np.random.default_rng(batch_ss)
    residual_rng = np.random.default_rng(residual_ss)

    fixed_pool = None
    if config.variant.uses_pde and config.residual_resample == "fixed":
        fixed_pool = sample_residual_points(
            config.residual_points, train_ds.bounds, rctx.zones, residual_rng
        )

    params = model.params
    state = AdamState.zeros(params)
    history: list[dict] = []
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        perm = batch_rng.permutation(n_total)
        sums = {"data": 0.0, "continuity": 0.0, "momentum": 0.0, "total": 0.0}
        for step in range(steps_per_epoch):
            idx = perm[step * config.batch : (step + 1) * config.batch]
            data_batch = (points[idx], mu[idx], targets[idx])
            if config.variant.uses_pde:
                residual_batch = (
                    fixed_pool
                    if fixed_pool is not None
                    else sample_residual_points(
                        config.residual_points,
                        train_ds.bounds,
                        rctx.zones,
                        residual_rng,
                    )
                )
            else:
                residual_batch = None
            report: dict = {}
            current = md.with_params(model, params)

            def build(tape):
                return ob.total_loss_taped(
                    tape,
                    current,
                    data_batch,
                    residual_batch,
                    config.variant,
                    rctx,
                    lambda_pde=config.lambda_pde,
                    out_report=report,
                )

            try:
                _, grad = ad.grad_objective(params, build)
                if config.grad_clip is not None:
                    grad = clip_gradient(grad, config.grad_clip)
                params, state = adam_step(
                    params, grad, state, lr, config.beta1, config.beta2, config.adam_eps
                )
            except (ad.DivergenceError, ad.DomainError) as err:
                raise TrainingDiverged(
                    f"diverged at epoch {epoch} step {step}: {err} "
                    f"(last finite epoch {epoch - 1})",
                    epoch=epoch,
                    step=step,
                    history=history,
                ) from err
            sums["data"] += report["data"]
            sums["continuity"] += report["pde_raw"].get("continuity", 0.0)
            sums["momentum"] += report["pde_raw"].get("momentum", 0.0)
            sums["total"] += report["total"]
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "L_data": sums["data"] / steps_per_epoch,
                "L_cont": sums["continuity"] / steps_per_epoch,
                "L_mom": sums["momentum"] / steps_per_epoch,
                "total": sums["total"] / steps_per_epoch,
            }
        )
        if (
            run_dir is not None
            and config.checkpoint_every
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            md.save_checkpoint(
                md.with_params(model, params),
                run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt",
            )

    final = md.with_params(model, params)
    result = RunResult(
        model=final,
        history=history,
        wall_time=time.perf_counter() - started,
        seed=config.seed,
    )
    if run_dir is not None:
        write_run_artifacts(result, config, run_dir)
    return result


def write_run_artifacts(result: RunResult, config: TrainConfig, run_dir) -> None:
    """Run directory: config snapshot, final checkpoint, history CSV, metrics."""
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
    md.save_checkpoint(result.model, run_dir / "checkpoints" / "final.ckpt")
    write_history_csv(result.history, run_dir / "history.csv")
    with open(run_dir / "metrics.json", "w") as f:
        json.dump(result.metrics, f, indent=2, sort_keys=True)


def write_history_csv(history: list, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(
                [row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]]
            )


def config_to_dict(config: TrainConfig) -> dict:
    out = dataclasses.asdict(config)
    out["variant"] = config.variant.value
    return out


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    data["variant"] = Variant.parse(data["variant"])
    if isinstance(data.get("model"), dict):
        data["model"] = md.ModelConfig(**data["model"])
    return TrainConfig(**data)


# ---------------------------------------------------------------------------
# study orchestration


def _run_study_job(args) -> dict:
    dataset, size, seed, variant, template, out_dir = args
    train_ds, test_ds = split(dataset, size, seed)
    config = dataclasses.replace(template, variant=variant, seed=seed)
    row = {
        "variant": variant.value,
        "train_size": size,
        "seed": seed,
        "status": "ok",
    }
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir) / f"{variant.value}_size{size}_seed{seed}"
    try:
        result = train(train_ds, config, run_dir=run_dir)
    except TrainingDiverged as err:
        row["status"] = f"diverged: epoch {err.epoch} step {err.step}"
        return row
    rctx = _default_rctx(dataset)
    metrics = evaluation.test_mse(result.model, test_ds)
    residuals = evaluation.residual_mse(
        result.model, test_ds, rctx, n_points=2000, seed=seed
    )
    row.update(metrics)
    row.update({f"residual_{k}": v for k, v in residuals.items()})
    if run_dir is not None:
        # wall time goes to metrics.json only; CSV artifacts stay
        # byte-reproducible for a fixed seed
        result.metrics = {k: v for k, v in row.items() if k != "status"}
        result.metrics["wall_time"] = result.wall_time
        with open(run_dir / "metrics.json", "w") as f:
            json.dump(result.metrics, f, indent=2, sort_keys=True)
    return row


def run_study(
    dataset: ConditionDataset, study: StudyConfig, out_dir=None
) -> dict:
    """Train every (size, seed, variant) job and aggregate the metrics.

    Failed runs are recorded and skipped in the aggregates; the study
    carries on.  Returns {"runs": [...], "aggregate": [...]}.
    """
    jobs = [
        (dataset, size, seed, variant, study.template, out_dir)
        for variant in study.variants
        for size in study.sizes
        for seed in study.seeds
    ]
    if study.workers > 1:
        with ProcessPoolExecutor(max_workers=study.workers) as pool:
            rows = list(pool.map(_run_study_job, jobs))
    else:
        rows = [_run_study_job(job) for job in jobs]

    aggregate = []
    for variant in study.variants:
        for size in study.sizes:
            ok = [
                r
                for r in rows
                if r["variant"] == variant.value
                and r["train_size"] == size
                and r["status"] == "ok"
            ]
            if not ok:
                aggregate.append(
                    {"variant": variant.value, "train_size": size, "n_runs": 0}
                )
                continue
            agg = {
                "variant": variant.value,
                "train_size": size,
                "n_runs": len(ok),
            }
            for key in ("mse_aggregate", "residual_continuity", "residual_momentum"):
                vals = np.array([r[key] for r in ok])
                agg[f"{key}_median"] = float(np.median(vals))
                agg[f"{key}_iqr"] = float(
                    np.percentile(vals, 75) - np.percentile(vals, 25)
                )
            aggregate.append(agg)
    return {"runs": rows, "aggregate": aggregate}


def write_study_csv(report: dict, runs_path, aggregate_path) -> None:
    runs = report["runs"]
    keys: list[str] = []
    for r in runs:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(runs_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for r in runs:
            writer.writerow({k: _csv_cell(r.get(k)) for k in keys})
    agg = report["aggregate"]
    keys = []
    for r in agg:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(aggregate_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for r in agg:
            writer.writerow({k: _csv_cell(r.get(k)) for k in keys})


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value
