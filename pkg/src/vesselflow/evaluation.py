"""Held-out metrics, spatial profiles and tracer-ensemble summaries.

Three views of a trained surrogate: global test MSE per variable (in
standardized and physical units), raw PDE-residual MSE at fresh
collocation points on held-out conditions, and probe-concentration
ensembles against a reference run.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import physics
from .autodiff import Array
from .dataset import ConditionDataset, _sample_spatial
from .model import FIELD_NAMES
from .objective import ResidualContext, Variant

log = logging.getLogger(__name__)

EVAL_CHUNK = 50_000


@dataclass
class ProfileLine:
    """Axial line of predictions vs reference at fixed (r, theta, mu)."""

    r: float
    theta: float
    mu: tuple[float, float]
    z: Array
    predicted: Array  # [n, 7]
    reference: Array  # [n, 7]

    def __post_init__(self):
        if not np.all(np.diff(self.z) > 0):
            raise ValueError("z samples must be strictly increasing")


def _chunked_predict(model, points, mu):
    outs = []
    for lo in range(0, points.shape[0], EVAL_CHUNK):
        hi = lo + EVAL_CHUNK
        outs.append(model.predict(points[lo:hi], mu[lo:hi]))
    return np.concatenate(outs, axis=0)


def test_mse(model, test_ds: ConditionDataset) -> dict:
    """Per-variable and aggregate MSE over every held-out record.

    Standardized errors use the model's training statistics; physical
    units are reported alongside.  ``mse_aggregate`` is the mean of the
    seven standardized per-variable MSEs.
    """
    if test_ds.n_conditions == 0:
        raise ValueError("empty test set")
    points, mu, targets = test_ds.flat()
    pred = _chunked_predict(model, points, mu)
    err = pred - targets
    phys = np.mean(err * err, axis=0)
    std_err = err / model.stats.std
    std = np.mean(std_err * std_err, axis=0)
    row = {}
    for i, name in enumerate(FIELD_NAMES):
        row[f"mse_{name}"] = float(std[i])
        row[f"mse_phys_{name}"] = float(phys[i])
    row["mse_aggregate"] = float(np.mean(std))
    return row


def residual_mse(
    model,
    test_ds: ConditionDataset,
    rctx: ResidualContext,
    n_points: int = 2000,
    seed: int = 0,
) -> dict:
    """Raw mean squared residuals at fresh points on held-out conditions.

    Points follow the wall/zone-refined density and stay below each
    condition's liquid height.  Momentum is the squared 3-component norm;
    k and omega residuals are evaluation-only extras.
    """
    if test_ds.n_conditions == 0:
        raise ValueError("empty test set")
    rng = np.random.default_rng(seed)
    per = max(1, n_points // test_ds.n_conditions)
    sums = {"continuity": 0.0, "momentum": 0.0, "k": 0.0, "omega": 0.0}
    total = 0
    for cond in test_ds.conditions:
        pts = _sample_spatial(
            rng, per, cond.height, test_ds.bounds, rctx.zones, q=2.0, zone_fraction=0.15
        )
        mu = np.tile([cond.rpm, cond.height], (per, 1))
        fields, grad, lap = model.spatial_derivs(pts, mu)
        forcing, s_k, s_w = rctx.forcing(pts, mu)
        bundle = physics.residual_bundle(
            fields, grad, lap, pts, mu[:, 0], rctx.props, rctx.zones, forcing,
            sources=(s_k, s_w), consts=rctx.consts,
        )
        sums["continuity"] += float(np.sum(bundle.r_cont**2))
        sums["momentum"] += float(np.sum(np.sum(bundle.r_mom**2, axis=1)))
        sums["k"] += float(np.sum(bundle.r_k**2))
        sums["omega"] += float(np.sum(bundle.r_omega**2))
        total += per
    return {k: v / total for k, v in sums.items()}


def reported_residual(variant: Variant, residuals: dict) -> float:
    """Learning-curve convention: continuity only for C-MLP, else cont+mom."""
    if variant is Variant.C_MLP:
        return residuals["continuity"]
    return residuals["continuity"] + residuals["momentum"]


# ---------------------------------------------------------------------------
# axial profiles


def axial_profile(
    model,
    reference,
    r: float,
    theta: float,
    mu,
    n_z: int = 100,
    n_neighbors: int = 8,
) -> ProfileLine:
    """Predictions along z at fixed radius/azimuth vs a reference.

    ``reference`` is either an exact-field model (anything with
    ``predict``) or a ConditionDataset, in which case values are
    inverse-distance interpolated from the nearest records of the closest
    condition.  The line is clipped to the liquid column [0, H].
    """
    rpm, height = float(mu[0]), float(mu[1])
    z = np.linspace(0.0, height, n_z)
    pts = np.column_stack(
        [np.full(n_z, r * np.cos(theta)), np.full(n_z, r * np.sin(theta)), z]
    )
    mu_arr = np.tile([rpm, height], (n_z, 1))
    predicted = np.atleast_2d(model.predict(pts, mu_arr))
    if hasattr(reference, "predict"):
        ref = np.atleast_2d(reference.predict(pts, mu_arr))
    elif isinstance(reference, ConditionDataset):
        ref = _idw_reference(reference, pts, (rpm, height), n_neighbors)
    else:
        raise TypeError("reference must be a model-like or a ConditionDataset")
    return ProfileLine(
        r=r, theta=theta, mu=(rpm, height), z=z, predicted=predicted, reference=ref
    )


def _idw_reference(dataset: ConditionDataset, pts, mu, k: int) -> Array:
    mu_all = dataset.condition_mu()
    scale = np.array(
        [
            dataset.bounds.rpm_max - dataset.bounds.rpm_min,
            dataset.bounds.height_max - dataset.bounds.height_min,
        ]
    )
    dist = np.linalg.norm((mu_all - mu) / scale, axis=1)
    ci = int(np.argmin(dist))
    if dist[ci] > 1e-9:
        log.warning(
            "profile reference uses nearest condition (rpm=%.3f, H=%.3f)",
            *mu_all[ci],
        )
    tree = cKDTree(dataset.points[ci])
    d, idx = tree.query(pts, k=k)
    w = 1.0 / np.maximum(d, 1e-12)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkf->nf", w, dataset.targets[ci][idx])


def write_profile_csv(line: ProfileLine, path) -> None:
    """One row per z sample: z, 7 predicted, 7 reference columns."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["z"]
            + [f"pred_{n}" for n in FIELD_NAMES]
            + [f"ref_{n}" for n in FIELD_NAMES]
        )
        for i in range(len(line.z)):
            writer.writerow(
                [repr(float(line.z[i]))]
                + [repr(float(v)) for v in line.predicted[i]]
                + [repr(float(v)) for v in line.reference[i]]
            )


# ---------------------------------------------------------------------------
# tracer ensembles


def ensemble_tracer_report(runs, reference) -> dict:
    """Per-time ensemble mean and min/max band against a reference series.

    ``runs`` and ``reference`` need ``times`` and ``values`` arrays on a
    common time grid.  Returns band arrays plus the end-state bias
    |mean(c(T)) - reference c(T)|.
    """
    if not runs:
        raise ValueError("need at least one run")
    times = np.asarray(reference.times, dtype=np.float64)
    for run in runs:
        if not np.array_equal(np.asarray(run.times), times):
            raise ValueError("mismatched time grids between runs and reference")
    values = np.stack([np.asarray(r.values, dtype=np.float64) for r in runs])
    mean = values.mean(axis=0)
    lo = values.min(axis=0)
    hi = values.max(axis=0)
    ref = np.asarray(reference.values, dtype=np.float64)
    return {
        "times": times,
        "mean": mean,
        "min": lo,
        "max": hi,
        "reference": ref,
        "end_state_bias": float(abs(mean[-1] - ref[-1])),
        "end_band_width": float(hi[-1] - lo[-1]),
        "max_band_width": float(np.max(hi - lo)),
    }


def write_ensemble_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "mean", "min", "max", "reference"])
        for i in range(len(report["times"])):
            writer.writerow(
                [
                    repr(float(report[k][i]))
                    for k in ("times", "mean", "min", "max", "reference")
                ]
            )
