"""Training objective: supervised data term plus weighted PDE residual term.

The data term is the mean squared standardized prediction error, so all
seven variables contribute on a comparable scale.  For constrained
variants, each active residual term is divided by a detached snapshot of
its own magnitude: the term's value is then close to one, while its
gradient is the raw gradient divided by that constant, which equalizes
term scales without rotating the gradient.

Every loss exists in two forms: a plain-numpy evaluation path and a taped
path used for training.  Both express the residuals through the shared
cores in `physics`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as md
from . import physics
from .autodiff import Array, Tensor
from .dataset import ConditionDataset
from .physics import ClosureConstants, FluidProperties, RotatingZoneSpec

EPS_DETACH = 1e-12
LAMBDA_PDE = 1e-3


class Variant(enum.Enum):
    """Which constraints enter the loss."""

    MLP = "MLP"              # data only
    C_MLP = "C-MLP"          # data + continuity
    CM_MLP = "CM-MLP"        # data + continuity + momentum

    @classmethod
    def parse(cls, name: str) -> "Variant":
        for v in cls:
            if name.upper().replace("_", "-") == v.value:
                return v
        raise ValueError(
            f"unknown variant {name!r}; valid: {', '.join(v.value for v in cls)}"
        )

    @property
    def uses_pde(self) -> bool:
        return self is not Variant.MLP

    def active_terms(self) -> tuple[str, ...]:
        if self is Variant.MLP:
            return ()
        if self is Variant.C_MLP:
            return ("continuity",)
        return ("continuity", "momentum")


@dataclass(frozen=True)
class ResidualContext:
    """Physical setup shared by residual evaluation and training.

    ``forcing_fn(points, mu) -> (f [N,3], s_k [N], s_omega [N])`` supplies
    the body force and transport sources; by default gravity with zero
    sources, in verification mode the manufactured forcing.
    """

    props: FluidProperties = FluidProperties()
    zones: RotatingZoneSpec = field(default_factory=RotatingZoneSpec.default)
    consts: ClosureConstants = ClosureConstants()
    forcing_fn: Callable | None = None

    def forcing(self, points, mu):
        if self.forcing_fn is None:
            n = np.atleast_2d(points).shape[0]
            return (
                np.tile(self.props.gravity, (n, 1)),
                np.zeros(n),
                np.zeros(n),
            )
        return self.forcing_fn(points, mu)


def mms_residual_context(spec, bounds, props=None, zones=None) -> ResidualContext:
    """Context whose forcing makes the manufactured fields exact."""
    from . import mms  # local import; mms pulls in sympy

    props = props or FluidProperties()
    zones = zones if zones is not None else RotatingZoneSpec.default(bounds.tank_diameter)

    def forcing_fn(points, mu):
        mu_arr = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        return mms.mms_forcing(
            points, mu_arr[:, 0], mu_arr[:, 1], spec, bounds, props, zones
        )

    return ResidualContext(props=props, zones=zones, forcing_fn=forcing_fn)


@dataclass
class LossReport:
    data: float
    pde_raw: dict
    pde_normalized: dict
    total: float
    lambda_pde: float


# ---------------------------------------------------------------------------
# evaluation (numpy) paths


def data_loss(model, batch) -> float:
    """Mean over the batch of the squared standardized error norm.

    ``model`` is anything with ``net_std`` and ``stats`` (the surrogate or
    an exact-field stub).
    """
    points, mu, targets = batch
    if np.atleast_2d(points).shape[0] == 0:
        raise ValueError("empty batch")
    pred = np.atleast_2d(model.net_std(points, mu))
    err = pred - model.stats.standardize(np.atleast_2d(targets))
    return float(np.mean(np.sum(err * err, axis=1)))


def residual_fields(model, points, mu):
    """(fields, grad, lap) of the surrogate at collocation points."""
    return model.spatial_derivs(points, mu)


def pde_loss(
    model,
    points,
    mu,
    variant: Variant,
    rctx: ResidualContext,
    eps: float = EPS_DETACH,
) -> tuple[float, dict]:
    """Sum of detach-normalized residual terms, with a per-term report."""
    if not variant.uses_pde:
        raise ValueError("pde_loss needs a constrained variant")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("no residual points")
    mu_arr = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    fields, grad, lap = residual_fields(model, pts, mu_arr)
    raw = {}
    raw["continuity"] = float(np.mean(physics.continuity_residual(grad) ** 2))
    if "momentum" in variant.active_terms():
        f, _, _ = rctx.forcing(pts, mu_arr)
        r_mom = physics.momentum_residual(
            fields, grad, lap, pts, mu_arr[:, 0], rctx.props, rctx.zones, f
        )
        raw["momentum"] = float(np.mean(np.sum(r_mom * r_mom, axis=1)))
    normalized = {k: v / (v + eps) for k, v in raw.items()}
    return float(sum(normalized.values())), {"raw": raw, "normalized": normalized}


def total_loss(
    model,
    data_batch,
    residual_batch,
    variant: Variant,
    rctx: ResidualContext,
    lambda_pde: float = LAMBDA_PDE,
    eps: float = EPS_DETACH,
) -> LossReport:
    l_data = data_loss(model, data_batch)
    if variant.uses_pde:
        pts, mu = residual_batch
        l_pde, report = pde_loss(model, pts, mu, variant, rctx, eps)
        total = l_data + lambda_pde * l_pde
        return LossReport(
            data=l_data,
            pde_raw=report["raw"],
            pde_normalized=report["normalized"],
            total=total,
            lambda_pde=lambda_pde,
        )
    return LossReport(
        data=l_data, pde_raw={}, pde_normalized={}, total=l_data, lambda_pde=lambda_pde
    )


# ---------------------------------------------------------------------------
# taped (training) paths


def data_loss_taped(tape: ad.TapeContext, model: md.SurrogateModel, batch) -> Tensor:
    points, mu, targets = batch
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("empty batch")
    v = md.normalize_input(pts, mu, model.bounds)
    feats = md.input_features(model, np.atleast_2d(v))
    out = tape.forward(feats)
    err = out - model.stats.standardize(np.atleast_2d(targets))
    return (err * err).sum(axis=1).mean()


def _taped_physical_jet(tape, model, points, mu, order: int):
    """Taped (value, grad columns, lap columns) in physical units.

    Returns (value Tensor [M,7] standardized, d1 list of 3 Tensors [M,7]
    of std-output derivatives along physical x, y, z, d2 likewise).
    Physical-unit scaling is left to the caller via model.stats.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v = np.atleast_2d(md.normalize_input(pts, mu, model.bounds))
    dirs = md.spatial_dirs_norm(model.bounds)
    feats, j1, j2 = md._feature_jet(model, v, dirs, order=order)
    return tape.pushforward2(feats, d1_in=j1, d2_in=j2, order=order)


def residual_terms_taped(
    tape: ad.TapeContext,
    model: md.SurrogateModel,
    points,
    mu,
    variant: Variant,
    rctx: ResidualContext,
) -> dict:
    """Raw residual loss terms as tape tensors, keyed by equation name."""
    if not variant.uses_pde:
        raise ValueError("constrained variants only")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("no residual points")
    mu_arr = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    sigma = model.stats.std
    need_momentum = "momentum" in variant.active_terms()
    bundle = _taped_physical_jet(tape, model, pts, mu_arr, order=2 if need_momentum else 1)

    def d1(axis: int, col: int) -> Tensor:
        return bundle.d1[axis][:, col] * sigma[col]

    terms: dict = {}
    r_cont = physics.continuity_core(
        d1(0, physics.IU), d1(1, physics.IV), d1(2, physics.IW)
    )
    terms["continuity"] = (r_cont * r_cont).mean()

    if need_momentum:
        mean, std = model.stats.mean, model.stats.std

        def value(col: int) -> Tensor:
            return bundle.value[:, col] * std[col] + mean[col]

        def lap(col: int) -> Tensor:
            acc = bundle.d2[0][:, col]
            acc = acc + bundle.d2[1][:, col]
            acc = acc + bundle.d2[2][:, col]
            return acc * std[col]

        u, v_, w = value(physics.IU), value(physics.IV), value(physics.IW)
        k, om = value(physics.IK), value(physics.IOMEGA)
        grads = {
            col: tuple(d1(axis, col) for axis in range(3))
            for col in (physics.IU, physics.IV, physics.IW, physics.IP,
                        physics.IK, physics.IOMEGA)
        }
        nut = physics.eddy_viscosity(k, om)
        nut_grad = physics.eddy_viscosity_gradient(
            k, om, grads[physics.IK], grads[physics.IOMEGA]
        )
        oz = physics.omega_z_at(pts, rctx.zones, mu_arr[:, 0])
        f, _, _ = rctx.forcing(pts, mu_arr)
        r_x, r_y, r_z = physics.momentum_core(
            (pts[:, 0], pts[:, 1], pts[:, 2]),
            (u, v_, w),
            (grads[physics.IU], grads[physics.IV], grads[physics.IW]),
            (lap(physics.IU), lap(physics.IV), lap(physics.IW)),
            grads[physics.IP],
            nut,
            nut_grad,
            oz,
            rctx.props,
            (f[:, 0], f[:, 1], f[:, 2]),
        )
        terms["momentum"] = (r_x * r_x + r_y * r_y + r_z * r_z).mean()
    return terms


def total_loss_taped(
    tape: ad.TapeContext,
    model: md.SurrogateModel,
    data_batch,
    residual_batch,
    variant: Variant,
    rctx: ResidualContext,
    lambda_pde: float = LAMBDA_PDE,
    eps: float = EPS_DETACH,
    out_report: dict | None = None,
) -> Tensor:
    """Scalar training loss; per-term values are written to ``out_report``."""
    loss = data_loss_taped(tape, model, data_batch)
    l_data = float(loss.value)
    if not np.isfinite(l_data):
        raise ad.DivergenceError("data loss non-finite", term="data")
    raw: dict = {}
    normalized: dict = {}
    if variant.uses_pde:
        pts, mu = residual_batch
        terms = residual_terms_taped(tape, model, pts, mu, variant, rctx)
        for name, term in terms.items():
            raw_val = float(term.value)
            if not np.isfinite(raw_val):
                raise ad.DivergenceError(f"{name} residual non-finite", term=name)
            raw[name] = raw_val
            normalized[name] = raw_val / (raw_val + eps)
            loss = loss + (lambda_pde / (raw_val + eps)) * term
    if out_report is not None:
        out_report.update(
            {
                "data": l_data,
                "pde_raw": raw,
                "pde_normalized": normalized,
                "total": float(loss.value),
            }
        )
    return loss
