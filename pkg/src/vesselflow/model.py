"""Coordinate-network surrogate of the vessel flow field.

Maps a physical point (x, y, z) plus operating condition (rpm, liquid
height) to the seven field variables (alpha, u, v, w, p, k, omega).  The
pipeline is: affine normalization of the five inputs to [-1, 1], a fixed
Fourier feature layer, a dense tanh network producing standardized
outputs, and per-variable denormalization.  Spatial derivatives in
physical units chain the exact network tangents through the affine
scalings.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, DenseParams, DomainError, ShapeError

log = logging.getLogger(__name__)

FIELD_NAMES = ("alpha", "u", "v", "w", "p", "k", "omega")
N_FIELDS = len(FIELD_NAMES)

STD_FLOOR = 1e-12

CKPT_MAGIC = "VESSELFLOW-CKPT v1"


@dataclass(frozen=True)
class DomainBounds:
    """Physical ranges of the five model inputs.

    x and y span [-tank_diameter/2, tank_diameter/2], z spans
    [0, tank_height]; rpm and liquid height span their operating ranges.
    """

    tank_diameter: float = 2.09
    tank_height: float = 8.12
    rpm_min: float = 50.0
    rpm_max: float = 150.0
    height_min: float = 1.5
    height_max: float = 6.5

    def __post_init__(self):
        if self.tank_diameter <= 0 or self.tank_height <= 0:
            raise ValueError("tank dimensions must be positive")
        if self.rpm_min >= self.rpm_max or self.height_min >= self.height_max:
            raise ValueError("min must be below max for rpm and height ranges")

    @property
    def radius(self) -> float:
        return 0.5 * self.tank_diameter

    def centers(self) -> Array:
        return np.array(
            [
                0.0,
                0.0,
                0.5 * self.tank_height,
                0.5 * (self.rpm_min + self.rpm_max),
                0.5 * (self.height_min + self.height_max),
            ]
        )

    def half_ranges(self) -> Array:
        return np.array(
            [
                self.radius,
                self.radius,
                0.5 * self.tank_height,
                0.5 * (self.rpm_max - self.rpm_min),
                0.5 * (self.height_max - self.height_min),
            ]
        )


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and initialization choices."""

    depth: int = 10          # hidden tanh layers
    width: int = 100         # hidden width; Fourier features match it
    seed: int = 0
    sigma_b: float = 1.0     # stddev of the fixed frequency matrix
    fourier_mode: str = "all"  # "all": map all 5 inputs; "spatial": x,y,z only

    def __post_init__(self):
        if self.depth < 1 or self.width < 2 or self.width % 2:
            raise ValueError("depth >= 1 and even width >= 2 required")
        if self.fourier_mode not in ("all", "spatial"):
            raise ValueError("fourier_mode must be 'all' or 'spatial'")
        if self.sigma_b <= 0:
            raise ValueError("sigma_b must be positive")


@dataclass(frozen=True)
class FourierMap:
    """Fixed sinusoidal feature map: v -> [cos(2 pi B v); sin(2 pi B v)]."""

    B: Array
    sigma_b: float

    def __post_init__(self):
        B = np.asarray(self.B, dtype=np.float64)
        if not np.all(np.isfinite(B)):
            raise DomainError("non-finite Fourier frequencies")
        object.__setattr__(self, "B", B)

    @property
    def n_features(self) -> int:
        return 2 * self.B.shape[0]


@dataclass(frozen=True)
class OutputStats:
    """Per-variable mean and standard deviation of the seven outputs."""

    mean: Array
    std: Array

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if mean.shape != (N_FIELDS,) or std.shape != (N_FIELDS,):
            raise ShapeError("stats must have one entry per output variable")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls) -> "OutputStats":
        return cls(np.zeros(N_FIELDS), np.ones(N_FIELDS))

    @classmethod
    def from_targets(cls, y: Array) -> "OutputStats":
        y = np.asarray(y, dtype=np.float64).reshape(-1, N_FIELDS)
        return cls(y.mean(axis=0), y.std(axis=0))

    def standardize(self, y: Array) -> Array:
        return (y - self.mean) / self.std

    def destandardize(self, y_std: Array) -> Array:
        return self.mean + self.std * y_std


@dataclass(frozen=True)
class SurrogateModel:
    bounds: DomainBounds
    fmap: FourierMap
    params: DenseParams
    stats: OutputStats
    config: ModelConfig

    def predict(self, points, mu) -> Array:
        return predict(self, points, mu)

    def net_std(self, points, mu) -> Array:
        return net_std(self, points, mu)

    def spatial_derivs(self, points, mu):
        return spatial_derivs(self, points, mu)


def init_model(
    bounds: DomainBounds, config: ModelConfig, stats: OutputStats | None = None
) -> SurrogateModel:
    """Seeded deterministic initialization of frequencies and weights."""
    rng = np.random.default_rng(config.seed)
    m = config.width // 2
    n_mapped = 5 if config.fourier_mode == "all" else 3
    B = config.sigma_b * rng.standard_normal((m, n_mapped))
    fmap = FourierMap(B=B, sigma_b=config.sigma_b)

    feat_dim = 2 * m + (0 if config.fourier_mode == "all" else 2)
    widths = [feat_dim] + [config.width] * config.depth + [N_FIELDS]
    layers = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        W = rng.uniform(-bound, bound, size=(n_out, n_in))
        layers.append((W, np.zeros(n_out)))
    params = DenseParams(tuple(layers))
    return SurrogateModel(
        bounds=bounds,
        fmap=fmap,
        params=params,
        stats=stats or OutputStats.identity(),
        config=config,
    )


def with_params(model: SurrogateModel, params: DenseParams) -> SurrogateModel:
    return dataclasses.replace(model, params=params)


def with_stats(model: SurrogateModel, stats: OutputStats) -> SurrogateModel:
    return dataclasses.replace(model, stats=stats)


# ---------------------------------------------------------------------------
# input pipeline


def _as_points(points, mu) -> tuple[Array, Array, bool]:
    p = np.asarray(points, dtype=np.float64)
    m = np.asarray(mu, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    m = np.atleast_2d(m)
    if m.shape[0] == 1 and p.shape[0] > 1:
        m = np.broadcast_to(m, (p.shape[0], 2))
    if p.shape[1] != 3 or m.shape[1] != 2 or p.shape[0] != m.shape[0]:
        raise ShapeError("points must be [N, 3] and mu [N, 2] (or a single pair)")
    return p, m, single


def normalize_input(points, mu, bounds: DomainBounds) -> Array:
    """Affine map of (x, y, z, rpm, H) onto [-1, 1] per axis.

    Out-of-bounds inputs are allowed (the map is affine everywhere) but
    flagged in the log.
    """
    p, m, single = _as_points(points, mu)
    raw = np.concatenate([p, m], axis=1)
    if not np.all(np.isfinite(raw)):
        raise DomainError("non-finite model input")
    v = (raw - bounds.centers()) / bounds.half_ranges()
    n_out = int(np.sum(np.any(np.abs(v) > 1.0 + 1e-12, axis=1)))
    if n_out:
        log.warning("%d of %d input points outside the domain bounds", n_out, v.shape[0])
    return v[0] if single else v


def denormalize_input(v, bounds: DomainBounds) -> Array:
    v = np.asarray(v, dtype=np.float64)
    return v * bounds.half_ranges() + bounds.centers()


def fourier_features(v, fmap: FourierMap) -> Array:
    """[cos(2 pi B v); sin(2 pi B v)] for normalized input v."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = np.atleast_2d(v)
    if V.shape[1] != fmap.B.shape[1]:
        raise ShapeError("input width does not match the frequency matrix")
    theta = 2.0 * np.pi * (V @ fmap.B.T)
    out = np.concatenate([np.cos(theta), np.sin(theta)], axis=1)
    return out[0] if single else out


def input_features(model: SurrogateModel, v: Array) -> Array:
    """Full network input: Fourier block, plus raw (rpm, H) in spatial mode."""
    V = np.atleast_2d(v)
    if model.config.fourier_mode == "all":
        return fourier_features(V, model.fmap)
    mapped = fourier_features(V[:, :3], model.fmap)
    return np.concatenate([mapped, V[:, 3:]], axis=1)


def _feature_jet(model: SurrogateModel, V: Array, dirs_norm: Array, order: int = 2):
    """Features plus directional derivatives w.r.t. the normalized input.

    ``dirs_norm`` is [D, 5] in normalized-input space.  Returns
    (features [B, F], d1 [D, B, F], d2 [D, B, F] or None for order 1);
    the second derivative is the pure same-direction one.
    """
    B = model.fmap.B
    m, n_mapped = B.shape
    theta = 2.0 * np.pi * (V[:, :n_mapped] @ B.T)
    ct, st = np.cos(theta), np.sin(theta)
    D = dirs_norm.shape[0]
    nb = V.shape[0]
    feats = np.concatenate([ct, st], axis=1)
    if model.config.fourier_mode == "spatial":
        feats = np.concatenate([feats, V[:, 3:]], axis=1)
    dtheta = 2.0 * np.pi * (dirs_norm[:, :n_mapped] @ B.T)  # [D, m], batch-constant
    d1 = np.empty((D, nb, feats.shape[1]))
    d1[:, :, :m] = -st[None, :, :] * dtheta[:, None, :]
    d1[:, :, m : 2 * m] = ct[None, :, :] * dtheta[:, None, :]
    if model.config.fourier_mode == "spatial":
        d1[:, :, 2 * m :] = dirs_norm[:, None, 3:]
    if order < 2:
        return feats, d1, None
    dt2 = dtheta**2
    d2 = np.zeros((D, nb, feats.shape[1]))
    d2[:, :, :m] = -ct[None, :, :] * dt2[:, None, :]
    d2[:, :, m : 2 * m] = -st[None, :, :] * dt2[:, None, :]
    return feats, d1, d2


def net_std(model: SurrogateModel, points, mu) -> Array:
    """Raw standardized network outputs."""
    p, m, single = _as_points(points, mu)
    v = normalize_input(p, m, model.bounds)
    out = ad.forward(model.params, input_features(model, v))
    return out[0] if single else out


def predict(model: SurrogateModel, points, mu) -> Array:
    """Field values in physical units: mean + std * network output."""
    out = net_std(model, points, mu)
    return model.stats.destandardize(out)


def spatial_dirs_norm(bounds: DomainBounds) -> Array:
    """Normalized-space directions equivalent to unit physical x, y, z steps."""
    h = bounds.half_ranges()
    dirs = np.zeros((3, 5))
    for d in range(3):
        dirs[d, d] = 1.0 / h[d]
    return dirs


def spatial_derivs(model: SurrogateModel, points, mu):
    """Physical-unit value, gradient [N, 7, 3] and Laplacian diagonal [N, 7].

    The tangent directions carry the input normalization scale, so first
    derivatives pick up one factor of 1/half_range and second derivatives
    its square; outputs are scaled back by the per-variable std.
    """
    p, m, single = _as_points(points, mu)
    v = np.atleast_2d(normalize_input(p, m, model.bounds))
    dirs = spatial_dirs_norm(model.bounds)
    feats, j1, j2 = _feature_jet(model, v, dirs)
    bundle = ad.pushforward2(model.params, feats, d1_in=j1, d2_in=j2)
    sigma = model.stats.std
    value = model.stats.destandardize(bundle.value)
    grad = np.transpose(bundle.d1, (1, 2, 0)) * sigma[None, :, None]
    lap = bundle.d2.sum(axis=0) * sigma
    if single:
        return value[0], grad[0], lap[0]
    return value, grad, lap


# ---------------------------------------------------------------------------
# checkpoint I/O (bit-exact round trip)


def _bounds_to_dict(b: DomainBounds) -> dict:
    return dataclasses.asdict(b)


def save_checkpoint(model: SurrogateModel, path) -> None:
    header = {
        "config": dataclasses.asdict(model.config),
        "bounds": _bounds_to_dict(model.bounds),
        "stats": {"mean": model.stats.mean.tolist(), "std": model.stats.std.tolist()},
        "layer_shapes": [list(W.shape) for W, _ in model.params.layers],
    }
    buf = io.BytesIO()
    for W, b in model.params.layers:
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    blob = buf.getvalue()
    header["blob_bytes"] = len(blob)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC.encode() + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)


def load_checkpoint(path) -> SurrogateModel:
    with open(path, "rb") as f:
        magic = f.readline().decode().rstrip("\n")
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        header = json.loads(f.readline().decode())
        blob = f.read()
    if len(blob) != header["blob_bytes"]:
        raise ValueError("checkpoint blob truncated")
    config = ModelConfig(**header["config"])
    bounds = DomainBounds(**header["bounds"])
    stats = OutputStats(np.array(header["stats"]["mean"]), np.array(header["stats"]["std"]))
    model = init_model(bounds, config, stats=stats)
    layers = []
    offset = 0
    data = np.frombuffer(blob, dtype="<f8")
    for shape in header["layer_shapes"]:
        n_out, n_in = shape
        W = data[offset : offset + n_out * n_in].reshape(n_out, n_in).copy()
        offset += n_out * n_in
        b = data[offset : offset + n_out].copy()
        offset += n_out
        layers.append((W, b))
    if offset != data.size:
        raise ValueError("checkpoint blob size mismatch")
    return with_params(model, DenseParams(tuple(layers)))
