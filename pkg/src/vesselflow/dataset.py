"""Labeled point datasets over operating conditions, plus the two samplers.

Data is generated from the manufactured solution (one block of points per
operating condition), stored in a single columnar file, and split at
condition level.  Spatial sampling mimics a mesh-refined CFD point cloud:
density increases toward the wall (radius drawn as a power of a uniform
variate) and inside the rotating zones (a boosted fraction of points).
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array
from .mms import MmsSpec, mms_fields
from .model import DomainBounds, FIELD_NAMES
from .physics import FluidProperties, RotatingZoneSpec

DATASET_MAGIC = "VESSELFLOW-DATASET v1"
COLUMNS = ("x", "y", "z") + FIELD_NAMES

DEFAULT_ZONE_FRACTION = 0.15


@dataclass(frozen=True)
class OperatingCondition:
    rpm: float
    height: float


@dataclass(frozen=True)
class PointRecord:
    x: float
    y: float
    z: float
    condition: OperatingCondition
    alpha: float
    u: float
    v: float
    w: float
    p: float
    k: float
    omega: float


@dataclass
class ConditionDataset:
    """Equal-size blocks of labeled points, one per operating condition."""

    bounds: DomainBounds
    conditions: tuple[OperatingCondition, ...]
    points: Array   # [C, n, 3]
    targets: Array  # [C, n, 7]
    provenance: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = len(self.conditions)
        if self.points.shape[:2] != self.targets.shape[:2] or self.points.shape[0] != c:
            raise ValueError("points/targets must be [C, n, .] with C conditions")
        if self.points.shape[2] != 3 or self.targets.shape[2] != len(FIELD_NAMES):
            raise ValueError("expected 3 coordinates and 7 target variables")

    @property
    def n_conditions(self) -> int:
        return len(self.conditions)

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def condition_mu(self) -> Array:
        return np.array([[c.rpm, c.height] for c in self.conditions])

    def flat(self) -> tuple[Array, Array, Array]:
        """All records as (points [N,3], mu [N,2], targets [N,7])."""
        n = self.n_points
        mu = np.repeat(self.condition_mu(), n, axis=0)
        return (
            self.points.reshape(-1, 3),
            mu,
            self.targets.reshape(-1, len(FIELD_NAMES)),
        )

    def record(self, cond_index: int, point_index: int) -> PointRecord:
        p = self.points[cond_index, point_index]
        t = self.targets[cond_index, point_index]
        return PointRecord(p[0], p[1], p[2], self.conditions[cond_index], *t)

    def subset(self, indices) -> "ConditionDataset":
        idx = np.asarray(indices, dtype=int)
        return ConditionDataset(
            bounds=self.bounds,
            conditions=tuple(self.conditions[i] for i in idx),
            points=self.points[idx],
            targets=self.targets[idx],
            provenance=self.provenance,
            meta=dict(self.meta),
        )


def from_arrays(
    bounds: DomainBounds,
    conditions,
    points: Array,
    targets: Array,
    provenance: str = "external-import",
    meta: dict | None = None,
) -> ConditionDataset:
    """Ingest externally produced data laid out in the native block format."""
    conds = tuple(OperatingCondition(float(r), float(h)) for r, h in conditions)
    return ConditionDataset(
        bounds=bounds,
        conditions=conds,
        points=np.asarray(points, dtype=np.float64),
        targets=np.asarray(targets, dtype=np.float64),
        provenance=provenance,
        meta=meta or {},
    )


# ---------------------------------------------------------------------------
# condition and point sampling


def sample_conditions(
    n: int, bounds: DomainBounds, seed: int, method: str = "lhs"
) -> tuple[OperatingCondition, ...]:
    """Draw operating conditions over the (rpm, height) box.

    ``lhs`` stratifies each axis (good coverage for small n); ``uniform``
    draws independently.
    """
    rng = np.random.default_rng(seed)
    if method == "uniform":
        rpm = rng.uniform(bounds.rpm_min, bounds.rpm_max, n)
        h = rng.uniform(bounds.height_min, bounds.height_max, n)
    elif method == "lhs":
        u_rpm = (rng.permutation(n) + rng.uniform(0, 1, n)) / n
        u_h = (rng.permutation(n) + rng.uniform(0, 1, n)) / n
        rpm = bounds.rpm_min + u_rpm * (bounds.rpm_max - bounds.rpm_min)
        h = bounds.height_min + u_h * (bounds.height_max - bounds.height_min)
    else:
        raise ValueError("method must be 'lhs' or 'uniform'")
    return tuple(OperatingCondition(float(r), float(hh)) for r, hh in zip(rpm, h))


def _sample_radii(rng, n: int, radius: float, q: float) -> Array:
    """Wall-refined radius draw; q=1 reduces to area-uniform sampling."""
    return radius * rng.uniform(0.0, 1.0, n) ** (1.0 / (2.0 * q))


def _sample_spatial(
    rng,
    n: int,
    z_high,
    bounds: DomainBounds,
    zones: RotatingZoneSpec,
    q: float,
    zone_fraction: float,
) -> Array:
    """Points with wall- and zone-refined density; z uniform on (0, z_high).

    ``z_high`` may be a scalar or a per-point array.
    """
    z_high = np.broadcast_to(np.asarray(z_high, dtype=np.float64), (n,))
    r = _sample_radii(rng, n, bounds.radius, q)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    z = rng.uniform(0.0, 1.0, n) * z_high
    if zones.zones and zone_fraction > 0.0:
        boost = rng.uniform(0.0, 1.0, n) < zone_fraction
        pick = rng.integers(0, len(zones.zones), n)
        u_r = rng.uniform(0.0, 1.0, n)
        u_z = rng.uniform(0.0, 1.0, n)
        for zi, zone in enumerate(zones.zones):
            sel = boost & (pick == zi) & (zone.z_low < z_high)
            if not np.any(sel):
                continue
            top = np.minimum(zone.z_high, z_high[sel])
            z[sel] = zone.z_low + u_z[sel] * (top - zone.z_low)
            r[sel] = zone.radius * np.sqrt(u_r[sel])
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def generate_dataset(
    conditions,
    n_points: int,
    seed: int,
    spec: MmsSpec = MmsSpec(),
    bounds: DomainBounds = DomainBounds(),
    zones: RotatingZoneSpec | None = None,
    props: FluidProperties = FluidProperties(),
    zone_fraction: float = DEFAULT_ZONE_FRACTION,
) -> ConditionDataset:
    """Evaluate the manufactured fields on sampled points per condition.

    Deterministic given ``seed``; the z range extends a few interface
    thicknesses above the liquid so the phase indicator is resolved.
    """
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    if spec.delta >= 0.25 * bounds.height_min:
        raise ValueError("interface thickness must be small next to height_min")
    if zones is None:
        zones = RotatingZoneSpec.default(bounds.tank_diameter)
    conds = tuple(
        c if isinstance(c, OperatingCondition) else OperatingCondition(*c)
        for c in conditions
    )
    streams = np.random.SeedSequence(seed).spawn(len(conds))
    pts = np.empty((len(conds), n_points, 3))
    tgt = np.empty((len(conds), n_points, len(FIELD_NAMES)))
    for i, (cond, ss) in enumerate(zip(conds, streams)):
        rng = np.random.default_rng(ss)
        z_high = min(cond.height + 3.0 * spec.delta, bounds.tank_height)
        pts[i] = _sample_spatial(rng, n_points, z_high, bounds, zones, spec.q, zone_fraction)
        tgt[i] = mms_fields(pts[i], cond.rpm, cond.height, spec, bounds, props)
    header = {
        "schema_version": 1,
        "seed": seed,
        "n_points": n_points,
        "spec": spec.provenance(),
        "zone_fraction": zone_fraction,
        "conditions": [[c.rpm, c.height] for c in conds],
    }
    provenance = hashlib.sha256(
        json.dumps(header, sort_keys=True).encode()
    ).hexdigest()
    return ConditionDataset(
        bounds=bounds,
        conditions=conds,
        points=pts,
        targets=tgt,
        provenance=provenance,
        meta={"generator": "mms", **header},
    )


def split(
    dataset: ConditionDataset, train_size: int, seed: int
) -> tuple[ConditionDataset, ConditionDataset]:
    """Condition-level train/test split with a seeded shuffle."""
    c = dataset.n_conditions
    if train_size <= 0 or train_size >= c:
        raise ValueError(f"train_size must be in (0, {c})")
    perm = np.random.default_rng(seed).permutation(c)
    return dataset.subset(np.sort(perm[:train_size])), dataset.subset(
        np.sort(perm[train_size:])
    )


def sample_labeled_batch(dataset: ConditionDataset, batch_size: int, rng):
    """Uniform draw over all (condition, point-index) pairs.

    Returns (points [B,3], mu [B,2], targets [B,7]).  Spatial density of
    the draw is whatever the dataset carries, so mesh-like refinement is
    preserved.
    """
    if dataset.n_conditions == 0 or dataset.n_points == 0:
        raise ValueError("empty dataset")
    total = dataset.n_conditions * dataset.n_points
    idx = rng.integers(0, total, batch_size)
    ci, pi = idx // dataset.n_points, idx % dataset.n_points
    mu = dataset.condition_mu()[ci]
    return dataset.points[ci, pi], mu, dataset.targets[ci, pi]


def sample_residual_points(
    m: int,
    bounds: DomainBounds,
    zones: RotatingZoneSpec,
    rng,
    q: float = MmsSpec().q,
    zone_fraction: float = DEFAULT_ZONE_FRACTION,
) -> tuple[Array, Array]:
    """Collocation points: non-uniform in space, uniform in (rpm, height).

    Every point lies strictly below its own liquid height.
    """
    if m <= 0:
        raise ValueError("need a positive number of residual points")
    rpm = rng.uniform(bounds.rpm_min, bounds.rpm_max, m)
    h = rng.uniform(bounds.height_min, bounds.height_max, m)
    pts = _sample_spatial(rng, m, h, bounds, zones, q, zone_fraction)
    return pts, np.column_stack([rpm, h])


# ---------------------------------------------------------------------------
# on-disk format: text header + little-endian float64 columns per condition


def save_dataset(dataset: ConditionDataset, path) -> None:
    header = {
        "schema_version": 1,
        "bounds": {
            "tank_diameter": dataset.bounds.tank_diameter,
            "tank_height": dataset.bounds.tank_height,
            "rpm_min": dataset.bounds.rpm_min,
            "rpm_max": dataset.bounds.rpm_max,
            "height_min": dataset.bounds.height_min,
            "height_max": dataset.bounds.height_max,
        },
        "columns": list(COLUMNS),
        "conditions": [[c.rpm, c.height] for c in dataset.conditions],
        "n_points": dataset.n_points,
        "provenance": dataset.provenance,
        "meta": dataset.meta,
    }
    buf = io.BytesIO()
    for ci in range(dataset.n_conditions):
        block = np.concatenate(
            [dataset.points[ci], dataset.targets[ci]], axis=1
        )  # [n, 10]
        for col in range(block.shape[1]):
            buf.write(np.ascontiguousarray(block[:, col], dtype="<f8").tobytes())
    blob = buf.getvalue()
    header["blob_bytes"] = len(blob)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC.encode() + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)


def load_dataset(path) -> ConditionDataset:
    with open(path, "rb") as f:
        magic = f.readline().decode().rstrip("\n")
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a dataset file: {path}")
        header = json.loads(f.readline().decode())
        blob = f.read()
    if len(blob) != header["blob_bytes"]:
        raise ValueError("dataset blob truncated")
    if header["columns"] != list(COLUMNS):
        raise ValueError("unexpected column layout")
    n = header["n_points"]
    conds = header["conditions"]
    data = np.frombuffer(blob, dtype="<f8")
    expected = len(conds) * n * len(COLUMNS)
    if data.size != expected:
        raise ValueError("dataset blob size mismatch")
    data = data.reshape(len(conds), len(COLUMNS), n)
    blocks = np.transpose(data, (0, 2, 1))  # [C, n, 10]
    return ConditionDataset(
        bounds=DomainBounds(**header["bounds"]),
        conditions=tuple(OperatingCondition(r, h) for r, h in conds),
        points=np.ascontiguousarray(blocks[:, :, :3]),
        targets=np.ascontiguousarray(blocks[:, :, 3:]),
        provenance=header["provenance"],
        meta=header["meta"],
    )
