"""Per-target visual input: appearance, context, location and comparison features.

The model input for a target is the concatenation ``[o, g, l, dv, dl]``:
region appearance, scene context, 5-d location/size, pooled unit appearance
differences against comparison objects, and 5-d offset blocks to the nearest
same-category neighbours.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import BoundingBox, ObjectRegion, Scene
from .errors import DimensionError, DomainError, MissingFeatureError

COMPARISON_SETS = ("same_category", "different_category", "all_objects")
POOLINGS = ("avg", "min", "max")
CONTEXT_SOURCES = ("none", "global", "scale2", "scale3", "scale4")


@dataclass(frozen=True)
class ComparisonConfig:
    comparison_set: str = "same_category"
    pooling: str = "avg"
    max_location_neighbors: int = 5
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.comparison_set not in COMPARISON_SETS:
            raise ValueError(f"comparison_set must be one of {COMPARISON_SETS}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.max_location_neighbors < 1:
            raise ValueError("max_location_neighbors must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class FeatureBundle:
    o: np.ndarray
    g: np.ndarray
    l: np.ndarray
    dv: np.ndarray
    dl: np.ndarray

    def vector(self, use_visdif: bool = True) -> np.ndarray:
        if use_visdif:
            return np.concatenate([self.o, self.g, self.l, self.dv, self.dl])
        return np.concatenate([self.o, self.g, self.l, np.zeros_like(self.dv), np.zeros_like(self.dl)])


def bundle_size(feature_dim: int, max_location_neighbors: int = 5) -> int:
    return 3 * feature_dim + 5 + 5 * max_location_neighbors


def encode_location(box: BoundingBox, width: float, height: float) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise DomainError("image size must be positive")
    if not box.is_valid() or not box.inside(width, height):
        raise DomainError(f"box {box} lies outside the {width}x{height} image")
    return np.array([box.x_tl / width, box.y_tl / height, box.x_br / width, box.y_br / height,
                     box.area / (width * height)])


def select_comparisons(target: ObjectRegion, scene: Scene | Sequence[ObjectRegion],
                       cfg: ComparisonConfig) -> list[ObjectRegion]:
    regions = scene.regions if isinstance(scene, Scene) else scene
    others = [r for r in regions if r.region_id != target.region_id]
    if cfg.comparison_set == "same_category":
        return [r for r in others if r.category_id == target.category_id]
    if cfg.comparison_set == "different_category":
        return [r for r in others if r.category_id != target.category_id]
    return others


def _vec(x) -> np.ndarray:
    return np.asarray(x.feature if isinstance(x, ObjectRegion) else x, dtype=np.float64)


def visual_difference(target, comparisons: Sequence, cfg: ComparisonConfig) -> np.ndarray:
    o = _vec(target)
    if not comparisons:
        return np.zeros_like(o)
    vecs = [_vec(c) for c in comparisons]
    if any(v.shape != o.shape for v in vecs):
        raise DimensionError(f"comparison features {[v.shape for v in vecs]} vs target {o.shape}")
    others = np.stack(vecs)
    diff = o[None, :] - others
    norm = np.linalg.norm(diff, axis=1)
    keep = norm >= cfg.epsilon
    unit = np.where(keep[:, None], diff / np.where(keep, norm, 1.0)[:, None], 0.0)
    if cfg.pooling == "avg":
        return unit.mean(axis=0)
    if cfg.pooling == "max":
        return unit.max(axis=0)
    return unit.min(axis=0)


def _center_distance(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return float(np.hypot(ax - bx, ay - by))


def location_neighbors(target: ObjectRegion, scene: Scene | Sequence[ObjectRegion],
                       cfg: ComparisonConfig) -> list[ObjectRegion]:
    """Nearest same-category regions by centre distance, ties by region id."""
    regions = scene.regions if isinstance(scene, Scene) else scene
    same = [r for r in regions if r.region_id != target.region_id and r.category_id == target.category_id]
    same.sort(key=lambda r: (_center_distance(target.box, r.box), r.region_id))
    return same[:cfg.max_location_neighbors]


def location_difference(target: ObjectRegion, scene: Scene | Sequence[ObjectRegion],
                        cfg: ComparisonConfig) -> np.ndarray:
    t = target.box
    if t.width <= 0 or t.height <= 0:
        raise DomainError(f"region {target.region_id} has zero area; location difference undefined")
    out = np.zeros(5 * cfg.max_location_neighbors)
    for k, r in enumerate(location_neighbors(target, scene, cfg)):
        b = r.box
        out[5 * k:5 * k + 5] = [
            (b.x_tl - t.x_tl) / t.width,
            (b.y_tl - t.y_tl) / t.height,
            (b.x_br - t.x_br) / t.width,
            (b.y_br - t.y_br) / t.height,
            b.area / t.area,
        ]
    return out


def context_vector(scene: Scene, source: str, feature_dim: int) -> np.ndarray:
    """Scene context: stored row if present; ``global`` falls back to the mean region feature."""
    if source not in CONTEXT_SOURCES:
        raise ValueError(f"context_source must be one of {CONTEXT_SOURCES}")
    if source == "none":
        return np.zeros(feature_dim)
    if source in scene.context_features:
        return np.asarray(scene.context_features[source], dtype=np.float64)
    if source == "global":
        if not scene.regions:
            return np.zeros(feature_dim)
        return np.mean([r.feature for r in scene.regions], axis=0)
    raise MissingFeatureError(f"scene {scene.scene_id} has no {source!r} context feature")


def bundle(target: ObjectRegion, scene: Scene, cfg: ComparisonConfig,
           context_source: str = "global", regions: Sequence[ObjectRegion] | None = None) -> FeatureBundle:
    """All five feature parts for ``target``.

    ``regions`` overrides the comparison population (e.g. a detected
    candidate set); context and image size always come from ``scene``.
    """
    population = scene.regions if regions is None else regions
    if target.feature is None:
        raise MissingFeatureError(f"region {target.region_id} has no feature")
    o = np.asarray(target.feature, dtype=np.float64)
    return FeatureBundle(
        o=o,
        g=context_vector(scene, context_source, o.shape[0]),
        l=encode_location(target.box, scene.width, scene.height),
        dv=visual_difference(o, select_comparisons(target, population, cfg), cfg),
        dl=location_difference(target, population, cfg),
    )


@dataclass(frozen=True)
class FeatureConfig:
    """Everything that decides how a region becomes a model input row."""
    comparison: ComparisonConfig = field(default_factory=ComparisonConfig)
    context_source: str = "global"
    use_visdif: bool = True

    def __post_init__(self):
        if self.context_source not in CONTEXT_SOURCES:
            raise ValueError(f"context_source must be one of {CONTEXT_SOURCES}")

    def input_dim(self, feature_dim: int) -> int:
        return bundle_size(feature_dim, self.comparison.max_location_neighbors)

    def to_json(self) -> dict:
        out = asdict(self.comparison)
        out.update(context_source=self.context_source, use_visdif=self.use_visdif)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "FeatureConfig":
        comp = {k: d[k] for k in ("comparison_set", "pooling", "max_location_neighbors", "epsilon") if k in d}
        return cls(ComparisonConfig(**comp), d.get("context_source", "global"), bool(d.get("use_visdif", True)))


def scene_inputs(scene: Scene, fcfg: FeatureConfig,
                 regions: Sequence[ObjectRegion] | None = None) -> np.ndarray:
    """One input row per region (scene order, or ``regions`` order when given)."""
    population = scene.regions if regions is None else list(regions)
    rows = [bundle(r, scene, fcfg.comparison, fcfg.context_source, population).vector(fcfg.use_visdif)
            for r in population]
    if not rows:
        return np.zeros((0, 0))
    return np.stack(rows)
