"""Seeded synthetic scenes with attribute features and template expressions.

Two scene families are produced:

* absolute scenes: 2-4 objects where same-category objects have distinct
  colours, so "the red dog" singles out its target.
* ladder scenes (``relative_fraction`` of all scenes): three objects of one
  category that differ only in horizontal position or in shade, plus an
  optional object of another category. The ladder is translated by a random
  offset that is wide compared to its own span, so the absolute value of an
  object's position or shade says almost nothing about its rank. The middle
  member ("the middle dog", "the medium dog") can only be singled out by
  comparing with its neighbours.

Feature layout (``FEATURE_DIM`` = 16): category one-hot (4), colour one-hot
(4), shade, size, six zero slots; Gaussian noise is added to every slot.
Every annotation also records the noise-free attributes so the generating
grammar can be checked symbolically.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Dataset, context_key, feature_bytes, parse_annotations, parse_features, tokenize

FEATURE_DIM = 16
CATEGORIES = ("person", "dog", "car", "ball")
COLOURS = ("red", "green", "blue", "yellow")
RELATIVE_KINDS = ("relative_position", "relative_shade")
EXTREME_KINDS = ("extreme_position", "extreme_shade")

_TEMPLATES = {
    "left": ("the left {n}", "the {n} on the left", "left {n}"),
    "middle": ("the middle {n}", "the {n} in the middle", "middle {n}"),
    "right": ("the right {n}", "the {n} on the right", "right {n}"),
    "darkest": ("the darkest {n}", "darkest {n}", "the {n} that is darkest"),
    "medium": ("the medium {n}", "medium {n}", "the {n} of medium shade"),
    "lightest": ("the lightest {n}", "lightest {n}", "the {n} that is lightest"),
    "colour": ("the {c} {n}", "{c} {n}", "a {c} {n}"),
    "colour_side": ("the {c} {n} on the {s}",),
    "single": ("the {n}", "the {c} {n}"),
}


@dataclass
class SynthConfig:
    num_scenes: int = 1000
    min_objects: int = 2
    max_objects: int = 4
    relative_fraction: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0
    location_words: bool = True
    width: int = 1000
    height: int = 600
    shade_range: float = 6.0
    shade_gap: tuple[float, float] = (0.3, 0.6)
    position_gap: tuple[int, int] = (12, 30)
    ladder_extra_prob: float = 0.5
    min_refs: int = 1
    max_refs: int = 3

    def __post_init__(self):
        self.shade_gap = tuple(self.shade_gap)
        self.position_gap = tuple(self.position_gap)
        if self.num_scenes < 0:
            raise ValueError("num_scenes must be >= 0")
        if not 0 <= self.relative_fraction <= 1:
            raise ValueError("relative_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 2 <= self.min_objects <= self.max_objects <= 1 + len(CATEGORIES):
            raise ValueError("need 2 <= min_objects <= max_objects <= 5")
        if self.relative_fraction > 0 and self.max_objects < 3:
            raise ValueError("ladder scenes need max_objects >= 3")
        if not 1 <= self.min_refs <= self.max_refs <= 3:
            raise ValueError("need 1 <= min_refs <= max_refs <= 3")
        if self.width < 400 or self.height < 200:
            raise ValueError("image must be at least 400x200")

    def to_json(self) -> dict:
        d = asdict(self)
        d["shade_gap"] = list(self.shade_gap)
        d["position_gap"] = list(self.position_gap)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def attribute_vector(category: int, colour: int, shade: float, size: float) -> np.ndarray:
    v = np.zeros(FEATURE_DIM)
    v[category] = 1.0
    v[4 + colour] = 1.0
    v[8] = shade
    v[9] = size
    return v


class _Builder:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.images, self.anns, self.refs = [], [], []
        self.features: list[tuple[int, np.ndarray]] = []
        self.next_region = 1
        self.next_ref = 1

    # geometry -------------------------------------------------------------
    def _box(self, cx: float | None = None) -> list[int]:
        rng, W, H = self.rng, self.cfg.width, self.cfg.height
        w = int(rng.integers(40, 61))
        h = int(rng.integers(40, 81))
        if cx is None:
            x = int(rng.integers(0, W - w + 1))
        else:
            x = int(round(cx - w / 2))
        y = int(rng.integers(0, H - h + 1))
        return [x, y, w, h]

    def _place(self, boxes: list[list[int]], cx: float | None = None) -> list[int]:
        """Fresh box that neither contains nor is contained by an existing one."""
        while True:
            b = self._box(cx)
            if not any(_contains(b, o) or _contains(o, b) for o in boxes):
                return b

    # emission -------------------------------------------------------------
    def _emit_object(self, scene_id: int, cat: int, colour: int, shade: float, box: list[int]) -> dict:
        size = round(float(np.sqrt(box[2] * box[3]) / 100.0), 6)
        shade = round(float(shade), 6)
        rid = self.next_region
        self.next_region += 1
        ann = {"id": rid, "image_id": scene_id, "category_id": cat + 1, "bbox": box,
               "attributes": {"colour": COLOURS[colour], "shade": shade, "size": size}}
        self.anns.append(ann)
        clean = attribute_vector(cat, colour, shade, size)
        self.features.append((rid, clean + self.rng.normal(0.0, self.cfg.noise_sigma, FEATURE_DIM)))
        return ann

    def _emit_refs(self, ann: dict, templates, kind: str, **slots) -> None:
        k = int(self.rng.integers(self.cfg.min_refs, self.cfg.max_refs + 1))
        k = min(k, len(templates))
        picks = sorted(self.rng.choice(len(templates), size=k, replace=False).tolist())
        for p in picks:
            raw = templates[p].format(**slots)
            self.refs.append({"id": self.next_ref, "ann_id": ann["id"], "raw": raw, "kind": kind})
            self.next_ref += 1

    def _extras(self, scene_id: int, taken: set[int], count: int, boxes: list[list[int]]) -> None:
        cats = [c for c in range(len(CATEGORIES)) if c not in taken]
        order = self.rng.permutation(len(cats))[:count]
        for k in sorted(order.tolist()):
            cat = cats[k]
            colour = int(self.rng.integers(len(COLOURS)))
            box = self._place(boxes)
            boxes.append(box)
            ann = self._emit_object(scene_id, cat, colour, self._free_shade(), box)
            self._emit_refs(ann, _TEMPLATES["single"], "absolute", n=CATEGORIES[cat], c=COLOURS[colour])

    def _free_shade(self) -> float:
        return float(self.rng.uniform(0.0, self.cfg.shade_range + 2 * self.cfg.shade_gap[1]))

    # scene families -------------------------------------------------------
    def absolute_scene(self, scene_id: int) -> None:
        cfg, rng = self.cfg, self.rng
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        k = int(rng.integers(2, min(n, len(COLOURS)) + 1))
        cat = int(rng.integers(len(CATEGORIES)))
        colours = rng.permutation(len(COLOURS))[:k].tolist()
        boxes: list[list[int]] = []
        members = []
        for colour in colours:
            box = self._place(boxes)
            boxes.append(box)
            members.append((self._emit_object(scene_id, cat, colour, self._free_shade(), box), colour))
        xs = [m[0]["bbox"][0] + m[0]["bbox"][2] / 2 for m in members]
        for (ann, colour), x in zip(members, xs):
            templates = _TEMPLATES["colour"]
            side = None
            if cfg.location_words and x == min(xs) and xs.count(x) == 1:
                side = "left"
            elif cfg.location_words and x == max(xs) and xs.count(x) == 1:
                side = "right"
            if side:
                templates = templates + _TEMPLATES["colour_side"]
            self._emit_refs(ann, templates, "absolute", n=CATEGORIES[cat], c=COLOURS[colour], s=side)
        self._extras(scene_id, {cat}, min(n - k, len(CATEGORIES) - 1), boxes)

    def ladder_scene(self, scene_id: int) -> None:
        cfg, rng = self.cfg, self.rng
        cat = int(rng.integers(len(CATEGORIES)))
        colour = int(rng.integers(len(COLOURS)))
        by_position = cfg.location_words and bool(rng.integers(2))
        boxes: list[list[int]] = []
        members = []
        if by_position:
            gaps = rng.uniform(*cfg.position_gap, size=2)
            span = float(gaps.sum())
            lo = 30.0
            start = rng.uniform(lo, cfg.width - 30.0 - span)
            centres = [start, start + gaps[0], start + span]
            shade = self._free_shade()
            for cx in centres:
                box = self._place(boxes, cx)
                boxes.append(box)
                members.append(self._emit_object(scene_id, cat, colour, shade, box))
            names, kinds = ("left", "middle", "right"), ("extreme_position", "relative_position", "extreme_position")
        else:
            gaps = rng.uniform(*cfg.shade_gap, size=2)
            base = rng.uniform(0.0, cfg.shade_range)
            shades = [base + gaps[0] + gaps[1], base + gaps[0], base]     # darkest first
            for s in shades:
                box = self._place(boxes)
                boxes.append(box)
                members.append(self._emit_object(scene_id, cat, colour, s, box))
            names, kinds = ("darkest", "medium", "lightest"), ("extreme_shade", "relative_shade", "extreme_shade")
        for ann, name, kind in zip(members, names, kinds):
            self._emit_refs(ann, _TEMPLATES[name], kind, n=CATEGORIES[cat])
        if cfg.max_objects >= 4 and rng.uniform() < cfg.ladder_extra_prob:
            self._extras(scene_id, {cat}, 1, boxes)

    # context rows -----------------------------------------------------------
    def context_rows(self, scene_id: int, first_feature: int, first_ann: int) -> None:
        rows = self.features[first_feature:]
        boxes = {a["id"]: a["bbox"] for a in self.anns[first_ann:]}
        feats = np.stack([f for _, f in rows])
        self.features.append((context_key(scene_id, "global"), feats.mean(axis=0)))
        W, H = self.cfg.width, self.cfg.height
        for n in (2, 3, 4):
            # mean over regions whose centre lies in the central 1/n window
            half_w, half_h = W / (2 * n), H / (2 * n)
            inside = [f for rid, f in rows
                      if abs(boxes[rid][0] + boxes[rid][2] / 2 - W / 2) <= half_w
                      and abs(boxes[rid][1] + boxes[rid][3] / 2 - H / 2) <= half_h]
            vec = np.mean(inside, axis=0) if inside else np.zeros(FEATURE_DIM)
            self.features.append((context_key(scene_id, f"scale{n}"), vec))


def _contains(a: list[int], b: list[int]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and a[0] + a[2] >= b[0] + b[2] and a[1] + a[3] >= b[1] + b[3]


@dataclass
class SynthOutput:
    annotations: dict
    features: list[tuple[int, np.ndarray]]

    def annotation_text(self) -> str:
        return json.dumps(self.annotations, sort_keys=True, separators=(",", ":")) + "\n"

    def feature_data(self) -> bytes:
        return feature_bytes(self.features, FEATURE_DIM)

    def dataset(self) -> Dataset:
        """Load through the regular parsers, exactly as the written files would be."""
        dim, feats = parse_features(self.feature_data())
        return parse_annotations(self.annotations, feats, dim)

    def write(self, out_dir, stem: str = "synth") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ann_path, feat_path = out / f"{stem}.json", out / f"{stem}.rfea"
        ann_path.write_text(self.annotation_text(), encoding="utf-8")
        feat_path.write_bytes(self.feature_data())
        return ann_path, feat_path


def generate(cfg: SynthConfig) -> SynthOutput:
    b = _Builder(cfg)
    for scene_id in range(1, cfg.num_scenes + 1):
        b.images.append({"id": scene_id, "width": cfg.width, "height": cfg.height})
        first_feature, first_ann = len(b.features), len(b.anns)
        if b.rng.uniform() < cfg.relative_fraction:
            b.ladder_scene(scene_id)
        else:
            b.absolute_scene(scene_id)
        b.context_rows(scene_id, first_feature, first_ann)
    doc = {
        "categories": [{"id": k + 1, "name": n} for k, n in enumerate(CATEGORIES)],
        "images": b.images,
        "annotations": b.anns,
        "refs": b.refs,
        "synth_config": cfg.to_json(),
    }
    return SynthOutput(doc, b.features)


# --- symbolic resolver -------------------------------------------------------

_ORDER_WORDS = {"left", "middle", "right", "darkest", "medium", "lightest"}


def resolve(words: list[str], objects: list[dict]) -> list[int]:
    """Region ids matching ``words`` under the generating grammar.

    ``objects`` are annotation dicts with ``attributes``. Rank words
    (left/middle/right by centre x, darkest/medium/lightest by shade) are
    evaluated over all objects of the named category; ``middle``/``medium``
    need exactly three of them.
    """
    nouns = [w for w in words if w in CATEGORIES]
    if len(nouns) != 1:
        return []
    cat = CATEGORIES.index(nouns[0]) + 1
    pool = [o for o in objects if o["category_id"] == cat]
    colours = [w for w in words if w in COLOURS]
    chosen = [o for o in pool if not colours or o["attributes"]["colour"] == colours[0]]
    for w in (w for w in words if w in _ORDER_WORDS):
        if w in ("left", "middle", "right"):
            key = lambda o: o["bbox"][0] + o["bbox"][2] / 2
            ranked = sorted(pool, key=key)
        else:
            key = lambda o: -o["attributes"]["shade"]
            ranked = sorted(pool, key=key)
        vals = [key(o) for o in ranked]
        if w in ("left", "darkest"):
            pick, clash = ranked[0], len(vals) > 1 and vals[0] == vals[1]
        elif w in ("right", "lightest"):
            pick, clash = ranked[-1], len(vals) > 1 and vals[-1] == vals[-2]
        else:
            if len(ranked) != 3:
                return []
            pick, clash = ranked[1], len(set(vals)) != 3
        if clash:
            return []
        chosen = [o for o in chosen if o["id"] == pick["id"]]
    return [o["id"] for o in chosen]


def check_unambiguous(doc: dict) -> list[int]:
    """Expression ids whose resolution is not exactly their own target."""
    by_scene: dict[int, list[dict]] = {}
    for a in doc["annotations"]:
        by_scene.setdefault(a["image_id"], []).append(a)
    scene_of = {a["id"]: a["image_id"] for a in doc["annotations"]}
    bad = []
    for r in doc["refs"]:
        hit = resolve(tokenize(r["raw"]), by_scene[scene_of[r["ann_id"]]])
        if hit != [r["ann_id"]]:
            bad.append(r["id"])
    return bad
