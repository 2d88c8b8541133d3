"""Scenes, regions and referring expressions: loading, vocabulary, splits.

Annotation file (UTF-8 JSON)::

    {
      "categories":  [{"id": 1, "name": "person"}, ...],          # optional
      "images":      [{"id": 7, "width": 640, "height": 480}, ...],
      "annotations": [{"id": 70, "image_id": 7, "category_id": 1,
                       "bbox": [x_tl, y_tl, w, h]}, ...],
      "refs":        [{"id": 700, "ann_id": 70, "raw": "the man on the left",
                       "tokens": ["the", "man", "on", "the", "left"],   # optional
                       "kind": "absolute"}, ...]                       # optional
    }

Feature file (little-endian binary)::

    b"RFEA" | version u32 | count u64 | dim u64 | count x (region_id u64, dim x f32)

Ids with the top bit set carry scene-level context rows, see :func:`context_key`.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AnnotationIntegrityError, FeatureIntegrityError, ParseError

FEATURE_MAGIC = b"RFEA"
FEATURE_VERSION = 1
CONTEXT_FLAG = 1 << 63
CONTEXT_TAG_SHIFT = 56
CONTEXT_TAGS = {"global": 0, "scale2": 2, "scale3": 3, "scale4": 4}
_TAG_NAMES = {v: k for k, v in CONTEXT_TAGS.items()}


@dataclass(frozen=True)
class BoundingBox:
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    @classmethod
    def from_xywh(cls, bbox: Sequence[float]) -> "BoundingBox":
        x, y, w, h = (float(v) for v in bbox)
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))

    def to_xywh(self) -> list[float]:
        return [self.x_tl, self.y_tl, self.width, self.height]

    def is_valid(self) -> bool:
        return self.x_tl <= self.x_br and self.y_tl <= self.y_br

    def inside(self, width: float, height: float) -> bool:
        return 0 <= self.x_tl and 0 <= self.y_tl and self.x_br <= width and self.y_br <= height


@dataclass
class ObjectRegion:
    region_id: int
    scene_id: int
    category_id: int
    box: BoundingBox
    feature: np.ndarray


@dataclass
class Scene:
    scene_id: int
    width: float
    height: float
    regions: list[ObjectRegion] = field(default_factory=list)
    context_features: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class RefExpression:
    """One expression. ``words`` are surface tokens; ids come from a Vocabulary."""

    expression_id: int
    region_id: int
    words: tuple[str, ...]
    raw_text: str
    kind: str = ""


@dataclass
class Dataset:
    scenes: dict[int, Scene] = field(default_factory=dict)
    regions: dict[int, ObjectRegion] = field(default_factory=dict)
    expressions: list[RefExpression] = field(default_factory=list)
    categories: dict[int, str] = field(default_factory=dict)
    feature_dim: int = 0

    def __post_init__(self):
        self._by_region: dict[int, list[RefExpression]] = defaultdict(list)
        for e in self.expressions:
            self._by_region[e.region_id].append(e)

    def counts(self) -> tuple[int, int, int]:
        return len(self.scenes), len(self.regions), len(self.expressions)

    def expressions_of(self, region_id: int) -> list[RefExpression]:
        return self._by_region.get(region_id, [])

    def scene_of(self, region_id: int) -> Scene:
        return self.scenes[self.regions[region_id].scene_id]

    def referred_region_ids(self) -> set[int]:
        return {e.region_id for e in self.expressions}


# --- tokenization and vocabulary -------------------------------------------

_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


class Vocabulary:
    BOS = "<bos>"
    END = "<end>"
    UNK = "<unk>"
    SPECIALS = (BOS, END, UNK)

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != self.SPECIALS:
            tokens = list(self.SPECIALS) + [t for t in tokens if t not in self.SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be distinct")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def end_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, words: Iterable[str] | str) -> list[int]:
        """Token ids terminated by END. Strings are tokenized first."""
        if isinstance(words, str):
            words = tokenize(words)
        return [self.stoi.get(w, self.unk_id) for w in words] + [self.end_id]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == self.end_id:
                break
            if i == self.bos_id:
                continue
            out.append(self.itos[i])
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.itos, ensure_ascii=False).encode("utf-8")).hexdigest()

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocabulary(expressions: Iterable, min_count: int = 1) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times; ids by frequency, then alphabetically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter = Counter()
    for e in expressions:
        if isinstance(e, RefExpression):
            counts.update(e.words)
        elif isinstance(e, str):
            counts.update(tokenize(e))
        else:
            counts.update(e)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in Vocabulary.SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(Vocabulary.SPECIALS) + kept)


# --- feature file ----------------------------------------------------------

def context_key(scene_id: int, source: str) -> int:
    if not 0 <= scene_id < (1 << CONTEXT_TAG_SHIFT):
        raise ValueError(f"scene id {scene_id} too large for a context key")
    return CONTEXT_FLAG | (CONTEXT_TAGS[source] << CONTEXT_TAG_SHIFT) | scene_id


def split_context_key(key: int) -> tuple[int, str] | None:
    if not key & CONTEXT_FLAG:
        return None
    tag = (key >> CONTEXT_TAG_SHIFT) & 0x7F
    if tag not in _TAG_NAMES:
        raise FeatureIntegrityError(f"unknown context tag {tag} in key {key:#x}")
    return key & ((1 << CONTEXT_TAG_SHIFT) - 1), _TAG_NAMES[tag]


def feature_bytes(rows: dict[int, np.ndarray] | Sequence[tuple[int, np.ndarray]], dim: int | None = None) -> bytes:
    items = list(rows.items()) if isinstance(rows, dict) else list(rows)
    if dim is None:
        dim = len(items[0][1]) if items else 0
    chunks = [FEATURE_MAGIC, struct.pack("<IQQ", FEATURE_VERSION, len(items), dim)]
    for rid, vec in items:
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise FeatureIntegrityError(f"row {rid} has shape {vec.shape}, expected ({dim},)")
        chunks.append(struct.pack("<Q", rid))
        chunks.append(vec.tobytes())
    return b"".join(chunks)


def parse_features(buf: bytes) -> tuple[int, dict[int, np.ndarray]]:
    """Decode a feature file into ``(dim, {id: float32 vector})``."""
    if len(buf) < 24 or buf[:4] != FEATURE_MAGIC:
        raise FeatureIntegrityError("bad feature-file magic or header")
    version, count, dim = struct.unpack_from("<IQQ", buf, 4)
    if version != FEATURE_VERSION:
        raise FeatureIntegrityError(f"unsupported feature-file version {version}")
    row_size = 8 + 4 * dim
    if len(buf) != 24 + count * row_size:
        raise FeatureIntegrityError(
            f"feature file size {len(buf)} does not match header ({count} rows of dim {dim})")
    rows: dict[int, np.ndarray] = {}
    dt = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    table = np.frombuffer(buf, dtype=dt, count=count, offset=24)
    for rid, vec in zip(table["id"].tolist(), table["v"]):
        if rid in rows:
            raise FeatureIntegrityError(f"duplicate feature row for id {rid}")
        if not np.all(np.isfinite(vec)):
            raise FeatureIntegrityError(f"non-finite values in feature row {rid}")
        rows[int(rid)] = vec.copy()
    return int(dim), rows


def write_features(path, rows, dim: int | None = None) -> None:
    Path(path).write_bytes(feature_bytes(rows, dim))


def read_features(path) -> tuple[int, dict[int, np.ndarray]]:
    return parse_features(Path(path).read_bytes())


# --- annotation loading ----------------------------------------------------

def _need(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing field {key!r}")
    return obj[key]


def _as_int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{where}: expected integer, got {v!r}")
    return v


def _as_num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ParseError(f"{where}: expected finite number, got {v!r}")
    return float(v)


def parse_annotations(doc: dict, features: dict[int, np.ndarray], feature_dim: int) -> Dataset:
    if not isinstance(doc, dict):
        raise ParseError("annotation document must be a JSON object")
    for key in ("images", "annotations", "refs"):
        if not isinstance(doc.get(key, None), list):
            raise ParseError(f"annotation document needs a list field {key!r}")

    categories: dict[int, str] = {}
    for c in doc.get("categories", []):
        cid = _as_int(_need(c, "id", "category"), "category.id")
        if cid in categories:
            raise AnnotationIntegrityError(f"duplicate category id {cid}")
        categories[cid] = str(c.get("name", cid))

    scenes: dict[int, Scene] = {}
    for img in doc["images"]:
        sid = _as_int(_need(img, "id", "image"), "image.id")
        w = _as_num(_need(img, "width", f"image {sid}"), "image.width")
        h = _as_num(_need(img, "height", f"image {sid}"), "image.height")
        if sid in scenes:
            raise AnnotationIntegrityError(f"duplicate image id {sid}")
        if w <= 0 or h <= 0:
            raise AnnotationIntegrityError(f"image {sid} has non-positive size")
        scenes[sid] = Scene(sid, w, h)

    regions: dict[int, ObjectRegion] = {}
    for ann in doc["annotations"]:
        rid = _as_int(_need(ann, "id", "annotation"), "annotation.id")
        where = f"annotation {rid}"
        sid = _as_int(_need(ann, "image_id", where), "annotation.image_id")
        cid = _as_int(_need(ann, "category_id", where), "annotation.category_id")
        bbox = _need(ann, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ParseError(f"{where}: bbox must be [x, y, w, h]")
        box = BoundingBox.from_xywh([_as_num(v, f"{where}.bbox") for v in bbox])
        if rid in regions:
            raise AnnotationIntegrityError(f"duplicate region_id {rid}")
        if rid & CONTEXT_FLAG:
            raise AnnotationIntegrityError(f"region id {rid} uses the reserved context namespace")
        if sid not in scenes:
            raise AnnotationIntegrityError(f"{where} references unknown image {sid}")
        if categories and cid not in categories:
            raise AnnotationIntegrityError(f"{where} has unknown category {cid}")
        scene = scenes[sid]
        if not box.is_valid() or not box.inside(scene.width, scene.height):
            raise AnnotationIntegrityError(f"{where} box {bbox} outside image {sid}")
        if rid not in features:
            raise FeatureIntegrityError(f"no feature row for region {rid}")
        region = ObjectRegion(rid, sid, cid, box, np.asarray(features[rid], dtype=np.float64))
        regions[rid] = region
        scene.regions.append(region)
    if not categories:
        categories = {cid: str(cid) for cid in sorted({r.category_id for r in regions.values()})}

    for key, vec in features.items():
        parsed = split_context_key(key)
        if parsed is not None:
            sid, source = parsed
            if sid in scenes:
                scenes[sid].context_features[source] = np.asarray(vec, dtype=np.float64)

    expressions: list[RefExpression] = []
    seen: set[int] = set()
    for ref in doc["refs"]:
        eid = _as_int(_need(ref, "id", "ref"), "ref.id")
        rid = _as_int(_need(ref, "ann_id", f"ref {eid}"), "ref.ann_id")
        raw = _need(ref, "raw", f"ref {eid}")
        if not isinstance(raw, str):
            raise ParseError(f"ref {eid}: raw must be a string")
        if eid in seen:
            raise AnnotationIntegrityError(f"duplicate expression id {eid}")
        seen.add(eid)
        if rid not in regions:
            raise AnnotationIntegrityError(f"ref {eid} references unknown region {rid}")
        words = ref.get("tokens")
        if words is None:
            words = tokenize(raw)
        elif not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise ParseError(f"ref {eid}: tokens must be a list of strings")
        else:
            words = [w.lower() for w in words if w]
        if not words:
            raise AnnotationIntegrityError(f"ref {eid} has no tokens")
        expressions.append(RefExpression(eid, rid, tuple(words), raw, str(ref.get("kind", ""))))

    return Dataset(scenes, regions, expressions, categories, feature_dim)


def load_dataset(annotation_path, feature_path) -> Dataset:
    try:
        doc = json.loads(Path(annotation_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed annotation JSON: {exc}") from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"annotation file is not UTF-8: {exc}") from None
    dim, rows = read_features(feature_path)
    return parse_annotations(doc, rows, dim)


def dataset_to_json(ds: Dataset) -> dict:
    """Inverse of :func:`parse_annotations` for the annotation half."""
    return {
        "categories": [{"id": c, "name": n} for c, n in sorted(ds.categories.items())],
        "images": [{"id": s.scene_id, "width": s.width, "height": s.height}
                   for s in ds.scenes.values()],
        "annotations": [{"id": r.region_id, "image_id": r.scene_id, "category_id": r.category_id,
                         "bbox": r.box.to_xywh()} for r in ds.regions.values()],
        "refs": [{"id": e.expression_id, "ann_id": e.region_id, "raw": e.raw_text,
                  "tokens": list(e.words), **({"kind": e.kind} if e.kind else {})}
                 for e in ds.expressions],
    }


# --- splits ----------------------------------------------------------------

@dataclass(frozen=True)
class Subset:
    """A named side of a split: the regions whose expressions it owns."""

    name: str
    region_ids: frozenset
    scene_ids: frozenset

    def expressions(self, ds: Dataset) -> list[RefExpression]:
        return [e for e in ds.expressions if e.region_id in self.region_ids]

    def to_json(self) -> dict:
        return {"regions": sorted(self.region_ids), "scenes": sorted(self.scene_ids)}


def _subset(name: str, ds: Dataset, region_ids: Iterable[int]) -> Subset:
    rids = frozenset(region_ids)
    return Subset(name, rids, frozenset(ds.regions[r].scene_id for r in rids))


def whole(ds: Dataset, name: str = "all") -> Subset:
    return _subset(name, ds, ds.regions)


def shard(ds: Dataset, subset: Subset, n: int) -> list[Subset]:
    """Deal the subset's scenes round-robin (ascending id) into ``n`` parts."""
    if n < 1:
        raise ValueError("need at least one shard")
    order = sorted(subset.scene_ids)
    parts = []
    for k in range(min(n, max(len(order), 1))):
        scenes = set(order[k::n])
        parts.append(_subset(f"{subset.name}.{k}", ds,
                             [r for r in subset.region_ids if ds.regions[r].scene_id in scenes]))
    return parts


def split_per_object(ds: Dataset, ratio: float, seed: int) -> tuple[Subset, Subset]:
    """Random partition of regions; regions of one scene may land on both sides."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    ids = np.array(sorted(ds.regions), dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(math.floor(ratio * len(ids) + 0.5))
    train = ids[order[:n_train]].tolist()
    test = ids[order[n_train:]].tolist()
    return _subset("train", ds, train), _subset("test", ds, test)


def people_vs_objects_eligibility(ds: Dataset, person_category_id: int) -> tuple[list[int], list[int]]:
    """Scene ids eligible for testA (>=2 referred people) and testB (the rest with a repeated category)."""
    referred = ds.referred_region_ids()
    elig_a, elig_b = [], []
    for sid in sorted(ds.scenes):
        cats = Counter(r.category_id for r in ds.scenes[sid].regions if r.region_id in referred)
        if cats.get(person_category_id, 0) >= 2:
            elig_a.append(sid)
        elif any(n >= 2 for c, n in cats.items() if c != person_category_id):
            elig_b.append(sid)
    return elig_a, elig_b


def split_people_vs_objects(ds: Dataset, person_category_id: int, test_fraction: float = 0.15,
                            seed: int = 0) -> tuple[Subset, Subset, Subset]:
    """Scene-level split into train / testA (people) / testB (other objects)."""
    if ds.categories and person_category_id not in ds.categories:
        raise ValueError(f"unknown person category {person_category_id}")
    if not 0 <= test_fraction <= 1:
        raise ValueError("test_fraction must lie in [0, 1]")
    elig_a, elig_b = people_vs_objects_eligibility(ds, person_category_id)
    rng = np.random.default_rng(seed)
    picks = []
    for elig in (elig_a, elig_b):
        n = int(math.floor(test_fraction * len(elig) + 0.5))
        order = rng.permutation(len(elig))
        picks.append({elig[i] for i in order[:n]})
    test_a, test_b = picks
    regions_of = lambda scenes: [r.region_id for s in sorted(scenes) for r in ds.scenes[s].regions]
    train_scenes = set(ds.scenes) - test_a - test_b
    return (_subset("train", ds, regions_of(train_scenes)),
            _subset("testA", ds, regions_of(test_a)),
            _subset("testB", ds, regions_of(test_b)))


def save_split(path, subsets: Sequence[Subset], meta: dict | None = None) -> None:
    doc = dict(meta or {})
    doc["splits"] = {s.name: s.to_json() for s in subsets}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_split(path) -> dict[str, Subset]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return {name: Subset(name, frozenset(v["regions"]), frozenset(v["scenes"]))
                for name, v in doc["splits"].items()}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed split file {path}: {exc}") from None
