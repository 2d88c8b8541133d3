"""Pick the region an expression refers to by ranking candidates on likelihood."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BoundingBox, Dataset, ObjectRegion, Scene, Subset, Vocabulary, read_features, shard
from .errors import AnnotationIntegrityError, MissingFeatureError, ParseError
from .features import FeatureConfig, scene_inputs
from .speaker import pad_sequences, score_sequences
from .tensor import ParamStore

log = logging.getLogger(__name__)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    ih = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def rank(region_ids: Sequence[int], scores: Sequence[float]) -> list[tuple[int, float]]:
    """Descending by score; equal scores go to the lowest region id first."""
    return sorted(zip((int(r) for r in region_ids), (float(s) for s in scores)), key=lambda p: (-p[1], p[0]))


def comprehend(tokens: Sequence[int], candidates: Sequence[ObjectRegion], scene: Scene,
               params: ParamStore, fcfg: FeatureConfig, bos_id: int = 0) -> list[tuple[int, float]]:
    """Rank ``candidates`` for one encoded expression (END included).

    Comparison features treat each candidate as the target among all the
    candidates, so a detected set is compared only with itself.
    """
    if not candidates:
        raise ValueError("no candidates")
    for r in candidates:
        if r.feature is None:
            raise MissingFeatureError(f"candidate {r.region_id} has no feature")
    inputs = scene_inputs(scene, fcfg, candidates)
    targets, lengths = pad_sequences([list(tokens)] * len(candidates), end_id=tokens[-1])
    scores = score_sequences(params, inputs, targets, lengths, bos_id)
    return rank([r.region_id for r in candidates], scores)


@dataclass
class Query:
    """One expression to resolve: which scene, which candidates, what the answer is."""
    expression_id: int
    tokens: list[int]
    true_region: int
    true_box: BoundingBox
    kind: str
    scene_id: int


def queries_for(ds: Dataset, subset: Subset, vocab: Vocabulary) -> list[Query]:
    out = []
    for e in subset.expressions(ds):
        r = ds.regions[e.region_id]
        out.append(Query(e.expression_id, vocab.encode(e.words), r.region_id, r.box, e.kind, r.scene_id))
    return out


def score_queries(params: ParamStore, queries: Sequence[Query], inputs_by_scene: dict[int, np.ndarray],
                  ids_by_scene: dict[int, list[int]], bos_id: int = 0, chunk_rows: int = 4096) -> list[list[tuple[int, float]]]:
    """Batched version of :func:`comprehend` over precomputed candidate rows."""
    rankings: list[list[tuple[int, float]]] = [[] for _ in queries]
    pending: list[tuple[int, np.ndarray, list[int]]] = []
    rows = 0

    def flush():
        nonlocal pending, rows
        if not pending:
            return
        inputs = np.concatenate([p[1] for p in pending])
        seqs = [queries[q].tokens for q, x, _ in pending for _ in range(len(x))]
        targets, lengths = pad_sequences(seqs, end_id=seqs[0][-1])
        scores = score_sequences(params, inputs, targets, lengths, bos_id)
        at = 0
        for q, x, ids in pending:
            rankings[q] = rank(ids, scores[at:at + len(x)])
            at += len(x)
        pending, rows = [], 0

    for q, query in enumerate(queries):
        x = inputs_by_scene.get(query.scene_id)
        if x is None or len(x) == 0:
            continue
        pending.append((q, x, ids_by_scene[query.scene_id]))
        rows += len(x)
        if rows >= chunk_rows:
            flush()
    flush()
    return rankings


@dataclass
class ComprehensionResult:
    accuracy: float
    correct: int
    total: int
    missing_scenes: list[int]
    by_kind: dict[str, tuple[int, int]]
    predictions: dict[int, int]

    def kind_accuracy(self, kinds: Sequence[str]) -> float:
        c = sum(self.by_kind.get(k, (0, 0))[0] for k in kinds)
        n = sum(self.by_kind.get(k, (0, 0))[1] for k in kinds)
        return c / n if n else float("nan")

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "missing_scenes": self.missing_scenes,
            "by_kind": {k: {"correct": c, "total": n, "accuracy": c / n if n else None}
                        for k, (c, n) in sorted(self.by_kind.items())},
        }


@dataclass
class Detections:
    regions: dict[int, list[ObjectRegion]]


def load_detections(path, feature_path) -> Detections:
    """Detections JSON: ``{"<scene_id>": [{"id", "bbox": [x, y, w, h], "category_id"}, ...]}``.

    Each detection id must have a row in ``feature_path`` (same RFEA format).
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object keyed by scene id")
    _, feats = read_features(feature_path)
    out: dict[int, list[ObjectRegion]] = {}
    seen: set[int] = set()
    for key, dets in doc.items():
        try:
            sid = int(key)
            items = [(int(d["id"]), BoundingBox.from_xywh(d["bbox"]), int(d.get("category_id", 0))) for d in dets]
        except (TypeError, ValueError, KeyError) as exc:
            raise ParseError(f"{path}: bad detection entry for scene {key}: {exc}") from exc
        regs = []
        for did, box, cat in items:
            if did in seen:
                raise AnnotationIntegrityError(f"duplicate detection id {did}")
            seen.add(did)
            if did not in feats:
                raise MissingFeatureError(f"detection {did} has no feature row")
            regs.append(ObjectRegion(did, sid, cat, box, feats[did].astype(np.float64)))
        out[sid] = regs
    return Detections(out)


def merge_results(parts: Sequence[ComprehensionResult]) -> ComprehensionResult:
    correct = sum(p.correct for p in parts)
    total = sum(p.total for p in parts)
    by_kind: dict[str, tuple[int, int]] = {}
    preds: dict[int, int] = {}
    for p in parts:
        for k, (c, n) in p.by_kind.items():
            old = by_kind.get(k, (0, 0))
            by_kind[k] = (old[0] + c, old[1] + n)
        preds.update(p.predictions)
    return ComprehensionResult(correct / total if total else 0.0, correct, total,
                               sorted(s for p in parts for s in p.missing_scenes),
                               dict(sorted(by_kind.items())), dict(sorted(preds.items())))


def evaluate_comprehension(ds: Dataset, subset: Subset, params: ParamStore, vocab: Vocabulary,
                           fcfg: FeatureConfig, detections: Detections | None = None,
                           iou_threshold: float = 0.5, workers: int = 1) -> ComprehensionResult:
    """Top-1 accuracy. Ground-truth candidates need the exact region; detections need IoU > threshold.

    With ``workers > 1`` the scenes are sharded and scored on a thread pool;
    parameters are only read, and the shards are merged in a fixed order.
    """
    if workers > 1:
        parts = shard(ds, subset, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: evaluate_comprehension(ds, s, params, vocab, fcfg, detections,
                                                                     iou_threshold), parts))
        return merge_results(results)
    queries = queries_for(ds, subset, vocab)
    scene_ids = sorted({q.scene_id for q in queries})
    inputs, ids, boxes = {}, {}, {}
    missing = []
    for sid in scene_ids:
        scene = ds.scenes[sid]
        cands = scene.regions if detections is None else detections.regions.get(sid, [])
        if not cands:
            missing.append(sid)
            log.warning("scene %d has no candidates; its expressions count as failures", sid)
            continue
        inputs[sid] = scene_inputs(scene, fcfg, cands)
        ids[sid] = [r.region_id for r in cands]
        boxes[sid] = {r.region_id: r.box for r in cands}
    rankings = score_queries(params, queries, inputs, ids, vocab.bos_id)
    correct = 0
    by_kind: dict[str, list[int]] = {}
    preds = {}
    for q, ranking in zip(queries, rankings):
        ok = False
        if ranking:
            top = ranking[0][0]
            preds[q.expression_id] = top
            if detections is None:
                ok = top == q.true_region
            else:
                ok = iou(boxes[q.scene_id][top], q.true_box) > iou_threshold
        correct += ok
        tally = by_kind.setdefault(q.kind or "unlabelled", [0, 0])
        tally[0] += ok
        tally[1] += 1
    n = len(queries)
    return ComprehensionResult(correct / n if n else 0.0, correct, n, missing,
                               {k: (v[0], v[1]) for k, v in by_kind.items()}, preds)
