"""Sentence-level generation metrics and the duplicate-expression rate.

Scores are computed per generated sentence against all references of its
object and averaged. METEOR here is the exact-match variant only: there is
no stemming or synonym table.
"""
from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .data import Dataset, Subset, Vocabulary, shard
from .features import FeatureConfig, scene_inputs
from .speaker import generate, greedy_decode
from .tensor import ParamStore

Tokens = Sequence[Hashable]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Tokens, references: Sequence[Tokens], n: int = 2) -> float:
    """Geometric mean of clipped 1..n-gram precisions times the brevity penalty.

    Orders 2 and up use add-one smoothing; the brevity penalty uses the
    reference length closest to the candidate (shorter wins ties).
    """
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    if not references:
        raise ValueError("at least one reference is required")
    c = list(candidate)
    if not c:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        cand = _ngrams(c, k)
        best: Counter = Counter()
        for ref in references:
            for g, cnt in _ngrams(list(ref), k).items():
                best[g] = max(best[g], cnt)
        hits = sum(min(cnt, best[g]) for g, cnt in cand.items())
        total = sum(cand.values())
        if k >= 2:
            hits, total = hits + 1, total + 1
        if hits == 0:
            return 0.0
        log_p += math.log(hits / total) / n
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - len(c)), L))
    bp = 1.0 if len(c) > r else math.exp(1.0 - r / len(c))
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    if not references:
        raise ValueError("at least one reference is required")
    c = list(candidate)
    if not c:
        return 0.0
    best = 0.0
    for ref in references:
        ref = list(ref)
        lcs = lcs_length(c, ref)
        if lcs == 0 or not ref:
            continue
        p, r = lcs / len(c), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def _min_chunks(cand: list, ref: list, budget: int = 20000) -> tuple[int, int]:
    """(matches, chunks) for a maximum exact alignment with the fewest chunks."""
    quota = Counter(cand) & Counter(ref)
    matches = sum(quota.values())
    if matches == 0:
        return 0, 0
    positions: dict = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)
    remaining_c = Counter(cand)
    best = [matches + 1]
    nodes = [0]

    def dfs(i, prev_j, used, left, chunks):
        nodes[0] += 1
        if chunks >= best[0]:
            return
        if i == len(cand):
            best[0] = chunks
            return
        w = cand[i]
        remaining_c[w] -= 1
        if w in positions and left[w] > 0:
            opts = [j for j in positions[w] if j not in used]
            opts.sort(key=lambda j: j != prev_j + 1)       # try extending the chunk first
            for j in opts:
                if nodes[0] > budget and best[0] <= matches:
                    break
                left[w] -= 1
                used.add(j)
                dfs(i + 1, j, used, left, chunks + (0 if j == prev_j + 1 and prev_j >= 0 else 1))
                used.discard(j)
                left[w] += 1
        # skipping is allowed only while enough later occurrences remain to fill the quota
        if left.get(w, 0) <= remaining_c[w]:
            dfs(i + 1, -2, used, left, chunks)
        remaining_c[w] += 1

    dfs(0, -2, set(), Counter(quota), 0)
    return matches, best[0]


def meteor_exact(candidate: Tokens, references: Sequence[Tokens], alpha: float = 0.9,
                 gamma: float = 0.5, beta: float = 3.0) -> float:
    """``F_mean * (1 - gamma * (chunks / matches) ** beta)``, best over references."""
    if not references:
        raise ValueError("at least one reference is required")
    c = list(candidate)
    if not c:
        return 0.0
    best = 0.0
    for ref in references:
        ref = list(ref)
        m, chunks = _min_chunks(c, ref)
        if m == 0:
            continue
        p, r = m / len(c), m / len(ref)
        fmean = p * r / (alpha * p + (1 - alpha) * r)
        best = max(best, fmean * (1 - gamma * (chunks / m) ** beta))
    return best


def has_duplicate(expressions: Sequence[Tokens]) -> bool:
    seen = set()
    for e in expressions:
        key = tuple(e)
        if key in seen:
            return True
        seen.add(key)
    return False


def duplicate_rate(scenes: Sequence[Sequence[Tokens]]) -> float:
    """Share of scenes where two same-category objects got the same expression.

    Each scene entry lists the expressions generated for its same-category objects.
    """
    if not scenes:
        raise ValueError("no scenes")
    if any(len(s) < 2 for s in scenes):
        raise ValueError("every scene needs at least two same-category objects")
    return sum(has_duplicate(s) for s in scenes) / len(scenes)


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    tied: bool = False
    max_len: int = 12
    beam_size: int = 3


def generate_for_subset(ds: Dataset, subset: Subset, params: ParamStore, vocab: Vocabulary,
                        fcfg: FeatureConfig, dcfg: DecodeConfig, epsilon: float = 1e-8):
    """Decode every same-category group of each subset scene.

    Returns ``{region_id: words}`` for regions of the subset and the list of
    groups (region ids, in scene order) that were decoded together.
    """
    referred = {e.region_id for e in subset.expressions(ds)}
    rows, groups, group_ids = [], [], []
    for sid in sorted(subset.scene_ids):
        scene = ds.scenes[sid]
        if not any(r.region_id in referred for r in scene.regions):
            continue
        x = scene_inputs(scene, fcfg)
        by_cat: dict[int, list[int]] = {}
        for k, r in enumerate(scene.regions):
            by_cat.setdefault(r.category_id, []).append(k)
        for cat in sorted(by_cat):
            ks = by_cat[cat]
            if not any(scene.regions[k].region_id in referred for k in ks):
                continue
            start = len(rows)
            rows.extend(x[k] for k in ks)
            groups.append(np.arange(start, len(rows)))
            group_ids.append([scene.regions[k].region_id for k in ks])
    if not rows:
        return {}, []
    inputs = np.stack(rows)
    kw = dict(bos_id=vocab.bos_id, end_id=vocab.end_id, epsilon=epsilon)
    if dcfg.mode == "greedy":
        outs = greedy_decode(params, inputs, groups if dcfg.tied else None, dcfg.max_len,
                             banned=(vocab.bos_id,), **kw)
    else:
        outs = [None] * len(rows)
        for g in groups:
            for k, o in zip(g, generate(params, inputs[g], "beam", dcfg.tied, dcfg.max_len,
                                        dcfg.beam_size, **kw)):
                outs[k] = o
    words = {}
    for g, ids in zip(groups, group_ids):
        for k, rid in zip(g, ids):
            words[rid] = vocab.decode(outs[k])
    return {r: w for r, w in words.items() if r in referred}, group_ids


def generation_table(generated: dict[int, Tokens], references: dict[int, Sequence[Tokens]],
                     scenes: Sequence[Sequence[Sequence[int]]] = ()) -> dict:
    """Object-averaged sentence scores plus the duplicate rate.

    ``scenes`` holds, per scene, its same-category groups of region ids; a
    scene is flagged when any group contains a repeated expression, and only
    groups with at least two generated members are considered.
    """
    scores = {"bleu1": [], "bleu2": [], "rouge_l": [], "meteor": []}
    for rid in sorted(generated):
        cand, rr = list(generated[rid]), references[rid]
        scores["bleu1"].append(bleu(cand, rr, 1))
        scores["bleu2"].append(bleu(cand, rr, 2))
        scores["rouge_l"].append(rouge_l(cand, rr))
        scores["meteor"].append(meteor_exact(cand, rr))
    out: dict = {k: (float(np.mean(v)) if v else None) for k, v in scores.items()}
    flags = []
    for groups in scenes:
        present = [[generated[r] for r in g if r in generated] for g in groups]
        present = [g for g in present if len(g) >= 2]
        if present:
            flags.append(any(has_duplicate(g) for g in present))
    out["duplicate_rate"] = (sum(flags) / len(flags)) if flags else None
    out["objects"] = len(generated)
    out["duplicate_scenes"] = len(flags)
    return out


def evaluate_generation(ds: Dataset, subset: Subset, params: ParamStore, vocab: Vocabulary,
                        fcfg: FeatureConfig, dcfg: DecodeConfig, epsilon: float = 1e-8,
                        workers: int = 1) -> dict:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: generate_for_subset(ds, s, params, vocab, fcfg, dcfg, epsilon),
                                  shard(ds, subset, workers)))
        generated = {r: w for g, _ in parts for r, w in g.items()}
        group_ids = [ids for _, gs in parts for ids in gs]
    else:
        generated, group_ids = generate_for_subset(ds, subset, params, vocab, fcfg, dcfg, epsilon)
    refs: dict[int, list[tuple]] = {}
    for e in subset.expressions(ds):
        refs.setdefault(e.region_id, []).append(e.words)
    per_scene: dict[int, list[list[int]]] = {}
    for ids in group_ids:
        per_scene.setdefault(ds.regions[ids[0]].scene_id, []).append(ids)
    table = generation_table(generated, refs, [per_scene[s] for s in sorted(per_scene)])
    table["generated"] = {str(r): " ".join(w) for r, w in sorted(generated.items())}
    return table
