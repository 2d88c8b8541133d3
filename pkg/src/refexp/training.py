"""MLE and MMI training of the speaker with plain SGD."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .comprehension import Query, score_queries
from .data import Dataset, Subset, Vocabulary, build_vocabulary, _subset
from .errors import CheckpointIntegrityError, NumericError
from .features import FeatureConfig, scene_inputs
from .speaker import SpeakerConfig, config_from_params, init_params, pad_sequences, sequence_logprobs
from .tensor import ParamStore, Tape


@dataclass
class TrainConfig:
    objective: str = "mle"
    mmi_weight: float = 1.0
    tied: bool = False
    learning_rate: float = 0.3
    grad_clip_norm: float = 5.0
    epochs: int = 10
    batch_scenes: int = 16
    seed: int = 0
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    val_fraction: float = 0.1
    max_negatives: int = 5
    word_dim: int = 32
    visual_dim: int = 32
    hidden_dim: int = 64
    max_len: int = 12
    min_count: int = 1
    comparison_set: str = "same_category"
    pooling: str = "avg"
    context_source: str = "global"
    use_visdif: bool = True
    max_location_neighbors: int = 5
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.objective not in ("mle", "mmi"):
            raise ValueError("objective must be 'mle' or 'mmi'")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mmi_weight < 0:
            raise ValueError("mmi_weight must be >= 0")
        if self.batch_scenes < 1 or self.max_negatives < 1:
            raise ValueError("batch_scenes and max_negatives must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.features()

    def features(self) -> FeatureConfig:
        return FeatureConfig.from_json(asdict(self))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config keys: {unknown}")
        return cls(**d)


# --- encoded training data -------------------------------------------------

@dataclass
class EncodedScene:
    scene_id: int
    region_ids: list[int]
    categories: np.ndarray
    centers: np.ndarray
    inputs: np.ndarray
    refs: dict[int, list[list[int]]] = field(default_factory=dict)   # local index -> token id lists

    def groups(self) -> list[list[int]]:
        """Referred objects grouped by category (ascending local index)."""
        by_cat: dict[int, list[int]] = {}
        for i in sorted(self.refs):
            by_cat.setdefault(int(self.categories[i]), []).append(i)
        return [by_cat[c] for c in sorted(by_cat)]

    def negatives(self, i: int, cap: int) -> list[int]:
        """Same-category others (or every other region when there is none), nearest first."""
        others = [j for j in range(len(self.region_ids)) if j != i]
        same = [j for j in others if self.categories[j] == self.categories[i]]
        pool = same or others
        d = np.hypot(*(self.centers[pool] - self.centers[i]).T) if pool else np.zeros(0)
        order = sorted(range(len(pool)), key=lambda k: (d[k], self.region_ids[pool[k]]))
        return [pool[k] for k in order[:cap]]


def encode_scenes(ds: Dataset, subset: Subset, vocab: Vocabulary, fcfg: FeatureConfig) -> list[EncodedScene]:
    by_region: dict[int, list[list[int]]] = {}
    for e in subset.expressions(ds):
        by_region.setdefault(e.region_id, []).append(vocab.encode(e.words))
    out = []
    for sid in sorted(subset.scene_ids):
        scene = ds.scenes[sid]
        ids = [r.region_id for r in scene.regions]
        refs = {k: by_region[rid] for k, rid in enumerate(ids) if rid in by_region}
        if not refs:
            continue
        out.append(EncodedScene(
            sid, ids,
            np.array([r.category_id for r in scene.regions]),
            np.array([r.box.center for r in scene.regions], dtype=np.float64),
            scene_inputs(scene, fcfg),
            refs,
        ))
    return out


@dataclass
class Batch:
    """Rows to score. ``groups`` tie rows of one category in one scene together."""
    inputs: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray
    groups: list[np.ndarray]
    # MMI: candidate rows (expression repeated over candidates), groups into them, target positions
    cand_inputs: np.ndarray
    cand_targets: np.ndarray
    cand_lengths: np.ndarray
    cand_groups: list[np.ndarray]
    cand_true: list[int]
    scene_ids: list[int]

    @property
    def size(self) -> int:
        return len(self.lengths)


def make_batch(scenes: Sequence[EncodedScene], end_id: int = 1, max_negatives: int = 5,
               with_candidates: bool = True) -> Batch:
    """Expand scenes into rows.

    A scene contributes ``max_i n_i`` passes per category group, where ``n_i``
    is the expression count of object i; pass p uses expression ``p mod n_i``.
    Tied and untied training therefore see the same rows.
    """
    inputs, seqs, groups = [], [], []
    c_inputs, c_seqs, c_groups, c_true = [], [], [], []
    for s in scenes:
        for grp in s.groups():
            passes = max(len(s.refs[i]) for i in grp)
            for p in range(passes):
                start = len(seqs)
                for i in grp:
                    tokens = s.refs[i][p % len(s.refs[i])]
                    inputs.append(s.inputs[i])
                    seqs.append(tokens)
                    if with_candidates:
                        cands = [i] + s.negatives(i, max_negatives)
                        c0 = len(c_seqs)
                        for j in cands:
                            c_inputs.append(s.inputs[j])
                            c_seqs.append(tokens)
                        c_groups.append(np.arange(c0, c0 + len(cands)))
                        c_true.append(c0)
                groups.append(np.arange(start, len(seqs)))
    if not seqs:
        raise ValueError("batch is empty")
    targets, lengths = pad_sequences(seqs, end_id)
    if with_candidates:
        ct, cl = pad_sequences(c_seqs, end_id)
        ci = np.stack(c_inputs)
    else:
        ct, cl, ci = np.zeros((0, 1), np.int64), np.zeros(0, np.int64), np.zeros((0, inputs[0].shape[0]))
    return Batch(np.stack(inputs), targets, lengths, groups, ci, ct, cl, c_groups, c_true,
                 [s.scene_id for s in scenes])


# --- objectives ------------------------------------------------------------

def mle_loss(batch: Batch, params: ParamStore, tied: bool = False, epsilon: float = 1e-8) -> T.Tensor:
    """Mean negative log-likelihood over the batch's expressions."""
    lp = sequence_logprobs(params, batch.inputs, batch.targets, batch.lengths,
                           batch.groups if tied else None, epsilon=epsilon)
    return T.scale(T.mean(lp), -1.0)


def ratio_term(logprobs: np.ndarray | Sequence[float], target: int = 0) -> float:
    """``-log(P_t / sum_j P_j)`` from per-candidate log-probabilities."""
    lp = np.asarray(logprobs, dtype=np.float64)
    m = lp.max()
    return float(m + np.log(np.exp(lp - m).sum()) - lp[target])


def mmi_parts(batch: Batch, params: ParamStore, tied: bool = False, epsilon: float = 1e-8):
    """(mle, mean ratio term) as tensors. Candidates are always scored untied."""
    cand_lp = sequence_logprobs(params, batch.cand_inputs, batch.cand_targets, batch.cand_lengths,
                                epsilon=epsilon)
    ratio = T.mean(T.ratio_nll(cand_lp, batch.cand_groups, batch.cand_true))
    if tied:
        mle = mle_loss(batch, params, True, epsilon)
    else:
        # untied target scores are already among the candidate rows
        w = np.zeros(len(batch.cand_lengths))
        w[batch.cand_true] = -1.0 / len(batch.cand_true)
        mle = T.total(T.mul(cand_lp, T.Tensor(w)))
    return mle, ratio


def mmi_loss(batch: Batch, params: ParamStore, mmi_weight: float = 1.0, tied: bool = False,
             epsilon: float = 1e-8) -> T.Tensor:
    mle, ratio = mmi_parts(batch, params, tied, epsilon)
    return T.add(mle, T.scale(ratio, mmi_weight))


def batch_loss(batch: Batch, params: ParamStore, cfg: TrainConfig) -> T.Tensor:
    if cfg.objective == "mmi":
        return mmi_loss(batch, params, cfg.mmi_weight, cfg.tied, cfg.epsilon)
    return mle_loss(batch, params, cfg.tied, cfg.epsilon)


# --- loop ------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_acc: float


@dataclass
class TrainResult:
    params: ParamStore
    speaker: SpeakerConfig
    vocab: Vocabulary
    config: TrainConfig
    log: list[EpochLog]
    best_epoch: int


def holdout(scene_ids: Sequence[int], fraction: float, seed: int) -> tuple[list[int], list[int]]:
    ids = sorted(scene_ids)
    if fraction <= 0 or len(ids) < 2:
        return ids, []
    n_val = max(1, int(math.floor(fraction * len(ids) + 0.5)))
    order = np.random.default_rng([seed, 1]).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    vs = set(val)
    return [s for s in ids if s not in vs], val


def validation_accuracy(params: ParamStore, scenes: Sequence[EncodedScene], bos_id: int = 0) -> float:
    queries, inputs, ids = [], {}, {}
    for s in scenes:
        inputs[s.scene_id] = s.inputs
        ids[s.scene_id] = s.region_ids
        for i, seqs in sorted(s.refs.items()):
            for tokens in seqs:
                queries.append(Query(-1, tokens, s.region_ids[i], None, "", s.scene_id))
    if not queries:
        return float("nan")
    rankings = score_queries(params, queries, inputs, ids, bos_id)
    return sum(r[0][0] == q.true_region for q, r in zip(queries, rankings)) / len(queries)


def train(ds: Dataset, subset: Subset, cfg: TrainConfig, vocab: Vocabulary | None = None,
          progress=None) -> TrainResult:
    """Train on ``subset`` and return the best-validation parameters.

    Scenes are shuffled with the seed each epoch; ``val_fraction`` of the
    training scenes are held out for model selection by comprehension accuracy.
    """
    if vocab is None:
        vocab = build_vocabulary(subset.expressions(ds), cfg.min_count)
    fcfg = cfg.features()
    train_ids, val_ids = holdout(subset.scene_ids, cfg.val_fraction, cfg.seed)
    vset = set(val_ids)
    tr_sub = _subset("train", ds, [r for r in subset.region_ids if ds.regions[r].scene_id not in vset])
    va_sub = _subset("val", ds, [r for r in subset.region_ids if ds.regions[r].scene_id in vset])
    tr_scenes = encode_scenes(ds, tr_sub, vocab, fcfg)
    va_scenes = encode_scenes(ds, va_sub, vocab, fcfg)
    if not tr_scenes:
        raise ValueError("no training expressions")

    spk = SpeakerConfig(len(vocab), fcfg.input_dim(ds.feature_dim), cfg.word_dim, cfg.visual_dim,
                        cfg.hidden_dim, epsilon=cfg.epsilon)
    params = init_params(spk, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    with_cands = cfg.objective == "mmi"
    best, best_acc, best_epoch = params.copy(), -1.0, 0
    log: list[EpochLog] = []
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        if epoch > 1 and cfg.lr_decay_every > 0 and (epoch - 1) % cfg.lr_decay_every == 0:
            lr *= cfg.lr_decay_factor
        order = rng.permutation(len(tr_scenes))
        losses, weights = 0.0, 0
        for step, start in enumerate(range(0, len(order), cfg.batch_scenes)):
            chunk = [tr_scenes[k] for k in order[start:start + cfg.batch_scenes]]
            batch = make_batch(chunk, vocab.end_id, cfg.max_negatives, with_cands)
            params.zero_grad()
            with Tape() as tape:
                loss = batch_loss(batch, params, cfg)
                if not math.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}; scenes {batch.scene_ids}")
                tape.backward(loss)
            params.clip_grad_norm(cfg.grad_clip_norm)
            for _, p in params.items():
                if p.grad is not None:
                    p.data -= lr * p.grad
            losses += loss.item() * batch.size
            weights += batch.size
        val = validation_accuracy(params, va_scenes, vocab.bos_id) if va_scenes else float("nan")
        log.append(EpochLog(epoch, losses / weights, val))
        score = val if not math.isnan(val) else -losses / weights
        if score > best_acc or epoch == 1:
            best, best_acc, best_epoch = params.copy(), score, epoch
        if progress:
            progress(log[-1])
    return TrainResult(best, spk, vocab, cfg, log, best_epoch)


# --- persistence -----------------------------------------------------------

CHECKPOINT_NAME = "model.rexp"
SIDECAR_NAME = "model.json"


def write_log(path, log: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_acc"])
        for e in log:
            w.writerow([e.epoch, repr(e.loss), repr(e.val_acc)])


def save_model(out_dir, result: TrainResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = T.checkpoint_bytes(result.params)
    (out / CHECKPOINT_NAME).write_bytes(blob)
    s = result.speaker
    sidecar = {
        "checkpoint_sha256": hashlib.sha256(blob).hexdigest(),
        "E_w": s.word_dim, "E_v": s.visual_dim, "H": s.hidden_dim, "V": s.vocab_size,
        "input_dim": s.input_dim, "vocabulary_hash": result.vocab.digest(),
        "vocabulary": result.vocab.to_json(), "best_epoch": result.best_epoch,
        "config": result.config.to_json(),
    }
    (out / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class LoadedModel:
    params: ParamStore
    vocab: Vocabulary
    config: TrainConfig
    speaker: SpeakerConfig


def load_model(model_dir, expected_vocab: Vocabulary | None = None) -> LoadedModel:
    """Load checkpoint + sidecar; checks the checkpoint digest, shapes and the vocabulary hash."""
    d = Path(model_dir)
    blob = (d / CHECKPOINT_NAME).read_bytes()
    params = T.params_from_bytes(blob)
    try:
        side = json.loads((d / SIDECAR_NAME).read_text(encoding="utf-8"))
        if hashlib.sha256(blob).hexdigest() != side["checkpoint_sha256"]:
            raise CheckpointIntegrityError(f"{d / CHECKPOINT_NAME} does not match the digest in its sidecar")
        vocab = Vocabulary.from_json(side["vocabulary"])
        cfg = TrainConfig.from_json(side["config"])
        dims = (side["E_w"], side["E_v"], side["H"], side["V"])
        expected_hash = side["vocabulary_hash"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointIntegrityError(f"bad model sidecar in {d}: {exc}") from None
    if vocab.digest() != expected_hash:
        raise CheckpointIntegrityError("sidecar vocabulary does not match its own hash")
    if expected_vocab is not None and expected_vocab.digest() != expected_hash:
        raise CheckpointIntegrityError("checkpoint vocabulary hash differs from the dataset vocabulary")
    try:
        spk = config_from_params(params, epsilon=cfg.epsilon)
    except KeyError as exc:
        raise CheckpointIntegrityError(f"checkpoint lacks parameter {exc}") from None
    if (spk.word_dim, spk.visual_dim, spk.hidden_dim, spk.vocab_size) != tuple(dims):
        raise CheckpointIntegrityError(f"checkpoint shapes {spk} disagree with sidecar {dims}")
    return LoadedModel(params, vocab, cfg, spk)
