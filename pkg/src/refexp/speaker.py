"""LSTM speaker conditioned on projected region features, with optional tying.

Gate layout of ``W_lstm`` columns is ``[input | forget | output | cell]``.
The input at every step is ``[word embedding, v, h_prev]`` where ``v`` is the
affine projection of the target's feature bundle. Word logits are
``W_h [h, h_dif] + b_h``; untied decoding feeds ``h_dif = 0``.
"""
from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .features import FeatureBundle
from .tensor import ParamStore, Tensor


@dataclass
class SpeakerConfig:
    vocab_size: int
    input_dim: int
    word_dim: int = 32
    visual_dim: int = 32
    hidden_dim: int = 64
    init_scale: float = 0.08
    epsilon: float = 1e-8

    def to_json(self) -> dict:
        return asdict(self)


def init_params(cfg: SpeakerConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    H, V = cfg.hidden_dim, cfg.vocab_size
    shapes = [
        ("W_m", (cfg.input_dim, cfg.visual_dim)),
        ("b_m", (cfg.visual_dim,)),
        ("embed", (V, cfg.word_dim)),
        ("W_lstm", (cfg.word_dim + cfg.visual_dim + H, 4 * H)),
        ("b_lstm", (4 * H,)),
        ("W_h", (2 * H, V)),
        ("b_h", (V,)),
    ]
    return ParamStore((name, rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape))
                      for name, shape in shapes)


def config_from_params(params: ParamStore, **extra) -> SpeakerConfig:
    F, Ev = params["W_m"].shape
    V, Ew = params["embed"].shape
    H = params["W_h"].shape[0] // 2
    return SpeakerConfig(vocab_size=V, input_dim=F, word_dim=Ew, visual_dim=Ev, hidden_dim=H, **extra)


# --- single-step pieces ----------------------------------------------------

def project(features, params: ParamStore) -> Tensor:
    """``v = x W_m + b_m`` for one bundle (vector) or a batch (rows)."""
    if isinstance(features, FeatureBundle):
        features = features.vector()
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.shape[-1] != params["W_m"].shape[0]:
        raise DimensionError(f"bundle has {x.shape[-1]} entries, W_m expects {params['W_m'].shape[0]}")
    return T.add(T.matmul(x, params["W_m"]), params["b_m"])


def lstm_step(h: Tensor, c: Tensor, word_emb: Tensor, v: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    H = h.shape[-1]
    z = T.add(T.matmul(T.concat([word_emb, v, h]), params["W_lstm"]), params["b_lstm"])
    i = T.sigmoid(T.columns(z, 0, H))
    f = T.sigmoid(T.columns(z, H, 2 * H))
    o = T.sigmoid(T.columns(z, 2 * H, 3 * H))
    g = T.tanh(T.columns(z, 3 * H, 4 * H))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def hidden_difference(hiddens: Sequence[np.ndarray], i: int, epsilon: float = 1e-8) -> np.ndarray:
    """Mean unit difference between object ``i``'s hidden state and every other one."""
    hs = np.stack([np.asarray(h, dtype=np.float64) for h in hiddens])
    return T.unit_diff_mean_np(hs, [np.arange(len(hs))], epsilon)[i]


def word_logits(h: Tensor, h_dif: Tensor, params: ParamStore) -> Tensor:
    return T.add(T.matmul(T.concat([h, h_dif]), params["W_h"]), params["b_h"])


def word_distribution(h, h_dif, params: ParamStore) -> np.ndarray:
    return T.softmax(word_logits(T._lift(h), T._lift(h_dif), params).data)


# --- teacher-forced scoring ------------------------------------------------

def pad_sequences(seqs: Sequence[Sequence[int]], end_id: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if np.any(lengths == 0):
        raise ValueError("empty token sequence")
    out = np.full((len(seqs), int(lengths.max())), end_id, dtype=np.int64)
    for k, s in enumerate(seqs):
        out[k, :len(s)] = s
    return out, lengths


def sequence_logprobs(params: ParamStore, inputs, targets: np.ndarray, lengths: np.ndarray,
                      groups: Sequence[np.ndarray] | None = None, bos_id: int = 0,
                      epsilon: float = 1e-8) -> Tensor:
    """Teacher-forced log P(sequence) per row, END step included.

    ``groups`` (row-index arrays) switches on tying: each row's word
    distribution also sees the unit hidden differences to its group mates.
    Rows past their length keep their last state, so longer mates keep
    comparing against the frozen hidden output.
    """
    B, steps = targets.shape
    H = params["W_h"].shape[0] // 2
    v = project(inputs, params)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    zeros = Tensor(np.zeros((B, H)))
    total = None
    prev = np.full(B, bos_id, dtype=np.int64)
    for t in range(steps):
        emb = T.take_rows(params["embed"], prev)
        h_new, c_new = lstm_step(h, c, emb, v, params)
        live = (t < lengths)[:, None]
        if t == 0:
            h, c = h_new, c_new
        else:
            h = T.where(live, h_new, h)
            c = T.where(live, c_new, c)
        h_dif = T.unit_diff_mean(h, groups, epsilon) if groups is not None else zeros
        lp = T.log_softmax_pick(word_logits(h, h_dif, params), targets[:, t])
        lp = T.mul(lp, Tensor((t < lengths).astype(np.float64)))
        total = lp if total is None else T.add(total, lp)
        prev = targets[:, t]
    return total


def sentence_logprob(features, tokens: Sequence[int], params: ParamStore, tied: bool = False,
                     co_features=None, co_tokens: Sequence[Sequence[int]] = (),
                     end_id: int = 1, epsilon: float = 1e-8) -> float:
    """log P(tokens | target), optionally tied to teacher-forced co-objects."""
    if not tokens or tokens[-1] != end_id:
        raise ValueError("expression must end with the END id")
    rows = [np.asarray(features.vector() if isinstance(features, FeatureBundle) else features)]
    seqs = [list(tokens)]
    if tied and co_features is not None:
        for f, s in zip(co_features, co_tokens):
            rows.append(np.asarray(f.vector() if isinstance(f, FeatureBundle) else f))
            seqs.append(list(s))
    targets, lengths = pad_sequences(seqs, end_id)
    groups = [np.arange(len(rows))] if tied else None
    lp = sequence_logprobs(params, np.stack(rows), targets, lengths, groups, epsilon=epsilon)
    return float(lp.data[0])


# --- decoding --------------------------------------------------------------

def _np_step(params: ParamStore, h, c, prev, vproj, wx):
    H = h.shape[1]
    z = wx[prev] + vproj + h @ params["W_lstm"].data[-H:] + params["b_lstm"].data
    i = 0.5 * (np.tanh(0.5 * z[:, :H]) + 1.0)
    f = 0.5 * (np.tanh(0.5 * z[:, H:2 * H]) + 1.0)
    o = 0.5 * (np.tanh(0.5 * z[:, 2 * H:3 * H]) + 1.0)
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def _precompute(params: ParamStore, inputs: np.ndarray):
    Ew = params["embed"].shape[1]
    Ev = params["W_m"].shape[1]
    W = params["W_lstm"].data
    v = inputs @ params["W_m"].data + params["b_m"].data
    wx = params["embed"].data @ W[:Ew]          # per-token input contribution
    vproj = v @ W[Ew:Ew + Ev]
    return wx, vproj


def _masked_logits(params, h, h_dif, banned):
    logits = np.concatenate([h, h_dif], axis=1) @ params["W_h"].data + params["b_h"].data
    if banned:
        logits[:, list(banned)] = -np.inf
    return logits


def greedy_decode(params: ParamStore, inputs: np.ndarray, groups: Sequence[np.ndarray] | None = None,
                  max_len: int = 12, bos_id: int = 0, end_id: int = 1, banned: Sequence[int] = (0,),
                  epsilon: float = 1e-8, return_states: bool = False):
    """Lockstep greedy decoding for a batch of rows.

    With ``groups`` the rows of each group are tied. Ties in the argmax go to
    the lowest token id. A finished row freezes its state; mates keep seeing it.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    B = inputs.shape[0]
    H = params["W_h"].shape[0] // 2
    wx, vproj = _precompute(params, inputs)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    prev = np.full(B, bos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(B)]
    states = []
    for _ in range(max_len):
        h_new, c_new = _np_step(params, h, c, prev, vproj, wx)
        h = np.where(done[:, None], h, h_new)
        c = np.where(done[:, None], c, c_new)
        h_dif = T.unit_diff_mean_np(h, groups, epsilon) if groups is not None else np.zeros_like(h)
        tok = np.argmax(_masked_logits(params, h, h_dif, banned), axis=1)
        states.append(h.copy())
        for r in np.flatnonzero(~done):
            outputs[r].append(int(tok[r]))
        done |= tok == end_id
        prev = tok
        if done.all():
            break
    return (outputs, states) if return_states else outputs


def beam_decode(params: ParamStore, inputs: np.ndarray, beam_size: int = 3, max_len: int = 12,
                co_states: Sequence[np.ndarray] | None = None, bos_id: int = 0, end_id: int = 1,
                banned: Sequence[int] = (0,), epsilon: float = 1e-8) -> list[int]:
    """Beam search for one row. ``co_states[t]`` ([n, H]) are mates' hidden states at step t."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    H = params["W_h"].shape[0] // 2
    wx, vproj = _precompute(params, x)
    # (neg score, tokens, h, c)
    beams = [(0.0, (), np.zeros((1, H)), np.zeros((1, H)))]
    finished: list[tuple[float, tuple]] = []
    for t in range(max_len):
        if not beams:
            break
        hs = np.concatenate([b[2] for b in beams])
        cs = np.concatenate([b[3] for b in beams])
        prev = np.array([b[1][-1] if b[1] else bos_id for b in beams], dtype=np.int64)
        h_new, c_new = _np_step(params, hs, cs, prev, np.repeat(vproj, len(beams), 0), wx)
        if co_states is not None and len(co_states):
            mates = co_states[min(t, len(co_states) - 1)]
            h_dif = np.stack([_dif_against(hn, mates, epsilon) for hn in h_new])
        else:
            h_dif = np.zeros_like(h_new)
        logp = T.log_softmax(_masked_logits(params, h_new, h_dif, banned))
        cand = []
        for k, (neg, toks, _, _) in enumerate(beams):
            for w in np.flatnonzero(np.isfinite(logp[k])):
                cand.append((neg - logp[k, w], toks + (int(w),), k))
        best = heapq.nsmallest(beam_size, cand, key=lambda z: (z[0], z[1]))
        beams = []
        for neg, toks, k in best:
            if toks[-1] == end_id:
                finished.append((neg, toks))
            else:
                beams.append((neg, toks, h_new[k:k + 1], c_new[k:k + 1]))
        if len(finished) >= beam_size:
            break
    pool = finished or [(b[0], b[1]) for b in beams]
    return list(min(pool, key=lambda z: (z[0], z[1]))[1])


def _dif_against(h: np.ndarray, mates: np.ndarray, epsilon: float) -> np.ndarray:
    if len(mates) == 0:
        return np.zeros_like(h)
    diff = h[None, :] - mates
    norm = np.linalg.norm(diff, axis=1)
    keep = norm >= epsilon
    unit = np.where(keep[:, None], diff / np.where(keep, norm, 1.0)[:, None], 0.0)
    return unit.sum(axis=0) / len(mates)


def generate(params: ParamStore, inputs: np.ndarray, mode: str = "greedy", tied: bool = False,
             max_len: int = 12, beam_size: int = 3, bos_id: int = 0, end_id: int = 1,
             epsilon: float = 1e-8) -> list[list[int]]:
    """Expressions for the same-category regions of one scene (rows of ``inputs``)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    n = inputs.shape[0]
    groups = [np.arange(n)] if tied else None
    kw = dict(bos_id=bos_id, end_id=end_id, banned=(bos_id,), epsilon=epsilon)
    if mode == "greedy":
        return greedy_decode(params, inputs, groups, max_len, **kw)
    if mode != "beam":
        raise ValueError(f"unknown decoding mode {mode!r}")
    if not tied or n == 1:
        return [beam_decode(params, inputs[i], beam_size, max_len, **kw) for i in range(n)]
    _, states = greedy_decode(params, inputs, groups, max_len, return_states=True, **kw)
    out = []
    for i in range(n):
        mates = [s[np.arange(n) != i] for s in states]
        out.append(beam_decode(params, inputs[i], beam_size, max_len, co_states=mates, **kw))
    return out


def score_sequences(params: ParamStore, inputs: np.ndarray, targets: np.ndarray, lengths: np.ndarray,
                    bos_id: int = 0) -> np.ndarray:
    """Untied teacher-forced log-probabilities without building a tape."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    B, steps = targets.shape
    H = params["W_h"].shape[0] // 2
    wx, vproj = _precompute(params, inputs)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    zeros = np.zeros((B, H))
    prev = np.full(B, bos_id, dtype=np.int64)
    out = np.zeros(B)
    rows = np.arange(B)
    for t in range(steps):
        h, c = _np_step(params, h, c, prev, vproj, wx)
        lp = T.log_softmax(_masked_logits(params, h, zeros, ()))
        out += np.where(t < lengths, lp[rows, targets[:, t]], 0.0)
        prev = targets[:, t]
    return out
