"""Dense float64 tensors with tape-recorded reverse-mode gradients.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and
at least one operand requires a gradient, the operation appends its
analytic backward closure to the tape; ``tape.backward(loss)`` replays the
closures in reverse. Outside a tape nothing is recorded, which keeps
evaluation cheap.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import CheckpointIntegrityError, DimensionError, NumericError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records backward closures of operations executed inside ``with Tape()``."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        if not np.all(np.isfinite(loss.data)):
            raise NumericError(f"non-finite loss {loss.data!r}")
        # intermediates restart from zero on every pass; leaves keep accumulating
        for out, _ in self.nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


def recording() -> bool:
    return bool(_TAPES)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].nodes.append((out, backward))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _bias_compatible(big: tuple, small: tuple) -> bool:
    return len(small) == 1 and len(big) >= 1 and big[-1] == small[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def _check_pair(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape:
        return
    if _bias_compatible(a.shape, b.shape) or _bias_compatible(b.shape, a.shape):
        return
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 1:
                _accumulate(b, np.outer(a.data, g))
            else:
                _accumulate(b, a.data.T @ g)

    return _result(out_data, (a, b), backward)


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row-select: ``mask`` (broadcastable boolean) picks ``a`` where true."""
    if a.shape != b.shape:
        raise DimensionError(f"where: shapes {a.shape} and {b.shape} differ")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)

    def backward(g):
        _accumulate(a, np.where(m, g, 0.0))
        _accumulate(b, np.where(m, 0.0, g))

    return _result(np.where(m, a.data, b.data), (a, b), backward)


# --- structural ------------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=ax)):
            _accumulate(p, piece)

    return _result(out, parts, backward)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            _accumulate(a, full)

    return _result(a.data[..., start:stop], (a,), backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, index, g)
            _accumulate(table, full)

    return _result(table.data[index], (table,), backward)


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: _accumulate(a, np.broadcast_to(g / n, a.shape)))


# --- probabilistic ---------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_pick(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row ``log softmax(logits)[target]`` for a [B, V] batch."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"log_softmax_pick: logits {logits.shape}, targets {targets.shape}")
    V = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target index out of range for {V} classes")
    lsm = log_softmax(logits.data)
    rows = np.arange(len(targets))

    def backward(g):
        grad = -np.exp(lsm) * g[:, None]
        grad[rows, targets] += g
        _accumulate(logits, grad)

    return _result(lsm[rows, targets], (logits,), backward)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Scalar ``-log softmax(logits)[target]`` for a single logit vector."""
    if logits.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy expects a vector, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    row = _reshape(logits, (1, logits.shape[0]))
    picked = log_softmax_pick(row, np.array([target]))
    return scale(_reshape(picked, ()), -1.0)


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def ratio_nll(scores: Tensor, groups: Sequence[np.ndarray], targets: Sequence[int]) -> Tensor:
    """``-(s[t] - logsumexp(s[group]))`` per candidate group.

    ``groups[k]`` holds indices into ``scores``; ``targets[k]`` is the
    index (into ``scores``) of the true candidate, which must be in the group.
    """
    s = scores.data
    out = np.empty(len(groups))
    posts = []
    for k, (grp, t) in enumerate(zip(groups, targets)):
        vals = s[grp]
        m = vals.max()
        lse = m + np.log(np.exp(vals - m).sum())
        out[k] = lse - s[t]
        posts.append(np.exp(vals - lse))

    def backward(g):
        grad = np.zeros_like(s)
        for k, (grp, t) in enumerate(zip(groups, targets)):
            np.add.at(grad, grp, g[k] * posts[k])
            grad[t] -= g[k]
        _accumulate(scores, grad)

    return _result(out, (scores,), backward)


# --- comparison features in hidden space -----------------------------------

def unit_diff_mean_np(x: np.ndarray, groups: Sequence[np.ndarray], eps: float) -> np.ndarray:
    return _unit_diff_forward(x, groups, eps)[0]


def _unit_diff_forward(x, groups, eps):
    out = np.zeros_like(x)
    cache = []
    for grp in groups:
        n = len(grp)
        if n < 2:
            continue
        xs = x[grp]
        diff = xs[:, None, :] - xs[None, :, :]
        norm = np.sqrt((diff * diff).sum(axis=-1))
        keep = norm >= eps
        np.fill_diagonal(keep, False)
        inv = np.where(keep, 1.0 / np.where(keep, norm, 1.0), 0.0)
        unit = diff * inv[:, :, None]
        out[grp] = unit.sum(axis=1) / (n - 1)
        cache.append((grp, n, unit, inv))
    return out, cache


def unit_diff_mean(x: Tensor, groups: Sequence[np.ndarray], eps: float = 1e-8) -> Tensor:
    """For each row i in a group: mean over other rows j of (x_i-x_j)/||x_i-x_j||.

    Rows outside any group, or in singleton groups, get zeros. Pairs closer
    than ``eps`` contribute a zero vector but still count in the mean.
    """
    out, cache = _unit_diff_forward(x.data, groups, eps)

    def backward(g):
        grad = np.zeros_like(x.data)
        for grp, n, unit, inv in cache:
            gi = g[grp] / (n - 1)
            proj = (unit * gi[:, None, :]).sum(axis=-1)
            gd = (gi[:, None, :] - unit * proj[:, :, None]) * inv[:, :, None]
            # d(x_i - x_j): +gd into row i, -gd into row j
            grad[grp] += gd.sum(axis=1) - gd.sum(axis=0)
        _accumulate(x, grad)

    return _result(out, (x,), backward)


# --- parameters ------------------------------------------------------------

class ParamStore:
    """Named, insertion-ordered collection of trainable tensors."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((t.grad * t.grad).sum()) for t in self._params.values())))

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
        norm = self.grad_norm()
        if norm > max_norm:
            factor = max_norm / norm
            for t in self._params.values():
                t.grad *= factor
        return norm

    def copy(self) -> "ParamStore":
        return ParamStore((n, t.data.copy()) for n, t in self._params.items())

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            self[n].data.shape == other[n].data.shape
            and self[n].data.tobytes() == other[n].data.tobytes()
            for n in self
        )


def grad_check(params: ParamStore, loss_fn: Callable[[], Tensor], epsilon: float = 1e-4,
               names: Sequence[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a-n| / max(|a|, |n|, 1e-8)``. The default
    step keeps cancellation error small for entries whose gradient is ~1e-7,
    which recurrent weights routinely have.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for name in names or params.names():
        p = params[name]
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            f_plus = float(loss_fn().data)
            flat[k] = orig - epsilon
            f_minus = float(loss_fn().data)
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {name}[{k}]")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# --- checkpoint file -------------------------------------------------------

CHECKPOINT_MAGIC = b"REXP"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ParamStore) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def params_from_bytes(buf: bytes) -> ParamStore:
    def fail(msg):
        raise CheckpointIntegrityError(msg)

    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        fail("bad checkpoint magic")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        fail(f"unsupported checkpoint version {version}")
    pos = 16
    store = ParamStore()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                fail("truncated parameter name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = pos + 8 * size
            if end > len(buf):
                fail(f"truncated values for {name!r}")
            values = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos = end
            store.add(name, values.astype(np.float64))
    except (struct.error, UnicodeDecodeError) as exc:
        fail(f"corrupt checkpoint: {exc}")
    except ValueError as exc:
        fail(str(exc))
    if pos != len(buf):
        fail("trailing bytes after last parameter")
    return store


def save_params(params: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_params(path) -> ParamStore:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
