"""Dense float64 kernels and seeded randomness for the layer stack.

All arrays are 2-D row-major float64 ("frames x features" or "units x units").
The affine forward accumulates over the inner dimension in strictly increasing
index order with no reassociation, so its output is bit-identical to a naive
triple loop. A numba kernel provides the fast path; the numpy fallback keeps
the same accumulation order, so both produce identical bits.

Randomness comes from numpy's Philox (4x32-10) counter-based generator.
Substreams are derived from (seed, path of purpose labels) via SeedSequence
spawn keys, so adding a new consumer never shifts another consumer's draws.
OS entropy is never consulted.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without the fast extra
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args else dec(*args)


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required."""


# -----------------------------------------------------------------------------
# Seeded randomness
# -----------------------------------------------------------------------------


def _label_words(label: str) -> tuple[int, int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return struct.unpack("<2I", digest[:8])


@dataclass
class Rng:
    """Splittable deterministic RNG: Philox keyed by (seed, label path)."""

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, label: str) -> "Rng":
        """Child stream for an independent purpose; stable under call order."""
        return Rng(self.seed, self.path + _label_words(label))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_p(self, n: int, p: np.ndarray) -> int:
        """Single draw from {0..n-1} with probability vector p."""
        return int(self._gen.choice(n, p=p))

    def markov_path(self, trans: np.ndarray, init: np.ndarray, steps: int) -> np.ndarray:
        """Sample a length-`steps` state path from a row-stochastic matrix."""
        u = self._gen.random(steps)
        cum_init = np.cumsum(init)
        cum_trans = np.cumsum(trans, axis=1)
        out = np.empty(steps, dtype=np.int64)
        state = int(np.searchsorted(cum_init, u[0], side="right"))
        out[0] = state
        for t in range(1, steps):
            state = int(np.searchsorted(cum_trans[state], u[t], side="right"))
            out[t] = state
        return out


# -----------------------------------------------------------------------------
# Elementwise and affine kernels
# -----------------------------------------------------------------------------


def _check_2d(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


@njit(cache=True)
def _affine_fwd_nb(x, w, b):  # pragma: no cover - compiled
    n, k_dim = x.shape
    m = w.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for k in range(k_dim):
            xv = x[i, k]
            for j in range(m):
                out[i, j] += xv * w[k, j]
        for j in range(m):
            out[i, j] += b[j]
    return out


def _affine_fwd_np(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Same accumulation order as the numba kernel: k ascending, bias last.
    out = np.zeros((x.shape[0], w.shape[1]))
    for k in range(x.shape[1]):
        out += x[:, k : k + 1] * w[k : k + 1, :]
    out += b
    return out


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[i,j] = sum_k x[i,k]*w[k,j] + b[j], accumulated in ascending k order."""
    x = _check_2d("x", x)
    w = _check_2d("w", w)
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1))
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"affine shape mismatch: x {x.shape} @ w {w.shape} + b {b.shape}"
        )
    if _HAS_NUMBA:
        return _affine_fwd_nb(x, w, b)
    return _affine_fwd_np(x, w, b)


def affine_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dw, db, dx) for out = x @ w + b."""
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ w.T
    return dw, db, dx


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(0.0, x)


def relu_backward(preact: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient mask is indicator(preact > 0)."""
    return dout * (preact > 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax; rows sum to 1."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its logit gradient.

    loss = mean_i -log softmax(logits)[i, labels[i]]
    dlogits = (softmax - onehot) / batch
    """
    logits = _check_2d("logits", logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"labels length {labels.shape[0]} != batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(
            f"label out of range: values in [{labels.min()}, {labels.max()}], "
            f"{c} classes"
        )
    zmax = logits.max(axis=1, keepdims=True)
    z = logits - zmax
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = float(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def assert_all_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


# -----------------------------------------------------------------------------
# Context splicing kernels (index-map based; the map encodes edge clamping)
# -----------------------------------------------------------------------------


def splice_index(t: int, offsets: tuple[int, ...]) -> np.ndarray:
    """(t, n_offsets) row-index map with out-of-range rows clamped to the edge."""
    if t < 1:
        raise ValueError("cannot splice an empty frame sequence")
    base = np.arange(t, dtype=np.int64)[:, None] + np.asarray(offsets, dtype=np.int64)
    return np.clip(base, 0, t - 1)


def gather_rows(h: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Concatenate h rows per index column: out (t, n_off*d)."""
    t, n_off = index.shape
    d = h.shape[1]
    out = np.empty((t, n_off * d))
    for s in range(n_off):
        out[:, s * d : (s + 1) * d] = h[index[:, s]]
    return out


@njit(cache=True)
def _scatter_add_nb(dh, index, dx, d):  # pragma: no cover - compiled
    t, n_off = index.shape
    for s in range(n_off):
        col = s * d
        for i in range(t):
            r = index[i, s]
            for j in range(d):
                dh[r, j] += dx[i, col + j]


def scatter_add_rows(dh: np.ndarray, index: np.ndarray, dx: np.ndarray) -> None:
    """Accumulate spliced-gradient columns back onto source rows (in place)."""
    d = dh.shape[1]
    if _HAS_NUMBA:
        _scatter_add_nb(dh, index, np.ascontiguousarray(dx), d)
        return
    for s in range(index.shape[1]):
        np.add.at(dh, index[:, s], dx[:, s * d : (s + 1) * d])


# -----------------------------------------------------------------------------
# Backward through a cached layer stack
# -----------------------------------------------------------------------------


@dataclass
class LayerCache:
    """One layer's forward record, enough to backprop through it.

    x is the affine input (post-splice), preact the pre-ReLU activation
    (None for the linear output layer), index the splice map per segment
    (None when the layer does not splice), segments the per-utterance row
    ranges of the layer *input* rows.
    """

    name: str
    w: np.ndarray
    x: np.ndarray
    preact: np.ndarray | None
    index: list[np.ndarray] | None
    segments: list[tuple[int, int]] = field(default_factory=list)


def backward_chain(
    caches: list[LayerCache],
    dlogits: np.ndarray,
    unfrozen: set[str] | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Backprop through the cached stack; returns grads for unfrozen layers only.

    `caches` is ordered input-to-output; dlogits matches the last layer's
    output rows. Frozen layers get no gradient storage but still pass the
    chain downward.
    """
    if not caches:
        raise ValueError("empty layer cache")
    if dlogits.shape[0] != caches[-1].x.shape[0]:
        raise ValueError(
            f"cache/stack mismatch: dlogits rows {dlogits.shape[0]} != "
            f"cached rows {caches[-1].x.shape[0]}"
        )
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    dout = dlogits
    for depth, cache in enumerate(reversed(caches)):
        if cache.x.shape[1] != cache.w.shape[0]:
            raise ValueError(
                f"cache/stack mismatch at {cache.name}: input width "
                f"{cache.x.shape[1]} vs weight rows {cache.w.shape[0]}"
            )
        want_grad = unfrozen is None or cache.name in unfrozen
        last = depth == len(caches) - 1
        if want_grad:
            dw, db, dx = affine_backward(cache.x, cache.w, dout)
            grads[cache.name] = (dw, db)
        elif not last:
            dx = dout @ cache.w.T
        else:
            break  # deepest layer and frozen: nothing below needs the chain
        if last:
            break
        if cache.index is not None:
            d_prev = cache.w.shape[0] // cache.index[0].shape[1]
            dh = np.zeros((sum(b - a for a, b in cache.segments), d_prev))
            for (a, b), idx in zip(cache.segments, cache.index):
                scatter_add_rows(dh[a:b], idx, dx[a:b])
            dx = dh
        prev = caches[len(caches) - 2 - depth]
        if prev.preact is None:
            raise ValueError(f"cache/stack mismatch: {prev.name} lacks preact")
        dout = relu_backward(prev.preact, dx)
    return grads
