"""Pooling and stochastic regularization operators.

All operators are pure functions: the train phase draws from an explicit
:class:`RngStream` and the test phase never touches one.  The stochastic
average pooling pair (:func:`sap_forward` / :func:`sap_backward`) communicates
through a :class:`SapSavedState` value so the backward pass is a
deterministic function of the gradient and the saved state.

Train-phase stochastic average pooling is the pipeline

    subsample int(n*p) elements (channel-shared per sample)
    -> average the survivors per output window
    -> multiply by sqrt(p)

and the test phase is plain average pooling, so both phases produce the same
output shape and, for zero-mean inputs, the same second moment.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    EmptySubsampleError,
    InvalidInputError,
    InvalidPoolingError,
    InvalidProbabilityError,
    InvalidShapeError,
)
from .masks import keep_count
from .rng import RngStream
from .tensor import as_tensor4

__all__ = [
    "Phase",
    "dropout",
    "dropout_mask",
    "stochastic_subsample",
    "avg_pool_1d",
    "avg_pool_2d",
    "global_avg_pool",
    "SapSavedState",
    "sap_forward",
    "sap_backward",
    "zeiler_stochastic_pool",
]


class Phase(str, Enum):
    TRAIN = "train"
    TEST = "test"


def _coerce_phase(phase) -> Phase:
    try:
        return Phase(phase)
    except ValueError:
        raise InvalidInputError(f"phase must be 'train' or 'test', got {phase!r}") from None


def _check_prob(p: float) -> float:
    p = float(p)
    if not 0.0 < p <= 1.0:
        raise InvalidProbabilityError(f"keep probability must be in (0, 1], got {p}")
    return p


def _need_rng(rng: RngStream | None) -> RngStream:
    if rng is None:
        raise InvalidInputError("train phase needs an RngStream")
    return rng


# ---------------------------------------------------------------------------
# Dropout and stochastic subsampling
# ---------------------------------------------------------------------------


def dropout_mask(shape, p: float, rng: RngStream) -> np.ndarray:
    """i.i.d. Bernoulli(p) keep indicators of the given shape."""
    p = _check_prob(p)
    return rng.generator().random(shape) < p


def dropout(x: np.ndarray, p: float, phase, rng: RngStream | None = None) -> np.ndarray:
    """Elementwise dropout: x * m / p with m ~ Bernoulli(p) at train, identity at test."""
    p = _check_prob(p)
    if _coerce_phase(phase) is Phase.TEST:
        return x
    x = np.asarray(x, dtype=np.float64)
    m = dropout_mask(x.shape, p, _need_rng(rng))
    return x * (m / p)


def stochastic_subsample(
    x: np.ndarray,
    p: float,
    phase,
    rng: RngStream | None = None,
    channel_mode: str = "shared",
) -> np.ndarray:
    """Keep int(n*p) elements of the flattened spatial axis, drop the rest.

    Accepts a vector (n,), a flattened batch (N, C, n), or a (N, C, H, W)
    tensor whose spatial dims are flattened first.  Masks are drawn per
    sample and shared across channels unless ``channel_mode='independent'``.
    Test phase is the identity.
    """
    p = _check_prob(p)
    if _coerce_phase(phase) is Phase.TEST:
        return x
    rng = _need_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        n = x.shape[0]
        kept = _draw_kept(n, p, rng)
        return x[kept]
    if x.ndim == 4:
        n_batch, n_ch, h, w = x.shape
        x = x.reshape(n_batch, n_ch, h * w)
    if x.ndim != 3:
        raise InvalidShapeError(f"expected rank 1, 3 or 4 input, got rank {x.ndim}")
    n_batch, n_ch, n = x.shape
    k = keep_count(n, p)
    if k == 0:
        raise EmptySubsampleError(f"int(n*p) == 0 for n={n}, p={p}")
    out = np.empty((n_batch, n_ch, k))
    for i in range(n_batch):
        sample_rng = rng.substream(i)
        if channel_mode == "shared":
            kept = _draw_kept(n, p, sample_rng)
            out[i] = x[i][:, kept]
        else:
            for c in range(n_ch):
                kept = _draw_kept(n, p, sample_rng.substream(c))
                out[i, c] = x[i, c, kept]
    return out


def _draw_kept(n: int, p: float, rng: RngStream) -> np.ndarray:
    k = keep_count(n, p)
    if k == 0:
        raise EmptySubsampleError(f"int(n*p) == 0 for n={n}, p={p}")
    order = np.argsort(rng.generator().random(n))
    return order[:k]


# ---------------------------------------------------------------------------
# Average pooling
# ---------------------------------------------------------------------------


def avg_pool_1d(x: np.ndarray, r: int) -> np.ndarray:
    """Non-overlapping window means of size r along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    r = int(r)
    if r < 1:
        raise InvalidPoolingError(f"pool size must be >= 1, got {r}")
    n = x.shape[-1]
    if n % r != 0:
        raise InvalidPoolingError(f"pool size {r} does not divide length {n}")
    return x.reshape(*x.shape[:-1], n // r, r).mean(axis=-1)


def avg_pool_2d(x: np.ndarray, r: int) -> np.ndarray:
    """(r x r) window means with stride r over the spatial dims of (N, C, H, W)."""
    x = as_tensor4(x)
    r = int(r)
    if r < 1:
        raise InvalidPoolingError(f"pool size must be >= 1, got {r}")
    n, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise InvalidPoolingError(f"pool size {r} does not divide spatial dims {h}x{w}")
    return x.reshape(n, c, h // r, r, w // r, r).mean(axis=(3, 5))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-(sample, channel) mean over the flattened spatial axis; shape (N, C)."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).mean(axis=-1)


# ---------------------------------------------------------------------------
# Stochastic average pooling
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SapSavedState:
    """Everything the backward pass needs from a forward call."""

    phase: Phase
    p: float
    r: int | None  # None means global pooling
    mode: str  # 'window' or 'sequence' membership semantics
    stochastic: bool  # False for test phase and the p == 1 shortcut
    input_shape: tuple
    out_shape: tuple
    kept_mask: np.ndarray | None = None  # (N, HW) bool, channel-shared
    k: int = 0  # kept count per sample
    counts: np.ndarray | None = None  # (N, oh, ow) kept per window ('window' mode)
    fallback: np.ndarray | None = None  # (N, oh, ow) empty-window fallbacks
    kept_idx: np.ndarray | None = None  # (N, k) permutation order ('sequence' mode)
    n_fallback_windows: int = 0


def sap_forward(
    x: np.ndarray,
    r: int | None,
    p: float,
    phase,
    rng: RngStream | None = None,
    mode: str = "window",
) -> tuple[np.ndarray, SapSavedState]:
    """Stochastic average pooling forward pass.

    Args:
        x: (N, C, H, W) tensor.
        r: pooling side; None pools globally to shape (N, C).
        p: keep probability in (0, 1]; p == 1 reduces exactly to average
           pooling and consumes no randomness.
        phase: train applies subsample -> mean -> sqrt(p); test is plain
           average pooling.  Output shape matches across phases.
        rng: stream for the per-sample channel-shared subsampling masks.
        mode: window membership for r-windowed training.  'window' averages
           the survivors inside each window of the input grid; 'sequence'
           averages fixed-length runs of the permutation-ordered survivors.

    Returns:
        (output, saved state for :func:`sap_backward`).
    """
    x = as_tensor4(x)
    p = _check_prob(p)
    phase = _coerce_phase(phase)
    if mode not in ("window", "sequence"):
        raise InvalidInputError(f"unknown window membership mode {mode!r}")
    n_batch, n_ch, h, w = x.shape
    hw = h * w

    if r is not None:
        r = int(r)
        if r < 1:
            raise InvalidPoolingError(f"pool size must be >= 1, got {r}")
        if h % r != 0 or w % r != 0:
            raise InvalidPoolingError(f"pool size {r} does not divide spatial dims {h}x{w}")

    if phase is Phase.TEST or p == 1.0:
        out = global_avg_pool(x) if r is None else avg_pool_2d(x, r)
        state = SapSavedState(
            phase=phase, p=p, r=r, mode=mode, stochastic=False,
            input_shape=x.shape, out_shape=out.shape,
        )
        return out, state

    rng = _need_rng(rng)
    k = keep_count(hw, p)
    if k == 0:
        raise EmptySubsampleError(f"int(H*W*p) == 0 for H*W={hw}, p={p}")
    scale = np.sqrt(p)
    x2 = x.reshape(n_batch, n_ch, hw)

    if r is None:
        out = np.empty((n_batch, n_ch))
        kept_mask = np.zeros((n_batch, hw), dtype=bool)
        for i in range(n_batch):
            kept = _draw_kept(hw, p, rng.substream(i))
            kept_mask[i, kept] = True
            sums = np.einsum("ch,h->c", x2[i], kept_mask[i].astype(np.float64))
            out[i] = sums * (scale / k)
        state = SapSavedState(
            phase=phase, p=p, r=None, mode=mode, stochastic=True,
            input_shape=x.shape, out_shape=out.shape, kept_mask=kept_mask, k=k,
        )
        return out, state

    oh, ow = h // r, w // r

    if mode == "sequence":
        n_win = oh * ow
        if k % n_win != 0:
            raise InvalidPoolingError(
                f"kept count {k} does not split into {n_win} windows; "
                f"sequence mode needs r*r*p to be an integer"
            )
        wlen = k // n_win
        out = np.empty((n_batch, n_ch, oh, ow))
        kept_idx = np.empty((n_batch, k), dtype=np.int64)
        for i in range(n_batch):
            kept = _draw_kept(hw, p, rng.substream(i))
            kept_idx[i] = kept
            gathered = x2[i][:, kept]
            out[i] = (gathered.reshape(n_ch, n_win, wlen).mean(axis=-1) * scale).reshape(
                n_ch, oh, ow
            )
        state = SapSavedState(
            phase=phase, p=p, r=r, mode=mode, stochastic=True,
            input_shape=x.shape, out_shape=out.shape, kept_idx=kept_idx, k=k,
        )
        return out, state

    # 'window' mode: global channel-shared subsample, then per-window means
    kept_mask = np.zeros((n_batch, hw), dtype=bool)
    for i in range(n_batch):
        kept_mask[i, _draw_kept(hw, p, rng.substream(i))] = True
    mask3 = kept_mask.reshape(n_batch, h, w)
    counts = mask3.reshape(n_batch, oh, r, ow, r).sum(axis=(2, 4))
    masked_sums = (x * mask3[:, None, :, :]).reshape(n_batch, n_ch, oh, r, ow, r).sum(axis=(3, 5))
    fallback = counts == 0
    safe_counts = np.where(fallback, 1, counts)
    out = masked_sums * (scale / safe_counts)[:, None, :, :]
    if fallback.any():
        # empty window: fall back to the plain window mean, unscaled
        means = avg_pool_2d(x, r)
        out = np.where(fallback[:, None, :, :], means, out)
    state = SapSavedState(
        phase=phase, p=p, r=r, mode=mode, stochastic=True,
        input_shape=x.shape, out_shape=out.shape, kept_mask=kept_mask, k=k,
        counts=counts, fallback=fallback, n_fallback_windows=int(fallback.sum()),
    )
    return out, state


def sap_backward(grad_out: np.ndarray, state: SapSavedState) -> np.ndarray:
    """Gradient of sap_forward w.r.t. its input, given the saved state."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != tuple(state.out_shape):
        raise InvalidShapeError(
            f"grad shape {grad_out.shape} does not match saved output shape {state.out_shape}"
        )
    n_batch, n_ch, h, w = state.input_shape
    hw = h * w

    if not state.stochastic:
        if state.r is None:
            g = grad_out / hw
            return np.broadcast_to(g[:, :, None, None], state.input_shape).copy()
        r = state.r
        g = grad_out / (r * r)
        return np.repeat(np.repeat(g, r, axis=2), r, axis=3)

    scale = np.sqrt(state.p)

    if state.r is None:
        weights = state.kept_mask * (scale / state.k)  # (N, HW)
        grad = grad_out[:, :, None] * weights[:, None, :]
        return grad.reshape(state.input_shape)

    r = state.r
    oh, ow = h // r, w // r

    if state.mode == "sequence":
        n_win = oh * ow
        wlen = state.k // n_win
        per_slot = np.repeat(grad_out.reshape(n_batch, n_ch, n_win) * (scale / wlen), wlen, axis=-1)
        grad2 = np.zeros((n_batch, n_ch, hw))
        rows = np.arange(n_batch)[:, None, None]
        cols = np.arange(n_ch)[None, :, None]
        grad2[rows, cols, state.kept_idx[:, None, :]] = per_slot
        return grad2.reshape(state.input_shape)

    # 'window' mode: per-cell weights, channel-shared: sqrt(p)/count on kept
    # cells, or the uniform 1/r^2 spread on fallback windows
    safe_counts = np.where(state.fallback, 1, state.counts)
    counts_cells = np.repeat(np.repeat(safe_counts, r, axis=1), r, axis=2)
    fallback_cells = np.repeat(np.repeat(state.fallback, r, axis=1), r, axis=2)
    mask3 = state.kept_mask.reshape(n_batch, h, w)
    weights = np.where(fallback_cells, 1.0 / (r * r), mask3 * (scale / counts_cells))
    grad_cells = np.repeat(np.repeat(grad_out, r, axis=2), r, axis=3)
    return grad_cells * weights[:, None, :, :]


# ---------------------------------------------------------------------------
# Probability-map (Zeiler) stochastic pooling baseline
# ---------------------------------------------------------------------------


def zeiler_stochastic_pool(
    x: np.ndarray, r: int, phase, rng: RngStream | None = None
) -> np.ndarray:
    """Probability-map pooling over (r x r) windows of nonnegative activations.

    Train samples one element per window with probability k_i = x_i / sum(x);
    test returns the weighted average sum(k_i * x_i).  All-zero windows use
    uniform probabilities, so both phases yield 0 there.
    """
    x = as_tensor4(x)
    phase = _coerce_phase(phase)
    r = int(r)
    if r < 1:
        raise InvalidPoolingError(f"pool size must be >= 1, got {r}")
    n, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise InvalidPoolingError(f"pool size {r} does not divide spatial dims {h}x{w}")
    if (x < 0).any():
        raise InvalidInputError("probability-map pooling needs nonnegative activations")
    oh, ow = h // r, w // r
    wins = x.reshape(n, c, oh, r, ow, r).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, r * r)
    sums = wins.sum(axis=-1)
    if phase is Phase.TEST:
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(sums > 0, (wins * wins).sum(axis=-1) / np.where(sums > 0, sums, 1.0), 0.0)
        return out
    rng = _need_rng(rng)
    probs = np.where(
        (sums > 0)[..., None], wins / np.where(sums > 0, sums, 1.0)[..., None], 1.0 / (r * r)
    )
    cum = np.cumsum(probs, axis=-1)
    u = rng.generator().random(sums.shape)
    idx = np.minimum((cum < u[..., None]).sum(axis=-1), r * r - 1)
    return np.take_along_axis(wins, idx[..., None], axis=-1)[..., 0]
