"""Deterministic, splittable random streams.

A :class:`RngStream` names a random stream by ``(seed, stream_id)``.  Streams
are immutable values: the same stream always yields the same draws, and
distinct stream ids yield statistically independent sequences (derived
through :class:`numpy.random.SeedSequence`, i.e. a split construction).
Child streams can be derived in any order with :meth:`RngStream.substream`,
which is what lets per-sample masks and per-trial inputs be generated
independently and in parallel.

Uniform-side draws (noise for argsort subsampling, Bernoulli masks, shifts)
go through a regular :class:`numpy.random.Generator` backed by SFC64.

Gaussian draws go through a fused SFC64 + ziggurat kernel compiled with
numba.  The SFC64 word stream is seeded exactly like numpy's own SFC64 (three
``SeedSequence`` words plus twelve warm-up rounds), so the underlying bit
stream is verifiable word-for-word against ``numpy.random.SFC64.random_raw``;
the ziggurat transform on top of it is the standard 256-layer construction.
The fused kernel exists because the generic generator path tops out well
below what the Monte-Carlo sweeps need on one core.

Like jax keys, a stream should be consumed by a single operation; derive a
fresh substream for every independent consumer.  Internally the uniform and
gaussian sides of one stream are keyed apart, so even accidental reuse of a
stream across the two kinds of draw cannot correlate them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidShapeError

__all__ = ["RngStream", "sample_normals"]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# SeedSequence spawn-key tags separating the two draw kinds of one stream.
_TAG_UNIFORM = 0
_TAG_GAUSSIAN = 1


def _mix64(x: int) -> int:
    """SplitMix64 finalizer; bijective mixing on 64-bit words."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Immutable name of a random stream: draws are a pure function of it."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        object.__setattr__(self, "stream_id", self.stream_id & _MASK64)

    def substream(self, index: int) -> "RngStream":
        """Derive an independent child stream; children of distinct parents stay distinct."""
        if index < 0:
            raise ValueError("substream index must be non-negative")
        child = _mix64(self.stream_id + _GOLDEN * (index + 1))
        return RngStream(self.seed, child)

    def _seed_seq(self, tag: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, tag))

    def generator(self) -> np.random.Generator:
        """numpy Generator for the uniform side of this stream."""
        return np.random.Generator(np.random.SFC64(self._seed_seq(_TAG_UNIFORM)))

    def gaussian_state(self) -> np.ndarray:
        """SFC64 state (a, b, c, counter) feeding the gaussian kernel.

        Matches numpy's SFC64 seeding (generate_state(3) then 12 warm-up
        rounds) so the word stream equals
        ``SFC64(self._seed_seq(1)).random_raw(...)`` bit for bit.
        """
        words = self._seed_seq(_TAG_GAUSSIAN).generate_state(3, np.uint64)
        state = np.array([words[0], words[1], words[2], 1], dtype=np.uint64)
        _sfc64_discard(state, 12)
        return state


# ---------------------------------------------------------------------------
# Ziggurat tables (256 layers, double precision)
# ---------------------------------------------------------------------------

_ZIG_LAYERS = 256


def _gauss_pdf_kernel(x: float) -> float:
    return math.exp(-0.5 * x * x)


def _zig_area(r: float) -> float:
    # area of the base strip: rectangle part plus the tail beyond r
    return r * _gauss_pdf_kernel(r) + math.sqrt(math.pi / 2.0) * math.erfc(r / math.sqrt(2.0))


def _zig_residual(r: float) -> float:
    # > 0 when r is too small (v grows as r shrinks, so heights overshoot
    # f(0)=1 before the layers run out); < 0 when r is too large
    v = _zig_area(r)
    x = r
    for _ in range(_ZIG_LAYERS - 2):
        arg = v / x + _gauss_pdf_kernel(x)
        if arg >= 1.0:
            return 1.0
        x = math.sqrt(-2.0 * math.log(arg))
    return v / x + _gauss_pdf_kernel(x) - 1.0


def _build_ziggurat():
    lo, hi = 3.0, 4.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if _zig_residual(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    # take the non-overshooting side so the table recursion stays in domain
    r = hi
    v = _zig_area(r)

    # widths: xs[1] = r is the base boundary, xs[i] shrinks towards the cap,
    # xs[0] is the virtual width of the base strip (v / f(r) > r)
    xs = np.empty(_ZIG_LAYERS + 1)
    xs[1] = r
    for i in range(1, _ZIG_LAYERS - 1):
        xs[i + 1] = math.sqrt(-2.0 * math.log(v / xs[i] + _gauss_pdf_kernel(xs[i])))
    xs[0] = v / _gauss_pdf_kernel(r)
    xs[_ZIG_LAYERS] = 0.0

    two52 = float(1 << 52)
    w = np.empty(_ZIG_LAYERS)
    k = np.empty(_ZIG_LAYERS, np.uint64)
    flo = np.zeros(_ZIG_LAYERS)
    fhi = np.zeros(_ZIG_LAYERS)

    w[0] = xs[0] / two52
    k[0] = np.uint64(int(two52 * (r / xs[0])))
    for i in range(1, _ZIG_LAYERS):
        w[i] = xs[i] / two52
        if i < _ZIG_LAYERS - 1:
            k[i] = np.uint64(int(two52 * (xs[i + 1] / xs[i])))
        else:
            k[i] = np.uint64(0)  # cap layer: always take the wedge test
        flo[i] = _gauss_pdf_kernel(xs[i])
        fhi[i] = _gauss_pdf_kernel(xs[i + 1]) if i < _ZIG_LAYERS - 1 else 1.0
    return r, w, k, flo, fhi


_ZIG_R, _ZIG_W, _ZIG_K, _ZIG_FLO, _ZIG_FHI = _build_ziggurat()


# ---------------------------------------------------------------------------
# Fused SFC64 + ziggurat kernel
# ---------------------------------------------------------------------------

_U64 = np.uint64


@numba.njit(numba.void(numba.uint64[::1], numba.int64), cache=True)
def _sfc64_discard(state, n):
    a, b, c, cnt = state[0], state[1], state[2], state[3]
    for _ in range(n):
        out = a + b + cnt
        cnt += _U64(1)
        a = b ^ (b >> _U64(11))
        b = c + (c << _U64(3))
        c = ((c << _U64(24)) | (c >> _U64(40))) + out
    state[0], state[1], state[2], state[3] = a, b, c, cnt


@numba.njit(numba.void(numba.uint64[::1], numba.uint64[::1]), cache=True)
def _sfc64_words(state, out):
    """Fill `out` with raw SFC64 words; used to verify against numpy's stream."""
    a, b, c, cnt = state[0], state[1], state[2], state[3]
    for i in range(out.size):
        o = a + b + cnt
        cnt += _U64(1)
        a = b ^ (b >> _U64(11))
        b = c + (c << _U64(3))
        c = ((c << _U64(24)) | (c >> _U64(40))) + o
        out[i] = o
    state[0], state[1], state[2], state[3] = a, b, c, cnt


@numba.njit(
    numba.void(
        numba.float64[::1],
        numba.uint64[::1],
        numba.float64[::1],
        numba.uint64[::1],
        numba.float64[::1],
        numba.float64[::1],
        numba.float64,
    ),
    cache=True,
)
def _fill_normals(out, state, w, k, flo, fhi, r_tail):
    a, b, c, cnt = state[0], state[1], state[2], state[3]
    inv53 = 1.0 / 9007199254740992.0
    n = out.size
    i = 0
    while i < n:
        o = a + b + cnt
        cnt += _U64(1)
        a = b ^ (b >> _U64(11))
        b = c + (c << _U64(3))
        c = ((c << _U64(24)) | (c >> _U64(40))) + o

        idx = o & _U64(255)
        sign = (o >> _U64(8)) & _U64(1)
        rabs = o >> _U64(12)
        x = rabs * w[idx]
        if rabs < k[idx]:
            out[i] = -x if sign else x
            i += 1
        elif idx == _U64(0):
            # base strip miss: Marsaglia tail sample beyond r_tail
            while True:
                o1 = a + b + cnt
                cnt += _U64(1)
                a = b ^ (b >> _U64(11))
                b = c + (c << _U64(3))
                c = ((c << _U64(24)) | (c >> _U64(40))) + o1
                o2 = a + b + cnt
                cnt += _U64(1)
                a = b ^ (b >> _U64(11))
                b = c + (c << _U64(3))
                c = ((c << _U64(24)) | (c >> _U64(40))) + o2
                ex = -np.log(1.0 - (o1 >> _U64(11)) * inv53) / r_tail
                ey = -np.log(1.0 - (o2 >> _U64(11)) * inv53)
                if ey + ey > ex * ex:
                    val = r_tail + ex
                    out[i] = -val if sign else val
                    i += 1
                    break
        else:
            # wedge: uniform height inside the layer against the density
            o1 = a + b + cnt
            cnt += _U64(1)
            a = b ^ (b >> _U64(11))
            b = c + (c << _U64(3))
            c = ((c << _U64(24)) | (c >> _U64(40))) + o1
            u = (o1 >> _U64(11)) * inv53
            if flo[idx] + u * (fhi[idx] - flo[idx]) < np.exp(-0.5 * x * x):
                out[i] = -x if sign else x
                i += 1
            # else: reject and redraw a fresh layer
    state[0], state[1], state[2], state[3] = a, b, c, cnt


def sample_normals(n: int, rng: RngStream, out: np.ndarray | None = None) -> np.ndarray:
    """n i.i.d. standard normal doubles, a pure function of `rng`.

    `out` may supply a preallocated flat float64 buffer of length n, which
    avoids page-faulting a fresh allocation in tight sampling loops; the
    values written are identical either way.
    """
    if n < 0:
        raise InvalidShapeError(f"cannot draw {n} values")
    if out is None:
        out = np.empty(n, dtype=np.float64)
    elif out.shape != (n,) or out.dtype != np.float64 or not out.flags.c_contiguous:
        raise InvalidShapeError(f"out must be a contiguous float64 buffer of shape ({n},)")
    if n:
        _fill_normals(out, rng.gaussian_state(), _ZIG_W, _ZIG_K, _ZIG_FLO, _ZIG_FHI, _ZIG_R)
    return out
