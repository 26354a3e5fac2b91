"""Subsampling index sets and structured spatial keep-masks.

The unrestricted scheme draws uniform noise, argsorts it, and keeps the first
``int(n * p)`` positions, so every subset of that size is equally likely and
the kept order follows the noise permutation.  The structured families
(block, grid, uniform, duplication) restrict where kept cells may fall on an
``l x l`` field using a factor ``s``; every family is followed by a random
toroidal shift so the partitioning is not anchored to the origin.

Cardinality is exact by construction: every realization of every family
keeps ``int(l * l * p)`` cells.  Parameter combinations that cannot meet
that count are rejected up front rather than silently floored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptySubsampleError,
    InvalidInputError,
    InvalidPatternError,
    InvalidProbabilityError,
    UnsupportedConfigurationError,
)
from .rng import RngStream

__all__ = [
    "IndexSet",
    "KeepMask",
    "PatternSpec",
    "PATTERN_KINDS",
    "CHANNEL_MODES",
    "keep_count",
    "subsample_indices",
    "pattern_grid",
    "make_pattern_mask",
    "circular_shift",
    "broadcast_mask",
    "write_pgm",
    "read_pgm",
]

PATTERN_KINDS = ("unrestricted", "block", "grid", "uniform", "duplication")
CHANNEL_MODES = ("shared", "independent")


def keep_count(n: int, p: float) -> int:
    """Kept-element count, truncating like ``int(n * p)``."""
    return int(n * p)


def _check_prob(p: float) -> float:
    p = float(p)
    if not 0.0 < p <= 1.0:
        raise InvalidProbabilityError(f"keep probability must be in (0, 1], got {p}")
    return p


@dataclass(frozen=True, eq=False)
class IndexSet:
    """Kept flat indices of a subsample, in noise-permutation order."""

    kept: np.ndarray
    n: int
    p: float

    @property
    def size(self) -> int:
        return int(self.kept.size)


@dataclass(frozen=True)
class PatternSpec:
    """Geometry of a subsampling pattern: family kind, factor s, channel mode."""

    kind: str = "unrestricted"
    s: int = 1
    channel_mode: str = "shared"

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise InvalidPatternError(f"unknown pattern kind {self.kind!r}")
        if self.channel_mode not in CHANNEL_MODES:
            raise InvalidPatternError(f"unknown channel mode {self.channel_mode!r}")
        if self.s < 1:
            raise InvalidPatternError(f"factor s must be >= 1, got {self.s}")

    def validate(self, l: int, p: float) -> None:
        """Reject (l, p) combinations this pattern cannot realize exactly."""
        p = _check_prob(p)
        if l < 1:
            raise InvalidPatternError(f"side length must be >= 1, got {l}")
        target = keep_count(l * l, p)
        if target == 0:
            raise EmptySubsampleError(f"int(l*l*p) == 0 for l={l}, p={p}")
        if self.kind == "unrestricted":
            return
        s = self.s
        if l % s != 0:
            raise InvalidPatternError(f"factor s={s} must divide side length l={l}")
        nb = l // s
        if self.kind == "grid":
            if p != 0.5:
                raise UnsupportedConfigurationError(
                    f"grid pattern is defined only for p=0.5, got p={p}"
                )
            if nb % 2 != 0:
                raise InvalidPatternError(
                    f"grid pattern needs an even tile count per side, got l/s={nb}"
                )
            return
        if self.kind == "block":
            realized = keep_count(nb * nb, p) * s * s
            if realized == 0:
                raise EmptySubsampleError(f"no block survives for l={l}, s={s}, p={p}")
            if realized != target:
                raise InvalidPatternError(
                    f"block pattern keeps {realized} cells but int(l*l*p)={target}; "
                    f"(l/s)^2 * p must be an integer"
                )
            return
        # uniform / duplication
        if s < 2:
            raise InvalidPatternError(f"{self.kind} pattern is undefined for s=1")
        per_block = keep_count(s * s, p)
        realized = nb * nb * per_block
        if per_block == 0:
            raise EmptySubsampleError(f"int(s*s*p) == 0 for s={s}, p={p}")
        if realized != target:
            raise InvalidPatternError(
                f"{self.kind} pattern keeps {realized} cells but int(l*l*p)={target}; "
                f"s^2 * p must be an integer"
            )


@dataclass(frozen=True, eq=False)
class KeepMask:
    """One boolean keep-mask realization over an l x l field."""

    grid: np.ndarray
    channel_mode: str
    spec: PatternSpec
    p: float

    @property
    def side(self) -> int:
        return int(self.grid.shape[0])

    @property
    def kept_cells(self) -> int:
        return int(self.grid.sum())

    @property
    def kept_fraction(self) -> float:
        return self.kept_cells / self.grid.size


def _subsample_from_gen(n: int, p: float, gen: np.random.Generator) -> np.ndarray:
    k = keep_count(n, p)
    if k == 0:
        raise EmptySubsampleError(f"int(n*p) == 0 for n={n}, p={p}")
    noise = gen.random(n)
    order = np.argsort(noise)
    return order[:k]


def subsample_indices(n: int, p: float, rng: RngStream) -> IndexSet:
    """Uniform random subset of int(n*p) indices out of [0, n), permutation-ordered."""
    p = _check_prob(p)
    if n < 1:
        raise EmptySubsampleError(f"source length must be >= 1, got {n}")
    kept = _subsample_from_gen(n, p, rng.generator())
    return IndexSet(kept=kept, n=n, p=p)


def _pattern_grid_from_gen(spec: PatternSpec, l: int, p: float, gen) -> np.ndarray:
    spec.validate(l, p)
    s = spec.s
    if spec.kind == "unrestricted":
        grid = np.zeros(l * l, dtype=bool)
        grid[_subsample_from_gen(l * l, p, gen)] = True
        return grid.reshape(l, l)
    nb = l // s
    if spec.kind == "block":
        blocks = np.zeros(nb * nb, dtype=bool)
        blocks[_subsample_from_gen(nb * nb, p, gen)] = True
        return np.kron(blocks.reshape(nb, nb), np.ones((s, s), dtype=bool))
    if spec.kind == "grid":
        tiles = (np.add.outer(np.arange(nb), np.arange(nb)) % 2) == 0
        return np.kron(tiles, np.ones((s, s), dtype=bool))
    if spec.kind == "duplication":
        template = np.zeros(s * s, dtype=bool)
        template[_subsample_from_gen(s * s, p, gen)] = True
        return np.tile(template.reshape(s, s), (nb, nb))
    # uniform: an independent subsample inside every block
    per_block = keep_count(s * s, p)
    noise = gen.random((nb * nb, s * s))
    order = np.argsort(noise, axis=1)
    blockmask = np.zeros((nb * nb, s * s), dtype=bool)
    np.put_along_axis(blockmask, order[:, :per_block], True, axis=1)
    return blockmask.reshape(nb, nb, s, s).transpose(0, 2, 1, 3).reshape(l, l)


def pattern_grid(spec: PatternSpec, l: int, p: float, rng: RngStream) -> np.ndarray:
    """Pre-shift boolean grid for a pattern; exposed for structure checks."""
    return _pattern_grid_from_gen(spec, l, p, rng.generator())


def make_pattern_mask(spec: PatternSpec, l: int, p: float, rng: RngStream) -> KeepMask:
    """Pattern realization followed by a random toroidal shift in [0, l)^2."""
    gen = rng.generator()
    grid = _pattern_grid_from_gen(spec, l, p, gen)
    dy, dx = (int(v) for v in gen.integers(0, l, size=2))
    grid = np.roll(grid, (dy, dx), axis=(0, 1))
    return KeepMask(grid=grid, channel_mode=spec.channel_mode, spec=spec, p=float(p))


def circular_shift(mask: KeepMask, dy: int, dx: int) -> KeepMask:
    """Toroidal translation; kept-cell count is preserved."""
    return KeepMask(
        grid=np.roll(mask.grid, (int(dy), int(dx)), axis=(0, 1)),
        channel_mode=mask.channel_mode,
        spec=mask.spec,
        p=mask.p,
    )


def broadcast_mask(mask: KeepMask, n_channels: int, rng: RngStream | None = None) -> np.ndarray:
    """Per-channel (C, l, l) boolean view of a mask.

    Shared mode broadcasts the one grid to every channel; independent mode
    draws a fresh realization per channel (same cardinality) and needs `rng`.
    """
    if n_channels < 1:
        raise InvalidInputError(f"n_channels must be >= 1, got {n_channels}")
    if mask.channel_mode == "shared":
        return np.broadcast_to(mask.grid, (n_channels, *mask.grid.shape))
    if rng is None:
        raise InvalidInputError("independent channel mode needs an RngStream")
    grids = [
        make_pattern_mask(mask.spec, mask.side, mask.p, rng.substream(c)).grid
        for c in range(n_channels)
    ]
    return np.stack(grids)


# ---------------------------------------------------------------------------
# Mask dump format: plain PGM (P2), 0 = dropped, 255 = kept
# ---------------------------------------------------------------------------


def write_pgm(grid: np.ndarray, path) -> None:
    g = np.asarray(grid, dtype=bool)
    h, w = g.shape
    lines = [f"P2", f"{w} {h}", "255"]
    for row in g:
        lines.append(" ".join("255" if v else "0" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    if tokens[0] != "P2":
        raise InvalidInputError(f"not a plain PGM file: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4 : 4 + w * h]]).reshape(h, w)
    return data > maxval // 2
