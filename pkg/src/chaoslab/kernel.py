"""Time grids and reproducible Brownian bundles.

Gaussian increments come from a counter-based generator (Philox4x32-10)
keyed by the root seed.  The 128-bit counter encodes
``(step, particle, replication_id, stream << 16 | block)`` so every entry of
the increment array is a pure function of its coordinates: sub-arrays can be
regenerated in isolation, extending ``n`` leaves earlier paths untouched and
the result never depends on how the work is split.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .errors import ValidationError

__all__ = [
    "TimeGrid",
    "BrownianBundle",
    "make_grid",
    "sample_brownian",
    "philox4x32",
    "uniforms",
    "STREAM_SYSTEM",
    "STREAM_CLOUD",
    "STREAM_DRAWS",
    "STREAM_INITIAL",
]

# stream tags keep independent roles apart under one root seed
STREAM_SYSTEM = 0
STREAM_CLOUD = 1
STREAM_DRAWS = 2
STREAM_INITIAL = 3

_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_MUL0 = np.uint64(0xD2511F53)
_MUL1 = np.uint64(0xCD9E8D57)
_WEYL0 = np.uint64(0x9E3779B9)
_WEYL1 = np.uint64(0xBB67AE85)


def philox4x32(counter, key, rounds: int = 10):
    """Vectorised Philox4x32 block function.

    ``counter`` is a sequence of four broadcastable integer arrays (32-bit
    words), ``key`` a pair of 32-bit integers.  Returns four uint64 arrays
    holding the 32-bit output words.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) for c in counter))
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for _ in range(rounds):
        p0 = _MUL0 * c0
        p1 = _MUL1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
        k0 = (k0 + _WEYL0) & _MASK32
        k1 = (k1 + _WEYL1) & _MASK32
    return c0, c1, c2, c3


def _split_seed(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _to_unit(hi, lo):
    # 53 random bits, mapped to the open interval (0, 1)
    bits = (hi << np.uint64(21)) ^ (lo >> np.uint64(11))
    return (bits.astype(np.float64) + 0.5) * 2.0**-53


def uniforms(seed: int, replication_id: int, rows, cols, stream: int, width: int = 1):
    """Open-interval uniforms indexed by ``(row, col, k)`` for ``k < width``.

    ``rows`` and ``cols`` are integer arrays (e.g. particle and step indices);
    the output has shape ``(len(rows), len(cols), width)``.
    """
    key = _split_seed(seed)
    rows = np.asarray(rows, dtype=np.uint64)
    cols = np.asarray(cols, dtype=np.uint64)
    n_blocks = (width + 1) // 2
    rep = int(replication_id)
    if rep < 0 or rep >= 2**32:
        raise ValidationError("replication_id must fit in 32 bits")
    if not 0 <= stream < 2**16:
        raise ValidationError("stream tag must fit in 16 bits")
    blocks = (np.uint64(stream) << np.uint64(16)) | np.arange(n_blocks, dtype=np.uint64)
    out = np.empty((rows.size, cols.size, 2 * n_blocks))
    words = philox4x32(
        (cols[None, :, None], rows[:, None, None], np.uint64(rep), blocks[None, None, :]),
        key,
    )
    out[..., 0::2] = _to_unit(words[0], words[1])
    out[..., 1::2] = _to_unit(words[2], words[3])
    return out[..., :width]


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int
    nodes: np.ndarray = field(repr=False, compare=False)

    @property
    def dt(self) -> float:
        return self.T / self.N

    def index_of(self, t: float) -> int:
        """Nearest node index for time ``t``."""
        if not 0.0 <= t <= self.T + 1e-12:
            raise ValidationError(f"time {t} outside [0, {self.T}]")
        return int(round(t / self.dt))

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and self.T == other.T and self.N == other.N

    def __hash__(self):
        return hash((self.T, self.N))


def make_grid(T: float, N: int) -> TimeGrid:
    if not (np.isfinite(T) and T > 0):
        raise ValidationError(f"horizon T must be positive, got {T}")
    if int(N) != N or N < 1:
        raise ValidationError(f"step count N must be a positive integer, got {N}")
    N = int(N)
    nodes = np.arange(N + 1, dtype=np.float64) * (T / N)
    nodes[-1] = T
    nodes.setflags(write=False)
    return TimeGrid(float(T), N, nodes)


@dataclass(frozen=True)
class BrownianBundle:
    """``n`` independent ``d``-dimensional Brownian paths on ``grid``."""

    grid: TimeGrid
    n: int
    d: int
    increments: np.ndarray = field(repr=False)  # (n, N, d)
    seed: int
    replication_id: int
    stream: int = STREAM_SYSTEM
    particles: np.ndarray = field(default=None, repr=False)

    def paths(self) -> np.ndarray:
        """Cumulative paths of shape ``(n, N + 1, d)`` starting at zero."""
        out = np.zeros((self.n, self.grid.N + 1, self.d))
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        return out

    def head(self, n: int) -> "BrownianBundle":
        return BrownianBundle(
            self.grid, n, self.d, self.increments[:n], self.seed,
            self.replication_id, self.stream, self.particles[:n],
        )

    def to_bytes(self) -> bytes:
        """Flat little-endian float64 dump, particle-major then step then dim."""
        return np.ascontiguousarray(self.increments, dtype="<f8").tobytes()

    def write_binary(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["particle", "step"] + [f"dW{j + 1}" for j in range(self.d)])
            for i in range(self.n):
                for k in range(self.grid.N):
                    writer.writerow([int(self.particles[i]), k] + [repr(float(v)) for v in self.increments[i, k]])

    @staticmethod
    def from_bytes(data: bytes, grid: TimeGrid, n: int, d: int) -> np.ndarray:
        return np.frombuffer(data, dtype="<f8").reshape(n, grid.N, d)


def sample_brownian(
    seed: int,
    replication_id: int,
    n: int,
    d: int,
    grid: TimeGrid,
    *,
    stream: int = STREAM_SYSTEM,
    particles=None,
) -> BrownianBundle:
    """Draw a Brownian bundle.

    ``particles`` optionally names the stream index of each path (defaults to
    ``0..n-1``); permuting it permutes the paths exactly.
    """
    if int(n) != n or n < 1:
        raise ValidationError(f"particle count n must be >= 1, got {n}")
    if int(d) != d or d < 1:
        raise ValidationError(f"dimension d must be >= 1, got {d}")
    if particles is None:
        particles = np.arange(n, dtype=np.int64)
    else:
        particles = np.asarray(particles, dtype=np.int64)
        if particles.shape != (n,):
            raise ValidationError("particles must list one stream index per path")
    u = uniforms(seed, replication_id, particles, np.arange(grid.N), stream, width=d)
    inc = ndtri(u)
    inc *= np.sqrt(grid.dt)
    inc.setflags(write=False)
    particles = particles.copy()
    particles.setflags(write=False)
    return BrownianBundle(grid, int(n), int(d), inc, int(seed), int(replication_id), stream, particles)
