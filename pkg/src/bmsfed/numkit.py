"""Dense matrix helpers and seeded random streams.

Every numeric value in bmsfed is a 2-D float64 ``numpy.ndarray`` (a
"matrix"). Activations are shaped (batch, features), weights (in, out).
Randomness comes from ``RngStream`` objects keyed by (seed, stream id) on the
counter-based Philox generator, so a stream's sequence depends only on its
key and never on which other streams were consumed first.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import create_error

Matrix = NDArray[np.float64]

_MASK64 = (1 << 64) - 1


def ensure_finite(m: np.ndarray, operation: str) -> np.ndarray:
    """Raise BMS-101 if ``m`` holds NaN or Inf."""
    if not np.all(np.isfinite(m)):
        raise create_error(
            "BMS-101",
            technical_details=f"{operation} produced a non-finite entry",
            context={"operation": operation},
        )
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit shape check.

    Raises:
        BmsError: BMS-100 when ``a.cols != b.rows``.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise create_error(
            "BMS-100",
            technical_details=f"cannot multiply {a.shape} by {b.shape}",
        )
    return ensure_finite(a @ b, "matmul")


def flatten_l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean norm of ``a - b`` over all flattened entries."""
    if a.shape != b.shape:
        raise create_error(
            "BMS-100",
            technical_details=f"distance between {a.shape} and {b.shape}",
        )
    return float(np.linalg.norm((a - b).ravel()))


def derive_stream_id(purpose: str, client: Optional[int] = None, round_index: int = 0) -> int:
    """Stable 64-bit stream id for a (purpose, client, round) triple.

    Uses blake2b rather than ``hash`` so ids are identical across processes
    and platforms.
    """
    key = f"{purpose}|{'-' if client is None else client}|{round_index}"
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Single-owner random stream keyed by (seed, stream id)."""

    def __init__(self, seed: int, stream_id: int):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        seq = np.random.SeedSequence([self.seed, self.stream_id])
        self._gen = np.random.Generator(np.random.Philox(seq))

    @classmethod
    def for_purpose(
        cls,
        seed: int,
        purpose: str,
        client: Optional[int] = None,
        round_index: int = 0,
    ) -> "RngStream":
        """Stream for a named purpose, optionally scoped to a client and round."""
        return cls(seed, derive_stream_id(purpose, client, round_index))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id:#018x})"

    def gaussian(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
        """Matrix of i.i.d. normal draws."""
        if std < 0:
            raise create_error("BMS-102", technical_details=f"std={std} < 0")
        draws = self._gen.standard_normal((rows, cols))
        return ensure_finite(mean + std * draws, "rng_gaussian")

    def subset(self, universe: Sequence[int], size: int) -> List[int]:
        """Uniform size-element subset without replacement, sorted ascending."""
        pool = list(universe)
        if size < 0 or size > len(pool):
            raise create_error(
                "BMS-102",
                technical_details=f"subset of size {size} from {len(pool)} ids",
            )
        if size == 0:
            return []
        picks = self._gen.choice(len(pool), size=size, replace=False)
        return sorted(pool[int(p)] for p in picks)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._gen.permutation(n).astype(np.int64)

    def dirichlet(self, alpha: Sequence[float]) -> NDArray[np.float64]:
        return self._gen.dirichlet(np.asarray(alpha, dtype=np.float64))

    def uniform(self, size: Optional[int] = None):
        return self._gen.random(size)

    def integers(self, low: int, high: int, size: Optional[int] = None):
        return self._gen.integers(low, high, size=size)


def rng_gaussian(stream: RngStream, rows: int, cols: int, mean: float, std: float) -> Matrix:
    """Draw a (rows, cols) matrix of N(mean, std²) values from ``stream``."""
    return stream.gaussian(rows, cols, mean, std)


def rng_subset(stream: RngStream, universe: Iterable[int], size: int) -> List[int]:
    """Draw a uniform ``size``-subset of ``universe`` from ``stream``."""
    return stream.subset(list(universe), size)
