"""Rank-4 float64 tensors and a deterministic counter-based PRNG.

Tensors are plain numpy arrays of shape (batch, channels, height, width),
dtype float64, C-order. Every public operation returns a fresh array;
nothing is mutated in place, so results are safe to share across threads.
"""

from __future__ import annotations

import numpy as np

# SplitMix64 constants (Steele/Lea/Flood 2014). The generator is a pure
# counter mixer: output k of a stream seeded with s is mix(s + (k+1)*GAMMA),
# all arithmetic mod 2**64. Any implementation of these three xor-multiply
# rounds reproduces the stream bit for bit on any platform.
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_M64 = (1 << 64) - 1
_U64 = np.uint64


def _mix64_arr(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _U64(_MIX1)
    z = (z ^ (z >> _U64(27))) * _U64(_MIX2)
    return z ^ (z >> _U64(31))


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


class Rng:
    """Seeded SplitMix64 stream. Single-owner: do not share across threads.

    Parallel or structured consumers should call `derive` to fork child
    streams; children are a pure function of (parent seed, labels), so the
    overall stream layout is reproducible regardless of draw order.
    """

    def __init__(self, seed: int):
        self._seed = seed & _M64
        self._counter = 0

    def next_u64(self) -> int:
        self._counter += 1
        return _mix64_int((self._seed + self._counter * _GAMMA) & _M64)

    def _fill_u64(self, count: int) -> np.ndarray:
        ks = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        return _mix64_arr(_U64(self._seed) + ks * _U64(_GAMMA))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        if not lo < hi:
            raise ValueError(f"uniform bounds require lo < hi, got [{lo}, {hi})")
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def uniform_array(self, count: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform bounds require lo < hi, got [{lo}, {hi})")
        u = (self._fill_u64(count) >> _U64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of one u64 draw each)."""
        keys = self._fill_u64(n)
        return np.argsort(keys, kind="stable")

    def derive(self, *labels: int) -> "Rng":
        """Fork a child stream identified by integer labels.

        child_seed = fold of mix64((seed ^ mix64(label * GAMMA)) + GAMMA)
        over the labels; documented so alternate implementations can
        reproduce the tree.
        """
        s = self._seed
        for lab in labels:
            l64 = int(lab) & _M64
            s = _mix64_int(((s ^ _mix64_int((l64 * _GAMMA) & _M64)) + _GAMMA) & _M64)
        return Rng(s)


def _check_tensor(a: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        raise ValueError(f"{name} must be a rank-4 array, got {getattr(a, 'shape', type(a))}")


_MAP2_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def map2(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """Elementwise add/sub/mul of two same-shaped rank-4 tensors."""
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in map2: {a.shape} vs {b.shape}")
    try:
        fn = _MAP2_OPS[op]
    except KeyError:
        raise ValueError(f"unknown map2 op {op!r}, expected one of {sorted(_MAP2_OPS)}")
    return fn(a, b)


def reduce(a: np.ndarray, op: str) -> float:
    """Full reduction to a scalar: sum, max, or sum of squares (sq_norm)."""
    _check_tensor(a)
    if a.size == 0:
        raise ValueError("cannot reduce an empty tensor")
    if op == "sum":
        return float(a.sum())
    if op == "max":
        return float(a.max())
    if op == "sq_norm":
        return float((a * a).sum())
    raise ValueError(f"unknown reduce op {op!r}, expected sum, max or sq_norm")


def rand_uniform(rng: Rng, shape: tuple[int, int, int, int], lo: float, hi: float) -> np.ndarray:
    """Tensor of uniform draws in [lo, hi), consuming the stream deterministically."""
    if len(shape) != 4 or any(int(d) < 0 for d in shape):
        raise ValueError(f"shape must be 4 non-negative ints, got {shape}")
    n = int(np.prod(shape)) if all(shape) else 0
    if n == 0:
        return np.zeros(shape, dtype=np.float64)
    return rng.uniform_array(n, lo, hi).reshape(shape)
