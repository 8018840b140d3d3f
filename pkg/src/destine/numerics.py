"""Dense float64 helpers shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Functions that
take matrices also accept stacks of them (leading batch axes), which is how
the model evaluates a whole mini-batch in one call.

Randomness comes from :class:`SeededRng`, a SplitMix64 generator.  SplitMix64
is counter based, so a block of ``n`` draws is computed in one vectorised
step and reproduces bit-for-bit in any language that implements the same
three-line mixing function.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise DomainError("softmax of an empty sequence")
    shifted = v - v.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``y``."""
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def relu(x):
    out = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return out if out.ndim else float(out)


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """Reference scalar SplitMix64 step: returns ``(new_state, output)``."""
    state = (state + _GOLDEN_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class SeededRng:
    """SplitMix64 generator with explicit, copyable state.

    Draw ``i`` (1-based, counted from construction) is
    ``mix(seed + i * 0x9E3779B97F4A7C15 mod 2**64)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_uint64(self, n: int) -> np.ndarray:
        steps = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.seed) + steps * np.uint64(_GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) using the top 53 bits of each draw."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        # Box-Muller on paired uniforms; 1 - u keeps the log argument in (0, 1].
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:half]))
        theta = 2.0 * math.pi * u[half:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return std * z

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_uint64(n), kind="stable")


def dropout_mask(n: int, rate: float, rng: SeededRng) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(n)
    keep = rng.uniform(n) >= rate
    return keep / (1.0 - rate)
