"""Synthetic click log with a planted, purely second-order signal.

Fields ``f1`` and ``f2`` take values ``a..j``, ``f3`` takes ``a..e``; all are
uniform.  A set ``S`` of 50 of the 100 ``(f1, f2)`` pairs is chosen so that
every ``f1`` value and every ``f2`` value occurs in exactly 5 pairs of ``S``:
pair ``(i, j)`` is in ``S`` iff ``(pi[i] + rho[j]) mod 10 < 5`` for two seeded
random permutations.  A row is clicked with probability 0.9 inside ``S`` and
0.1 outside, so no single field carries any signal.
"""

from __future__ import annotations

import string

import numpy as np

from .numerics import DomainError, SeededRng

F12_VALUES = string.ascii_lowercase[:10]
F3_VALUES = string.ascii_lowercase[:5]
P_IN = 0.9
P_OUT = 0.1


def planted_pairs(rng: SeededRng) -> np.ndarray:
    """Boolean ``(10, 10)`` membership matrix of the planted pair set."""
    pi = rng.permutation(10)
    rho = rng.permutation(10)
    return (pi[:, None] + rho[None, :]) % 10 < 5


def generate(n: int, seed: int):
    """Return ``(f1, f2, f3, labels, in_pair_set)`` integer arrays."""
    if n < 100:
        raise DomainError(f"need n >= 100 rows, got {n}")
    rng = SeededRng(seed)
    s = planted_pairs(rng)
    f1 = rng.integers(n, 10)
    f2 = rng.integers(n, 10)
    f3 = rng.integers(n, 5)
    inside = s[f1, f2]
    labels = (rng.uniform(n) < np.where(inside, P_IN, P_OUT)).astype(np.int64)
    return f1, f2, f3, labels, inside


def to_csv(n: int, seed: int) -> str:
    f1, f2, f3, labels, _ = generate(n, seed)
    lines = ["label,f1,f2,f3"]
    lines += [f"{y},{F12_VALUES[a]},{F12_VALUES[b]},{F3_VALUES[c]}" for y, a, b, c in zip(labels, f1, f2, f3)]
    return "\n".join(lines) + "\n"


def bayes_auc(p_in: float = P_IN, p_out: float = P_OUT, share_in: float = 0.5) -> float:
    """Population AUC of the Bayes score (pair-set membership), ties counted half."""
    pos_in = share_in * p_in / (share_in * p_in + (1 - share_in) * p_out)
    neg_in = share_in * (1 - p_in) / (share_in * (1 - p_in) + (1 - share_in) * (1 - p_out))
    return pos_in * (1 - neg_in) + 0.5 * (pos_in * neg_in + (1 - pos_in) * (1 - neg_in))
