"""Disentangled self-attention interaction layer, forward and backward.

Shapes follow the convention ``(..., M, width)``: ``M`` feature fields, any
number of leading batch axes.  Every head computes

    pairwise  P[m, n] = softmax_n((q_m - mean q) . (k_n - mean k))
    unary     U[n]    = softmax_n(mean(q') . k_n)

and mixes the value vectors with a combination of the two chosen by
:class:`Variant`.  The field means couple all fields together, and the
backward pass differentiates through them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .numerics import DomainError, ShapeError, relu, softmax, softmax_backward


class Variant(str, enum.Enum):
    FULL = "full"
    PAIRWISE = "pairwise"
    UNARY = "unary"
    MULTIPLICATIVE = "multiplicative"
    SHARED_QUERY = "shared_query"


_USES_PAIRWISE = {Variant.FULL, Variant.PAIRWISE, Variant.MULTIPLICATIVE, Variant.SHARED_QUERY}
_USES_UNARY = {Variant.FULL, Variant.UNARY, Variant.MULTIPLICATIVE}


@dataclass
class HeadParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_q_prime: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        shapes = {getattr(self, f.name).shape for f in fields(self)}
        if len(shapes) != 1:
            raise ShapeError(f"head matrices disagree in shape: {sorted(shapes)}")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class LayerParams:
    heads: list[HeadParams]
    w_r: np.ndarray

    def __post_init__(self):
        if not self.heads:
            raise ShapeError("a layer needs at least one head")
        width = sum(h.head_dim for h in self.heads)
        if self.w_r.shape != (width, self.heads[0].w_q.shape[1]):
            raise ShapeError(f"w_r has shape {self.w_r.shape}, expected {(width, self.heads[0].w_q.shape[1])}")


@dataclass
class HeadCache:
    e: np.ndarray
    head: HeadParams
    variant: Variant
    scale: float
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    q_c: Optional[np.ndarray] = None
    k_c: Optional[np.ndarray] = None
    pair: Optional[np.ndarray] = None
    q_prime_mean: Optional[np.ndarray] = None
    unary: Optional[np.ndarray] = None
    q_mean: Optional[np.ndarray] = None
    shared: Optional[np.ndarray] = None


@dataclass
class LayerCache:
    e: np.ndarray
    heads: list[HeadCache]
    params: LayerParams
    pre: np.ndarray
    mask: Optional[np.ndarray]


def _weight_grad(dx, x):
    """Sum of ``dx_m x_m^T`` over fields and every batch axis."""
    return dx.reshape(-1, dx.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _check_pair(a, b):
    if a.shape != b.shape or a.ndim < 2:
        raise ShapeError(f"expected matching (..., M, d') arrays, got {a.shape} and {b.shape}")


def _pairwise(q, k, scale):
    q_c = q - q.mean(axis=-2, keepdims=True)
    k_c = k - k.mean(axis=-2, keepdims=True)
    raw = (q_c @ np.swapaxes(k_c, -1, -2)) * scale
    return softmax(raw, axis=-1), q_c, k_c


def _mean_query_scores(q, k, scale):
    mu = q.mean(axis=-2)
    raw = np.einsum("...d,...nd->...n", mu, k) * scale
    return softmax(raw, axis=-1), mu


def pairwise_scores(q: np.ndarray, k: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-stochastic ``(M, M)`` scores between whitened queries and keys."""
    _check_pair(q, k)
    return _pairwise(q, k, scale)[0]


def unary_scores(q_prime: np.ndarray, k: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax over keys of ``mean(q') . k_n``; one vector shared by all queries."""
    _check_pair(q_prime, k)
    return _mean_query_scores(q_prime, k, scale)[0]


def combine_scores(p, u, variant, shared_q_mean_scores=None) -> np.ndarray:
    variant = Variant(variant)
    if variant is Variant.PAIRWISE:
        return p
    if variant is Variant.UNARY:
        m = u.shape[-1]
        return np.broadcast_to(u[..., None, :], u.shape[:-1] + (m, m)).copy()
    if variant is Variant.FULL:
        return p + u[..., None, :]
    if variant is Variant.MULTIPLICATIVE:
        return p * u[..., None, :]
    if shared_q_mean_scores is None:
        raise DomainError("shared_query variant needs the mean-query score vector")
    return p + shared_q_mean_scores[..., None, :]


def head_forward(e: np.ndarray, head: HeadParams, variant=Variant.FULL, scale_scores: bool = False):
    variant = Variant(variant)
    if e.shape[-1] != head.w_q.shape[1]:
        raise ShapeError(f"input width {e.shape[-1]} does not match head input width {head.w_q.shape[1]}")
    scale = 1.0 / math.sqrt(head.head_dim) if scale_scores else 1.0
    k = e @ head.w_k.T
    v = e @ head.w_v.T
    cache = HeadCache(e=e, head=head, variant=variant, scale=scale, k=k, v=v, attn=None)
    p = u = s = None
    if variant in _USES_PAIRWISE:
        q = e @ head.w_q.T
        p, cache.q_c, cache.k_c = _pairwise(q, k, scale)
        cache.pair = p
        if variant is Variant.SHARED_QUERY:
            s, cache.q_mean = _mean_query_scores(q, k, scale)
            cache.shared = s
    if variant in _USES_UNARY:
        u, cache.q_prime_mean = _mean_query_scores(e @ head.w_q_prime.T, k, scale)
        cache.unary = u
    cache.attn = combine_scores(p, u, variant, s)
    return cache.attn @ v, cache


def head_backward(cache: HeadCache, dz: np.ndarray):
    """Return ``(d_e, HeadParams of gradients)`` for upstream gradient ``dz``."""
    e, k, v, attn, variant = cache.e, cache.k, cache.v, cache.attn, cache.variant
    if dz.shape != v.shape:
        raise ShapeError(f"upstream gradient {dz.shape} does not match head output {v.shape}")
    m = e.shape[-2]
    d_attn = dz @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dz
    dq = np.zeros_like(k)
    dk = np.zeros_like(k)
    dq_prime = np.zeros_like(k)

    d_pair = d_unary = d_shared = None
    if variant is Variant.FULL:
        d_pair, d_unary = d_attn, d_attn.sum(axis=-2)
    elif variant is Variant.PAIRWISE:
        d_pair = d_attn
    elif variant is Variant.UNARY:
        d_unary = d_attn.sum(axis=-2)
    elif variant is Variant.MULTIPLICATIVE:
        d_pair = d_attn * cache.unary[..., None, :]
        d_unary = (d_attn * cache.pair).sum(axis=-2)
    else:
        d_pair, d_shared = d_attn, d_attn.sum(axis=-2)

    if d_pair is not None:
        d_raw = softmax_backward(cache.pair, d_pair) * cache.scale
        dq_c = d_raw @ cache.k_c
        dk_c = np.swapaxes(d_raw, -1, -2) @ cache.q_c
        # centering is a symmetric projection
        dq += dq_c - dq_c.mean(axis=-2, keepdims=True)
        dk += dk_c - dk_c.mean(axis=-2, keepdims=True)
    if d_unary is not None:
        d_raw = softmax_backward(cache.unary, d_unary) * cache.scale
        dk += d_raw[..., :, None] * cache.q_prime_mean[..., None, :]
        d_mu = np.einsum("...n,...nd->...d", d_raw, k)
        dq_prime += np.broadcast_to(d_mu[..., None, :] / m, k.shape)
    if d_shared is not None:
        d_raw = softmax_backward(cache.shared, d_shared) * cache.scale
        dk += d_raw[..., :, None] * cache.q_mean[..., None, :]
        d_mu = np.einsum("...n,...nd->...d", d_raw, k)
        dq += np.broadcast_to(d_mu[..., None, :] / m, k.shape)

    head = cache.head
    d_e = dq @ head.w_q + dk @ head.w_k + dq_prime @ head.w_q_prime + dv @ head.w_v
    grads = HeadParams(w_q=_weight_grad(dq, e), w_k=_weight_grad(dk, e), w_q_prime=_weight_grad(dq_prime, e), w_v=_weight_grad(dv, e))
    return d_e, grads


def layer_forward(e: np.ndarray, layer: LayerParams, variant=Variant.FULL,
                  scale_scores: bool = False, mask: Optional[np.ndarray] = None):
    """Concatenate heads, add the residual projection, ReLU, then optional dropout mask."""
    zs, caches = [], []
    for head in layer.heads:
        z, c = head_forward(e, head, variant, scale_scores)
        zs.append(z)
        caches.append(c)
    pre = np.concatenate(zs, axis=-1) + e @ layer.w_r.T
    out = relu(pre)
    if mask is not None:
        if mask.shape != out.shape:
            raise ShapeError(f"dropout mask {mask.shape} does not match layer output {out.shape}")
        out = out * mask
    return out, LayerCache(e=e, heads=caches, params=layer, pre=pre, mask=mask)


def layer_backward(cache: LayerCache, d_out: np.ndarray):
    if d_out.shape != cache.pre.shape:
        raise ShapeError(f"upstream gradient {d_out.shape} does not match layer output {cache.pre.shape}")
    if cache.mask is not None:
        d_out = d_out * cache.mask
    d_pre = d_out * (cache.pre > 0)
    layer = cache.params
    d_e = d_pre @ layer.w_r
    w_r = _weight_grad(d_pre, cache.e)
    head_grads = []
    start = 0
    for head, hc in zip(layer.heads, cache.heads):
        stop = start + head.head_dim
        d_e_head, g = head_backward(hc, d_pre[..., start:stop])
        d_e = d_e + d_e_head
        head_grads.append(g)
        start = stop
    return d_e, LayerParams(heads=head_grads, w_r=w_r)
