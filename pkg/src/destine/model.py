"""End-to-end DESTINE network over mini-batches of field index vectors.

Parameters live in a flat, ordered ``name -> ndarray`` mapping so that the
optimizer, the gradient checker and the checkpoint writer can all walk the
same structure.  Batch-norm running statistics are kept apart as buffers:
they are state, not trainable parameters, and never receive gradients.

Tensor names::

    embedding                       (total_features, d)
    layers.{l}.heads.{h}.w_q        (d', d_in)      likewise w_k, w_q_prime, w_v
    layers.{l}.w_r                  (d'H, d_in)
    dnn.{i}.w / .gamma / .beta      (DNN blocks, only with use_dnn; batch norm
                                     absorbs any bias, so the affine has none)
    dnn.out.w / dnn.out.b           (M * width, last DNN width)
    merge.w                         (width, 2 * width)
    out_w                           (M * width,)
    out_b                           ()

``width`` is d'H when the model has interaction layers and d otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .attention import HeadParams, LayerParams, Variant, layer_backward, layer_forward
from .numerics import DomainError, SeededRng, ShapeError, dropout_mask, sigmoid

FORMAT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_CLAMP = 1e-12


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_fields: int
    total_features: int
    embed_dim: int = 64
    head_dim: int = 32
    num_heads: int = 2
    num_layers: int = 3
    variant: Variant = Variant.FULL
    scale_scores: bool = False
    dropout_rate: float = 0.2
    use_dnn: bool = False
    dnn_widths: tuple[int, ...] = (400, 400)
    l2_weight: float = 5e-6

    def __post_init__(self):
        try:
            self.variant = Variant(self.variant)
        except ValueError:
            raise ConfigError("variant", f"unknown attention variant {self.variant!r}") from None
        self.dnn_widths = tuple(int(w) for w in self.dnn_widths)
        for name in ("num_fields", "total_features", "embed_dim", "head_dim", "num_heads"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(name, f"must be a positive integer, got {getattr(self, name)!r}")
        if not isinstance(self.num_layers, int) or self.num_layers < 0:
            raise ConfigError("num_layers", f"must be a non-negative integer, got {self.num_layers!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", f"must lie in [0, 1), got {self.dropout_rate!r}")
        if self.l2_weight < 0:
            raise ConfigError("l2_weight", f"must be non-negative, got {self.l2_weight!r}")
        if self.use_dnn and (not self.dnn_widths or min(self.dnn_widths) < 1):
            raise ConfigError("dnn_widths", "needs at least one positive width when use_dnn is set")

    @property
    def width(self) -> int:
        """Per-field width of the representation fed to the output head."""
        return self.head_dim * self.num_heads if self.num_layers else self.embed_dim

    def layer_input_dim(self, layer: int) -> int:
        return self.embed_dim if layer == 0 else self.head_dim * self.num_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["dnn_widths"] = list(self.dnn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown key")
        for key in ("num_fields", "total_features"):
            if key not in d:
                raise ConfigError(key, "missing")
        return cls(**d)


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def layer(self, l: int, num_heads: int) -> LayerParams:
        t = self.tensors
        heads = [
            HeadParams(*(t[f"layers.{l}.heads.{h}.{w}"] for w in ("w_q", "w_k", "w_q_prime", "w_v")))
            for h in range(num_heads)
        ]
        return LayerParams(heads, t[f"layers.{l}.w_r"])

    def num_scalars(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()})


def is_weight(name: str) -> bool:
    """Tensors covered by the L2 penalty: weight matrices and embeddings."""
    return name == "embedding" or name.endswith((".w_q", ".w_k", ".w_q_prime", ".w_v", ".w_r", ".w")) \
        or name == "out_w"


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes: dict[str, tuple[int, ...]] = {"embedding": (c.total_features, c.embed_dim)}
    for l in range(c.num_layers):
        d_in = c.layer_input_dim(l)
        for h in range(c.num_heads):
            for w in ("w_q", "w_k", "w_q_prime", "w_v"):
                shapes[f"layers.{l}.heads.{h}.{w}"] = (c.head_dim, d_in)
        shapes[f"layers.{l}.w_r"] = (c.head_dim * c.num_heads, d_in)
    if c.use_dnn:
        prev = c.num_fields * c.embed_dim
        for i, w in enumerate(c.dnn_widths):
            shapes[f"dnn.{i}.w"] = (w, prev)
            shapes[f"dnn.{i}.gamma"] = (w,)
            shapes[f"dnn.{i}.beta"] = (w,)
            prev = w
        shapes["dnn.out.w"] = (c.num_fields * c.width, prev)
        shapes["dnn.out.b"] = (c.num_fields * c.width,)
        shapes["merge.w"] = (c.width, 2 * c.width)
    shapes["out_w"] = (c.num_fields * c.width,)
    shapes["out_b"] = ()
    return shapes


def buffer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    if not config.use_dnn:
        return {}
    out = {}
    for i, w in enumerate(config.dnn_widths):
        out[f"dnn.{i}.running_mean"] = (w,)
        out[f"dnn.{i}.running_var"] = (w,)
    return out


def init_params(config: ModelConfig, rng: SeededRng) -> ModelParams:
    """Glorot-uniform weights, N(0, 0.01) embeddings, zero biases, unit BN scale."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        n = math.prod(shape)
        if name == "embedding":
            tensors[name] = rng.normal(n, std=0.01).reshape(shape)
        elif name.endswith((".gamma",)):
            tensors[name] = np.ones(shape)
        elif is_weight(name):
            fan_out, fan_in = shape if len(shape) == 2 else (1, shape[0])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = ((2.0 * rng.uniform(n) - 1.0) * bound).reshape(shape)
        else:
            tensors[name] = np.zeros(shape)
    buffers = {}
    for name, shape in buffer_shapes(config).items():
        buffers[name] = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
    return ModelParams(tensors, buffers)


def param_count(config: ModelConfig) -> dict:
    """Closed-form parameter counts per component.

    ``layers[l]["w_q_prime"]`` is the share of the extra unary query matrix,
    ``H * d' * d_in`` per layer.
    """
    c = config
    hd = c.head_dim * c.num_heads
    counts: dict = {"embedding": c.total_features * c.embed_dim, "layers": []}
    for l in range(c.num_layers):
        d_in = c.layer_input_dim(l)
        heads = c.num_heads * 4 * c.head_dim * d_in
        counts["layers"].append({
            "heads": heads,
            "w_q_prime": c.num_heads * c.head_dim * d_in,
            "w_r": hd * d_in,
            "total": heads + hd * d_in,
        })
    counts["output"] = c.num_fields * c.width + 1
    dnn = 0
    if c.use_dnn:
        prev = c.num_fields * c.embed_dim
        for w in c.dnn_widths:
            dnn += prev * w + 2 * w
            prev = w
        dnn += (prev + 1) * c.num_fields * c.width + 2 * c.width * c.width
    counts["dnn"] = dnn
    counts["total"] = counts["embedding"] + sum(l["total"] for l in counts["layers"]) + counts["output"] + dnn
    return counts


def embed(sample, embedding: np.ndarray) -> np.ndarray:
    """Rows of the embedding table for one sample's (or a batch's) indices."""
    idx = np.asarray(getattr(sample, "indices", sample), dtype=np.int64)
    bad = (idx < 0) | (idx >= embedding.shape[0])
    if bad.any():
        field_pos = np.argwhere(bad)[0][-1]
        raise IndexError(f"field {field_pos}: index {idx[bad][0]} outside embedding table of {embedding.shape[0]} rows")
    return embedding[idx]


def as_index_array(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch.astype(np.int64, copy=False)
    return np.array([s.indices for s in batch], dtype=np.int64)


@dataclass
class BatchCache:
    x: np.ndarray
    e0: np.ndarray
    layers: list
    dnn: Optional[dict]
    merged_input: Optional[np.ndarray]
    flat: np.ndarray
    y_hat: np.ndarray
    mode: str


def _batchnorm_forward(a, gamma, beta, running_mean, running_var, train):
    if train:
        mu = a.mean(axis=0)
        var = a.var(axis=0)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (a - mu) * inv_std
    return gamma * x_hat + beta, {"x_hat": x_hat, "inv_std": inv_std, "mean": mu, "var": var}


def _batchnorm_backward(dy, gamma, c, train):
    x_hat, inv_std = c["x_hat"], c["inv_std"]
    d_gamma = (dy * x_hat).sum(axis=0)
    d_beta = dy.sum(axis=0)
    dx_hat = dy * gamma
    if not train:
        return dx_hat * inv_std, d_gamma, d_beta
    n = dy.shape[0]
    da = inv_std / n * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
    return da, d_gamma, d_beta


def dnn_branch_forward(e_flat: np.ndarray, params: ModelParams, config: ModelConfig, mode: str = "train"):
    """(linear -> batch norm -> relu) blocks, then an affine reshaped to ``(B, M, width)``."""
    train = mode == "train"
    if train and e_flat.shape[0] < 2:
        raise DomainError("the DNN branch needs a batch of at least 2 samples in train mode")
    t, buf = params.tensors, params.buffers
    h = e_flat
    blocks = []
    for i in range(len(config.dnn_widths)):
        a = h @ t[f"dnn.{i}.w"].T
        bn_out, bn = _batchnorm_forward(a, t[f"dnn.{i}.gamma"], t[f"dnn.{i}.beta"],
                                        buf[f"dnn.{i}.running_mean"], buf[f"dnn.{i}.running_var"], train)
        blocks.append({"input": h, "bn": bn, "bn_out": bn_out})
        h = np.maximum(bn_out, 0.0)
    out = h @ t["dnn.out.w"].T + t["dnn.out.b"]
    cache = {"blocks": blocks, "last": h, "train": train}
    return out.reshape(e_flat.shape[0], config.num_fields, config.width), cache


def dnn_branch_backward(d_out, cache, params: ModelParams, config: ModelConfig, grads: dict):
    t = params.tensors
    d = d_out.reshape(d_out.shape[0], -1)
    grads["dnn.out.w"] = d.T @ cache["last"]
    grads["dnn.out.b"] = d.sum(axis=0)
    dh = d @ t["dnn.out.w"]
    for i in reversed(range(len(config.dnn_widths))):
        block = cache["blocks"][i]
        d_bn = dh * (block["bn_out"] > 0)
        da, grads[f"dnn.{i}.gamma"], grads[f"dnn.{i}.beta"] = _batchnorm_backward(
            d_bn, t[f"dnn.{i}.gamma"], block["bn"], cache["train"])
        grads[f"dnn.{i}.w"] = da.T @ block["input"]
        dh = da @ t[f"dnn.{i}.w"]
    return dh


def forward(batch, params: ModelParams, config: ModelConfig, mode: str = "eval",
            rng: Optional[SeededRng] = None):
    """Click probabilities for a batch; ``mode`` is ``"train"`` or ``"eval"``.

    Train mode applies dropout after every interaction layer (needs ``rng``
    when the rate is positive) and normalizes the DNN branch with batch
    statistics.  Running statistics are not touched here; see
    :func:`update_running_stats`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = as_index_array(batch)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != config.num_fields:
        raise ShapeError(f"expected a nonempty (B, {config.num_fields}) index batch, got {x.shape}")
    t = params.tensors
    e0 = embed(x, t["embedding"])
    use_dropout = mode == "train" and config.dropout_rate > 0
    if use_dropout and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    h = e0
    layer_caches = []
    for l in range(config.num_layers):
        mask = None
        if use_dropout:
            shape = x.shape + (config.head_dim * config.num_heads,)
            mask = dropout_mask(math.prod(shape), config.dropout_rate, rng).reshape(shape)
        h, lc = layer_forward(h, params.layer(l, config.num_heads), config.variant, config.scale_scores, mask)
        layer_caches.append(lc)
    dnn_cache = merged_input = None
    if config.use_dnn:
        z_tilde, dnn_cache = dnn_branch_forward(e0.reshape(x.shape[0], -1), params, config, mode)
        merged_input = np.concatenate([h, z_tilde], axis=-1)
        h = merged_input @ t["merge.w"].T
    flat = h.reshape(x.shape[0], -1)
    y_hat = sigmoid(flat @ t["out_w"] + t["out_b"])
    return y_hat, BatchCache(x, e0, layer_caches, dnn_cache, merged_input, flat, y_hat, mode)


def update_running_stats(params: ModelParams, cache: BatchCache) -> None:
    if cache.dnn is None or not cache.dnn["train"]:
        return
    for i, block in enumerate(cache.dnn["blocks"]):
        rm, rv = params.buffers[f"dnn.{i}.running_mean"], params.buffers[f"dnn.{i}.running_var"]
        rm *= BN_MOMENTUM
        rm += (1.0 - BN_MOMENTUM) * block["bn"]["mean"]
        rv *= BN_MOMENTUM
        rv += (1.0 - BN_MOMENTUM) * block["bn"]["var"]


def bce(y_hat, y) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"predictions {y_hat.shape} and labels {y.shape} differ in length")
    p = np.clip(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def l2_penalty(params: ModelParams) -> float:
    return float(sum(np.sum(a * a) for name, a in params.tensors.items() if is_weight(name)))


def loss(y_hat, y, params: Optional[ModelParams] = None, l2_weight: float = 0.0) -> float:
    """Mean binary cross-entropy plus ``l2_weight`` times the squared weight norm."""
    value = bce(y_hat, y)
    if l2_weight and params is not None:
        value += l2_weight * l2_penalty(params)
    return value


def backward(cache: BatchCache, y, params: ModelParams, config: ModelConfig) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`loss` (with ``config.l2_weight``) for every tensor."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != cache.y_hat.shape:
        raise ShapeError(f"labels {y.shape} do not match cached batch {cache.y_hat.shape}")
    t = params.tensors
    n = y.shape[0]
    y_hat = cache.y_hat
    unclamped = (y_hat > PROB_CLAMP) & (y_hat < 1.0 - PROB_CLAMP)
    d_logit = (y_hat - y) / n * unclamped
    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = cache.flat.T @ d_logit
    grads["out_b"] = np.asarray(d_logit.sum())
    dh = (d_logit[:, None] * t["out_w"]).reshape(n, config.num_fields, config.width)
    de0 = np.zeros_like(cache.e0)
    if config.use_dnn:
        grads["merge.w"] = dh.reshape(-1, config.width).T @ cache.merged_input.reshape(-1, 2 * config.width)
        d_cat = dh @ t["merge.w"]
        dh, d_tilde = d_cat[..., :config.width], d_cat[..., config.width:]
        de0 += dnn_branch_backward(d_tilde, cache.dnn, params, config, grads).reshape(de0.shape)
    for l in reversed(range(config.num_layers)):
        dh, lg = layer_backward(cache.layers[l], dh)
        grads[f"layers.{l}.w_r"] = lg.w_r
        for h, hg in enumerate(lg.heads):
            for w in ("w_q", "w_k", "w_q_prime", "w_v"):
                grads[f"layers.{l}.heads.{h}.{w}"] = getattr(hg, w)
    de0 += dh
    d_emb = np.zeros_like(t["embedding"])
    np.add.at(d_emb, cache.x, de0)
    grads["embedding"] = d_emb
    if config.l2_weight:
        for name in grads:
            if is_weight(name):
                grads[name] = grads[name] + 2.0 * config.l2_weight * t[name]
    return {name: grads[name] for name in t}


def predict(x, params: ModelParams, config: ModelConfig, chunk: int = 4096) -> np.ndarray:
    """Eval-mode scores in fixed-size chunks (same chunking everywhere keeps results bit-identical)."""
    x = as_index_array(x)
    return np.concatenate([forward(x[i:i + chunk], params, config, "eval")[0]
                           for i in range(0, len(x), chunk)])


def _tensor_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def save_checkpoint(path, params: ModelParams, config: ModelConfig, run_config: Optional[dict] = None,
                    vocab: Optional[list] = None) -> None:
    run = dict(run_config or {})
    run["model"] = config.to_dict()
    doc = {
        "format_version": FORMAT_VERSION,
        "config": run,
        "tensors": {k: _tensor_json(v) for k, v in {**params.tensors, **params.buffers}.items()},
    }
    if vocab is not None:
        doc["vocab"] = vocab
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Return ``(run_config, ModelConfig, ModelParams, vocab_or_None)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    try:
        config = ModelConfig.from_dict(doc["config"]["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing model config ({exc})") from None
    except ConfigError as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from None
    expected = {**param_shapes(config), **buffer_shapes(config)}
    stored = doc.get("tensors", {})
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: tensors inconsistent with config (missing {missing}, unexpected {extra})")
    arrays = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape or len(entry["data"]) != math.prod(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {entry['shape']}, config implies {list(shape)}")
        arrays[name] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    buf_names = set(buffer_shapes(config))
    params = ModelParams({k: v for k, v in arrays.items() if k not in buf_names},
                         {k: v for k, v in arrays.items() if k in buf_names})
    return doc["config"], config, params, doc.get("vocab")
