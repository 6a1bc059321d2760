"""T5 1.1-style encoder-decoder and its 1decT5 / EncT5 derivatives.

Canonical parameter names (surgery and the checkpoint format rely on them)::

    shared/embedding                     [vocab, d_model]
    encoder/relative_bias                [rel_buckets, num_heads]   (if >= 1 layer)
    encoder/layer_XX/self_attn/{q,k,v}   [d_model, num_heads*d_kv]
    encoder/layer_XX/self_attn/o         [num_heads*d_kv, d_model]
    encoder/layer_XX/self_attn_norm      [d_model]
    encoder/layer_XX/ffn/{wi_0,wi_1}     [d_model, d_ff]
    encoder/layer_XX/ffn/wo              [d_ff, d_model]
    encoder/layer_XX/ffn_norm            [d_model]
    encoder/final_norm                   [d_model]
    decoder/relative_bias, decoder/layer_XX/{self_attn,cross_attn,ffn}/*,
    decoder/layer_XX/{self_attn_norm,cross_attn_norm,ffn_norm},
    decoder/final_norm, decoder/logits   [d_model, vocab]
    head/bos_embedding                   [d_model]
    head/cross_attn/*, head/{cross_attn_norm,ffn_norm,final_norm}, head/ffn/*
    head/projection_kernel               [d_model, n+1]  (2 for regression)
    head/projection_bias                 [n+1]

``XX`` is the zero-padded layer index. The EncT5 head holds no self-attention
and there is no vocabulary projection in the EncT5 store.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .packing import PackedBatch, cross_attention_mask, self_attention_mask
from .tensor import Rng, Tensor

VARIANTS = ("t5", "1dect5", "enct5")
TASK_KINDS = ("classification", "regression")
COUNT_GROUPS = ("embedding", "encoder", "decoder", "head", "output_projection")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_ff: int = 128
    num_heads: int = 4
    d_kv: int = 16
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    vocab_size: int = 512
    rel_buckets: int = 32
    rel_max_distance: int = 128
    norm_eps: float = 1e-6
    variant: str = "t5"
    num_classes: int = 2
    task_kind: str = "classification"
    max_segments: int = 64

    def __post_init__(self) -> None:
        for name in ("d_model", "d_ff", "num_heads", "d_kv", "vocab_size", "rel_buckets",
                     "rel_max_distance", "max_segments"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("num_encoder_layers", "num_decoder_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.rel_buckets % 2:
            raise ConfigError("rel_buckets must be even")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")

    @property
    def inner_dim(self) -> int:
        return self.num_heads * self.d_kv

    @property
    def decoder_depth(self) -> int:
        if self.variant == "enct5":
            return 0
        if self.variant == "1dect5":
            return min(1, self.num_decoder_layers)
        return self.num_decoder_layers

    @property
    def head_width(self) -> int:
        return 2 if self.task_kind == "regression" else self.num_classes + 1

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ParameterStore(dict):
    """Mapping from canonical name to :class:`Tensor`, kept in lexicographic order."""

    def __init__(self, items=None) -> None:
        super().__init__(sorted(dict(items or {}).items()))

    def __setitem__(self, key: str, value: Tensor) -> None:
        if key in self or not self or key > next(reversed(self)):
            super().__setitem__(key, value)
            return
        merged = sorted([*self.items(), (key, value)])
        self.clear()
        for k, v in merged:
            super().__setitem__(k, v)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: T.parameter(v.data.copy(), name=k) for k, v in self.items()})

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(int(t.data.size) for t in self.values())


# -- canonical layout ----------------------------------------------------------

def _attn_shapes(prefix: str, c: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}/q": (c.d_model, c.inner_dim),
        f"{prefix}/k": (c.d_model, c.inner_dim),
        f"{prefix}/v": (c.d_model, c.inner_dim),
        f"{prefix}/o": (c.inner_dim, c.d_model),
    }


def _ffn_shapes(prefix: str, c: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}/wi_0": (c.d_model, c.d_ff),
        f"{prefix}/wi_1": (c.d_model, c.d_ff),
        f"{prefix}/wo": (c.d_ff, c.d_model),
    }


def layer_prefix(stack: str, i: int) -> str:
    return f"{stack}/layer_{i:02d}"


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name of ``config``'s variant with its shape."""
    c = config
    d = c.d_model
    shapes: dict[str, tuple[int, ...]] = {"shared/embedding": (c.vocab_size, d)}
    if c.num_encoder_layers:
        shapes["encoder/relative_bias"] = (c.rel_buckets, c.num_heads)
    for i in range(c.num_encoder_layers):
        p = layer_prefix("encoder", i)
        shapes.update(_attn_shapes(f"{p}/self_attn", c))
        shapes[f"{p}/self_attn_norm"] = (d,)
        shapes.update(_ffn_shapes(f"{p}/ffn", c))
        shapes[f"{p}/ffn_norm"] = (d,)
    shapes["encoder/final_norm"] = (d,)
    if c.variant == "enct5":
        shapes["head/bos_embedding"] = (d,)
        shapes.update(_attn_shapes("head/cross_attn", c))
        shapes["head/cross_attn_norm"] = (d,)
        shapes.update(_ffn_shapes("head/ffn", c))
        shapes["head/ffn_norm"] = (d,)
        shapes["head/final_norm"] = (d,)
        shapes["head/projection_kernel"] = (d, c.head_width)
        shapes["head/projection_bias"] = (c.head_width,)
    else:
        if c.decoder_depth:
            shapes["decoder/relative_bias"] = (c.rel_buckets, c.num_heads)
        for i in range(c.decoder_depth):
            p = layer_prefix("decoder", i)
            shapes.update(_attn_shapes(f"{p}/self_attn", c))
            shapes[f"{p}/self_attn_norm"] = (d,)
            shapes.update(_attn_shapes(f"{p}/cross_attn", c))
            shapes[f"{p}/cross_attn_norm"] = (d,)
            shapes.update(_ffn_shapes(f"{p}/ffn", c))
            shapes[f"{p}/ffn_norm"] = (d,)
        shapes["decoder/final_norm"] = (d,)
        shapes["decoder/logits"] = (d, c.vocab_size)
    return dict(sorted(shapes.items()))


def init_std(name: str, config: ModelConfig) -> float:
    """Initialisation scale per parameter (0 means constant init)."""
    c = config
    leaf = name.rsplit("/", 1)[-1]
    if name.endswith("_norm"):
        return 0.0
    if name == "shared/embedding":
        return 1.0
    if leaf == "relative_bias":
        return c.d_model ** -0.5
    if leaf == "q":
        return (c.d_model * c.d_kv) ** -0.5
    if leaf in ("k", "v", "wi_0", "wi_1", "logits", "bos_embedding", "projection_kernel"):
        return c.d_model ** -0.5
    if leaf == "o":
        return c.inner_dim ** -0.5
    if leaf == "wo":
        return c.d_ff ** -0.5
    if leaf == "projection_bias":
        return 0.0
    raise KeyError(name)


def init_parameter(name: str, shape: tuple[int, ...], config: ModelConfig, seed: int, dtype=None) -> Tensor:
    """Draw one parameter from a stream derived only from ``(seed, name)``."""
    dtype = dtype or T.get_default_dtype()
    if name.endswith("_norm"):
        data = np.ones(shape, dtype=dtype)
    elif name.endswith("projection_bias"):
        data = np.zeros(shape, dtype=dtype)
    else:
        data = Rng.for_name(seed, name).normal(0.0, init_std(name, config), shape).astype(dtype)
    return T.parameter(data, name=name)


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> ParameterStore:
    return ParameterStore({n: init_parameter(n, s, config, seed, dtype) for n, s in parameter_shapes(config).items()})


def count_parameters(config: ModelConfig) -> tuple[int, dict[str, int]]:
    """Exact element count by enumerating the canonical store layout."""
    groups = dict.fromkeys(COUNT_GROUPS, 0)
    for name, shape in parameter_shapes(config).items():
        groups[_group_of(name)] += math.prod(shape)
    return sum(groups.values()), groups


def _group_of(name: str) -> str:
    if name == "shared/embedding":
        return "embedding"
    if name == "decoder/logits":
        return "output_projection"
    return name.split("/", 1)[0]


def closed_form_counts(config: ModelConfig) -> dict[str, int]:
    """The same breakdown as :func:`count_parameters`, from per-block formulas."""
    c = config
    d, V, h = c.d_model, c.vocab_size, c.num_heads
    attn = 4 * d * c.inner_dim
    ffn = 3 * d * c.d_ff
    table = c.rel_buckets * h
    enc = c.num_encoder_layers * (attn + ffn + 2 * d) + (table if c.num_encoder_layers else 0) + d
    out = dict.fromkeys(COUNT_GROUPS, 0)
    out["embedding"] = V * d
    out["encoder"] = enc
    if c.variant == "enct5":
        k = c.head_width
        pooling_layer = attn + ffn + 3 * d
        out["head"] = pooling_layer + d + d * k + k
    else:
        L = c.decoder_depth
        out["decoder"] = L * (2 * attn + ffn + 3 * d) + (table if L else 0) + d
        out["output_projection"] = d * V
    return out


# -- relative position buckets -------------------------------------------------

def relative_position_bucket(relative_position, bidirectional: bool = True, num_buckets: int = 32,
                             max_distance: int = 128):
    """Map ``memory_pos - query_pos`` to a bucket; exact near zero, log-spaced beyond.

    Works on ints and on integer arrays.
    """
    rp = np.asarray(relative_position, dtype=np.int64)
    if bidirectional:
        b = num_buckets // 2
        offset = np.where(rp > 0, b, 0)
        m = np.abs(rp)
    else:
        b = num_buckets
        offset = np.zeros_like(rp)
        m = -np.minimum(rp, 0)
    exact = b // 2
    safe = np.maximum(m, 1).astype(np.float64)
    large = exact + np.floor(np.log(safe / exact) / math.log(max_distance / exact) * (b - exact)).astype(np.int64)
    large = np.minimum(large, b - 1)
    out = offset + np.where(m < exact, m, large)
    return int(out) if out.ndim == 0 else out


def position_bias(table: Tensor, query_pos: np.ndarray, key_pos: np.ndarray, bidirectional: bool,
                  config: ModelConfig) -> Tensor:
    """[B, H, Lq, Lk] bias from within-segment positions."""
    rel = key_pos[:, None, :] - query_pos[:, :, None]
    buckets = relative_position_bucket(rel, bidirectional, config.rel_buckets, config.rel_max_distance)
    return T.gather_rows(table, buckets).transpose(0, 3, 1, 2)


# -- blocks --------------------------------------------------------------------

def attention(x_q: Tensor, x_kv: Tensor, params, prefix: str, mask: np.ndarray, config: ModelConfig,
              bias: Tensor | None = None, trace: list | None = None) -> Tensor:
    B, Lq, _ = x_q.shape
    Lk = x_kv.shape[1]
    H, dk = config.num_heads, config.d_kv
    q = (x_q @ params[f"{prefix}/q"]).reshape(B, Lq, H, dk).transpose(0, 2, 1, 3)
    k = (x_kv @ params[f"{prefix}/k"]).reshape(B, Lk, H, dk).transpose(0, 2, 3, 1)
    v = (x_kv @ params[f"{prefix}/v"]).reshape(B, Lk, H, dk).transpose(0, 2, 1, 3)
    # no 1/sqrt(d_kv) scaling: T5 folds it into the q initialisation
    scores = q @ k
    if bias is not None:
        scores = scores + bias
    probs = T.softmax_lastdim(scores, mask[:, None, :, :])
    if trace is not None:
        trace.append((prefix, probs.data))
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, Lq, H * dk)
    return out @ params[f"{prefix}/o"]


def feed_forward(x: Tensor, params, prefix: str) -> Tensor:
    gate = T.gelu(x @ params[f"{prefix}/wi_0"])
    return (gate * (x @ params[f"{prefix}/wi_1"])) @ params[f"{prefix}/wo"]


def encoder_forward(config: ModelConfig, params, batch: PackedBatch, trace: list | None = None) -> Tensor:
    """Encoder stack over a (possibly packed) batch; returns [B, L, d_model]."""
    ids = np.asarray(batch.token_ids)
    x = T.gather_rows(params["shared/embedding"], ids)
    eps = config.norm_eps
    if config.num_encoder_layers:
        dtype = x.dtype
        mask = self_attention_mask(batch.segment_ids, dtype=dtype)
        bias = position_bias(params["encoder/relative_bias"], batch.positions, batch.positions, True, config)
    for i in range(config.num_encoder_layers):
        p = layer_prefix("encoder", i)
        h = T.rms_norm(x, params[f"{p}/self_attn_norm"], eps)
        x = x + attention(h, h, params, f"{p}/self_attn", mask, config, bias, trace)
        h = T.rms_norm(x, params[f"{p}/ffn_norm"], eps)
        x = x + feed_forward(h, params, f"{p}/ffn")
    return T.rms_norm(x, params["encoder/final_norm"], eps)


def decoder_forward(config: ModelConfig, params, encoder_out: Tensor, batch: PackedBatch,
                    trace: list | None = None) -> Tensor:
    """Teacher-forced decoder; returns vocabulary logits [B, T, vocab]."""
    if config.variant == "enct5":
        raise ConfigError("EncT5 has no decoder")
    if batch.decoder_input_ids is None:
        raise ValueError("batch has no decoder inputs")
    if encoder_out.shape[0] != batch.decoder_input_ids.shape[0]:
        raise ValueError("encoder output and decoder batch sizes differ")
    eps = config.norm_eps
    x = T.gather_rows(params["shared/embedding"], batch.decoder_input_ids)
    dtype = x.dtype
    self_mask = self_attention_mask(batch.decoder_segment_ids, causal=True, dtype=dtype)
    cross_mask = cross_attention_mask(batch.decoder_segment_ids, batch.segment_ids, dtype=dtype)
    if config.decoder_depth:
        bias = position_bias(params["decoder/relative_bias"], batch.decoder_positions,
                             batch.decoder_positions, False, config)
    for i in range(config.decoder_depth):
        p = layer_prefix("decoder", i)
        h = T.rms_norm(x, params[f"{p}/self_attn_norm"], eps)
        x = x + attention(h, h, params, f"{p}/self_attn", self_mask, config, bias, trace)
        h = T.rms_norm(x, params[f"{p}/cross_attn_norm"], eps)
        x = x + attention(h, encoder_out, params, f"{p}/cross_attn", cross_mask, config, None, trace)
        h = T.rms_norm(x, params[f"{p}/ffn_norm"], eps)
        x = x + feed_forward(h, params, f"{p}/ffn")
    x = T.rms_norm(x, params["decoder/final_norm"], eps)
    return x @ params["decoder/logits"]


def slot_segments(segment_ids: np.ndarray, num_slots: int | None = None) -> np.ndarray:
    """[B, S] query segment ids: slot s serves segment s+1 when that segment exists."""
    counts = np.asarray(segment_ids).max(axis=1)
    S = int(counts.max()) if num_slots is None else num_slots
    S = max(S, 1)
    if counts.max() > S:
        raise ValueError(f"{int(counts.max())} packed examples exceed {S} query slots")
    ids = np.arange(1, S + 1)[None, :]
    return np.where(ids <= counts[:, None], ids, 0)


def enct5_forward(config: ModelConfig, params, encoder_out: Tensor, segment_ids: np.ndarray,
                  num_slots: int | None = None, trace: list | None = None) -> Tensor:
    """Pool each packed example with one BOS query and project to [B, S, n+1]."""
    if config.variant != "enct5":
        raise ConfigError("enct5_forward needs an enct5 config")
    q_seg = slot_segments(segment_ids, num_slots)
    B, S = q_seg.shape
    if S > config.max_segments:
        raise ValueError(f"{S} segments exceed configured max_segments={config.max_segments}")
    d, eps = config.d_model, config.norm_eps
    bos = params["head/bos_embedding"]
    query = T.broadcast_to(bos.reshape(1, 1, d), (B, S, d))
    mask = cross_attention_mask(q_seg, segment_ids, dtype=encoder_out.dtype)
    h = T.rms_norm(query, params["head/cross_attn_norm"], eps)
    x = query + attention(h, encoder_out, params, "head/cross_attn", mask, config, None, trace)
    h = T.rms_norm(x, params["head/ffn_norm"], eps)
    x = x + feed_forward(h, params, "head/ffn")
    x = T.rms_norm(x, params["head/final_norm"], eps)
    return x @ params["head/projection_kernel"] + params["head/projection_bias"]


def forward(config: ModelConfig, params, batch: PackedBatch, trace: list | None = None) -> Tensor:
    """Variant dispatch: vocabulary logits for T5/1decT5, slot logits for EncT5."""
    enc = encoder_forward(config, params, batch, trace)
    if config.variant == "enct5":
        return enct5_forward(config, params, enc, batch.segment_ids, batch.num_slots or None, trace)
    return decoder_forward(config, params, enc, batch, trace)


def predict_class(logits_row) -> int:
    """Class in 1..n from one row of head logits; the padding slot 0 is ignored."""
    row = np.asarray(logits_row)
    return 1 + int(np.argmax(row[1:]))
