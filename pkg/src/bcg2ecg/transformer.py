"""Encoder-only transformer mapping a BCG window to a predicted ECG window.

Each input sample is projected to ``d_model`` features, sinusoidal position
codes are added, the sequence runs through ``n_layers`` post-norm encoder
layers (full bidirectional multi-head attention, ReLU feed-forward, no
dropout), and every position is projected back to one output sample.

Everything is plain numpy so that the backward pass in
:mod:`bcg2ecg.training` can be written against the cached activations.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from ._atomic import atomic_write

LN_EPS = 1e-5
PE_BASE = 10000.0

CHECKPOINT_MAGIC = b"BETF"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sH6I")


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared inside the forward pass."""

    def __init__(self, layer: int, where: str = "output"):
        super().__init__(f"non-finite values in encoder layer {layer} {where}")
        self.layer = layer


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 500
    d_model: int = 512
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 2048
    positional_encoding: bool = True

    def __post_init__(self):
        for name in ("seq_len", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.positional_encoding and self.d_model % 2:
            raise ValueError("sinusoidal positional encoding needs an even d_model")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor, in checkpoint order."""
    d, h, dk, f = config.d_model, config.n_heads, config.d_k, config.d_ff
    shapes = {"input_proj.weight": (1, d), "input_proj.bias": (d,)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.w_q": (h, d, dk),
            p + "attn.w_k": (h, d, dk),
            p + "attn.w_v": (h, d, dk),
            p + "attn.w_o": (d, d),
            p + "ffn.w1": (d, f),
            p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d),
            p + "ffn.b2": (d,),
            p + "norm1.gain": (d,),
            p + "norm1.bias": (d,),
            p + "norm2.gain": (d,),
            p + "norm2.bias": (d,),
        })
    shapes["output_proj.weight"] = (d, 1)
    shapes["output_proj.bias"] = (1,)
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name.endswith(("w_q", "w_k", "w_v")):
        h, d, dk = shape
        return d, h * dk  # per-head stacks act as one [d, h*dk] projection
    return shape[0], shape[1]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.tensors) != list(shapes):
            missing = set(shapes) ^ set(self.tensors)
            if missing:
                raise ValueError(f"parameter names do not match config: {sorted(missing)[:4]}")
            self.tensors = {k: self.tensors[k] for k in shapes}
        for k, shape in shapes.items():
            if self.tensors[k].shape != shape:
                raise ValueError(f"{k}: shape {self.tensors[k].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return self.tensors["input_proj.weight"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def layer(self, i: int) -> dict[str, np.ndarray]:
        p = f"layers.{i}."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


QK_INITS = ("glorot", "aligned")


def init_params(
    config: ModelConfig, seed: int = 0, dtype=np.float64, qk_init: str = "glorot", qk_scale: float = 0.3
) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    With ``qk_init="aligned"`` each head's query and key projections start as the
    same scaled slice of the identity (head h reads features h*d_k..(h+1)*d_k-1),
    so initial scores are ``qk_scale * sum cos(w (i - j))`` over that head's
    positional frequencies: a broad window centred on each position. Random
    query/key weights instead give near-uniform attention over all 500
    positions, from which fixed-lag attention is not found in practice.
    """
    if qk_init not in QK_INITS:
        raise ValueError(f"qk_init must be one of {QK_INITS}, got {qk_init!r}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            t = np.ones(shape)
        elif name.endswith("bias") or name.split(".")[-1].startswith("b"):
            t = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t = rng.uniform(-bound, bound, size=shape)
        if qk_init == "aligned" and name.endswith(("attn.w_q", "attn.w_k")):
            h, d, dk = shape
            a = np.sqrt(qk_scale * np.sqrt(dk))
            t = a * np.eye(d).reshape(d, h, dk).transpose(1, 0, 2)
        tensors[name] = t.astype(dtype)
    return ModelParams(config, tensors)


@lru_cache(maxsize=16)
def _pe(seq_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / PE_BASE ** (two_i / d_model)
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even feature indices, cos on odd ones."""
    if seq_len < 1 or d_model < 1:
        raise ValueError("dimensions must be >= 1")
    if d_model % 2:
        raise ValueError("d_model must be even")
    return _pe(seq_len, d_model).copy()


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, d_k: Optional[int] = None,
              return_probs: bool = False):
    """Unmasked scaled dot-product attention over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"shape mismatch: Q{q.shape} K{k.shape} V{v.shape}")
    d_k = q.shape[-1] if d_k is None else d_k
    if d_k <= 0:
        raise ValueError("d_k must be positive")
    scores = q @ np.swapaxes(k, -1, -2)
    scores *= 1.0 / np.sqrt(d_k)
    p = softmax(scores)
    out = p @ v
    return (out, p) if return_probs else out


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, hd = x.shape
    return x.reshape(b, s, n_heads, hd // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dk)


def stack_heads(w: np.ndarray) -> np.ndarray:
    """[h, d_model, d_k] per-head weights -> [d_model, h*d_k] column blocks."""
    h, d, dk = w.shape
    return w.transpose(1, 0, 2).reshape(d, h * dk)


def unstack_heads(w: np.ndarray, n_heads: int) -> np.ndarray:
    d, hd = w.shape
    return w.reshape(d, n_heads, hd // n_heads).transpose(1, 0, 2)


def _multi_head(x, w_q, w_k, w_v, w_o):
    h = w_q.shape[0]
    q = _split_heads(x @ stack_heads(w_q), h)
    k = _split_heads(x @ stack_heads(w_k), h)
    v = _split_heads(x @ stack_heads(w_v), h)
    heads, p = attention(q, k, v, d_k=w_q.shape[2], return_probs=True)
    concat = _merge_heads(heads)
    return concat @ w_o, {"q": q, "k": k, "v": v, "p": p, "concat": concat}


def multi_head(x: np.ndarray, layer_params: dict) -> np.ndarray:
    """Concat of per-head attention outputs projected by ``w_o``.

    `x` is [seq, d_model] or [batch, seq, d_model]; `layer_params` holds
    ``w_q``, ``w_k``, ``w_v`` ([h, d_model, d_k]) and ``w_o`` ([d_model, d_model]),
    optionally under an ``attn.`` prefix.
    """
    lp = {k.removeprefix("attn."): v for k, v in layer_params.items()}
    w_q, w_k, w_v, w_o = lp["w_q"], lp["w_k"], lp["w_v"], lp["w_o"]
    if w_q.ndim != 3 or w_q.shape != w_k.shape or w_q.shape != w_v.shape:
        raise ValueError("per-head projections must share shape [h, d_model, d_k]")
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    if xb.shape[-1] != w_q.shape[1]:
        raise ValueError(f"input width {xb.shape[-1]} does not match d_model {w_q.shape[1]}")
    out, _ = _multi_head(xb, w_q, w_k, w_v, w_o)
    return out[0] if squeeze else out


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std


@dataclass
class Activation:
    """Per-call cache of intermediates needed by the backward pass."""

    x: np.ndarray  # [B, S]
    embed: np.ndarray  # [B, S, D] after positional encoding
    layers: list[dict] = field(default_factory=list)
    final: Optional[np.ndarray] = None  # [B, S, D]
    squeeze: bool = False
    config: Optional[ModelConfig] = None

    @property
    def attention_probs(self) -> list[np.ndarray]:
        return [c["p"] for c in self.layers]


def forward(bcg: np.ndarray, params: ModelParams, config: Optional[ModelConfig] = None):
    """Predict ECG from BCG.

    `bcg` is a single window [seq_len] or a batch [B, seq_len]. Returns
    ``(pred, acts)`` where `pred` has the same shape as `bcg`.
    """
    config = params.config if config is None else config
    if config != params.config:
        raise ValueError("config does not match the parameters' config")
    dtype = params.dtype
    x = np.asarray(bcg, dtype=dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != config.seq_len:
        raise ValueError(f"expected input [..., {config.seq_len}], got {np.shape(bcg)}")

    h = x[:, :, None] * params["input_proj.weight"][0] + params["input_proj.bias"]
    if config.positional_encoding:
        h = h + _pe(config.seq_len, config.d_model).astype(dtype, copy=False)
    acts = Activation(x=x, embed=h, squeeze=squeeze, config=config)

    for i in range(config.n_layers):
        lp = params.layer(i)
        mh, cache = _multi_head(h, lp["attn.w_q"], lp["attn.w_k"], lp["attn.w_v"], lp["attn.w_o"])
        n1, xhat1, inv1 = layer_norm(h + mh, lp["norm1.gain"], lp["norm1.bias"])
        f1 = n1 @ lp["ffn.w1"] + lp["ffn.b1"]
        a = np.maximum(f1, 0)
        f2 = a @ lp["ffn.w2"] + lp["ffn.b2"]
        n2, xhat2, inv2 = layer_norm(n1 + f2, lp["norm2.gain"], lp["norm2.bias"])
        if not np.isfinite(n2).all():
            raise NonFiniteError(i)
        cache.update(u=h, n1=n1, xhat1=xhat1, inv1=inv1, f1=f1, a=a, xhat2=xhat2, inv2=inv2)
        acts.layers.append(cache)
        h = n2

    acts.final = h
    pred = h @ params["output_proj.weight"][:, 0] + params["output_proj.bias"][0]
    if not np.isfinite(pred).all():
        raise NonFiniteError(config.n_layers, "output projection")
    return (pred[0] if squeeze else pred), acts


def predict(bcg: np.ndarray, params: ModelParams, batch_size: int = 32) -> np.ndarray:
    """Batched inference without keeping activations around."""
    x = np.asarray(bcg)
    out = np.empty(x.shape, dtype=params.dtype)
    for a in range(0, x.shape[0], batch_size):
        out[a : a + batch_size], _ = forward(x[a : a + batch_size], params)
    return out


# -- checkpoints ---------------------------------------------------------------


def encode_checkpoint(params: ModelParams) -> bytes:
    c = params.config
    body = [
        _CKPT_HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
            c.seq_len, c.d_model, c.n_layers, c.n_heads, c.d_ff, int(c.positional_encoding),
        )
    ]
    for t in params.tensors.values():
        body.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_checkpoint(blob: bytes, dtype=np.float64) -> ModelParams:
    if len(blob) < _CKPT_HEADER.size + 4:
        raise CheckpointError("truncated checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC32 mismatch")
    magic, version, *dims = _CKPT_HEADER.unpack_from(body, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig(*dims[:5], positional_encoding=bool(dims[5]))
    except ValueError as exc:
        raise CheckpointError(f"invalid header config: {exc}") from exc
    shapes = param_shapes(config)
    need = sum(int(np.prod(s)) for s in shapes.values()) * 4
    if len(body) - _CKPT_HEADER.size != need:
        raise CheckpointError(
            f"payload has {len(body) - _CKPT_HEADER.size} bytes, config implies {need}"
        )
    off = _CKPT_HEADER.size
    tensors = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).astype(dtype)
        off += 4 * n
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path) -> None:
    blob = encode_checkpoint(params)
    with atomic_write(path) as fh:
        fh.write(blob)


def load_checkpoint(path, dtype=np.float64) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes(), dtype=dtype)
