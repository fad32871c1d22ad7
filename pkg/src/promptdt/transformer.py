"""GPT-style causal transformer over already-embedded token sequences.

The stack is embedding-agnostic: callers hand in [T, d_model] (or batched
[B, T, d_model]) vectors plus integer position indices, and get hidden states
of the same shape back. Blocks are pre-norm (LN -> attention -> residual ->
LN -> FFN -> residual). Low-rank adapters, when supplied, are applied to the
attention projections only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, SequenceLengthError
from .ntio import load_tensors, save_tensors


@dataclass
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 1
    d_model: int = 128
    d_ff: int = 0  # 0 means 4 * d_model
    max_seq_len: int = 128
    dropout: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "dropout": self.dropout,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)


def _expected_shapes(cfg: TransformerConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple] = {"pos_emb": (cfg.max_seq_len, d), "final_ln.g": (d,), "final_ln.b": (d,)}
    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.w2"] = (f, d)
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.g"] = (d,)
            shapes[f"{p}.{ln}.b"] = (d,)
    return shapes


@dataclass
class TransformerWeights:
    config: TransformerConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def set_trainable(self, trainable: bool, names: Optional[set[str]] = None):
        for k, t in self.tensors.items():
            if names is None or k in names:
                t.requires_grad = trainable


def init_random(config: TransformerConfig, seed: int, dtype=np.float32) -> TransformerWeights:
    """Normal(0, 0.02) projections, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _expected_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True)
    return TransformerWeights(config, tensors)


def save_weights(weights: TransformerWeights, path):
    save_tensors(path, weights.arrays())


def load_weights(path, config: TransformerConfig, requires_grad: bool = False) -> TransformerWeights:
    arrays = load_tensors(path)
    expected = _expected_shapes(config)
    tensors = {}
    for name, shape in expected.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing tensor {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        tensors[name] = Tensor(arr, requires_grad=requires_grad)
    extra = set(arrays) - set(expected)
    if extra:
        raise FormatError(f"{path}: unexpected tensors {sorted(extra)}")
    return TransformerWeights(config, tensors)


def _proj(x: Tensor, w: Tensor, adapters, name: str) -> Tensor:
    if adapters and name in adapters:
        from .lora import lora_forward

        return lora_forward(x, w, adapters[name])
    return ad.matmul(x, w)


def causal_attention(
    x: Tensor,
    weights: TransformerWeights,
    layer: int,
    adapters=None,
    key_keep: Optional[np.ndarray] = None,
    attn_dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Masked multi-head self-attention for one layer (no residual, no LN).

    x: [..., T, d_model]. Position t's output depends only on positions <= t;
    key_keep, when given, additionally removes padded keys.
    """
    cfg = weights.config
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.data.shape)
    b, t, d = x.data.shape
    if t > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    h = cfg.n_heads
    hd = d // h
    p = f"layer.{layer}.attn"
    q = _proj(x, weights[f"{p}.wq"], adapters, f"{p}.wq")
    k = _proj(x, weights[f"{p}.wk"], adapters, f"{p}.wk")
    v = _proj(x, weights[f"{p}.wv"], adapters, f"{p}.wv")

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, h, hd)), (0, 2, 1, 3))  # [b,h,t,hd]

    q, k, v = heads(q), heads(k), heads(v)
    scores = ad.smul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    keep = np.tril(np.ones((t, t), dtype=bool))[None, None]
    if key_keep is not None:
        keep = keep & key_keep.astype(bool)[:, None, None, :]
    probs = ad.masked_softmax(scores, keep, axis=-1)
    if attn_dropout > 0.0 and rng is not None:
        probs = ad.dropout(probs, attn_dropout, rng)
    out = ad.matmul(probs, v)  # [b,h,t,hd]
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = _proj(out, weights[f"{p}.wo"], adapters, f"{p}.wo")
    if squeeze:
        out = ad.reshape(out, (t, d))
    return out


def forward(
    embedded: Tensor,
    weights: TransformerWeights,
    positions: Optional[np.ndarray] = None,
    adapters=None,
    key_keep: Optional[np.ndarray] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    add_pos: bool = True,
) -> Tensor:
    """Run the block stack over embedded tokens.

    positions index the learned positional table; by raw sequence order when
    omitted, or by caller-supplied per-token indices (the trajectory
    convention uses timestep-within-episode).
    """
    cfg = weights.config
    squeeze = embedded.data.ndim == 2
    if squeeze:
        embedded = ad.reshape(embedded, (1,) + embedded.data.shape)
        if positions is not None and positions.ndim == 1:
            positions = positions[None]
        if key_keep is not None and key_keep.ndim == 1:
            key_keep = key_keep[None]
    b, t, d = embedded.data.shape
    if t > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    x = embedded
    if add_pos:
        if positions is None:
            positions = np.broadcast_to(np.arange(t), (b, t))
        if positions.max(initial=0) >= cfg.max_seq_len:
            raise SequenceLengthError("position index beyond positional table")
        x = ad.add(x, ad.embedding(weights["pos_emb"], positions))
    drop = cfg.dropout if train else 0.0
    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        a_in = ad.layer_norm(x, weights[f"{p}.ln1.g"], weights[f"{p}.ln1.b"])
        a = causal_attention(a_in, weights, i, adapters=adapters, key_keep=key_keep)
        if drop > 0.0:
            a = ad.dropout(a, drop, rng)
        x = ad.add(x, a)
        f_in = ad.layer_norm(x, weights[f"{p}.ln2.g"], weights[f"{p}.ln2.b"])
        hmid = ad.matmul(f_in, weights[f"{p}.ffn.w1"])
        hmid = ad.relu(hmid) if cfg.activation == "relu" else ad.gelu(hmid)
        fo = ad.matmul(hmid, weights[f"{p}.ffn.w2"])
        if drop > 0.0:
            fo = ad.dropout(fo, drop, rng)
        x = ad.add(x, fo)
    if cfg.n_layers > 0:
        x = ad.layer_norm(x, weights["final_ln.g"], weights["final_ln.b"])
    if squeeze:
        x = ad.reshape(x, (t, d))
    return x
