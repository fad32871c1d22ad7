"""Character-level causal language-model pretraining.

Produces "language-initialized" transformer body weights at desk scale by
next-character prediction on a small bundled corpus. The character embedding
table and output projection exist only during pretraining and are discarded
when the body is exported; the downstream model replaces them with its own
per-modality linear layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NonFiniteLossError
from .optim import AdamW

MAX_VOCAB = 256


def bundled_corpus_path() -> Path:
    return Path(resources.files("promptdt").joinpath("corpus/corpus.txt"))


@dataclass
class CharCorpus:
    vocab: list[str]
    ids: np.ndarray  # int64 token ids
    split: int  # train ids are [:split], validation ids are [split:]

    @classmethod
    def from_text(cls, text: str, val_fraction: float = 0.1) -> "CharCorpus":
        vocab = sorted(set(text))
        if len(vocab) > MAX_VOCAB:
            raise ConfigError(f"corpus vocabulary {len(vocab)} exceeds {MAX_VOCAB} characters")
        lut = {c: i for i, c in enumerate(vocab)}
        ids = np.fromiter((lut[c] for c in text), dtype=np.int64, count=len(text))
        split = int(len(ids) * (1.0 - val_fraction))
        return cls(vocab=vocab, ids=ids, split=split)

    @classmethod
    def from_file(cls, path, val_fraction: float = 0.1) -> "CharCorpus":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), val_fraction)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


@dataclass
class PretrainResult:
    weights: tf.TransformerWeights  # the exported body (LM head discarded)
    char_embed: Tensor  # [V, d]
    out_proj: Tensor  # [d, V]
    corpus: CharCorpus
    history: list[tuple[int, float]] = field(default_factory=list)  # (step, val loss)

    @property
    def initial_val_loss(self) -> float:
        return self.history[0][1]

    @property
    def final_val_loss(self) -> float:
        return self.history[-1][1]


def _lm_loss(ids_x, ids_y, weights, char_embed, out_proj, train, rng):
    emb = ad.embedding(char_embed, ids_x)  # [B, L, d]
    hidden = tf.forward(emb, weights, train=train, rng=rng)
    b, l, d = hidden.data.shape
    logits = ad.matmul(ad.reshape(hidden, (b * l, d)), out_proj)
    return ad.cross_entropy(logits, ids_y.reshape(-1))


def _sample_window(ids: np.ndarray, lo: int, hi: int, batch: int, seq_len: int, rng):
    starts = rng.integers(lo, hi - seq_len - 1, size=batch)
    x = np.stack([ids[s : s + seq_len] for s in starts])
    y = np.stack([ids[s + 1 : s + seq_len + 1] for s in starts])
    return x, y


def validation_loss(weights, char_embed, out_proj, corpus: CharCorpus, seq_len: int = 64, max_windows: int = 32) -> float:
    """Mean next-token NLL over evenly spaced validation windows."""
    val = corpus.ids[corpus.split :]
    if len(val) < seq_len + 1:
        raise ContractError("validation split shorter than one window")
    n = min(max_windows, (len(val) - 1) // seq_len)
    losses = []
    with ad.no_grad():
        for i in range(n):
            s = i * seq_len
            x = val[s : s + seq_len][None]
            y = val[s + 1 : s + seq_len + 1][None]
            loss = _lm_loss(x, y, weights, char_embed, out_proj, False, None)
            losses.append(loss.item())
    return float(np.mean(losses))


def lm_pretrain(
    config: tf.TransformerConfig,
    corpus: CharCorpus,
    steps: int,
    seed: int,
    batch_size: int = 16,
    seq_len: int = 64,
    lr: float = 1e-3,
    eval_every: int = 250,
    log=None,
) -> PretrainResult:
    """Minimize mean next-character NLL; returns the trained body weights."""
    if len(corpus.ids) < config.max_seq_len + 1:
        raise ContractError("corpus shorter than max_seq_len + 1")
    if seq_len > config.max_seq_len:
        raise ConfigError(f"seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")
    rng = np.random.default_rng(seed)
    weights = tf.init_random(config, seed)
    v, d = corpus.vocab_size, config.d_model
    char_embed = Tensor(rng.normal(0.0, 0.02, size=(v, d)).astype(np.float32), requires_grad=True)
    out_proj = Tensor(rng.normal(0.0, 0.02, size=(d, v)).astype(np.float32), requires_grad=True)
    params = dict(weights.tensors)
    params["char_embed"] = char_embed
    params["out_proj"] = out_proj
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    result = PretrainResult(weights=weights, char_embed=char_embed, out_proj=out_proj, corpus=corpus)
    result.history.append((0, validation_loss(weights, char_embed, out_proj, corpus, seq_len)))
    for step in range(1, steps + 1):
        x, y = _sample_window(corpus.ids, 0, corpus.split, batch_size, seq_len, rng)
        loss = _lm_loss(x, y, weights, char_embed, out_proj, True, rng)
        if not np.isfinite(loss.data):
            raise NonFiniteLossError(f"pretraining loss diverged at step {step}")
        opt.zero_grad()
        ad.backward(loss, leaves=params.values())
        opt.step()
        if step % eval_every == 0 or step == steps:
            vl = validation_loss(weights, char_embed, out_proj, corpus, seq_len)
            result.history.append((step, vl))
            if log:
                log(step, float(loss.data), vl)
    return result


def perplexity(result: PretrainResult, ids: np.ndarray, seq_len: int = 64) -> float:
    """exp(mean next-token NLL) of the model over a token-id slice."""
    ids = np.asarray(ids)
    if len(ids) < 2:
        raise ContractError("perplexity needs at least two tokens")
    losses = []
    weights = []
    with ad.no_grad():
        for s in range(0, len(ids) - 1, seq_len):
            x = ids[s : s + seq_len][None]
            y = ids[s + 1 : s + seq_len + 1][None]
            if y.shape[1] < x.shape[1]:
                x = x[:, : y.shape[1]]
            if x.shape[1] == 0:
                break
            loss = _lm_loss(x, y, result.weights, result.char_embed, result.out_proj, False, None)
            losses.append(loss.item())
            weights.append(x.shape[1])
    return float(np.exp(np.average(losses, weights=weights)))
