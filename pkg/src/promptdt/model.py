"""The prompt decision-transformer network and its training losses.

Word-token embedding layers are replaced by per-modality linear maps: one set
for prompt tokens, a separate set for trajectory tokens. Actions are read out
at the state-token position through a tanh-squashed linear head. Prompt-token
hidden states are mean-pooled and passed through a small MLP encoder whose
output feeds the optional regularization loss (task classifier or contrastive).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import lora as lora_mod
from . import transformer as tf
from .autodiff import Tensor
from .data import InputSequence, NormStats
from .errors import ConfigError, ContractError
from .ntio import load_tensors, save_tensors

REG_MODES = ("none", "classifier", "infonce")


@dataclass
class ModelConfig:
    transformer: tf.TransformerConfig
    ds: int
    da: int
    k_star: int = 5
    context_len: int = 20
    reg_mode: str = "none"
    reg_weight: float = 0.1
    temperature: float = 1.0
    n_train_tasks: int = 0
    mlp_dim: int = 128
    classifier_layers: int = 2
    lora_rank: int = 8
    lora_alpha: float = 8.0
    prompt_position_mode: str = "restart"  # or "continue": sequence-order indices

    def __post_init__(self):
        if self.reg_mode not in REG_MODES:
            raise ConfigError(f"reg_mode must be one of {REG_MODES}, got {self.reg_mode!r}")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.transformer.max_seq_len < 3 * (self.k_star + self.context_len):
            raise ConfigError(
                f"max_seq_len {self.transformer.max_seq_len} < 3*(K*+K) = {3 * (self.k_star + self.context_len)}"
            )

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "transformer"}
        d["transformer"] = self.transformer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["transformer"] = tf.TransformerConfig.from_dict(d["transformer"])
        return cls(**d)


@dataclass
class PromptEncoding:
    z: Tensor  # [B, mlp_dim]
    logits: Optional[Tensor] = None  # [B, n_train_tasks] iff reg_mode == classifier


@dataclass
class ModelOutput:
    predicted_actions: Tensor  # [B, K, da]
    prompt_encoding: PromptEncoding


@dataclass
class Batch:
    prompt_rtg: np.ndarray  # [B, K*]
    prompt_states: np.ndarray  # [B, K*, ds]
    prompt_actions: np.ndarray  # [B, K*, da]
    prompt_timesteps: np.ndarray  # [B, K*]
    rtg: np.ndarray  # [B, K]
    states: np.ndarray  # [B, K, ds]
    actions: np.ndarray  # [B, K, da]
    timesteps: np.ndarray  # [B, K]
    pad_mask: np.ndarray  # [B, K* + K]
    task_ids: np.ndarray  # [B]


def collate(seqs: list[InputSequence]) -> Batch:
    return Batch(
        prompt_rtg=np.stack([s.prompt.rtg for s in seqs]),
        prompt_states=np.stack([s.prompt.states for s in seqs]),
        prompt_actions=np.stack([s.prompt.actions for s in seqs]),
        prompt_timesteps=np.stack([s.prompt.timesteps for s in seqs]),
        rtg=np.stack([s.rtg for s in seqs]),
        states=np.stack([s.states for s in seqs]),
        actions=np.stack([s.actions for s in seqs]),
        timesteps=np.stack([s.timesteps for s in seqs]),
        pad_mask=np.stack([s.pad_mask for s in seqs]),
        task_ids=np.array([s.task_id for s in seqs]),
    )


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Embedders, action head, prompt-encoder MLP, and optional classifier head."""
    rng = np.random.default_rng(seed)
    d = config.transformer.d_model

    def linear(n_in, n_out):
        w = Tensor(rng.normal(0.0, 0.02, size=(n_in, n_out)).astype(dtype), requires_grad=True)
        b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        return w, b

    params: dict[str, Tensor] = {}
    for group in ("prompt", "traj"):
        for mod, n_in in (("rtg", 1), ("state", config.ds), ("action", config.da)):
            w, b = linear(n_in, d)
            params[f"embed.{group}.{mod}.w"] = w
            params[f"embed.{group}.{mod}.b"] = b
    w, b = linear(d, config.da)
    params["action_head.w"] = w
    params["action_head.b"] = b
    dims = [d] + [config.mlp_dim] * config.classifier_layers
    for i in range(config.classifier_layers):
        w, b = linear(dims[i], dims[i + 1])
        params[f"phi.{i}.w"] = w
        params[f"phi.{i}.b"] = b
    if config.reg_mode == "classifier":
        if config.n_train_tasks < 2:
            raise ConfigError("classifier regularization needs n_train_tasks >= 2")
        w, b = linear(config.mlp_dim, config.n_train_tasks)
        params["cls_head.w"] = w
        params["cls_head.b"] = b
    return params


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def embed_tokens(batch: Batch, params: dict[str, Tensor], config: ModelConfig):
    """Interleave (R, s, a) embeddings: prompt tokens first, then trajectory.

    Returns (embedded [B, 3(K*+K), d], token positions [B, 3(K*+K)],
    token keep-mask [B, 3(K*+K)]). Timestep (positional) embeddings are added
    by the transformer, indexed per token by the returned positions.
    """
    b, ks = batch.prompt_rtg.shape
    k = batch.rtg.shape[1]
    d = config.transformer.d_model

    def trio(group, rtg, states, actions):
        r = _linear(Tensor(rtg[..., None]), params, f"embed.{group}.rtg")
        s = _linear(Tensor(states), params, f"embed.{group}.state")
        a = _linear(Tensor(actions), params, f"embed.{group}.action")
        n = rtg.shape[1]
        parts = [ad.reshape(t, (b, n, 1, d)) for t in (r, s, a)]
        return ad.reshape(ad.concat(parts, axis=2), (b, 3 * n, d))

    prompt_tok = trio("prompt", batch.prompt_rtg, batch.prompt_states, batch.prompt_actions)
    traj_tok = trio("traj", batch.rtg, batch.states, batch.actions)
    embedded = ad.concat([prompt_tok, traj_tok], axis=1)

    if config.prompt_position_mode == "restart":
        step_pos = np.concatenate([batch.prompt_timesteps, batch.timesteps], axis=1)
    else:  # "continue": plain sequence order across the prompt boundary
        step_pos = np.broadcast_to(np.arange(ks + k), (b, ks + k))
    tok_pos = np.repeat(step_pos, 3, axis=1)
    tok_keep = np.repeat(batch.pad_mask.astype(bool), 3, axis=1)
    return embedded, tok_pos, tok_keep


def forward(
    batch: Batch,
    weights: tf.TransformerWeights,
    params: dict[str, Tensor],
    config: ModelConfig,
    adapters: Optional[dict[str, lora_mod.LoraAdapter]] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ModelOutput:
    embedded, tok_pos, tok_keep = embed_tokens(batch, params, config)
    hidden = tf.forward(
        embedded,
        weights,
        positions=tok_pos,
        adapters=adapters,
        key_keep=tok_keep,
        train=train,
        rng=rng,
    )
    ks = batch.prompt_rtg.shape[1]
    k = batch.rtg.shape[1]
    state_idx = 3 * ks + 3 * np.arange(k) + 1  # state token is second in each step
    h_state = ad.index_select(hidden, state_idx, axis=1)  # [B, K, d]
    pred = ad.tanh(_linear(h_state, params, "action_head"))

    h_prompt = ad.index_select(hidden, np.arange(3 * ks), axis=1)
    pooled = ad.mean(h_prompt, axis=1)  # [B, d]
    z = pooled
    for i in range(config.classifier_layers):
        z = _linear(z, params, f"phi.{i}")
        if i < config.classifier_layers - 1:
            z = ad.relu(z)
    logits = None
    if config.reg_mode == "classifier":
        logits = _linear(z, params, "cls_head")
    return ModelOutput(predicted_actions=pred, prompt_encoding=PromptEncoding(z=z, logits=logits))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_pdt(predicted: Tensor, target: np.ndarray, pad_mask: np.ndarray, k_star: int) -> Tensor:
    """Mean squared action error over non-pad context steps and action dims."""
    step_mask = pad_mask[:, k_star:]  # [B, K]
    n_real = float(step_mask.sum())
    if n_real == 0:
        raise ContractError("loss over an all-padding batch")
    da = predicted.data.shape[-1]
    diff = ad.sub(predicted, Tensor(np.asarray(target, dtype=predicted.dtype)))
    sq = ad.mul(ad.square(diff), Tensor(step_mask[..., None].astype(predicted.dtype)))
    return ad.smul(ad.sum_(sq), 1.0 / (n_real * da))


def loss_classifier(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Cross entropy of task labels under softmax(logits)."""
    labels = np.atleast_1d(np.asarray(labels))
    l2d = logits if logits.data.ndim == 2 else ad.reshape(logits, (1, logits.data.shape[0]))
    n_classes = l2d.data.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"label out of range [0, {n_classes})")
    return ad.cross_entropy(l2d, labels)


def loss_infonce(z: Tensor, task_ids: np.ndarray, temperature: float = 1.0) -> tuple[Tensor, int]:
    """Contrastive prompt loss with cosine similarity.

    Each anchor is paired with the next same-task sample in batch order; the
    denominator runs over every other sample. Anchors with no in-batch
    positive are skipped; the skip count is returned alongside the loss.
    """
    n = z.data.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs a batch of >= 2 prompts")
    task_ids = np.asarray(task_ids)
    norm = ad.sqrt(ad.sum_(ad.square(z), axis=1, keepdims=True))
    zn = ad.div(z, norm)
    sims = ad.smul(ad.matmul(zn, ad.transpose(zn, (1, 0))), 1.0 / temperature)  # [N, N]
    keep = ~np.eye(n, dtype=bool)
    logp = ad.masked_log_softmax(sims, keep, axis=-1)

    onehot = np.zeros((n, n), dtype=z.dtype)
    skipped = 0
    for i in range(n):
        same = np.flatnonzero((task_ids == task_ids[i]) & (np.arange(n) != i))
        if same.size == 0:
            skipped += 1
            continue
        j = same[np.searchsorted(same, i) % same.size]  # next same-task index, cyclic
        onehot[i, j] = 1.0
    n_valid = n - skipped
    if n_valid == 0:
        raise ContractError("no anchor has an in-batch positive")
    picked = ad.sum_(ad.mul(logp, Tensor(onehot)))
    return ad.smul(picked, -1.0 / n_valid), skipped


def loss_total(l_pdt: Tensor, l_phi: Optional[Tensor], reg_weight: float) -> Tensor:
    """L_total = action loss + reg_weight * prompt-regularization loss."""
    if l_phi is None or reg_weight == 0.0:
        return l_pdt
    return ad.add(l_pdt, ad.smul(l_phi, reg_weight))


# ---------------------------------------------------------------------------
# the bundled model and checkpointing
# ---------------------------------------------------------------------------


@dataclass
class PromptDTModel:
    config: ModelConfig
    weights: tf.TransformerWeights
    params: dict[str, Tensor]
    adapters: dict[str, lora_mod.LoraAdapter]
    stats: Optional[NormStats] = None
    train_task_ids: list[int] = field(default_factory=list)
    target_return: float = 0.0  # evaluation RTG target: best training return seen

    @classmethod
    def create(cls, config: ModelConfig, seed: int, base_weights: Optional[tf.TransformerWeights] = None) -> "PromptDTModel":
        weights = base_weights if base_weights is not None else tf.init_random(config.transformer, seed)
        weights.set_trainable(False)
        weights.tensors["pos_emb"].requires_grad = True  # positions are task-side, kept trainable
        params = init_params(config, seed + 1)
        adapters = lora_mod.create_attention_adapters(
            config.transformer, rank=config.lora_rank, alpha=config.lora_alpha, seed=seed + 2
        )
        return cls(config=config, weights=weights, params=params, adapters=adapters)

    def trainable_params(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out["pos_emb"] = self.weights.tensors["pos_emb"]
        for name, a in self.adapters.items():
            out[f"lora.{name}.A"] = a.A
            out[f"lora.{name}.B"] = a.B
        return out

    def frozen_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.weights.tensors.items() if k != "pos_emb"}

    def forward(self, seqs: list[InputSequence] | Batch, train: bool = False, rng=None) -> ModelOutput:
        batch = seqs if isinstance(seqs, Batch) else collate(seqs)
        return forward(batch, self.weights, self.params, self.config, adapters=self.adapters, train=train, rng=rng)

    def task_label(self, task_id: int) -> int:
        return self.train_task_ids.index(task_id)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {f"base.{k}": v.data for k, v in self.weights.tensors.items()}
        arrays.update({k: v.data for k, v in self.params.items()})
        arrays.update(lora_mod.adapter_arrays(self.adapters))
        save_tensors(directory / "checkpoint.nt", arrays)
        meta = {
            "model": self.config.to_dict(),
            "lora": {"rank": self.config.lora_rank, "alpha": self.config.lora_alpha,
                     "targets": sorted(self.adapters.keys())},
            "norm": self.stats.to_dict() if self.stats else None,
            "train_task_ids": self.train_task_ids,
            "target_return": self.target_return,
        }
        (directory / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "PromptDTModel":
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text())
        config = ModelConfig.from_dict(meta["model"])
        arrays = load_tensors(directory / "checkpoint.nt")
        tensors = {}
        params = {}
        lora_arrays = {}
        for name, arr in arrays.items():
            if name.startswith("base."):
                tensors[name[len("base."):]] = Tensor(arr)
            elif name.startswith("lora."):
                lora_arrays[name] = arr
            else:
                params[name] = Tensor(arr)
        weights = tf.TransformerWeights(config.transformer, tensors)
        adapters = {}
        lmeta = meta["lora"]
        for name in lmeta["targets"]:
            adapters[name] = lora_mod.LoraAdapter(
                A=Tensor(lora_arrays[f"lora.{name}.A"]),
                B=Tensor(lora_arrays[f"lora.{name}.B"]),
                rank=int(lmeta["rank"]),
                alpha=float(lmeta["alpha"]),
                target=name,
            )
        stats = NormStats.from_dict(meta["norm"]) if meta.get("norm") else None
        return cls(config=config, weights=weights, params=params, adapters=adapters,
                   stats=stats, train_task_ids=list(meta.get("train_task_ids", [])),
                   target_return=float(meta.get("target_return", 0.0)))
