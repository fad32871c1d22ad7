"""Low-rank residual adapters over frozen weight matrices.

Each adapter contributes (alpha / rank) * x @ A @ B on top of the frozen
base product x @ W0, without ever materializing W0 + AB during the forward
pass. B starts at zero, so a fresh adapter is exactly transparent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AdapterError, ConfigError
from .transformer import TransformerConfig

ATTENTION_TARGETS = ("wq", "wk", "wv", "wo")


@dataclass
class LoraAdapter:
    A: Tensor  # [d, r]
    B: Tensor  # [r, k]
    rank: int
    alpha: float
    target: str  # name of the frozen matrix this attaches to

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def create_adapter(d: int, k: int, rank: int, alpha: float, target: str, rng: np.random.Generator, dtype=np.float32) -> LoraAdapter:
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    if rank > min(d, k):
        raise ConfigError(f"LoRA rank {rank} exceeds min(d, k) = {min(d, k)}")
    a = Tensor(rng.normal(0.0, 0.02, size=(d, rank)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros((rank, k), dtype=dtype), requires_grad=True)
    return LoraAdapter(A=a, B=b, rank=rank, alpha=alpha, target=target)


def create_attention_adapters(
    config: TransformerConfig,
    rank: int = 8,
    alpha: float = 8.0,
    targets: tuple[str, ...] = ATTENTION_TARGETS,
    seed: int = 0,
) -> dict[str, LoraAdapter]:
    """One adapter per attention projection of every layer."""
    for t in targets:
        if t not in ATTENTION_TARGETS:
            raise ConfigError(f"unknown LoRA target {t!r}; valid: {ATTENTION_TARGETS}")
    rng = np.random.default_rng(seed)
    adapters = {}
    d = config.d_model
    for i in range(config.n_layers):
        for t in targets:
            name = f"layer.{i}.attn.{t}"
            adapters[name] = create_adapter(d, d, rank, alpha, name, rng)
    return adapters


def lora_forward(x: Tensor, w0: Tensor, adapter: LoraAdapter) -> Tensor:
    """x @ W0 + (alpha/r) * x @ A @ B, the low-rank path kept factored."""
    d, k = w0.data.shape[-2], w0.data.shape[-1]
    if adapter.A.data.shape[0] != d or adapter.B.data.shape[1] != k:
        raise AdapterError(
            f"adapter {adapter.target!r} shaped ({adapter.A.data.shape[0]}x{adapter.B.data.shape[1]}) "
            f"does not match base ({d}x{k})"
        )
    if x.data.shape[-1] != d:
        raise AdapterError(f"input width {x.data.shape[-1]} does not match base rows {d}")
    base = ad.matmul(x, w0)
    low = ad.matmul(ad.matmul(x, adapter.A), adapter.B)
    return ad.add(base, ad.smul(low, adapter.scale))


def merge(adapter: LoraAdapter, w0: Tensor) -> Tensor:
    """Dense W0 + (alpha/r) * A @ B."""
    if adapter.A.data.shape[0] != w0.data.shape[0] or adapter.B.data.shape[1] != w0.data.shape[1]:
        raise AdapterError(f"adapter {adapter.target!r} does not match base shape {w0.data.shape}")
    return Tensor(w0.data + adapter.scale * (adapter.A.data @ adapter.B.data))


def trainable_param_count(config: TransformerConfig, rank: int, targets: tuple[str, ...] = ATTENTION_TARGETS) -> int:
    """Adapter parameters only: sum over layers and targets of r * (d + k)."""
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    for t in targets:
        if t not in ATTENTION_TARGETS:
            raise ConfigError(f"unknown LoRA target {t!r}")
    d = config.d_model
    return config.n_layers * len(targets) * rank * (d + d)


def adapter_arrays(adapters: dict[str, LoraAdapter]) -> dict[str, np.ndarray]:
    out = {}
    for name, a in adapters.items():
        out[f"lora.{name}.A"] = a.A.data
        out[f"lora.{name}.B"] = a.B.data
    return out


def save_adapters(adapters: dict[str, LoraAdapter], path, sidecar_path):
    from .ntio import save_tensors

    save_tensors(path, adapter_arrays(adapters))
    first = next(iter(adapters.values()))
    meta = {
        "rank": first.rank,
        "alpha": first.alpha,
        "targets": sorted(adapters.keys()),
    }
    Path(sidecar_path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_adapters(path, sidecar_path, requires_grad: bool = False) -> dict[str, LoraAdapter]:
    from .ntio import load_tensors

    arrays = load_tensors(path)
    meta = json.loads(Path(sidecar_path).read_text())
    adapters = {}
    for name in meta["targets"]:
        a = arrays[f"lora.{name}.A"]
        b = arrays[f"lora.{name}.B"]
        adapters[name] = LoraAdapter(
            A=Tensor(a, requires_grad=requires_grad),
            B=Tensor(b, requires_grad=requires_grad),
            rank=int(meta["rank"]),
            alpha=float(meta["alpha"]),
            target=name,
        )
    return adapters
