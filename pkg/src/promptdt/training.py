"""Training loop, few-shot evaluation rollouts, ablation grid, and metrics.

One training step: sample a batch with every training task represented,
run the model, combine the action MSE with the optional prompt-regularization
loss, backpropagate, clip, and update only the trainable set (embedders,
heads, prompt-encoder MLP, LoRA factors, positional table). The transformer
body stays frozen throughout.

Evaluation is few-shot: a prompt sampled from the target task's offline data
conditions the model, which then acts autoregressively with a decremented
return-to-go target and no weight update.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dp
from . import envs
from . import model as mdl
from . import transformer as tf
from .errors import ConfigError, DataError, NonFiniteLossError
from .optim import AdamW, clip_grad_norm


@dataclass
class ExperimentConfig:
    dataset: str
    out_dir: str = "runs/out"
    # model
    n_layers: int = 2
    n_heads: int = 1
    d_model: int = 128
    max_seq_len: int = 128
    dropout: float = 0.1
    activation: str = "relu"
    k_star: int = 5
    context_len: int = 20
    reg_mode: str = "none"
    reg_weight: float = 0.1
    temperature: float = 1.0
    mlp_dim: int = 128
    classifier_layers: int = 2
    lora_rank: int = 8
    lora_alpha: float = 8.0
    prompt_position_mode: str = "restart"
    # initialization: "random" or a path to pretrained body weights
    init: str = "random"
    # optimizer
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 1000
    grad_clip: float = 0.25
    # schedule
    train_steps: int = 10000
    eval_every: int = 0  # 0: evaluate only at the end
    eval_episodes: int = 20
    batch_per_task: int = 16
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    ratio: float = 1.0
    deterministic: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not (0.0 < self.ratio <= 1.0):
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text())
        if overrides:
            d.update(overrides)
        return cls.from_dict(d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")  # where results land is not part of the experiment identity
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def model_config(self, ds: int, da: int, n_train_tasks: int) -> mdl.ModelConfig:
        return mdl.ModelConfig(
            transformer=tf.TransformerConfig(
                n_layers=self.n_layers,
                n_heads=self.n_heads,
                d_model=self.d_model,
                max_seq_len=self.max_seq_len,
                dropout=self.dropout,
                activation=self.activation,
            ),
            ds=ds,
            da=da,
            k_star=self.k_star,
            context_len=self.context_len,
            reg_mode=self.reg_mode,
            reg_weight=self.reg_weight,
            temperature=self.temperature,
            n_train_tasks=n_train_tasks,
            mlp_dim=self.mlp_dim,
            classifier_layers=self.classifier_layers,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            prompt_position_mode=self.prompt_position_mode,
        )


METRIC_COLUMNS = (
    "step",
    "task",
    "seed",
    "return_mean",
    "return_std",
    "l_pdt",
    "l_phi",
    "l_total",
    "cls_acc",
    "config_hash",
)


def write_metrics(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRIC_COLUMNS})


# ---------------------------------------------------------------------------
# evaluation rollouts
# ---------------------------------------------------------------------------


class ModelPolicy:
    """Autoregressive few-shot controller around a trained model.

    Conditions on a prompt from the task's offline data, the running
    return-to-go target, and the last K steps of its own history.
    """

    def __init__(self, model: mdl.PromptDTModel, dataset: dp.TaskDataset, task: envs.TaskSpec,
                 target_return: float, rng: np.random.Generator):
        self.model = model
        self.task = task
        self.stats = model.stats
        self.prompt = dp.sample_prompt(dataset, task.task_index, model.config.k_star, rng)
        self.rtg = target_return
        self.clamp_rtg = target_return >= 0  # a floor at 0 only makes sense for nonneg returns
        self.states: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []
        self.rtgs: list[float] = []
        self.t = 0

    def act(self, state: envs.EnvState) -> np.ndarray:
        k = self.model.config.context_len
        obs = state.obs
        if self.stats is not None:
            obs = dp.normalize_state(obs, self.stats)
        scale = self.stats.return_scale if self.stats is not None else 1.0
        self.states.append(obs.astype(np.float32))
        self.rtgs.append(self.rtg / scale)
        self.actions.append(np.zeros(self.task.action_dim, dtype=np.float32))
        n = min(len(self.states), k)
        pad = k - n
        da = self.task.action_dim
        ds = len(obs)
        seq = dp.InputSequence(
            prompt=self.prompt,
            rtg=np.concatenate([np.zeros(pad, dtype=np.float32), np.array(self.rtgs[-n:], dtype=np.float32)]),
            states=np.concatenate([np.zeros((pad, ds), dtype=np.float32), np.stack(self.states[-n:])]),
            actions=np.concatenate([np.zeros((pad, da), dtype=np.float32), np.stack(self.actions[-n:])]),
            timesteps=np.concatenate([np.zeros(pad, dtype=np.int64), np.arange(self.t - n + 1, self.t + 1)]),
            pad_mask=np.concatenate(
                [np.ones(self.prompt.length, dtype=np.float32), np.zeros(pad, dtype=np.float32), np.ones(n, dtype=np.float32)]
            ),
            task_id=self.task.task_index,
        )
        with ad.no_grad():
            out = self.model.forward([seq])
        action = out.predicted_actions.data[0, -1].astype(np.float64)
        self.actions[-1] = action.astype(np.float32)
        return action

    def observe(self, action: np.ndarray, reward: float):
        self.rtg -= reward
        if self.clamp_rtg:
            self.rtg = max(self.rtg, 0.0)
        self.t += 1


class ScriptedWrapper:
    """Adapts a scripted controller to the rollout-harness interface."""

    def __init__(self, task: envs.TaskSpec, sigma: float, rng: np.random.Generator):
        self._policy = envs.scripted_policy(task, sigma)
        self._rng = rng

    def act(self, state: envs.EnvState) -> np.ndarray:
        return self._policy(state, self._rng)

    def observe(self, action, reward):
        pass


def run_episodes(task: envs.TaskSpec, make_policy, episodes: int, seed: int) -> np.ndarray:
    """Roll out `episodes` independent episodes; returns episode returns."""
    returns = np.zeros(episodes)
    for ep in range(episodes):
        rng = np.random.default_rng([seed, task.task_index, ep, 7])
        policy = make_policy(rng)
        state = envs.reset(task, rng)
        total = 0.0
        done = False
        while not done:
            a = policy.act(state)
            state, r, done = envs.step(state, a, task)
            policy.observe(a, r)
            total += r
        returns[ep] = total
    return returns


def evaluate(
    model: mdl.PromptDTModel,
    dataset: dp.TaskDataset,
    task_indexes: list[int],
    episodes: int = 20,
    seed: int = 0,
    target_return: float | None = None,
) -> dict[int, tuple[float, float]]:
    """Per-task (mean, std) episode return of the few-shot policy."""
    if target_return is None:
        target_return = model.target_return
    tasks = {t["index"]: envs.TaskSpec(t["family"], t["param"], t["index"]) for t in dataset.meta["tasks"]}
    results = {}
    for tid in task_indexes:
        if tid not in tasks or tid not in dataset.trajectories:
            raise DataError(f"no data for task {tid}")
        task = tasks[tid]
        rets = run_episodes(
            task,
            lambda rng: ModelPolicy(model, dataset, task, target_return, rng),
            episodes,
            seed,
        )
        results[tid] = (float(rets.mean()), float(rets.std()))
    return results


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def max_training_return(dataset: dp.TaskDataset) -> float:
    return max(
        float(tr.rewards.sum()) for tid in dataset.train_task_ids for tr in dataset.trajectories[tid]
    )


def prepare_dataset(config: ExperimentConfig, seed: int) -> dp.TaskDataset:
    dataset = dp.load_dataset(config.dataset)
    if config.ratio < 1.0:
        dataset = dp.subsample_dataset(dataset, config.ratio, np.random.default_rng([seed, 11]))
    dataset, _ = dp.normalize(dataset)
    return dataset


def train_one(config: ExperimentConfig, seed: int, dataset: dp.TaskDataset | None = None,
              log=None) -> tuple[mdl.PromptDTModel, list[dict]]:
    """Train for one seed; returns the model and its metric rows."""
    if dataset is None:
        dataset = prepare_dataset(config, seed)
    train_ids = dataset.train_task_ids
    mconfig = config.model_config(dataset.ds, dataset.da, len(train_ids))
    base = None
    if config.init != "random":
        base = tf.load_weights(config.init, mconfig.transformer, requires_grad=False)
    model = mdl.PromptDTModel.create(mconfig, seed, base_weights=base)
    model.stats = dataset.stats
    model.train_task_ids = train_ids
    model.target_return = max_training_return(dataset)

    trainable = model.trainable_params()
    opt = AdamW(trainable, lr=config.lr, weight_decay=config.weight_decay, warmup_steps=config.warmup_steps)
    rng = np.random.default_rng([seed, 23])
    chash = config.config_hash()
    rows: list[dict] = []
    labels_lut = {tid: i for i, tid in enumerate(train_ids)}
    run_l = {"l_pdt": 0.0, "l_phi": 0.0, "l_total": 0.0, "acc": 0.0, "n": 0}

    def record_eval(step):
        results = evaluate(model, dataset, dataset.test_task_ids,
                           episodes=config.eval_episodes, seed=seed)
        n = max(run_l["n"], 1)
        for tid, (m, s) in results.items():
            rows.append({
                "step": step, "task": tid, "seed": seed,
                "return_mean": f"{m:.6f}", "return_std": f"{s:.6f}",
                "l_pdt": f"{run_l['l_pdt'] / n:.6f}",
                "l_phi": f"{run_l['l_phi'] / n:.6f}",
                "l_total": f"{run_l['l_total'] / n:.6f}",
                "cls_acc": f"{run_l['acc'] / n:.4f}" if config.reg_mode == "classifier" else "",
                "config_hash": chash,
            })
        run_l.update({"l_pdt": 0.0, "l_phi": 0.0, "l_total": 0.0, "acc": 0.0, "n": 0})
        return results

    for step in range(1, config.train_steps + 1):
        batch = mdl.collate(dp.sample_batch(dataset, config.batch_per_task, config.context_len,
                                            config.k_star, rng))
        out = model.forward(batch, train=True, rng=rng)
        l_pdt = mdl.loss_pdt(out.predicted_actions, batch.actions, batch.pad_mask, config.k_star)
        l_phi = None
        acc = 0.0
        if config.reg_mode == "classifier":
            labels = np.array([labels_lut[t] for t in batch.task_ids])
            l_phi = mdl.loss_classifier(out.prompt_encoding.logits, labels)
            acc = float((out.prompt_encoding.logits.data.argmax(axis=1) == labels).mean())
        elif config.reg_mode == "infonce":
            l_phi, _ = mdl.loss_infonce(out.prompt_encoding.z, batch.task_ids, config.temperature)
        l_total = mdl.loss_total(l_pdt, l_phi, config.reg_weight)
        if not np.isfinite(l_total.data):
            ad.clear_tape()
            raise NonFiniteLossError(f"loss diverged at step {step} (seed {seed})")
        opt.zero_grad()
        ad.backward(l_total, leaves=trainable.values())
        clip_grad_norm(trainable, config.grad_clip)
        opt.step()
        run_l["l_pdt"] += l_pdt.item()
        run_l["l_phi"] += l_phi.item() if l_phi is not None else 0.0
        run_l["l_total"] += l_total.item()
        run_l["acc"] += acc
        run_l["n"] += 1
        if log and step % 200 == 0:
            log(step, run_l)
        if config.eval_every and step % config.eval_every == 0 and step < config.train_steps:
            record_eval(step)
    record_eval(config.train_steps)
    return model, rows


def train(config: ExperimentConfig, log=None) -> dict:
    """Run every seed, write metrics.csv and summary.json, save checkpoints."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_rows: list[dict] = []
    finals = []
    for seed in config.seeds:
        model, rows = train_one(config, seed, log=log)
        model.save(out / f"seed_{seed}")
        all_rows.extend(rows)
        last_step = max(int(r["step"]) for r in rows)
        finals.append(np.mean([float(r["return_mean"]) for r in rows if int(r["step"]) == last_step]))
    write_metrics(out / "metrics.csv", all_rows)
    summary = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "heldout_return_mean": float(np.mean(finals)),
        "heldout_return_std": float(np.std(finals)),
        "per_seed": {str(s): float(v) for s, v in zip(config.seeds, finals)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def ablate(config: ExperimentConfig, lm_weights_path: str, ratios=(1.0, 0.1), log=None) -> list[dict]:
    """The {regularization} x {initialization} x {data ratio} x {seed} grid.

    Failures of individual cells are recorded and the grid continues.
    Writes ablation.csv under the base out_dir.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for reg in ("none", "classifier", "infonce"):
        for init_name, init in (("random", "random"), ("lm_pretrained", lm_weights_path)):
            for ratio in ratios:
                for seed in config.seeds:
                    cell = dict(config.to_dict())
                    cell.update({
                        "reg_mode": reg, "init": init, "ratio": ratio, "seeds": [seed],
                        "out_dir": str(out / f"{reg}_{init_name}_r{ratio}_s{seed}"),
                    })
                    cell_cfg = ExperimentConfig.from_dict(cell)
                    row = {"reg": reg, "init": init_name, "ratio": ratio, "seed": seed,
                           "config_hash": cell_cfg.config_hash()}
                    try:
                        summary = train(cell_cfg, log=log)
                        row["return_mean"] = summary["heldout_return_mean"]
                        row["status"] = "ok"
                    except Exception as e:  # record and continue
                        row["return_mean"] = ""
                        row["status"] = f"failed: {e}"
                    rows.append(row)
                    if log:
                        log(f"ablate cell {row}")
    cols = ["reg", "init", "ratio", "seed", "return_mean", "status", "config_hash"]
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return rows
