"""Training loop: temperature/lr annealing, 2-stage schedule, semi-supervision."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import evalrun, objective
from .corpus import DialogueSession, build_vocab
from .kgstore import KnowledgeGraph
from .model import DialogueModel, KgBinding, ModelConfig


@dataclass
class RunConfig:
    batch_size: int = 16
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    gumbel_start: float = 3.0
    gumbel_end: float = 0.1
    gumbel_anneal_steps: int = 30000
    stage1_steps: int | None = None  # None: one epoch over the training split
    max_steps: int = 2000
    eval_every: int = 500
    rng_seed: int = 0
    supervision_fraction: float = 0.0
    sup_weight: float = 1.0
    val_fraction: float = 0.1
    vocab_max_size: int = 30000
    sample_mode: str = "gumbel_st"
    joint_training: bool = False  # True trains on the single joint bound throughout

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if not (self.gumbel_start >= self.gumbel_end > 0):
            raise ValueError("need gumbel_start >= gumbel_end > 0")
        if not 0.0 <= self.supervision_fraction <= 1.0:
            raise ValueError("supervision_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def anneal(step: int, config: RunConfig) -> tuple[float, float]:
    """(gumbel temperature, learning rate) at a given step; linear then clamped."""
    if step < 0:
        raise ValueError("step must be >= 0")
    t = min(step / config.gumbel_anneal_steps, 1.0) if config.gumbel_anneal_steps else 1.0
    tau = config.gumbel_start + (config.gumbel_end - config.gumbel_start) * t
    u = min(step / config.max_steps, 1.0) if config.max_steps else 1.0
    lr = config.lr_start + (config.lr_end - config.lr_start) * u
    return tau, lr


@dataclass
class TrainResult:
    model: DialogueModel
    binding: KgBinding
    metrics_log: list[dict]
    final_step: int
    aborted: bool = False
    checkpoint_path: Path | None = None
    loss_history: list[float] = field(default_factory=list)


def train(sessions: list[DialogueSession], kg: KnowledgeGraph, run: RunConfig,
          model_params: dict | None = None, out_dir: Path | str | None = None) -> TrainResult:
    """Train a fresh model; checkpoints and a JSONL-able metrics log on the side."""
    if not sessions:
        raise ValueError("corpus is empty")
    rng = random.Random(run.rng_seed)
    torch.manual_seed(run.rng_seed)
    gen = torch.Generator().manual_seed(run.rng_seed + 1)

    order = list(range(len(sessions)))
    rng.shuffle(order)
    n_val = int(len(sessions) * run.val_fraction)
    val_sessions = [sessions[i] for i in order[:n_val]]
    train_sessions = [sessions[i] for i in order[n_val:]]
    if not train_sessions:
        raise ValueError("no training sessions after validation split")

    vocab = build_vocab(train_sessions, kg, run.vocab_max_size)
    config = ModelConfig(
        vocab_size=len(vocab), num_relations=len(kg.relation_names),
        **(model_params or {}),
    )
    model = DialogueModel(config)
    binding = KgBinding(kg, vocab)

    labeled_pool = [s for s in train_sessions if s.is_labeled]
    n_sup = round(len(labeled_pool) * run.supervision_fraction)
    supervised_ids = set(
        s.session_id for s in rng.sample(labeled_pool, n_sup)
    ) if n_sup else set()

    data = {
        s.session_id: objective.prepare_session(s, vocab, config.state_span_len,
                                                config.action_span_len)
        for s in train_sessions
    }
    epoch_steps = max(1, -(-len(train_sessions) // run.batch_size))
    stage1_steps = run.stage1_steps if run.stage1_steps is not None else epoch_steps

    opt = torch.optim.Adam(model.parameters(), lr=run.lr_start)
    out_path = Path(out_dir) if out_dir is not None else None
    metrics_log: list[dict] = []
    loss_history: list[float] = []
    last_good: Path | None = None
    aborted = False

    def run_validation(step: int) -> dict:
        model.eval()
        entry: dict = {}
        if val_sessions:
            report = evalrun.evaluate_model(model, binding, val_sessions)
            entry = report.to_dict()
        model.train()
        return entry

    def save(step: int, tag: str) -> Path | None:
        if out_path is None:
            return None
        path = out_path / f"checkpoint-{tag}.pt"
        ckpt.save(path, model, vocab, kg.relation_names, run.to_dict(), step,
                  torch_rng_state=gen.get_state())
        return path

    cursor = len(train_sessions)  # forces an initial shuffle
    schedule = list(range(len(train_sessions)))

    model.train()
    step = 0
    for step in range(1, run.max_steps + 1):
        tau, lr = anneal(step - 1, run)
        for group in opt.param_groups:
            group["lr"] = lr

        batch_ids = []
        for _ in range(min(run.batch_size, len(train_sessions))):
            if cursor >= len(schedule):
                rng.shuffle(schedule)
                cursor = 0
            batch_ids.append(schedule[cursor])
            cursor += 1
        batch = [train_sessions[i] for i in batch_ids]
        batch_data = [data[s.session_id] for s in batch]

        stage = 1 if (step <= stage1_steps and not run.joint_training) else 2
        if run.joint_training:
            breakdown = objective.loss_joint(
                model, batch_data, binding, tau=tau, generator=gen,
                sample_mode=run.sample_mode,
            )
        else:
            breakdown = objective.loss_unsup(
                model, batch_data, binding, stage, tau=tau, generator=gen,
                sample_mode=run.sample_mode,
            )
        total = breakdown.total
        sup_value = 0.0
        sup_batch = [d for s, d in zip(batch, batch_data)
                     if s.session_id in supervised_ids]
        if sup_batch:
            sup = objective.loss_sup(model, sup_batch, binding)
            total = total + run.sup_weight * sup.total
            sup_value = float(sup.total)

        if not torch.isfinite(total):
            aborted = True
            metrics_log.append({"step": step, "event": "non_finite_loss_abort"})
            break
        loss_history.append(float(total.detach()))

        opt.zero_grad()
        total.backward()
        opt.step()

        if run.eval_every and (step % run.eval_every == 0) and step < run.max_steps:
            entry = {"step": step, "stage": stage, "tau": tau, "lr": lr,
                     "breakdown": breakdown.item_dict(), "supervised": sup_value,
                     "val": run_validation(step)}
            metrics_log.append(entry)
            path = save(step, f"step{step}")
            if path is not None:
                last_good = path

    if not aborted:
        entry = {"step": step, "final": True, "val": run_validation(step)}
        metrics_log.append(entry)
        path = save(step, "final")
        if path is not None:
            last_good = path

    model.eval()
    return TrainResult(model=model, binding=binding, metrics_log=metrics_log,
                       final_step=step, aborted=aborted, checkpoint_path=last_good,
                       loss_history=loss_history)
