"""Versioned checkpoint container: config echo, parameters, rng state, step."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .corpus import Vocabulary
from .kgstore import KnowledgeGraph
from .model import DialogueModel, ModelConfig

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: DialogueModel
    vocab: Vocabulary
    relation_names: list[str]
    run_config: dict
    step: int
    torch_rng_state: torch.Tensor | None = None

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def save(path, model: DialogueModel, vocab: Vocabulary, relation_names: list[str],
         run_config: dict, step: int, torch_rng_state: torch.Tensor | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab": vocab.to_json(),
        "relation_names": list(relation_names),
        "run_config": dict(run_config),
        "step": int(step),
        "state_dict": model.state_dict(),
        "torch_rng_state": torch_rng_state,
        "dtype": str(model.dtype).replace("torch.", ""),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load(path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} does not match {FORMAT_VERSION}"
        )
    config = ModelConfig(**payload["model_config"])
    vocab = Vocabulary.from_json(payload["vocab"])
    if len(vocab) != config.vocab_size:
        raise CheckpointError("vocabulary size does not match checkpoint config")
    model = DialogueModel(config)
    model = model.to(getattr(torch, payload.get("dtype", "float32")))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return Checkpoint(
        model=model, vocab=vocab, relation_names=payload["relation_names"],
        run_config=payload["run_config"], step=payload["step"],
        torch_rng_state=payload.get("torch_rng_state"),
    )


def check_graph_compatibility(ckpt: Checkpoint, kg: KnowledgeGraph) -> None:
    """The graph encoder's relation table must match the graph it runs against."""
    if list(kg.relation_names) != list(ckpt.relation_names):
        raise CheckpointError(
            "knowledge graph relations do not match the checkpoint "
            f"(checkpoint: {ckpt.relation_names}, graph: {kg.relation_names})"
        )
