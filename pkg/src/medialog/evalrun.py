"""Generation harness: run test-time inference over a corpus and score it.

Evaluation is teacher-forced on gold history: every turn conditions on the
gold previous response and the model's own carried state/summary computed
over that gold history, and the generated response is scored against the
gold one.
"""

from __future__ import annotations

import numpy as np
import torch

from . import evalkit
from .corpus import DialogueSession, Vocabulary
from .kgstore import KnowledgeGraph
from .model import DialogueModel, KgBinding, TurnInference


def embedding_table(model: DialogueModel, vocab: Vocabulary) -> dict[str, np.ndarray]:
    with torch.no_grad():
        mat = model.embedder.table.weight.detach().cpu().numpy()
    return {vocab.token(i): mat[i] for i in range(len(vocab))}


def generate_responses(model: DialogueModel, binding: KgBinding,
                       sessions: list[DialogueSession], *,
                       collect_inference: bool = False):
    """(hypotheses, references[, inferences]) over all turns, gold-history forced."""
    vocab = binding.vocab
    hyps: list[list[str]] = []
    refs: list[list[str]] = []
    inferences: list[TurnInference] = []
    with torch.no_grad():
        for session in sessions:
            carried_summary = None
            carried_state = None
            prev_r: list[int] = []
            for turn in session.turns:
                u_ids = vocab.encode(turn.patient_utterance)
                ctx = model.context_encode(prev_r, u_ids, carried_summary, carried_state)
                inf = model.infer_turn(ctx, binding)
                hyps.append(vocab.decode(inf.response_ids))
                refs.append(list(turn.physician_response))
                if collect_inference:
                    inferences.append(inf)
                carried_summary = inf.carried_summary
                carried_state = inf.carried_state
                prev_r = vocab.encode(turn.physician_response)
    if collect_inference:
        return hyps, refs, inferences
    return hyps, refs


def evaluate_model(model: DialogueModel, binding: KgBinding,
                   sessions: list[DialogueSession],
                   embeddings: dict[str, np.ndarray] | None = None) -> evalkit.EvalReport:
    if not sessions:
        raise ValueError("empty evaluation corpus")
    hyps, refs = generate_responses(model, binding, sessions)
    if embeddings is None:
        embeddings = embedding_table(model, binding.vocab)
    return evalkit.compose_report(hyps, refs, binding.kg, embeddings)


def span_prediction_scores(model: DialogueModel, binding: KgBinding,
                           sessions: list[DialogueSession]) -> tuple[float, float]:
    """(state token F1, action category accuracy) against gold labels."""
    vocab = binding.vocab
    f1s: list[float] = []
    cat_hits = cat_total = 0
    from .corpus import ACTION_CATEGORIES, NULL_TOKEN

    with torch.no_grad():
        for session in sessions:
            if not session.is_labeled:
                continue
            carried_summary = None
            carried_state = None
            prev_r: list[int] = []
            for ti, turn in enumerate(session.turns):
                u_ids = vocab.encode(turn.patient_utterance)
                ctx = model.context_encode(prev_r, u_ids, carried_summary, carried_state)
                inf = model.infer_turn(ctx, binding)
                pred = {t for t in vocab.decode(inf.state_ids) if t != NULL_TOKEN}
                gold = set(session.state_labels[ti].tokens)
                tp = len(pred & gold)
                p = tp / len(pred) if pred else 0.0
                r = tp / len(gold) if gold else 0.0
                f1s.append(2 * p * r / (p + r) if (p + r) else 0.0)
                gold_cat = ACTION_CATEGORIES.index(session.action_labels[ti].category)
                cat_hits += int(inf.category == gold_cat)
                cat_total += 1
                carried_summary = inf.carried_summary
                carried_state = inf.carried_state
                prev_r = vocab.encode(turn.physician_response)
    if not f1s:
        raise ValueError("no labeled sessions to score")
    return sum(f1s) / len(f1s), cat_hits / cat_total
