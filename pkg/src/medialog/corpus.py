"""Dialogue corpus model, vocabulary, JSONL I/O, and the synthetic generator.

Text is pre-tokenized: tokens are whitespace-separated inside every string
field, and tokenization everywhere is a plain split.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

from .kgstore import EntityType, KnowledgeGraph, Triplet

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
NULL_TOKEN = "<null>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, NULL_TOKEN)

ACTION_CATEGORIES = ("ask_symptoms", "diagnosis", "prescribe_medicine", "chitchat")


class CorpusFormatError(ValueError):
    pass


class SynthesisError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class Turn:
    patient_utterance: tuple[str, ...]
    physician_response: tuple[str, ...]

    def __post_init__(self):
        if not self.patient_utterance or not self.physician_response:
            raise CorpusFormatError("turn utterances must be non-empty")


@dataclass(frozen=True)
class StateLabel:
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class ActionLabel:
    category: str
    keywords: tuple[str, ...]

    def __post_init__(self):
        if self.category not in ACTION_CATEGORIES:
            raise CorpusFormatError(f"unknown action category: {self.category!r}")


@dataclass(frozen=True)
class DialogueSession:
    session_id: str
    turns: tuple[Turn, ...]
    state_labels: tuple[StateLabel, ...] | None = None
    action_labels: tuple[ActionLabel, ...] | None = None

    def __post_init__(self):
        for labels, kind in ((self.state_labels, "state"), (self.action_labels, "action")):
            if labels is not None and len(labels) != len(self.turns):
                raise CorpusFormatError(
                    f"session {self.session_id!r}: {len(labels)} {kind} labels "
                    f"for {len(self.turns)} turns"
                )

    @property
    def is_labeled(self) -> bool:
        return self.state_labels is not None and self.action_labels is not None


# -- JSONL I/O --------------------------------------------------------------


def _session_from_record(rec: dict, index: int) -> DialogueSession:
    try:
        turns = tuple(
            Turn(tuple(tokenize(t["u"])), tuple(tokenize(t["r"]))) for t in rec["turns"]
        )
        states = rec.get("states")
        actions = rec.get("actions")
        state_labels = (
            tuple(StateLabel(tuple(s)) for s in states) if states is not None else None
        )
        action_labels = (
            tuple(ActionLabel(a["c"], tuple(a["k"])) for a in actions)
            if actions is not None
            else None
        )
        return DialogueSession(str(rec["id"]), turns, state_labels, action_labels)
    except (KeyError, TypeError, CorpusFormatError) as exc:
        raise CorpusFormatError(f"record {index}: {exc}") from None


def load_corpus(source: IO[str]) -> list[DialogueSession]:
    """Read sessions from a JSONL stream, one record per line."""
    sessions = []
    for index, line in enumerate(source):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"record {index}: invalid JSON ({exc})") from None
        sessions.append(_session_from_record(rec, index))
    return sessions


def serialize_corpus(sessions: Iterable[DialogueSession], sink: IO[str]) -> None:
    for s in sessions:
        rec: dict = {
            "id": s.session_id,
            "turns": [
                {"u": " ".join(t.patient_utterance), "r": " ".join(t.physician_response)}
                for t in s.turns
            ],
        }
        if s.state_labels is not None:
            rec["states"] = [list(l.tokens) for l in s.state_labels]
        if s.action_labels is not None:
            rec["actions"] = [{"c": l.category, "k": list(l.keywords)} for l in s.action_labels]
        sink.write(json.dumps(rec, ensure_ascii=False) + "\n")


# -- vocabulary --------------------------------------------------------------


class Vocabulary:
    """Token/id bijection with the five reserved tokens at ids 0..4."""

    def __init__(self, content_tokens: Sequence[str]):
        self._tokens = list(RESERVED_TOKENS) + list(content_tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def null_id(self) -> int:
        return 4

    def id_of(self, token: str) -> int:
        return self._ids.get(token, 3)

    def token(self, tid: int) -> str:
        return self._tokens[tid]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        ids = self._ids
        return [ids.get(t, 3) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def to_json(self) -> str:
        return json.dumps(self._tokens[len(RESERVED_TOKENS):], ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


def build_vocab(
    sessions: Iterable[DialogueSession], kg: KnowledgeGraph, max_size: int
) -> Vocabulary:
    """Frequency-ranked vocabulary capped at max_size, entity names forced in.

    Ties break lexicographically. Every entity name contributes its full
    name (as one token) and each constituent token, regardless of corpus
    frequency; max_size counts the reserved tokens.
    """
    if max_size <= len(RESERVED_TOKENS):
        raise ValueError(f"max_size must exceed {len(RESERVED_TOKENS)}")
    counts: Counter[str] = Counter()
    for s in sessions:
        for t in s.turns:
            counts.update(t.patient_utterance)
            counts.update(t.physician_response)
    forced: list[str] = []
    seen = set(RESERVED_TOKENS)
    for name in kg.entity_names:
        for tok in [name] + (name.split() if " " in name else []):
            if tok not in seen:
                seen.add(tok)
                forced.append(tok)
    budget = max_size - len(RESERVED_TOKENS) - len(forced)
    ranked = sorted(
        (t for t in counts if t not in seen), key=lambda t: (-counts[t], t)
    )
    return Vocabulary(forced + ranked[: max(budget, 0)])


def fit_span(tokens: Sequence[str], length: int) -> list[str]:
    """Truncate or right-pad (with the NULL filler) to exactly `length` tokens."""
    if length < 1:
        raise ValueError("span length must be >= 1")
    out = list(tokens[:length])
    out.extend([NULL_TOKEN] * (length - len(out)))
    return out


def initial_state(length: int) -> list[str]:
    """The fixed filler span used before the first turn."""
    return [NULL_TOKEN] * length


# -- synthetic corpus ---------------------------------------------------------


def synth_triplets(
    rng_seed: int,
    n_diseases: int = 4,
    symptoms_per_disease: int = 3,
    medicines_per_disease: int = 2,
    shared_symptoms: int = 1,
) -> list[Triplet]:
    """A planted disease/symptom/medicine world for desk-scale experiments.

    Each disease gets its own symptoms plus `shared_symptoms` drawn from a
    common pool, and a disjoint set of medicines reachable only through
    `treated_by` edges.
    """
    rng = random.Random(rng_seed)
    trips: list[Triplet] = []
    shared = [f"tiredness{i}" for i in range(shared_symptoms)]
    for d in range(n_diseases):
        disease = f"disease{d}"
        symptoms = [f"symptom{d}_{j}" for j in range(symptoms_per_disease)]
        if shared:
            symptoms.append(rng.choice(shared))
        for s in symptoms:
            trips.append(Triplet(s, "symptom_of", disease, EntityType.SYMPTOM, EntityType.DISEASE))
        for j in range(medicines_per_disease):
            med = f"medicine{d}_{j}"
            trips.append(Triplet(disease, "treated_by", med, EntityType.DISEASE, EntityType.MEDICINE))
    return trips


def _phases(turns: int) -> list[str]:
    if turns >= 4:
        return ["ask_symptoms"] * (turns - 3) + ["diagnosis", "prescribe_medicine", "chitchat"]
    return ["ask_symptoms", "diagnosis", "prescribe_medicine"][-turns:]


def synth_corpus(
    kg: KnowledgeGraph,
    rng_seed: int,
    sessions: int,
    turns_per_session: int = 3,
    symptom_rate: float = 0.5,
) -> list[DialogueSession]:
    """Fully labeled sessions with planted state/action dynamics.

    Each session hides one disease; patient turns mention sampled symptoms,
    gold states accumulate the patient-mentioned entities, and gold actions
    walk ask_symptoms -> diagnosis -> prescribe_medicine, prescribing a
    medicine reachable only through the planted disease's treated_by edges.
    Deterministic given rng_seed.
    """
    if turns_per_session < 1:
        raise ValueError("turns_per_session must be >= 1")
    diseases = []
    for d in kg.entities_of_type(EntityType.DISEASE):
        syms = kg.in_neighbors(d, "symptom_of")
        meds = kg.neighbors(d, "treated_by")
        if syms and meds:
            diseases.append((d, syms, meds))
    if not diseases:
        raise SynthesisError(
            "graph must contain a disease with symptom_of in-edges and treated_by out-edges"
        )
    rng = random.Random(rng_seed)
    out = []
    for si in range(sessions):
        d, syms, meds = diseases[rng.randrange(len(diseases))]
        name = kg.entity_names
        sym_order = list(syms)
        rng.shuffle(sym_order)
        chief = name[sym_order[0]]
        mentioned = [chief]

        turns: list[Turn] = []
        states: list[StateLabel] = []
        actions: list[ActionLabel] = []
        asked: str | None = None
        for ti, phase in enumerate(_phases(turns_per_session)):
            if ti == 0:
                u = ["hello", "doctor", "i", "have", chief]
                for s in sym_order[1:]:
                    if rng.random() < symptom_rate:
                        u += ["and", name[s]]
                        mentioned.append(name[s])
            elif asked is not None:
                if rng.random() < symptom_rate:
                    u = ["yes", "i", "also", "have", asked]
                    if asked not in mentioned:
                        mentioned.append(asked)
                else:
                    u = ["no", "i", "do", "not", "think", "so"]
                asked = None
            elif phase == "prescribe_medicine":
                u = ["what", "should", "i", "take", "?"]
            else:
                u = ["thank", "you", "doctor"]

            if phase == "ask_symptoms":
                fresh = [name[s] for s in sym_order if name[s] not in mentioned]
                asked = fresh[0] if fresh else name[sym_order[-1]]
                r = ["do", "you", "also", "have", asked, "?"]
                keywords = [asked]
            elif phase == "diagnosis":
                r = ["you", "may", "have", name[d]]
                keywords = [name[d]]
            elif phase == "prescribe_medicine":
                med = name[meds[rng.randrange(len(meds))]]
                r = ["please", "take", med]
                keywords = [med]
            else:
                r = ["you", "are", "welcome"]
                keywords = []
            turns.append(Turn(tuple(u), tuple(r)))
            states.append(StateLabel(tuple(mentioned)))
            actions.append(ActionLabel(phase, tuple(keywords)))
        out.append(
            DialogueSession(f"synth-{rng_seed}-{si}", tuple(turns), tuple(states), tuple(actions))
        )
    return out
