import random

import pytest
import torch

from medialog import corpus, kgstore, neural, objective
from medialog.model import DialogueModel, KgBinding, ModelConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def demo_kg():
    trips = corpus.synth_triplets(0, n_diseases=3, symptoms_per_disease=3,
                                  medicines_per_disease=2)
    return kgstore.build_global_graph(trips)


@pytest.fixture(scope="session")
def demo_sessions(demo_kg):
    return corpus.synth_corpus(demo_kg, rng_seed=7, sessions=20, turns_per_session=3)


@pytest.fixture(scope="session")
def demo_vocab(demo_sessions, demo_kg):
    return corpus.build_vocab(demo_sessions, demo_kg, 500)


def small_model(vocab, kg, *, dtype=torch.float32, seed=0, **overrides):
    params = dict(
        vocab_size=len(vocab), num_relations=len(kg.relation_names),
        embed_width=16, hidden_width=24, graph_hidden=12, graph_out=16,
        state_span_len=4, action_span_len=2, hops=2, beam_width=3,
        max_response_len=8,
    )
    params.update(overrides)
    torch.manual_seed(seed)
    model = DialogueModel(ModelConfig(**params)).to(dtype)
    return model, KgBinding(kg, vocab)


@pytest.fixture()
def demo_model(demo_vocab, demo_kg):
    return small_model(demo_vocab, demo_kg)


def enumerable_setup(dtype=torch.float64, with_graph=False, seed=0):
    """vocab 6, |S|=2, |A|=1, 2 categories; optionally one linked entity."""
    vocab = corpus.Vocabulary(["flu"])
    if with_graph:
        trips = [kgstore.Triplet("flu", "treated_by", "<unk>",
                                 kgstore.EntityType.DISEASE, kgstore.EntityType.MEDICINE)]
        kg = kgstore.build_global_graph(trips)
    else:
        kg = kgstore.KnowledgeGraph()
    cfg = ModelConfig(
        vocab_size=len(vocab), num_relations=len(kg.relation_names),
        embed_width=8, hidden_width=12, graph_hidden=6, graph_out=8,
        state_span_len=2, action_span_len=1, hops=2, action_categories=2,
        beam_width=2, max_response_len=5,
    )
    torch.manual_seed(seed)
    model = DialogueModel(cfg).to(dtype)
    return model, KgBinding(kg, vocab)


def tiny_turn():
    return objective.TurnData(r_prev_ids=[], u_ids=[5, 5], r_ids=[5, 1, 5])


def make_turn_context(model, binding, u_tokens="hello doctor i have symptom0_0",
                      r_prev_tokens=""):
    vocab = binding.vocab
    u = vocab.encode(u_tokens.split())
    r_prev = vocab.encode(r_prev_tokens.split()) if r_prev_tokens else []
    return model.context_encode(r_prev, u, None, None)


def randomize(model, seed, std=0.3):
    gen = torch.Generator().manual_seed(seed)
    neural.seeded_init_(model, gen, std=std)
