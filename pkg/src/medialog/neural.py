"""Differentiable building blocks on top of torch.

Everything decoder-adjacent is batch-first: a leading B dimension carries
either real batch rows, beam hypotheses, or enumeration candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .kgstore import LocalSubgraph


@dataclass
class SequenceEncoding:
    per_token: torch.Tensor  # (L, H)
    summary: torch.Tensor  # (H,)


class Embedder(nn.Module):
    """Shared token embedding table; PAD (id 0) embeds to the zero vector."""

    def __init__(self, vocab_size: int, width: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, width, padding_idx=0)

    def forward(self, ids) -> torch.Tensor:
        if not torch.is_tensor(ids):
            ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.table.num_embeddings):
            raise IndexError("token id out of vocabulary range")
        return self.table(ids)


class AdditiveAttention(nn.Module):
    def __init__(self, query_width: int, key_width: int, hidden: int):
        super().__init__()
        self.q_proj = nn.Linear(query_width, hidden)
        self.k_proj = nn.Linear(key_width, hidden, bias=False)
        self.score = nn.Linear(hidden, 1, bias=False)

    def bind(self, keys: torch.Tensor) -> "BoundAttention":
        """Precompute key projections; keys is (B, L, K) or (L, K)."""
        if keys.dim() == 2:
            keys = keys.unsqueeze(0)
        return BoundAttention(self, keys, self.k_proj(keys))

    def forward(self, query: torch.Tensor, keys: torch.Tensor):
        """One-off attention: query (K_q,) against keys (L, K); returns ((K,), (L,))."""
        if keys.dim() != 2 or keys.shape[0] == 0:
            raise ValueError("keys must be a non-empty (L, K) matrix")
        bound = self.bind(keys)
        ctx, w = bound.query(query.unsqueeze(0))
        return ctx[0], w[0]


class BoundAttention:
    def __init__(self, att: AdditiveAttention, keys: torch.Tensor, pre: torch.Tensor):
        self.att = att
        self.keys = keys  # (B, L, K)
        self.pre = pre  # (B, L, hidden)

    def query(self, q: torch.Tensor):
        """q is (B, K_q); returns context (B, K) and weights (B, L)."""
        keys, pre = self.keys, self.pre
        if keys.shape[0] == 1 and q.shape[0] > 1:
            keys = keys.expand(q.shape[0], -1, -1)
            pre = pre.expand(q.shape[0], -1, -1)
        scores = self.att.score(torch.tanh(self.att.q_proj(q).unsqueeze(1) + pre))
        weights = torch.softmax(scores.squeeze(-1), dim=-1)
        context = torch.bmm(weights.unsqueeze(1), keys).squeeze(1)
        return context, weights


class BiRecurrentEncoder(nn.Module):
    """Bidirectional GRU over one sequence, summary by attentive read.

    The summary is the attention context obtained when the final hidden
    state queries the per-token matrix.
    """

    def __init__(self, embed_width: int, hidden_width: int):
        super().__init__()
        if hidden_width % 2:
            raise ValueError("hidden_width must be even")
        self.hidden_width = hidden_width
        self.rnn = nn.GRU(embed_width, hidden_width // 2, bidirectional=True)
        self.init_proj = nn.Linear(hidden_width, hidden_width)
        self.read = AdditiveAttention(hidden_width, hidden_width, hidden_width)

    def forward(self, embeddings: torch.Tensor, initial_summary: torch.Tensor) -> SequenceEncoding:
        if embeddings.dim() != 2 or embeddings.shape[0] == 0:
            raise ValueError("cannot encode an empty sequence")
        h0 = self.init_proj(initial_summary).view(2, 1, self.hidden_width // 2)
        out, _ = self.rnn(embeddings.unsqueeze(1), h0)
        per_token = out.squeeze(1)
        summary, _ = self.read(per_token[-1], per_token)
        return SequenceEncoding(per_token, summary)


class RecurrentEncoder(nn.Module):
    """Unidirectional GRU; summary is the final hidden state."""

    def __init__(self, embed_width: int, hidden_width: int):
        super().__init__()
        self.hidden_width = hidden_width
        self.rnn = nn.GRU(embed_width, hidden_width)

    def forward(self, embeddings: torch.Tensor):
        """(L, E) -> per_token (L, H), final (H,). Batched: (B, L, E) -> ((B, L, H), (B, H))."""
        if embeddings.dim() == 2:
            if embeddings.shape[0] == 0:
                raise ValueError("cannot encode an empty sequence")
            out, h = self.rnn(embeddings.unsqueeze(1))
            return out.squeeze(1), h[0, 0]
        out, h = self.rnn(embeddings.transpose(0, 1))
        return out.transpose(0, 1), h[0]


class DecoderCell(nn.Module):
    def __init__(self, input_width: int, hidden_width: int):
        super().__init__()
        self.cell = nn.GRUCell(input_width, hidden_width)

    def forward(self, prev_hidden: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        squeeze = prev_hidden.dim() == 1
        if squeeze:
            prev_hidden, inputs = prev_hidden.unsqueeze(0), inputs.unsqueeze(0)
        out = self.cell(inputs, prev_hidden)
        return out[0] if squeeze else out


class Mlp(nn.Module):
    """One tanh hidden layer, then an affine map to logits."""

    def __init__(self, in_width: int, hidden: int, out_width: int):
        super().__init__()
        self.lin1 = nn.Linear(in_width, hidden)
        self.lin2 = nn.Linear(hidden, out_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(torch.tanh(self.lin1(x)))


class ConditionedMlp(nn.Module):
    """Mlp over [cond ; step] where cond is fixed across decode steps.

    bind() folds the conditioning into a precomputed term so each step costs
    one matmul per layer.
    """

    def __init__(self, cond_width: int, step_width: int, hidden: int, out_width: int):
        super().__init__()
        self.cond_proj = nn.Linear(cond_width, hidden)
        self.step_proj = nn.Linear(step_width, hidden, bias=False)
        self.lin2 = nn.Linear(hidden, out_width)

    def bind(self, cond: torch.Tensor):
        pre = self.cond_proj(cond)

        def step(b: torch.Tensor) -> torch.Tensor:
            return self.lin2(torch.tanh(pre + self.step_proj(b)))

        return step


def gumbel_softmax_sample(logits, temperature, hard, generator=None, validate=True):
    """Relaxed categorical sample along the last dim; optional straight-through.

    Returns (sample, argmax_indices). With hard=True the forward value is the
    exact one-hot of the perturbed argmax while gradients follow the relaxed
    sample; indices are returned in both modes.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if validate and not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    eps = torch.finfo(logits.dtype).tiny
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    gumbel = -torch.log((-torch.log(u.clamp_min(eps))).clamp_min(eps))
    soft = torch.softmax((logits + gumbel) / temperature, dim=-1)
    index = soft.argmax(dim=-1)
    if not hard:
        return soft, index
    one_hot = torch.zeros_like(soft).scatter_(-1, index.unsqueeze(-1), 1.0)
    return (one_hot - soft).detach() + soft, index


class RelationalGraphEncoder(nn.Module):
    """Relation-aware attention message passing over a local subgraph.

    Every node gets a self-loop edge; per propagation round, a node's incoming
    edges compete through a softmax whose scores use per-relation key/query
    projections. Rounds equal the subgraph's hop limit; the result is one row
    per node, in subgraph node order.
    """

    def __init__(self, embed_width: int, num_relations: int, hidden: int, out_width: int,
                 self_loop_relation: int):
        super().__init__()
        self.hidden = hidden
        self.self_loop_relation = self_loop_relation
        self.in_proj = nn.Linear(embed_width, hidden)
        self.rel_query = nn.Parameter(torch.empty(num_relations, hidden, hidden))
        self.rel_key = nn.Parameter(torch.empty(num_relations, hidden, hidden))
        nn.init.xavier_uniform_(self.rel_query)
        nn.init.xavier_uniform_(self.rel_key)
        self.value = nn.Linear(hidden, hidden, bias=False)
        self.out_proj = nn.Linear(hidden, out_width)

    def forward(self, subgraph: LocalSubgraph, entity_embeddings: torch.Tensor) -> torch.Tensor:
        n = len(subgraph.nodes)
        if n == 0:
            return entity_embeddings.new_zeros((0, self.out_proj.out_features))
        local = {eid: i for i, eid in enumerate(subgraph.nodes)}
        src = [local[h] for h, _r, t in subgraph.edges] + list(range(n))
        dst = [local[t] for h, _r, t in subgraph.edges] + list(range(n))
        rel = [r for _h, r, _t in subgraph.edges] + [self.self_loop_relation] * n
        device = entity_embeddings.device
        src_t = torch.as_tensor(src, dtype=torch.long, device=device)
        dst_t = torch.as_tensor(dst, dtype=torch.long, device=device)
        rel_t = torch.as_tensor(rel, dtype=torch.long, device=device)

        x = torch.tanh(self.in_proj(entity_embeddings))
        scale = float(self.hidden) ** 0.5
        for _ in range(subgraph.hop_limit):
            x = self._round(x, src_t, dst_t, rel_t, scale)
        return self.out_proj(x)

    def attention_weights(self, subgraph, entity_embeddings):
        """Incoming-edge attention of the first round (diagnostics/tests)."""
        n = len(subgraph.nodes)
        local = {eid: i for i, eid in enumerate(subgraph.nodes)}
        src = [local[h] for h, _r, t in subgraph.edges] + list(range(n))
        dst = [local[t] for h, _r, t in subgraph.edges] + list(range(n))
        rel = [r for _h, r, _t in subgraph.edges] + [self.self_loop_relation] * n
        x = torch.tanh(self.in_proj(entity_embeddings))
        src_t = torch.as_tensor(src, dtype=torch.long)
        dst_t = torch.as_tensor(dst, dtype=torch.long)
        rel_t = torch.as_tensor(rel, dtype=torch.long)
        alpha = self._edge_softmax(x, src_t, dst_t, rel_t, float(self.hidden) ** 0.5)
        return alpha, dst_t

    def _edge_softmax(self, x, src_t, dst_t, rel_t, scale):
        q = torch.einsum("eh,ehk->ek", x[dst_t], self.rel_query[rel_t])
        k = torch.einsum("eh,ehk->ek", x[src_t], self.rel_key[rel_t])
        scores = (q * k).sum(-1) / scale
        n = x.shape[0]
        mx = torch.full((n,), -torch.inf, dtype=x.dtype, device=x.device)
        mx = mx.index_reduce(0, dst_t, scores, "amax", include_self=True)
        ex = torch.exp(scores - mx[dst_t])
        z = torch.zeros(n, dtype=x.dtype, device=x.device).index_add(0, dst_t, ex)
        return ex / z[dst_t]

    def _round(self, x, src_t, dst_t, rel_t, scale):
        alpha = self._edge_softmax(x, src_t, dst_t, rel_t, scale)
        msg = self.value(x[src_t]) * alpha.unsqueeze(-1)
        agg = torch.zeros_like(x).index_add(0, dst_t, msg)
        return torch.tanh(agg)


def seeded_init_(module: nn.Module, generator: torch.Generator, std: float = 0.1) -> None:
    """Fill all parameters with seeded Gaussian noise; PAD embedding stays zero."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
        for m in module.modules():
            if isinstance(m, nn.Embedding) and m.padding_idx is not None:
                m.weight[m.padding_idx].zero_()
