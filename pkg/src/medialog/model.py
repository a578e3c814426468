"""The dialogue model: context encoder, state trackers, policy networks, generator.

Latent spans are decoded position by position over an extended support:
vocabulary columns, one copy column per source-sequence position, and (for
the prior policy) one column per local-subgraph entity. Rows are produced as
a single log-softmax over the concatenated logits, which realizes the shared
normalizer between generative and copy terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import torch
from torch import nn

from . import neural
from .corpus import ACTION_CATEGORIES, Vocabulary
from .kgstore import SELF_LOOP, KnowledgeGraph, LocalSubgraph, extract_subgraph, link_entities

PAD_ID, BOS_ID, EOS_ID, UNK_ID, NULL_ID = 0, 1, 2, 3, 4

SAMPLE_MODES = ("gumbel_st", "gumbel_soft", "greedy", "categorical")


class SupportError(RuntimeError):
    """A required token has zero probability under the model."""


@dataclass
class ModelConfig:
    vocab_size: int
    num_relations: int
    embed_width: int = 300
    hidden_width: int = 512
    graph_hidden: int = 128
    graph_out: int = 512
    state_span_len: int = 10
    action_span_len: int = 3
    hops: int = 2
    action_categories: int = 4
    beam_width: int = 5
    max_response_len: int = 30
    directed_hops: bool = False
    # ablation switches
    use_state: bool = True
    use_action: bool = True
    use_graph_detector: bool = True
    use_context_detector: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "embed_width", "hidden_width", "graph_hidden",
                     "graph_out", "state_span_len", "action_span_len",
                     "action_categories", "beam_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hops < 0:
            raise ValueError("hops must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SupportColumn:
    token_id: int
    kind: str  # "copy" | "graph"
    ref: int  # source position (copy) or entity id (graph)


@dataclass
class SpanDistribution:
    """Per-position categoricals over vocabulary + extra support columns."""

    log_rows: torch.Tensor  # (L, K)
    vocab_size: int
    columns: tuple[SupportColumn, ...]

    @property
    def extra_ids(self) -> torch.Tensor:
        return torch.as_tensor([c.token_id for c in self.columns], dtype=torch.long)

    def probs(self) -> torch.Tensor:
        return self.log_rows.exp()

    def folded(self) -> torch.Tensor:
        """(L, V) token-space probabilities; copy/graph mass folded onto tokens."""
        return fold_probs(self.log_rows, self.vocab_size, self.extra_ids)

    def token_prob(self, position: int, token_id: int) -> float:
        if not 0 <= token_id < self.vocab_size:
            return 0.0
        return float(self.folded()[position, token_id])

    def greedy_ids(self) -> list[int]:
        return self.folded().argmax(dim=-1).tolist()

    def graph_weight(self, position: int, entity_id: int) -> float:
        p = self.log_rows.exp()
        total = 0.0
        for j, col in enumerate(self.columns):
            if col.kind == "graph" and col.ref == entity_id:
                total += float(p[position, self.vocab_size + j])
        return total


def fold_probs(log_rows: torch.Tensor, vocab_size: int, extra_ids: torch.Tensor) -> torch.Tensor:
    p = log_rows.exp()
    out = p[..., :vocab_size].clone()
    if extra_ids.numel():
        out.index_add_(-1, extra_ids, p[..., vocab_size:])
    return out


def folded_log_prob(log_rows: torch.Tensor, extra_ids: torch.Tensor,
                    vocab_size: int, targets: torch.Tensor) -> torch.Tensor:
    """log P(token) with copy columns folded in, by masked logsumexp.

    log_rows (B, K), extra_ids (B, C) or (C,), targets (B,) -> (B,).
    """
    B, K = log_rows.shape
    if extra_ids.dim() == 1:
        extra_ids = extra_ids.unsqueeze(0).expand(B, -1)
    mask = torch.zeros(B, K, dtype=torch.bool, device=log_rows.device)
    mask.scatter_(1, targets.unsqueeze(1), True)
    if extra_ids.numel():
        mask[:, vocab_size:] = extra_ids == targets.unsqueeze(1)
    neg = torch.finfo(log_rows.dtype).min
    return log_rows.masked_fill(~mask, neg).logsumexp(dim=-1)


@dataclass
class SpanSample:
    token_ids: list[int]
    embeddings: torch.Tensor  # (L, E), carries the gradient path
    relaxed: torch.Tensor | None = None  # (L, K) over the distribution support
    # per-turn encoder caches (samples are immutable once drawn)
    state_enc: tuple | None = field(default=None, repr=False, compare=False)
    action_enc: tuple | None = field(default=None, repr=False, compare=False)


@dataclass
class CategorySample:
    index: int
    embedding: torch.Tensor  # (E,)
    relaxed: torch.Tensor | None = None  # (C,)


@dataclass
class TurnContext:
    r_prev_ids: list[int]
    u_ids: list[int]
    per_token: torch.Tensor  # (Lr+Lu, H)
    summary: torch.Tensor  # (H,), this turn's h^c
    prev_state: SpanSample
    prev_state_mat: torch.Tensor  # (|S|, H)
    prev_state_final: torch.Tensor  # (H,)

    @property
    def context_ids(self) -> list[int]:
        return self.r_prev_ids + self.u_ids


@dataclass
class ResponseEncoding:
    ids: list[int]
    mat: torch.Tensor  # (L, H)
    final: torch.Tensor  # (H,)


class KgBinding:
    """Pairs a knowledge graph with a vocabulary for model-side graph ops."""

    def __init__(self, kg: KnowledgeGraph, vocab: Vocabulary):
        self.kg = kg
        self.vocab = vocab
        self.entity_token_ids = [vocab.id_of(name) for name in kg.entity_names]

    def link_token_ids(self, token_ids: Sequence[int]) -> set[int]:
        tokens = [self.vocab.token(i) for i in token_ids]
        return link_entities(tokens, self.kg)

    def subgraph_for_state(self, token_ids: Sequence[int], hops: int,
                           directed_hops: bool = False) -> LocalSubgraph:
        seeds = self.link_token_ids(token_ids)
        return extract_subgraph(self.kg, seeds, hops, directed_hops=directed_hops)


@dataclass
class ReasoningPath:
    keyword: int  # vocab token id of the predicted keyword
    entity_id: int
    entity_name: str
    weight: float
    steps: list[tuple[str, str, str]]  # (node, relation, node) hops from a seed

    def render(self, arrow: str = "▸") -> str:
        if not self.steps:
            return f"{self.entity_name} ({self.weight:.2f})"
        parts = [self.steps[0][0]]
        for _h, r, t in self.steps:
            parts += [r, t]
        return f" {arrow} ".join(parts) + f" ({self.weight:.2f})"


@dataclass
class TurnInference:
    state_ids: list[int]
    category: int
    keyword_ids: list[int]
    response_ids: list[int]
    trace: list[ReasoningPath]
    subgraph: LocalSubgraph
    carried_summary: torch.Tensor
    carried_state: SpanSample


class _SpanDecoderBind:
    """Everything needed to advance one span decoder, batched over B rows."""

    def __init__(self, model, cell, init_hidden, logits_fn, vocab_size, columns,
                 extra_ids):
        self.model = model
        self.cell = cell
        self.init_hidden = init_hidden  # (B, H)
        self.logits_fn = logits_fn  # (B, H) -> (B, K)
        self.vocab_size = vocab_size
        self.columns = columns
        self.extra_ids = extra_ids  # (C,) or (B, C)
        self._feed_table = None
        self._ids_ext = None

    def ids_ext(self) -> torch.Tensor:
        """(K,) vocab token id of every support column."""
        if self._ids_ext is None:
            self._ids_ext = torch.cat([
                torch.arange(self.vocab_size),
                torch.as_tensor([c.token_id for c in self.columns], dtype=torch.long),
            ])
        return self._ids_ext

    def feed_table(self) -> torch.Tensor:
        """(K, E) embedding of every support column's token identity."""
        if self._feed_table is None:
            self._feed_table = self.model.embedder(self.ids_ext())
        return self._feed_table


class DialogueModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        E, H = config.embed_width, config.hidden_width
        V, C = config.vocab_size, config.action_categories

        self.embedder = neural.Embedder(V, E)
        self.category_embed = nn.Embedding(C, E)

        self.context_encoder = neural.BiRecurrentEncoder(E, H)
        self.state_encoder = neural.RecurrentEncoder(E, H)
        self.action_encoder = neural.RecurrentEncoder(E, H)
        self.response_encoder = neural.RecurrentEncoder(E, H)

        self.graph_encoder = neural.RelationalGraphEncoder(
            E, config.num_relations, config.graph_hidden, config.graph_out,
            self_loop_relation=1,  # SELF_LOOP is always relation id 1
        )

        # state trackers
        self.prior_state_init = nn.Linear(2 * H, H)
        self.prior_state_cell = neural.DecoderCell(E, H)
        self.prior_state_mlp = neural.Mlp(H, H, V)
        self.posterior_state_init = nn.Linear(3 * H, H)
        self.posterior_state_cell = neural.DecoderCell(E, H)
        self.posterior_state_mlp = neural.Mlp(H, H, V)

        # policy networks
        self.graph_attention = neural.AdditiveAttention(H, config.graph_out, H)
        self.prior_category_head = nn.Linear(2 * H + config.graph_out, C)
        self.posterior_category_head = nn.Linear(3 * H, C)
        self.prior_kw_init = nn.Linear(2 * H + E, H)
        self.prior_kw_cell = neural.DecoderCell(E, H)
        self.prior_kw_mlp = neural.ConditionedMlp(2 * H, H, H, V)
        self.graph_score_cond = nn.Linear(H, 1)  # h^c part of the graph detector
        self.graph_score_step = nn.Linear(H, 1, bias=False)
        self.graph_score_node = nn.Linear(config.graph_out, 1, bias=False)
        self.posterior_kw_init = nn.Linear(3 * H + E, H)
        self.posterior_kw_cell = neural.DecoderCell(E, H)
        self.posterior_kw_mlp = neural.ConditionedMlp(2 * H, H, H, V)

        # response generator
        self.response_init = nn.Linear(3 * H + E, H)
        self.response_cell = neural.DecoderCell(3 * H + E, H)
        self.response_mlp = neural.Mlp(H, H, V)
        self.read_context = neural.AdditiveAttention(H, H, H)
        self.read_state = neural.AdditiveAttention(H, H, H)
        self.read_action = neural.AdditiveAttention(H, H, H)

        self.call_counts: dict[str, int] = {}

    # -- small helpers -------------------------------------------------------

    def _count(self, name: str) -> None:
        self.call_counts[name] = self.call_counts.get(name, 0) + 1

    def reset_call_counts(self) -> None:
        self.call_counts = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.embedder.table.weight.dtype

    def zeros_summary(self) -> torch.Tensor:
        return torch.zeros(self.config.hidden_width, dtype=self.dtype)

    def initial_state_sample(self) -> SpanSample:
        ids = [NULL_ID] * self.config.state_span_len
        return SpanSample(ids, self.embedder(ids))

    def null_action_sample(self) -> tuple[CategorySample, SpanSample]:
        ids = [NULL_ID] * self.config.action_span_len
        cat = len(ACTION_CATEGORIES) - 1 if self.config.action_categories == len(ACTION_CATEGORIES) else 0
        cat_emb = self.category_embed(torch.as_tensor(cat))
        return CategorySample(cat, cat_emb), SpanSample(ids, self.embedder(ids))

    def exact_sample(self, token_ids: Sequence[int]) -> SpanSample:
        ids = list(token_ids)
        return SpanSample(ids, self.embedder(ids))

    def encode_state_sample(self, sample: SpanSample):
        if sample.state_enc is None:
            sample.state_enc = self.state_encoder(sample.embeddings)
        return sample.state_enc

    def encode_action_sample(self, sample: SpanSample):
        if sample.action_enc is None:
            sample.action_enc = self.action_encoder(sample.embeddings)
        return sample.action_enc

    # -- context ---------------------------------------------------------------

    def context_encode(self, r_prev_ids: Sequence[int], u_ids: Sequence[int],
                       carried_summary: torch.Tensor | None,
                       prev_state: SpanSample | None) -> TurnContext:
        """Encode [R_{t-1}; U_t] initialized from the carried summary."""
        self._count("context_encode")
        if not u_ids:
            raise ValueError("patient utterance must be non-empty")
        r_prev = list(r_prev_ids) if r_prev_ids else [BOS_ID]
        if carried_summary is None:
            carried_summary = self.zeros_summary()
        if prev_state is None:
            prev_state = self.initial_state_sample()
        ids = r_prev + list(u_ids)
        enc = self.context_encoder(self.embedder(ids), carried_summary)
        mat, final = self.encode_state_sample(prev_state)
        return TurnContext(
            r_prev_ids=r_prev, u_ids=list(u_ids), per_token=enc.per_token,
            summary=enc.summary, prev_state=prev_state,
            prev_state_mat=mat, prev_state_final=final,
        )

    def encode_response(self, r_ids: Sequence[int]) -> ResponseEncoding:
        if not r_ids:
            raise ValueError("response must be non-empty")
        mat, final = self.response_encoder(self.embedder(list(r_ids)))
        return ResponseEncoding(list(r_ids), mat, final)

    # -- span decoding core ------------------------------------------------------

    def _run_decoder(self, bind: _SpanDecoderBind, length: int, *, feed: str,
                     mode: str = "greedy", tau: float = 1.0,
                     generator: torch.Generator | None = None,
                     forced_ids: torch.Tensor | None = None,
                     forced_emb: torch.Tensor | None = None):
        """Advance a bound decoder for `length` steps.

        feed="sample": next input is the sampled token's (relaxed) embedding.
        feed="forced": teacher-forced on forced_ids (B, length); forced_emb
        (B, length, E) optionally substitutes the embeddings so a gradient
        path through an upstream sample is preserved.
        Returns (log_rows (B, length, K), token_ids (B, length), relaxed or None).
        """
        B = bind.init_hidden.shape[0]
        h = bind.init_hidden
        prev = self.embedder(torch.full((B,), BOS_ID, dtype=torch.long))
        rows, ids_out, relaxed_out = [], [], []
        table = None
        for i in range(length):
            h = bind.cell(h, prev)
            log_row = torch.log_softmax(bind.logits_fn(h), dim=-1)
            rows.append(log_row)
            if feed == "forced":
                step_ids = forced_ids[:, i]
                prev = forced_emb[:, i] if forced_emb is not None else self.embedder(step_ids)
                ids_out.append(step_ids)
            else:
                if table is None:
                    table = bind.feed_table()
                step_ids, prev, relaxed = self._sample_step(bind, log_row, table, mode, tau, generator)
                ids_out.append(step_ids)
                if relaxed is not None:
                    relaxed_out.append(relaxed)
        log_rows = torch.stack(rows, dim=1)
        token_ids = torch.stack(ids_out, dim=1)
        relaxed = torch.stack(relaxed_out, dim=1) if relaxed_out else None
        return log_rows, token_ids, relaxed

    def _sample_step(self, bind, log_row, table, mode, tau, generator):
        """One per-position draw; returns (token ids (B,), feed embedding, relaxed)."""
        if mode in ("gumbel_st", "gumbel_soft"):
            relaxed, col_idx = neural.gumbel_softmax_sample(
                log_row, tau, hard=(mode == "gumbel_st"), generator=generator,
                validate=False,
            )
            emb = relaxed @ table
            token_ids = self._collapse_columns(bind, col_idx)
            return token_ids, emb, relaxed
        folded = fold_probs(log_row, bind.vocab_size, self._extra_ids_tensor(bind))
        if mode == "greedy":
            token_ids = folded.argmax(dim=-1)
        elif mode == "categorical":
            token_ids = torch.multinomial(folded, 1, generator=generator).squeeze(1)
        else:
            raise ValueError(f"unknown sample mode: {mode!r}")
        return token_ids, self.embedder(token_ids), None

    @staticmethod
    def _extra_ids_tensor(bind) -> torch.Tensor:
        ids = bind.extra_ids
        return ids if torch.is_tensor(ids) else torch.as_tensor(ids, dtype=torch.long)

    @staticmethod
    def _collapse_columns(bind, col_idx: torch.Tensor) -> torch.Tensor:
        return bind.ids_ext()[col_idx]

    def sample_span(self, dist: SpanDistribution, mode: str, tau: float = 1.0,
                    generator: torch.Generator | None = None) -> SpanSample:
        """Per-position independent draw from an already-built distribution."""
        if mode not in SAMPLE_MODES:
            raise ValueError(f"unknown sample mode: {mode!r}")
        ids_ext = torch.cat([
            torch.arange(dist.vocab_size), dist.extra_ids,
        ])
        table = self.embedder(ids_ext)
        if mode in ("gumbel_st", "gumbel_soft"):
            relaxed, col_idx = neural.gumbel_softmax_sample(
                dist.log_rows, tau, hard=(mode == "gumbel_st"), generator=generator
            )
            return SpanSample(ids_ext[col_idx].tolist(), relaxed @ table, relaxed)
        folded = dist.folded()
        if mode == "greedy":
            token_ids = folded.argmax(dim=-1)
        else:
            token_ids = torch.multinomial(folded, 1, generator=generator).squeeze(1)
        return SpanSample(token_ids.tolist(), self.embedder(token_ids), None)

    # -- state trackers ------------------------------------------------------------

    def _state_bind(self, ctx: TurnContext, which: str,
                    r_enc: ResponseEncoding | None, batch: int) -> _SpanDecoderBind:
        H = self.config.hidden_width
        keys = [ctx.per_token, ctx.prev_state_mat]
        ids = ctx.context_ids + list(ctx.prev_state.token_ids)
        if which == "prior":
            init = self.prior_state_init(torch.cat([ctx.summary, ctx.prev_state_final]))
            cell, mlp = self.prior_state_cell, self.prior_state_mlp
        else:
            init = self.posterior_state_init(
                torch.cat([ctx.summary, ctx.prev_state_final, r_enc.final])
            )
            cell, mlp = self.posterior_state_cell, self.posterior_state_mlp
            keys.append(r_enc.mat)
            ids = ids + list(r_enc.ids)
        key_mat = torch.cat(keys, dim=0)  # (C, H)
        columns = tuple(SupportColumn(t, "copy", j) for j, t in enumerate(ids))
        extra_ids = torch.as_tensor(ids, dtype=torch.long)

        def logits(b: torch.Tensor) -> torch.Tensor:
            return torch.cat([mlp(b), b @ key_mat.T], dim=-1)

        return _SpanDecoderBind(self, cell, init.unsqueeze(0).expand(batch, H),
                                logits, self.config.vocab_size, columns, extra_ids)

    def prior_state(self, ctx: TurnContext, *, mode: str = "greedy", tau: float = 1.0,
                    generator=None, forced_ids: Sequence[int] | None = None,
                    forced_emb: torch.Tensor | None = None):
        """Length-|S| mixed generate+copy rows; copy sources R_{t-1}, U_t, prev state."""
        self._count("prior_state")
        return self._run_state(ctx, "prior", None, mode, tau, generator, forced_ids, forced_emb)

    def posterior_state(self, ctx: TurnContext, r_enc: ResponseEncoding, *,
                        mode: str = "greedy", tau: float = 1.0, generator=None,
                        forced_ids: Sequence[int] | None = None,
                        forced_emb: torch.Tensor | None = None):
        """As prior_state, additionally conditioned on (and copying from) R_t."""
        self._count("posterior_state")
        return self._run_state(ctx, "posterior", r_enc, mode, tau, generator, forced_ids, forced_emb)

    def _run_state(self, ctx, which, r_enc, mode, tau, generator, forced_ids, forced_emb):
        bind = self._state_bind(ctx, which, r_enc, batch=1)
        L = self.config.state_span_len
        if forced_ids is not None:
            fi = torch.as_tensor(forced_ids, dtype=torch.long).unsqueeze(0)
            fe = forced_emb.unsqueeze(0) if forced_emb is not None else None
            log_rows, ids, relaxed = self._run_decoder(bind, L, feed="forced", forced_ids=fi, forced_emb=fe)
        else:
            log_rows, ids, relaxed = self._run_decoder(
                bind, L, feed="sample", mode=mode, tau=tau, generator=generator
            )
        dist = SpanDistribution(log_rows[0], self.config.vocab_size, bind.columns)
        table = bind.feed_table()
        if relaxed is not None:
            sample = SpanSample(ids[0].tolist(), relaxed[0] @ table, relaxed[0])
        else:
            sample = SpanSample(ids[0].tolist(), self.embedder(ids[0]))
        return dist, sample

    # -- policy networks -----------------------------------------------------------

    def encode_subgraph(self, subgraph: LocalSubgraph, binding: KgBinding) -> torch.Tensor:
        """(n, graph_out) node embeddings in subgraph node order."""
        if subgraph.is_empty or not self.config.use_graph_detector:
            return torch.zeros((0, self.config.graph_out), dtype=self.dtype)
        ent_ids = torch.as_tensor(
            [binding.entity_token_ids[e] for e in subgraph.nodes], dtype=torch.long
        )
        return self.graph_encoder(subgraph, self.embedder(ent_ids))

    def prior_category(self, ctx: TurnContext, state_final: torch.Tensor,
                       node_emb: torch.Tensor) -> torch.Tensor:
        """(C,) log-probs from [h^S ; h^c ; graph attention read]. Batches on (B, H)."""
        self._count("prior_category")
        squeeze = state_final.dim() == 1
        sf = state_final.unsqueeze(0) if squeeze else state_final
        B = sf.shape[0]
        if node_emb.shape[0]:
            q_t, _ = self.graph_attention(ctx.summary, node_emb)
        else:
            q_t = torch.zeros(self.config.graph_out, dtype=self.dtype)
        h_c = ctx.summary.unsqueeze(0).expand(B, -1)
        logits = self.prior_category_head(
            torch.cat([sf, h_c, q_t.unsqueeze(0).expand(B, -1)], dim=-1)
        )
        out = torch.log_softmax(logits, dim=-1)
        return out[0] if squeeze else out

    def posterior_category(self, ctx: TurnContext, state_final: torch.Tensor,
                           r_enc: ResponseEncoding) -> torch.Tensor:
        self._count("posterior_category")
        squeeze = state_final.dim() == 1
        sf = state_final.unsqueeze(0) if squeeze else state_final
        B = sf.shape[0]
        logits = self.posterior_category_head(torch.cat([
            ctx.summary.unsqueeze(0).expand(B, -1), sf,
            r_enc.final.unsqueeze(0).expand(B, -1),
        ], dim=-1))
        out = torch.log_softmax(logits, dim=-1)
        return out[0] if squeeze else out

    def sample_category(self, log_probs: torch.Tensor, *, mode: str = "greedy",
                        tau: float = 1.0, generator=None,
                        forced: int | None = None) -> CategorySample:
        if forced is not None:
            return CategorySample(forced, self.category_embed(torch.as_tensor(forced)))
        if mode in ("gumbel_st", "gumbel_soft"):
            relaxed, idx = neural.gumbel_softmax_sample(
                log_probs, tau, hard=(mode == "gumbel_st"), generator=generator
            )
            emb = relaxed @ self.category_embed.weight
            return CategorySample(int(idx), emb, relaxed)
        if mode == "greedy":
            idx = int(log_probs.argmax())
        else:
            idx = int(torch.multinomial(log_probs.exp(), 1, generator=generator))
        return CategorySample(idx, self.category_embed(torch.as_tensor(idx)))

    def _prior_kw_bind(self, ctx, state_final, cat_emb, subgraph, node_emb, binding,
                       batch: int) -> _SpanDecoderBind:
        if state_final.dim() == 1:
            state_final = state_final.unsqueeze(0).expand(batch, -1)
            cat_emb = cat_emb.unsqueeze(0).expand(batch, -1)
        h_c = ctx.summary.unsqueeze(0).expand(batch, -1)
        cond = torch.cat([state_final, h_c], dim=-1)
        init = self.prior_kw_init(torch.cat([cond, cat_emb], dim=-1))
        mlp_step = self.prior_kw_mlp.bind(cond)
        use_ctx = self.config.use_context_detector
        if node_emb.shape[0]:
            g_fixed = (
                self.graph_score_node(node_emb).squeeze(-1)
                + self.graph_score_cond(ctx.summary)
            )
            columns = tuple(
                SupportColumn(binding.entity_token_ids[e], "graph", e)
                for e in subgraph.nodes
            )
        else:
            g_fixed, columns = None, ()
        extra_ids = torch.as_tensor([c.token_id for c in columns], dtype=torch.long)

        def logits(b: torch.Tensor) -> torch.Tensor:
            gen = mlp_step(b)
            if not use_ctx:
                gen = torch.zeros_like(gen)
            if g_fixed is None:
                return gen
            graph = g_fixed.unsqueeze(0) + self.graph_score_step(b)
            return torch.cat([gen, graph], dim=-1)

        return _SpanDecoderBind(self, self.prior_kw_cell, init,
                                logits, self.config.vocab_size, columns, extra_ids)

    def prior_action(self, ctx: TurnContext, state_sample: SpanSample,
                     subgraph: LocalSubgraph, node_emb: torch.Tensor,
                     binding: KgBinding, *, mode: str = "greedy", tau: float = 1.0,
                     generator=None, forced_category: int | None = None,
                     forced_kw_ids: Sequence[int] | None = None,
                     forced_kw_emb: torch.Tensor | None = None,
                     forced_cat_emb: torch.Tensor | None = None):
        """Category distribution + keyword rows mixing context and graph detectors."""
        self._count("prior_action")
        _mat, state_final = self.encode_state_sample(state_sample)
        cat_log = self.prior_category(ctx, state_final, node_emb)
        if forced_category is not None:
            cat = CategorySample(
                forced_category,
                forced_cat_emb if forced_cat_emb is not None
                else self.category_embed(torch.as_tensor(forced_category)),
            )
        else:
            cat = self.sample_category(cat_log, mode=mode, tau=tau, generator=generator)
        bind = self._prior_kw_bind(ctx, state_final, cat.embedding, subgraph, node_emb,
                                   binding, batch=1)
        L = self.config.action_span_len
        if forced_kw_ids is not None:
            fi = torch.as_tensor(forced_kw_ids, dtype=torch.long).unsqueeze(0)
            fe = forced_kw_emb.unsqueeze(0) if forced_kw_emb is not None else None
            log_rows, ids, relaxed = self._run_decoder(bind, L, feed="forced", forced_ids=fi, forced_emb=fe)
        else:
            log_rows, ids, relaxed = self._run_decoder(
                bind, L, feed="sample", mode=mode, tau=tau, generator=generator
            )
        dist = SpanDistribution(log_rows[0], self.config.vocab_size, bind.columns)
        if relaxed is not None:
            sample = SpanSample(ids[0].tolist(), relaxed[0] @ bind.feed_table(), relaxed[0])
        else:
            sample = SpanSample(ids[0].tolist(), self.embedder(ids[0]))
        return cat_log, cat, dist, sample

    def _posterior_kw_bind(self, ctx, state_final, cat_emb, r_enc, batch: int) -> _SpanDecoderBind:
        if state_final.dim() == 1:
            state_final = state_final.unsqueeze(0).expand(batch, -1)
            cat_emb = cat_emb.unsqueeze(0).expand(batch, -1)
        h_c = ctx.summary.unsqueeze(0).expand(batch, -1)
        r_final = r_enc.final.unsqueeze(0).expand(batch, -1)
        cond = torch.cat([h_c, state_final], dim=-1)
        init = self.posterior_kw_init(torch.cat([cond, cat_emb, r_final], dim=-1))
        mlp_step = self.posterior_kw_mlp.bind(cond)
        columns = tuple(SupportColumn(t, "copy", j) for j, t in enumerate(r_enc.ids))
        extra_ids = torch.as_tensor(r_enc.ids, dtype=torch.long)
        key_mat = r_enc.mat

        def logits(b: torch.Tensor) -> torch.Tensor:
            return torch.cat([mlp_step(b), b @ key_mat.T], dim=-1)

        return _SpanDecoderBind(self, self.posterior_kw_cell, init,
                                logits, self.config.vocab_size, columns, extra_ids)

    def posterior_action(self, ctx: TurnContext, state_sample: SpanSample,
                         r_enc: ResponseEncoding, *, mode: str = "greedy",
                         tau: float = 1.0, generator=None,
                         forced_category: int | None = None,
                         forced_kw_ids: Sequence[int] | None = None):
        """Context-detector-only rows copying from R_t; never any graph column."""
        self._count("posterior_action")
        _mat, state_final = self.encode_state_sample(state_sample)
        cat_log = self.posterior_category(ctx, state_final, r_enc)
        if forced_category is not None:
            cat = CategorySample(forced_category, self.category_embed(torch.as_tensor(forced_category)))
        else:
            cat = self.sample_category(cat_log, mode=mode, tau=tau, generator=generator)
        bind = self._posterior_kw_bind(ctx, state_final, cat.embedding, r_enc, batch=1)
        L = self.config.action_span_len
        if forced_kw_ids is not None:
            fi = torch.as_tensor(forced_kw_ids, dtype=torch.long).unsqueeze(0)
            log_rows, ids, relaxed = self._run_decoder(bind, L, feed="forced", forced_ids=fi)
        else:
            log_rows, ids, relaxed = self._run_decoder(
                bind, L, feed="sample", mode=mode, tau=tau, generator=generator
            )
        dist = SpanDistribution(log_rows[0], self.config.vocab_size, bind.columns)
        if relaxed is not None:
            sample = SpanSample(ids[0].tolist(), relaxed[0] @ bind.feed_table(), relaxed[0])
        else:
            sample = SpanSample(ids[0].tolist(), self.embedder(ids[0]))
        return cat_log, cat, dist, sample

    # -- response generator ----------------------------------------------------------

    class _ResponseBind:
        def __init__(self, model, init_hidden, read_ctx, read_state, read_action,
                     copy_keys, columns, extra_ids):
            self.model = model
            self.init_hidden = init_hidden  # (B, H)
            self.read_ctx = read_ctx
            self.read_state = read_state
            self.read_action = read_action
            self.copy_keys = copy_keys  # (B, C, H)
            self.columns = columns
            self.extra_ids = extra_ids  # (B, C)
            self.vocab_size = model.config.vocab_size

        def step(self, hidden, prev_emb):
            """hidden (B, H), prev_emb (B, E) -> (hidden', log_rows (B, K))."""
            m = self.model
            b_h, _ = self.read_ctx.query(hidden)
            b_s, _ = self.read_state.query(hidden)
            b_a, _ = self.read_action.query(hidden)
            x = torch.cat([b_h, b_s, b_a, prev_emb], dim=-1)
            new_h = m.response_cell(hidden, x)
            gen = m.response_mlp(new_h)
            keys = self.copy_keys
            if keys.shape[0] == 1 and new_h.shape[0] > 1:
                keys = keys.expand(new_h.shape[0], -1, -1)
            copy = torch.bmm(keys, new_h.unsqueeze(-1)).squeeze(-1)
            return new_h, torch.log_softmax(torch.cat([gen, copy], dim=-1), dim=-1)

    def bind_response(self, ctx: TurnContext, state_sample, action_sample,
                      cat_emb: torch.Tensor):
        """Single-row response bind reusing the samples' cached encodings."""
        s_mat, s_final = self.encode_state_sample(state_sample)
        a_mat, a_final = self.encode_action_sample(action_sample)
        init = self.response_init(
            torch.cat([ctx.summary, s_final, cat_emb, a_final]).unsqueeze(0)
        )
        extra = ctx.context_ids + list(state_sample.token_ids) + list(action_sample.token_ids)
        columns = tuple(SupportColumn(int(t), "copy", j) for j, t in enumerate(extra))
        extra_ids = torch.as_tensor(extra, dtype=torch.long).unsqueeze(0)
        copy_keys = torch.cat([ctx.per_token, s_mat, a_mat], dim=0).unsqueeze(0)
        read_ctx = self.read_context.bind(ctx.per_token)
        read_state = self.read_state.bind(s_mat)
        read_action = self.read_action.bind(a_mat)
        return self._ResponseBind(self, init, read_ctx, read_state, read_action,
                                  copy_keys, columns, extra_ids)

    def bind_response_pair(self, ctx: TurnContext, pairs):
        """Batched response bind over [(state, action, cat_emb), ...] tuples."""
        s_emb = torch.stack([p[0].embeddings for p in pairs])
        s_ids = torch.as_tensor([p[0].token_ids for p in pairs], dtype=torch.long)
        a_emb = torch.stack([p[1].embeddings for p in pairs])
        a_ids = torch.as_tensor([p[1].token_ids for p in pairs], dtype=torch.long)
        cat_emb = torch.stack([p[2] for p in pairs])
        return self._bind_response_batch(ctx, s_emb, s_ids, a_emb, a_ids, cat_emb)

    def _bind_response_batch(self, ctx, s_emb, s_ids, a_emb, a_ids, cat_emb):
        """s_emb (B, |S|, E), a_emb (B, |A|, E), cat_emb (B, E)."""
        B = s_emb.shape[0]
        s_mat, s_final = self.state_encoder(s_emb)
        a_mat, a_final = self.action_encoder(a_emb)
        h_c = ctx.summary.unsqueeze(0).expand(B, -1)
        init = self.response_init(torch.cat([h_c, s_final, cat_emb, a_final], dim=-1))
        ctx_ids = torch.as_tensor(ctx.context_ids, dtype=torch.long)
        extra_ids = torch.cat([ctx_ids.unsqueeze(0).expand(B, -1), s_ids, a_ids], dim=1)
        columns = tuple(
            SupportColumn(int(t), "copy", j) for j, t in enumerate(extra_ids[0].tolist())
        )
        copy_keys = torch.cat(
            [ctx.per_token.unsqueeze(0).expand(B, -1, -1), s_mat, a_mat], dim=1
        )
        read_ctx = self.read_context.bind(ctx.per_token.unsqueeze(0).expand(B, -1, -1))
        read_state = self.read_state.bind(s_mat)
        read_action = self.read_action.bind(a_mat)
        return self._ResponseBind(self, init, read_ctx, read_state, read_action,
                                  copy_keys, columns, extra_ids)

    def response_log_prob(self, bind: "_ResponseBind", gold_ids: Sequence[int],
                          append_eos: bool = True) -> torch.Tensor:
        """(B,) teacher-forced sequence log-likelihood of gold_ids (+ EOS)."""
        targets = list(gold_ids) + ([EOS_ID] if append_eos else [])
        B = bind.init_hidden.shape[0]
        V = bind.vocab_size
        t_ids = torch.as_tensor(targets, dtype=torch.long)
        gen_mask = torch.nn.functional.one_hot(t_ids, V).to(torch.bool)  # (T, V)
        copy_mask = bind.extra_ids.unsqueeze(0) == t_ids.view(-1, 1, 1)  # (T, B, C)
        mask = torch.cat([gen_mask.unsqueeze(1).expand(-1, B, -1), copy_mask], dim=-1)
        neg = torch.finfo(self.dtype).min
        h = bind.init_hidden
        prev_emb = self.embedder(t_ids)  # (T, E), feeds steps 2..T
        prev = self.embedder(torch.full((B,), BOS_ID, dtype=torch.long))
        total = torch.zeros(B, dtype=self.dtype)
        for i in range(len(targets)):
            h, log_row = bind.step(h, prev)
            total = total + log_row.masked_fill(~mask[i], neg).logsumexp(dim=-1)
            prev = prev_emb[i].unsqueeze(0).expand(B, -1)
        return total

    def response_distribution(self, ctx: TurnContext, state_sample: SpanSample,
                              action_sample: SpanSample, cat_emb: torch.Tensor,
                              prefix_ids: Sequence[int]) -> SpanDistribution:
        """Next-token categorical after teacher-forcing `prefix_ids`."""
        self._count("response_distribution")
        bind = self.bind_response(ctx, state_sample, action_sample, cat_emb)
        h = bind.init_hidden
        prev = self.embedder(torch.as_tensor([BOS_ID]))
        log_row = None
        for tid in list(prefix_ids) + [None]:
            h, log_row = bind.step(h, prev)
            if tid is None:
                break
            prev = self.embedder(torch.as_tensor([tid]))
        return SpanDistribution(log_row, self.config.vocab_size, bind.columns)

    def beam_respond(self, ctx: TurnContext, state_sample: SpanSample,
                     action_sample: SpanSample, cat_emb: torch.Tensor, *,
                     beam: int | None = None, max_len: int | None = None) -> list[int]:
        """Length-normalized beam search over the response distribution."""
        self._count("beam_respond")
        beam = beam or self.config.beam_width
        max_len = max_len or self.config.max_response_len
        if beam < 1:
            raise ValueError("beam must be >= 1")
        bind = self.bind_response(ctx, state_sample, action_sample, cat_emb)
        step_fn = _BeamStepper(self, bind)
        return beam_search(step_fn, beam, max_len, EOS_ID)

    # -- test-time turn --------------------------------------------------------------

    def infer_turn(self, ctx: TurnContext, binding: KgBinding) -> TurnInference:
        """Prior-only greedy state/action plus beam response, with a reasoning trace."""
        self._count("infer_turn")
        cfg = self.config
        if cfg.use_state:
            _dist, state = self.prior_state(ctx, mode="greedy")
        else:
            state = self.initial_state_sample()
        subgraph = binding.subgraph_for_state(state.token_ids, cfg.hops, cfg.directed_hops) \
            if cfg.use_graph_detector else extract_subgraph(binding.kg, (), cfg.hops)
        node_emb = self.encode_subgraph(subgraph, binding)
        if cfg.use_action:
            _cat_log, cat, kw_dist, kw = self.prior_action(
                ctx, state, subgraph, node_emb, binding, mode="greedy"
            )
            trace = self._trace(kw_dist, kw, subgraph, binding)
        else:
            cat, kw = self.null_action_sample()
            trace = []
        response = self.beam_respond(ctx, state, kw, cat.embedding)
        carried = SpanSample(state.token_ids, state.embeddings.detach())
        return TurnInference(
            state_ids=state.token_ids, category=cat.index, keyword_ids=kw.token_ids,
            response_ids=response, trace=trace, subgraph=subgraph,
            carried_summary=ctx.summary.detach(), carried_state=carried,
        )

    def _trace(self, kw_dist: SpanDistribution, kw: SpanSample,
               subgraph: LocalSubgraph, binding: KgBinding) -> list[ReasoningPath]:
        if subgraph.is_empty:
            return []
        by_token: dict[int, int] = {}
        for col in kw_dist.columns:
            if col.kind == "graph":
                by_token[col.token_id] = col.ref
        out = []
        for pos, tid in enumerate(kw.token_ids):
            ent = by_token.get(tid)
            if ent is None:
                continue
            weight = kw_dist.graph_weight(pos, ent)
            steps = _best_path(subgraph, ent, binding.kg)
            if steps is not None:
                out.append(
                    ReasoningPath(tid, ent, binding.kg.entity_names[ent], weight, steps)
                )
        return out


class _BeamStepper:
    """Adapts a response bind to the generic beam_search step contract."""

    def __init__(self, model: DialogueModel, bind):
        self.model = model
        self.bind = bind

    def start(self, width: int):
        B = self.bind.init_hidden.shape[0]
        assert B == 1
        h = self.bind.init_hidden.expand(width, -1)
        prev = self.model.embedder(torch.full((width,), BOS_ID, dtype=torch.long))
        return h, prev

    def advance(self, state, token_ids: torch.Tensor):
        h, _prev = state
        prev = self.model.embedder(token_ids)
        return h, prev

    def log_probs(self, state):
        h, prev = state
        new_h, log_rows = self.bind.step(h, prev)
        extra = self.bind.extra_ids
        folded = fold_probs(log_rows, self.bind.vocab_size, extra[0])
        return (new_h, prev), folded.clamp_min(torch.finfo(folded.dtype).tiny).log()

    def reindex(self, state, order: torch.Tensor):
        h, prev = state
        return h[order], prev[order]


def beam_search(stepper, width: int, max_len: int, eos_id: int) -> list[int]:
    """Generic length-normalized beam search over a batched step function."""
    state = stepper.start(width)
    prefixes: list[list[int]] = [[] for _ in range(width)]
    scores = torch.full((width,), -torch.inf, dtype=torch.float64)
    scores[0] = 0.0
    finished: list[tuple[float, list[int]]] = []
    for _step in range(max_len):
        state, log_rows = stepper.log_probs(state)
        V = log_rows.shape[-1]
        cand = scores.unsqueeze(1) + log_rows.to(torch.float64)
        flat = cand.flatten()
        k = min(width, (flat > -torch.inf).sum().item())
        top_scores, top_idx = flat.topk(k)
        rows, cols = top_idx // V, top_idx % V
        new_prefixes, keep_rows, keep_tokens, new_scores = [], [], [], []
        for s, r, c in zip(top_scores.tolist(), rows.tolist(), cols.tolist()):
            seq = prefixes[r] + [c]
            if c == eos_id:
                finished.append((s / len(seq), seq))
            else:
                new_prefixes.append(seq)
                keep_rows.append(r)
                keep_tokens.append(c)
                new_scores.append(s)
        if not new_prefixes:
            break
        while len(new_prefixes) < width:
            new_prefixes.append(new_prefixes[0])
            keep_rows.append(keep_rows[0])
            keep_tokens.append(keep_tokens[0])
            new_scores.append(-torch.inf)
        order = torch.as_tensor(keep_rows, dtype=torch.long)
        state = stepper.reindex(state, order)
        state = stepper.advance(state, torch.as_tensor(keep_tokens, dtype=torch.long))
        prefixes = new_prefixes
        scores = torch.as_tensor(new_scores, dtype=torch.float64)
    if not finished:
        best = int(scores.argmax())
        return prefixes[best]
    finished.sort(key=lambda x: (-x[0], len(x[1]), x[1]))
    seq = finished[0][1]
    return seq[:-1] if seq and seq[-1] == eos_id else seq


def _best_path(subgraph: LocalSubgraph, target: int, kg: KnowledgeGraph):
    """Shortest seed-to-target walk over subgraph edges, as display triples."""
    if target in subgraph.seeds:
        return []
    adj: dict[int, list[tuple[int, int, bool]]] = {n: [] for n in subgraph.nodes}
    for h, r, t in subgraph.edges:
        adj[h].append((t, r, True))
        adj[t].append((h, r, False))
    from collections import deque

    prev: dict[int, tuple[int, int, bool]] = {}
    seen = set(subgraph.seeds)
    queue = deque(sorted(subgraph.seeds))
    while queue:
        u = queue.popleft()
        if u == target:
            break
        for v, r, fwd in adj.get(u, ()):
            if v not in seen:
                seen.add(v)
                prev[v] = (u, r, fwd)
                queue.append(v)
    if target not in prev:
        return None
    steps = []
    node = target
    while node not in subgraph.seeds:
        u, r, _fwd = prev[node]
        steps.append((kg.entity_names[u], kg.relation_names[r], kg.entity_names[node]))
        node = u
    steps.reverse()
    return steps
