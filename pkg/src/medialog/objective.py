"""Training objectives: joint ELBO, 2-stage collapsed bounds, supervised loss, oracle.

The Monte-Carlo path draws one sample per latent per turn and Rao-
Blackwellizes every KL per position (both sides of a KL are conditioned on
the same sampled prefix). The exact path enumerates the latent space on
enumerable configurations; it is the oracle the bound property is verified
against.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch

from .corpus import ACTION_CATEGORIES, DialogueSession, Vocabulary, fit_span
from .kgstore import extract_subgraph
from .model import (
    EOS_ID,
    DialogueModel,
    KgBinding,
    SpanDistribution,
    SupportError,
    TurnContext,
    fold_probs,
    folded_log_prob,
)


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    kl_state: torch.Tensor
    kl_action_category: torch.Tensor
    kl_action_keywords: torch.Tensor
    supervised: torch.Tensor
    total: torch.Tensor

    def item_dict(self) -> dict:
        return {
            "reconstruction": float(self.reconstruction.detach()),
            "kl_state": float(self.kl_state.detach()),
            "kl_action_category": float(self.kl_action_category.detach()),
            "kl_action_keywords": float(self.kl_action_keywords.detach()),
            "supervised": float(self.supervised.detach()),
            "total": float(self.total.detach()),
        }


# -- data prep ----------------------------------------------------------------


@dataclass
class TurnData:
    r_prev_ids: list[int]
    u_ids: list[int]
    r_ids: list[int]
    gold_state_ids: list[int] | None = None
    gold_kw_ids: list[int] | None = None
    gold_category: int | None = None


@dataclass
class SessionData:
    session_id: str
    turns: list[TurnData]
    labeled: bool = False


def prepare_session(session: DialogueSession, vocab: Vocabulary,
                    state_len: int, action_len: int) -> SessionData:
    """Encode a session to vocabulary ids, fitting gold spans to fixed lengths."""
    turns = []
    prev_r: list[int] = []
    for i, turn in enumerate(session.turns):
        td = TurnData(
            r_prev_ids=prev_r,
            u_ids=vocab.encode(turn.patient_utterance),
            r_ids=vocab.encode(turn.physician_response),
        )
        if session.is_labeled:
            td.gold_state_ids = vocab.encode(fit_span(session.state_labels[i].tokens, state_len))
            td.gold_kw_ids = vocab.encode(fit_span(session.action_labels[i].keywords, action_len))
            td.gold_category = ACTION_CATEGORIES.index(session.action_labels[i].category)
        turns.append(td)
        prev_r = td.r_ids
    return SessionData(session.session_id, turns, labeled=session.is_labeled)


# -- KL ------------------------------------------------------------------------


def _check_support(q: torch.Tensor, p: torch.Tensor) -> None:
    if bool(((q > 0) & (p <= 0)).any()):
        raise SupportError("q places mass where p has exactly zero probability")


def _kl_rows(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    _check_support(q, p)
    mask = q > 0
    q_safe = torch.where(mask, q, torch.ones_like(q))
    p_safe = torch.where(mask, p, torch.ones_like(p))
    return (q_safe * (q_safe.log() - p_safe.log())).masked_fill(~mask, 0.0).sum()


def kl_factorized(q, p) -> torch.Tensor:
    """KL(q || p) summed over positions, over token space (copy columns folded).

    Accepts a SpanDistribution pair or plain probability vectors/matrices.
    """
    if isinstance(q, SpanDistribution):
        return _kl_rows(q.folded(), p.folded())
    q_t = torch.as_tensor(q, dtype=torch.double) if not torch.is_tensor(q) else q
    p_t = torch.as_tensor(p, dtype=torch.double) if not torch.is_tensor(p) else p
    return _kl_rows(q_t, p_t)


def _kl_log(q_log: torch.Tensor, p_log: torch.Tensor) -> torch.Tensor:
    """KL between log-prob vectors (used for category distributions)."""
    q = q_log.exp()
    return (q * (q_log - p_log)).sum()


# -- span log-likelihood helpers -------------------------------------------------


def _span_log_prob(dist: SpanDistribution, token_ids: list[int]) -> torch.Tensor:
    """Sum of folded log-probabilities of token_ids under per-position rows."""
    targets = torch.as_tensor(token_ids, dtype=torch.long)
    lp = folded_log_prob(dist.log_rows, dist.extra_ids, dist.vocab_size, targets)
    if not torch.isfinite(lp).all():
        raise SupportError("gold token has zero probability under the model")
    return lp.sum()


# -- Monte-Carlo losses ----------------------------------------------------------


@dataclass
class _Carry:
    summary: torch.Tensor | None = None
    state: object | None = None  # SpanSample


def _zeros(model: DialogueModel) -> torch.Tensor:
    return torch.zeros((), dtype=model.dtype)


def _null_state(model: DialogueModel):
    return model.initial_state_sample()


def _turn_unsup(model: DialogueModel, binding: KgBinding, td: TurnData, carry: _Carry,
                *, stage: str, tau: float, generator, sample_mode: str,
                need_carry: bool = True):
    """Per-turn unsupervised terms; returns (terms dict, new carry)."""
    cfg = model.config
    ctx = model.context_encode(td.r_prev_ids, td.u_ids, carry.summary, carry.state)
    r_enc = model.encode_response(td.r_ids)
    zero = _zeros(model)
    terms = {"recon": zero, "kl_s": zero, "kl_cat": zero, "kl_kw": zero}
    graph_memo: dict[tuple, tuple] = {}

    def posterior_state_sample():
        if not cfg.use_state:
            return None, _null_state(model)
        return model.posterior_state(ctx, r_enc, mode=sample_mode, tau=tau,
                                     generator=generator)

    def state_kl(q_s_dist, s_q):
        if q_s_dist is None:
            return zero
        p_aligned, _ = model.prior_state(
            ctx, forced_ids=s_q.token_ids, forced_emb=s_q.embeddings
        )
        return kl_factorized(q_s_dist, p_aligned)

    def prior_state_sample():
        if not cfg.use_state:
            return _null_state(model)
        _, s_p = model.prior_state(ctx, mode=sample_mode, tau=tau, generator=generator)
        return s_p

    def graph_for(sample):
        if not cfg.use_graph_detector:
            key = ()
        else:
            key = tuple(sorted(binding.link_token_ids(sample.token_ids)))
        if key not in graph_memo:
            sub = extract_subgraph(binding.kg, key, cfg.hops, cfg.directed_hops)
            graph_memo[key] = (sub, model.encode_subgraph(sub, binding))
        return graph_memo[key]

    def action_kl_and_sample(state_for_q, state_for_p):
        """Posterior draw + aligned prior KL; prior conditioned on state_for_p."""
        if not cfg.use_action:
            cat, kw = model.null_action_sample()
            return zero, zero, cat, kw
        q_cat_log, cat_q, q_kw_dist, kw_q = model.posterior_action(
            ctx, state_for_q, r_enc, mode=sample_mode, tau=tau, generator=generator
        )
        sub, node_emb = graph_for(state_for_p)
        p_cat_log, _, p_kw_dist, _ = model.prior_action(
            ctx, state_for_p, sub, node_emb, binding,
            forced_category=cat_q.index, forced_cat_emb=cat_q.embedding,
            forced_kw_ids=kw_q.token_ids, forced_kw_emb=kw_q.embeddings,
        )
        return _kl_log(q_cat_log, p_cat_log), kl_factorized(q_kw_dist, p_kw_dist), cat_q, kw_q

    def prior_action_sample(state_sample):
        if not cfg.use_action:
            cat, kw = model.null_action_sample()
            return cat, kw
        sub, node_emb = graph_for(state_sample)
        _, cat_p, _, kw_p = model.prior_action(
            ctx, state_sample, sub, node_emb, binding,
            mode=sample_mode, tau=tau, generator=generator,
        )
        return cat_p, kw_p

    def recon(*triples):
        """Summed NLL over (state, category, keywords) conditionings, batched."""
        if len(triples) == 1:
            s, cat, kw = triples[0]
            bind = model.bind_response(ctx, s, kw, cat.embedding)
            return -model.response_log_prob(bind, td.r_ids)[0]
        bind = model.bind_response_pair(ctx, [(s, kw, cat.embedding) for s, cat, kw in triples])
        return -model.response_log_prob(bind, td.r_ids).sum()

    s_q = None
    if stage == "joint":
        q_s_dist, s_q = posterior_state_sample()
        terms["kl_s"] = state_kl(q_s_dist, s_q)
        s_p = prior_state_sample()
        kl_cat, kl_kw, cat_q, kw_q = action_kl_and_sample(s_q, s_p)
        terms["kl_cat"], terms["kl_kw"] = kl_cat, kl_kw
        terms["recon"] = recon((s_q, cat_q, kw_q))
    elif stage == "stage1":
        q_s_dist, s_q = posterior_state_sample()
        terms["kl_s"] = state_kl(q_s_dist, s_q)
        cat_p, kw_p = prior_action_sample(s_q)
        terms["recon"] = recon((s_q, cat_p, kw_p))
    elif stage == "stage2":
        s_p = prior_state_sample()
        kl_cat, kl_kw, cat_q, kw_q = action_kl_and_sample(s_p, s_p)
        terms["kl_cat"], terms["kl_kw"] = kl_cat, kl_kw
        terms["recon"] = recon((s_p, cat_q, kw_q))
        if need_carry:
            _, s_q = posterior_state_sample()
        else:
            s_q = _null_state(model)
    elif stage == "both":
        q_s_dist, s_q = posterior_state_sample()
        terms["kl_s"] = state_kl(q_s_dist, s_q)
        cat_p, kw_p = prior_action_sample(s_q)
        s_p = prior_state_sample()
        kl_cat, kl_kw, cat_q, kw_q = action_kl_and_sample(s_p, s_p)
        terms["kl_cat"], terms["kl_kw"] = kl_cat, kl_kw
        terms["recon"] = recon((s_q, cat_p, kw_p), (s_p, cat_q, kw_q))
    else:
        raise ValueError(f"unknown stage: {stage!r}")

    new_carry = _Carry(summary=ctx.summary, state=s_q)
    return terms, new_carry


def _reduce(model, sessions, binding, stage, tau, generator, sample_mode) -> LossBreakdown:
    zero = _zeros(model)
    sums = {"recon": zero, "kl_s": zero, "kl_cat": zero, "kl_kw": zero}
    n_turns = 0
    for sd in sessions:
        carry = _Carry()
        for ti, td in enumerate(sd.turns):
            terms, carry = _turn_unsup(
                model, binding, td, carry,
                stage=stage, tau=tau, generator=generator, sample_mode=sample_mode,
                need_carry=ti + 1 < len(sd.turns),
            )
            for k in sums:
                sums[k] = sums[k] + terms[k]
            n_turns += 1
    if n_turns == 0:
        raise ValueError("empty batch")
    inv = 1.0 / n_turns
    recon = sums["recon"] * inv
    kl_s = sums["kl_s"] * inv
    kl_cat = sums["kl_cat"] * inv
    kl_kw = sums["kl_kw"] * inv
    total = recon + kl_s + kl_cat + kl_kw
    return LossBreakdown(recon, kl_s, kl_cat, kl_kw, _zeros(model), total)


def loss_joint(model: DialogueModel, sessions: list[SessionData], binding: KgBinding, *,
               tau: float = 1.0, generator=None, sample_mode: str = "gumbel_st",
               expectation: str = "sample") -> LossBreakdown:
    """Single-bound objective: NLL + state KL + action KL per turn.

    expectation="exact" enumerates the latent space (enumerable configs only,
    single-turn sessions) and evaluates the bound with exact expectations.
    """
    if expectation == "exact":
        return _exact_reduce(model, sessions, binding, which="joint")
    return _reduce(model, sessions, binding, "joint", tau, generator, sample_mode)


def loss_stage1(model, sessions, binding, *, tau=1.0, generator=None,
                sample_mode="gumbel_st", expectation="sample") -> LossBreakdown:
    """State-side bound: reconstruction through prior-drawn actions, state KL only."""
    if expectation == "exact":
        return _exact_reduce(model, sessions, binding, which="stage1")
    return _reduce(model, sessions, binding, "stage1", tau, generator, sample_mode)


def loss_stage2(model, sessions, binding, *, tau=1.0, generator=None,
                sample_mode="gumbel_st", expectation="sample") -> LossBreakdown:
    """Action-side bound: reconstruction through prior-drawn states, action KL only."""
    if expectation == "exact":
        return _exact_reduce(model, sessions, binding, which="stage2")
    return _reduce(model, sessions, binding, "stage2", tau, generator, sample_mode)


def loss_unsup(model, sessions, binding, stage: int, *, tau=1.0, generator=None,
               sample_mode="gumbel_st") -> LossBreakdown:
    """Stage 1 -> the state bound; stage 2 -> state + action bounds."""
    if stage == 1:
        return _reduce(model, sessions, binding, "stage1", tau, generator, sample_mode)
    if stage == 2:
        return _reduce(model, sessions, binding, "both", tau, generator, sample_mode)
    raise ValueError("stage must be 1 or 2")


def loss_sup(model: DialogueModel, sessions: list[SessionData], binding: KgBinding) -> LossBreakdown:
    """Teacher-forced auxiliary loss over gold spans, actions, and responses."""
    cfg = model.config
    zero = _zeros(model)
    total = zero
    n_turns = 0
    for sd in sessions:
        if not sd.labeled:
            raise ValueError(f"session {sd.session_id!r} has no gold labels")
        carry = _Carry()
        for td in sd.turns:
            ctx = model.context_encode(td.r_prev_ids, td.u_ids, carry.summary, carry.state)
            r_enc = model.encode_response(td.r_ids)
            gold_state = model.exact_sample(td.gold_state_ids)
            gold_kw = model.exact_sample(td.gold_kw_ids)
            cat = td.gold_category

            log_terms = zero
            p_s, _ = model.prior_state(ctx, forced_ids=td.gold_state_ids)
            q_s, _ = model.posterior_state(ctx, r_enc, forced_ids=td.gold_state_ids)
            log_terms = log_terms + _span_log_prob(p_s, td.gold_state_ids)
            log_terms = log_terms + _span_log_prob(q_s, td.gold_state_ids)

            sub = binding.subgraph_for_state(td.gold_state_ids, cfg.hops, cfg.directed_hops) \
                if cfg.use_graph_detector else extract_subgraph(binding.kg, (), cfg.hops)
            node_emb = model.encode_subgraph(sub, binding)
            p_cat_log, p_cat, p_kw, _ = model.prior_action(
                ctx, gold_state, sub, node_emb, binding,
                forced_category=cat, forced_kw_ids=td.gold_kw_ids,
            )
            q_cat_log, q_cat, q_kw, _ = model.posterior_action(
                ctx, gold_state, r_enc, forced_category=cat, forced_kw_ids=td.gold_kw_ids,
            )
            log_terms = log_terms + p_cat_log[cat] + q_cat_log[cat]
            log_terms = log_terms + _span_log_prob(p_kw, td.gold_kw_ids)
            log_terms = log_terms + _span_log_prob(q_kw, td.gold_kw_ids)

            bind = model.bind_response(ctx, gold_state, gold_kw, p_cat.embedding)
            log_terms = log_terms + model.response_log_prob(bind, td.r_ids)[0]
            if not torch.isfinite(log_terms):
                raise SupportError("supervised loss is non-finite")
            total = total - log_terms
            carry = _Carry(summary=ctx.summary, state=gold_state)
            n_turns += 1
    if n_turns == 0:
        raise ValueError("empty batch")
    sup = total / n_turns
    return LossBreakdown(zero, zero, zero, zero, sup, sup)


# -- exact enumeration ------------------------------------------------------------


def _check_enumerable(model: DialogueModel) -> None:
    cfg = model.config
    if (cfg.vocab_size > 8 or cfg.state_span_len > 2 or cfg.action_span_len > 1
            or cfg.action_categories > 4):
        raise ValueError(
            "configuration too large to enumerate "
            "(need vocab<=8, |S|<=2, |A|<=1, categories<=4)"
        )


@dataclass
class _ExactTables:
    """Per-turn log tables over every (state, category, keyword) configuration."""

    states: torch.Tensor  # (Ns, |S|)
    log_ps: torch.Tensor  # (Ns,)
    log_qs: torch.Tensor  # (Ns,)
    log_p_cat: torch.Tensor  # (Ns, C)
    log_q_cat: torch.Tensor  # (Ns, C)
    log_p_kw: torch.Tensor  # (Ns, C, V)
    log_q_kw: torch.Tensor  # (Ns, C, V)
    log_pg: torch.Tensor  # (Ns, C, V)


def _span_table_log_prob(model, bind, forced: torch.Tensor) -> torch.Tensor:
    """(B,) teacher-forced log-likelihood of each row of `forced` (B, L)."""
    B, L = forced.shape
    log_rows, _, _ = model._run_decoder(bind, L, feed="forced", forced_ids=forced)
    flat = log_rows.reshape(B * L, -1)
    targets = forced.reshape(-1)
    extra = bind.extra_ids
    lp = folded_log_prob(flat, extra, bind.vocab_size, targets)
    return lp.reshape(B, L).sum(dim=1)


def _exact_turn_tables(model: DialogueModel, binding: KgBinding, td: TurnData,
                       carry: _Carry) -> _ExactTables:
    _check_enumerable(model)
    cfg = model.config
    V, Ls, C = cfg.vocab_size, cfg.state_span_len, cfg.action_categories
    ctx = model.context_encode(td.r_prev_ids, td.u_ids, carry.summary, carry.state)
    r_enc = model.encode_response(td.r_ids)

    states = torch.as_tensor(
        list(itertools.product(range(V), repeat=Ls)), dtype=torch.long
    )
    Ns = states.shape[0]
    log_ps = _span_table_log_prob(model, model._state_bind(ctx, "prior", None, Ns), states)
    log_qs = _span_table_log_prob(model, model._state_bind(ctx, "posterior", r_enc, Ns), states)

    log_p_cat = torch.empty((Ns, C), dtype=model.dtype)
    log_q_cat = torch.empty((Ns, C), dtype=model.dtype)
    log_p_kw = torch.empty((Ns, C, V), dtype=model.dtype)
    log_q_kw = torch.empty((Ns, C, V), dtype=model.dtype)
    log_pg = torch.empty((Ns, C, V), dtype=model.dtype)

    groups: dict[tuple, list[int]] = {}
    for i in range(Ns):
        ids = states[i].tolist()
        if cfg.use_graph_detector:
            seeds = tuple(sorted(binding.link_token_ids(ids)))
        else:
            seeds = ()
        groups.setdefault(seeds, []).append(i)

    all_kw = torch.arange(V, dtype=torch.long)
    for seeds in sorted(groups):
        idx = groups[seeds]
        sub = extract_subgraph(binding.kg, seeds, cfg.hops, cfg.directed_hops)
        node_emb = model.encode_subgraph(sub, binding)
        sel = torch.as_tensor(idx, dtype=torch.long)
        s_emb = model.embedder(states[sel])  # (Bg, Ls, E)
        _mat, s_final = model.state_encoder(s_emb)
        log_p_cat[sel] = model.prior_category(ctx, s_final, node_emb)
        log_q_cat[sel] = model.posterior_category(ctx, s_final, r_enc)
        Bg = len(idx)
        for c in range(C):
            cat_emb = model.category_embed(torch.as_tensor(c)).unsqueeze(0).expand(Bg, -1)
            pb = model._prior_kw_bind(ctx, s_final, cat_emb, sub, node_emb, binding, Bg)
            rows, _, _ = model._run_decoder(pb, 1, feed="forced",
                                            forced_ids=torch.zeros(Bg, 1, dtype=torch.long))
            log_p_kw[sel, c] = fold_probs(rows[:, 0], V, pb.extra_ids).clamp_min(
                torch.finfo(model.dtype).tiny
            ).log()
            qb = model._posterior_kw_bind(ctx, s_final, cat_emb, r_enc, Bg)
            rows_q, _, _ = model._run_decoder(qb, 1, feed="forced",
                                              forced_ids=torch.zeros(Bg, 1, dtype=torch.long))
            log_q_kw[sel, c] = fold_probs(rows_q[:, 0], V, qb.extra_ids).clamp_min(
                torch.finfo(model.dtype).tiny
            ).log()
            # responses for every (state in group) x (keyword token)
            s_rep = s_emb.repeat_interleave(V, dim=0)
            s_ids_rep = states[sel].repeat_interleave(V, dim=0)
            a_ids = all_kw.repeat(Bg).unsqueeze(1)
            a_emb = model.embedder(a_ids)
            cat_rep = cat_emb.repeat_interleave(V, dim=0)
            rb = model._bind_response_batch(ctx, s_rep, s_ids_rep, a_emb, a_ids, cat_rep)
            lp = model.response_log_prob(rb, td.r_ids)
            log_pg[sel, c] = lp.reshape(Bg, V)
    return _ExactTables(states, log_ps, log_qs, log_p_cat, log_q_cat,
                        log_p_kw, log_q_kw, log_pg)


def exact_log_marginal(model: DialogueModel, td: TurnData, binding: KgBinding,
                       carried_summary=None, prev_state=None) -> torch.Tensor:
    """log sum over every latent configuration of the generative joint.

    Exhaustive enumeration; exact up to double-precision log-sum-exp.
    """
    carry = _Carry(summary=carried_summary, state=prev_state)
    t = _exact_turn_tables(model, binding, td, carry)
    joint = (
        t.log_ps[:, None, None] + t.log_p_cat[:, :, None] + t.log_p_kw + t.log_pg
    )
    return joint.logsumexp(dim=(0, 1, 2))


def _exact_breakdown(model, tables: _ExactTables, which: str) -> dict:
    t = tables
    q_s = t.log_qs.exp()  # (Ns,)
    p_s = t.log_ps.exp()
    q_cat = t.log_q_cat.exp()  # (Ns, C)
    p_cat = t.log_p_cat.exp()
    q_kw = t.log_q_kw.exp()  # (Ns, C, V)
    p_kw = t.log_p_kw.exp()

    kl_s = (q_s * (t.log_qs - t.log_ps)).sum()
    kl_cat_given_s = (q_cat * (t.log_q_cat - t.log_p_cat)).sum(dim=1)  # (Ns,)
    kl_kw_given_sc = (q_kw * (t.log_q_kw - t.log_p_kw)).sum(dim=2)  # (Ns, C)

    if which == "joint":
        recon = (q_s[:, None, None] * q_cat[:, :, None] * q_kw * t.log_pg).sum()
        kl_cat = (q_s * kl_cat_given_s).sum()
        kl_kw = (q_s[:, None] * q_cat * kl_kw_given_sc).sum()
        return {"recon": -recon, "kl_s": kl_s, "kl_cat": kl_cat, "kl_kw": kl_kw}
    if which == "stage1":
        recon = (q_s[:, None, None] * p_cat[:, :, None] * p_kw * t.log_pg).sum()
        zero = torch.zeros((), dtype=model.dtype)
        return {"recon": -recon, "kl_s": kl_s, "kl_cat": zero, "kl_kw": zero}
    if which == "stage2":
        recon = (p_s[:, None, None] * q_cat[:, :, None] * q_kw * t.log_pg).sum()
        kl_cat = (p_s * kl_cat_given_s).sum()
        kl_kw = (p_s[:, None] * q_cat * kl_kw_given_sc).sum()
        zero = torch.zeros((), dtype=model.dtype)
        return {"recon": -recon, "kl_s": zero, "kl_cat": kl_cat, "kl_kw": kl_kw}
    raise ValueError(which)


def _exact_reduce(model, sessions, binding, which: str) -> LossBreakdown:
    zero = _zeros(model)
    sums = {"recon": zero, "kl_s": zero, "kl_cat": zero, "kl_kw": zero}
    n = 0
    for sd in sessions:
        if len(sd.turns) != 1:
            raise ValueError("exact expectation supports single-turn sessions only")
        tables = _exact_turn_tables(model, binding, sd.turns[0], _Carry())
        terms = _exact_breakdown(model, tables, which)
        for k in sums:
            sums[k] = sums[k] + terms[k]
        n += 1
    inv = 1.0 / n
    recon = sums["recon"] * inv
    kl_s = sums["kl_s"] * inv
    kl_cat = sums["kl_cat"] * inv
    kl_kw = sums["kl_kw"] * inv
    total = recon + kl_s + kl_cat + kl_kw
    return LossBreakdown(recon, kl_s, kl_cat, kl_kw, zero, total)
