"""Automatic metrics over generated responses and predicted spans."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from .kgstore import EntityType, KnowledgeGraph, link_entities

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2


@dataclass
class EvalReport:
    b2: float
    r2: float
    d1: float
    d2: float
    ma_p: float
    ma_r: float
    ma_f1: float
    mi_p: float
    mi_r: float
    mi_f1: float
    ea: float
    eg: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_aligned(hypotheses, references):
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must have equal length")
    if not hypotheses:
        raise ValueError("empty evaluation lists")


def bleu2(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Corpus-level BLEU with uni+bigram precision, brevity penalty, add-eps smoothing."""
    _check_aligned(hypotheses, references)
    log_p = 0.0
    for n in (1, 2):
        matches = total = 0
        for hyp, ref in zip(hypotheses, references):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches += sum(min(c, r[g]) for g, c in h.items())
            total += sum(h.values())
        if total == 0:
            return 0.0
        p_n = matches / total if matches else BLEU_EPS / total
        log_p += 0.5 * math.log(p_n)
    c = sum(len(h) for h in hypotheses)
    r = sum(len(x) for x in references)
    bp = 1.0 if c > r else math.exp(1.0 - r / c) if c else 0.0
    return bp * math.exp(log_p)


def rouge2(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
           beta: float = ROUGE_BETA) -> float:
    """Mean per-pair bigram F-measure, recall-weighted by beta."""
    _check_aligned(hypotheses, references)
    scores = []
    for hyp, ref in zip(hypotheses, references):
        h, r = _ngrams(hyp, 2), _ngrams(ref, 2)
        overlap = sum(min(c, r[g]) for g, c in h.items())
        if overlap == 0:
            scores.append(0.0)
            continue
        p = overlap / sum(h.values())
        rec = overlap / sum(r.values())
        scores.append((1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return sum(scores) / len(scores)


def distinct_n(hypotheses: Sequence[Sequence[str]], n: int) -> float:
    """Distinct n-grams across all hypotheses over total n-grams."""
    seen: set = set()
    total = 0
    for hyp in hypotheses:
        for i in range(len(hyp) - n + 1):
            seen.add(tuple(hyp[i:i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, f


def entity_prf(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
               kg: KnowledgeGraph) -> dict:
    """Macro/micro precision, recall, F1 of linked entities, as percentages.

    Micro pools true-positive/predicted/gold counts over all turns; macro
    averages the per-EntityType micro scores over the types that occur in
    gold or predictions.
    """
    _check_aligned(hypotheses, references)
    tp = Counter()
    n_pred = Counter()
    n_gold = Counter()
    for hyp, ref in zip(hypotheses, references):
        pred = link_entities(hyp, kg)
        gold = link_entities(ref, kg)
        for e in pred:
            n_pred[kg.entity_type(e)] += 1
        for e in gold:
            n_gold[kg.entity_type(e)] += 1
        for e in pred & gold:
            tp[kg.entity_type(e)] += 1
    mi = _prf(sum(tp.values()), sum(n_pred.values()), sum(n_gold.values()))
    present = [t for t in EntityType if n_pred[t] or n_gold[t]]
    if present:
        per_type = [_prf(tp[t], n_pred[t], n_gold[t]) for t in present]
        ma = tuple(sum(x[i] for x in per_type) / len(per_type) for i in range(3))
    else:
        ma = (0.0, 0.0, 0.0)
    return {
        "ma_p": 100 * ma[0], "ma_r": 100 * ma[1], "ma_f1": 100 * ma[2],
        "mi_p": 100 * mi[0], "mi_r": 100 * mi[1], "mi_f1": 100 * mi[2],
    }


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def embedding_metrics(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                      embeddings: Mapping[str, np.ndarray]) -> tuple[float, float]:
    """(embedding-average, embedding-greedy) cosine scores, averaged over pairs.

    Tokens without a vector are skipped; pairs where either side has none
    score 0 on both metrics.
    """
    _check_aligned(hypotheses, references)
    ea_scores, eg_scores = [], []
    for hyp, ref in zip(hypotheses, references):
        hv = [np.asarray(embeddings[t], dtype=float) for t in hyp if t in embeddings]
        rv = [np.asarray(embeddings[t], dtype=float) for t in ref if t in embeddings]
        if not hv or not rv:
            ea_scores.append(0.0)
            eg_scores.append(0.0)
            continue
        ea_scores.append(_cosine(np.mean(hv, axis=0), np.mean(rv, axis=0)))
        sim = np.array([[_cosine(a, b) for b in rv] for a in hv])
        eg_scores.append(0.5 * float(sim.max(axis=1).mean() + sim.max(axis=0).mean()))
    return sum(ea_scores) / len(ea_scores), sum(eg_scores) / len(eg_scores)


def compose_report(hypotheses, references, kg: KnowledgeGraph,
                   embeddings: Mapping[str, np.ndarray]) -> EvalReport:
    prf = entity_prf(hypotheses, references, kg)
    ea, eg = embedding_metrics(hypotheses, references, embeddings)
    return EvalReport(
        b2=bleu2(hypotheses, references),
        r2=rouge2(hypotheses, references),
        d1=distinct_n(hypotheses, 1),
        d2=distinct_n(hypotheses, 2),
        ea=ea, eg=eg, **prf,
    )
