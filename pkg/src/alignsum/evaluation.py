"""Automatic summary-quality metrics.

All metrics work on token lists. Corpus scores are the mean of per-example
scores. The embedding-based relevance metrics read vectors out of a trained
model's own token table, so they need a model (or its table) alongside the
text; plain ROUGE needs nothing but the tokens.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericDomainError
from .representation import FragmentFeatures, Vocabulary

_EXCLUDED = {"<sos>", "<eos>", "<pad>"}


def normalize_tokens(tokens) -> list[str]:
    """Lowercase and drop structural specials (keeps <unk>: it carries mass)."""
    return [t.lower() for t in tokens if t.lower() not in _EXCLUDED]


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def rouge_n(hyp: list[str], ref: list[str], n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    if not ref:
        raise InvalidArgumentError("reference is empty; ROUGE undefined")
    hyp_grams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
    ref_grams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    overlap = sum((hyp_grams & ref_grams).values())
    p = overlap / sum(hyp_grams.values()) if hyp_grams else 0.0
    r = overlap / sum(ref_grams.values()) if ref_grams else 0.0
    return RougeScore(p, r, _f1(p, r))


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hyp: list[str], ref: list[str]) -> RougeScore:
    """Longest-common-subsequence precision/recall/F1."""
    if not ref:
        raise InvalidArgumentError("reference is empty; ROUGE undefined")
    lcs = _lcs_length(hyp, ref)
    p = lcs / len(hyp) if hyp else 0.0
    r = lcs / len(ref)
    return RougeScore(p, r, _f1(p, r))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericDomainError("zero-norm vector in embedding metric")
    return float(a @ b / (na * nb))


def _token_vectors(tokens: list[str], table: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    ids = [vocab.id_of(t) for t in tokens]
    return table[ids]


def embedding_relevance(
    hyp: list[str], ref: list[str], table: np.ndarray, vocab: Vocabulary
) -> tuple[float, float, float]:
    """(average, extrema, greedy) similarity between hyp and ref token bags.

    average: cosine of the mean vectors; extrema: cosine of the per-dimension
    entries of largest magnitude (sign preserved); greedy: symmetric mean of
    best-match cosines.
    """
    if not hyp or not ref:
        raise InvalidArgumentError("embedding relevance needs nonempty token lists")
    hv = _token_vectors(hyp, table, vocab)
    rv = _token_vectors(ref, table, vocab)
    average = _cosine(hv.mean(axis=0), rv.mean(axis=0))

    def extrema_vec(vecs: np.ndarray) -> np.ndarray:
        idx = np.argmax(np.abs(vecs), axis=0)
        return vecs[idx, np.arange(vecs.shape[1])]

    extrema = _cosine(extrema_vec(hv), extrema_vec(rv))

    def greedy_dir(src: np.ndarray, dst: np.ndarray) -> float:
        total = 0.0
        for s in src:
            total += max(_cosine(s, d) for d in dst)
        return total / len(src)

    greedy = 0.5 * (greedy_dir(hv, rv) + greedy_dir(rv, hv))
    return average, extrema, greedy


def image_summary_similarity(
    image_features: FragmentFeatures,
    hyp: list[str],
    table: np.ndarray,
    vocab: Vocabulary,
) -> float:
    """Max over summary tokens of cosine(mean-pooled image fragments, token)."""
    if not hyp:
        raise InvalidArgumentError("empty hypothesis")
    feats = image_features.features.data
    mask = image_features.mask
    pooled = feats[mask].mean(axis=0)
    vecs = _token_vectors(hyp, table, vocab)
    return max(_cosine(pooled, v) for v in vecs)


@dataclass
class EvalReport:
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore
    relevance_average: float | None
    relevance_extrema: float | None
    relevance_greedy: float | None
    image_match: float | None
    example_count: int

    def to_lines(self) -> list[str]:
        rows = []
        for name, sc in (("rouge1", self.rouge1), ("rouge2", self.rouge2), ("rougeL", self.rougeL)):
            rows.append(f"{name}_precision={sc.precision:.6f}")
            rows.append(f"{name}_recall={sc.recall:.6f}")
            rows.append(f"{name}_f1={sc.f1:.6f}")
        for name in ("relevance_average", "relevance_extrema", "relevance_greedy", "image_match"):
            val = getattr(self, name)
            rows.append(f"{name}={'n/a' if val is None else f'{val:.6f}'}")
        rows.append(f"example_count={self.example_count}")
        return rows


def corpus_eval(
    hyps: list[list[str]],
    refs: list[list[str]],
    table: np.ndarray | None = None,
    vocab: Vocabulary | None = None,
    image_features: list[FragmentFeatures] | None = None,
) -> EvalReport:
    """Mean of per-example scores over aligned hypothesis/reference lists."""
    if len(hyps) != len(refs):
        raise InvalidArgumentError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise InvalidArgumentError("nothing to evaluate")
    hyps = [normalize_tokens(h) for h in hyps]
    refs = [normalize_tokens(r) for r in refs]

    def mean_rouge(scores: list[RougeScore]) -> RougeScore:
        p = float(np.mean([s.precision for s in scores]))
        r = float(np.mean([s.recall for s in scores]))
        # corpus F1 is recomputed from averaged P/R so the harmonic-mean
        # consistency between the report fields holds
        return RougeScore(p, r, _f1(p, r))

    r1 = mean_rouge([rouge_n(h, r, 1) for h, r in zip(hyps, refs)])
    r2 = mean_rouge([rouge_n(h, r, 2) for h, r in zip(hyps, refs)])
    rl = mean_rouge([rouge_l(h, r) for h, r in zip(hyps, refs)])
    rel_a = rel_e = rel_g = img = None
    if table is not None and vocab is not None:
        triples = [embedding_relevance(h, r, table, vocab) for h, r in zip(hyps, refs)]
        rel_a = float(np.mean([t[0] for t in triples]))
        rel_e = float(np.mean([t[1] for t in triples]))
        rel_g = float(np.mean([t[2] for t in triples]))
        if image_features is not None:
            if len(image_features) != len(hyps):
                raise InvalidArgumentError("image feature count does not match examples")
            img = float(
                np.mean(
                    [
                        image_summary_similarity(f, h, table, vocab)
                        for f, h in zip(image_features, hyps)
                    ]
                )
            )
    return EvalReport(
        rouge1=r1,
        rouge2=r2,
        rougeL=rl,
        relevance_average=rel_a,
        relevance_extrema=rel_e,
        relevance_greedy=rel_g,
        image_match=img,
        example_count=len(hyps),
    )
