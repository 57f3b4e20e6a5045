"""Evaluation metrics: rank correlations, multilabel average precision, and
caption quality scores.

Conventions, all declared here rather than configurable:
- SRCC uses average ranks for ties; PLCC is the plain Pearson formula.
- AP sorts by descending score with ties broken by stable input order.
- BLEU-n is sentence-level: geometric mean of clipped modified k-gram
  precisions for k <= n times a brevity penalty using the
  closest-reference-length convention (ties prefer the shorter reference).
- ROUGE is ROUGE-L with the balanced F-measure, maximized over references.
- CIDEr uses raw-count TF times log(|images| / df) IDF over 1..4-grams,
  cosine against each reference averaged, mean over n, scaled by 10.

Texts may be passed as strings (whitespace-split) or token lists.
"""

from __future__ import annotations

import math
import warnings

import numpy as np


def _as_float_pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64)
    l = np.asarray(labels, dtype=np.float64)
    if p.ndim != 1 or p.shape != l.shape:
        raise ValueError(f"expected two equal-length 1-d lists, got {p.shape} and {l.shape}")
    if p.size < 2:
        raise ValueError("need at least two scored items")
    if not (np.isfinite(p).all() and np.isfinite(l).all()):
        raise ValueError("scores and labels must be finite")
    return p, l


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank block."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(predictions, labels) -> float:
    """Pearson linear correlation coefficient."""
    p, l = _as_float_pair(predictions, labels)
    pc = p - p.mean()
    lc = l - l.mean()
    denom = math.sqrt(float(pc @ pc)) * math.sqrt(float(lc @ lc))
    if denom == 0.0:
        raise ValueError("plcc: undefined for constant input")
    return float(pc @ lc) / denom


def srcc(predictions, labels) -> float:
    """Spearman rank correlation: Pearson over average-tie ranks."""
    p, l = _as_float_pair(predictions, labels)
    if np.all(p == p[0]) or np.all(l == l[0]):
        raise ValueError("srcc: undefined for constant input")
    return plcc(_average_ranks(p), _average_ranks(l))


def average_precision(scores, positives) -> float:
    """AP for one class: mean precision at each positive, descending score
    order, ties broken by stable input order."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"average_precision: shapes {s.shape} and {y.shape} differ")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("average_precision: labels must be binary")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average_precision: class has no positive example")
    order = np.argsort(-s, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if y[idx] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def mean_average_precision(per_class) -> float:
    """Mean of per-class APs over an iterable of (scores, binary labels)."""
    aps = [average_precision(s, y) for s, y in per_class]
    if not aps:
        raise ValueError("mean_average_precision: no classes given")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# caption metrics
# ---------------------------------------------------------------------------

def _tokens(text) -> list[str]:
    if isinstance(text, str):
        return text.split()
    return list(text)


def _ngram_counts(tokens: list[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu_n(candidate, references, n: int) -> float:
    """Sentence-level BLEU-n with brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ValueError(f"bleu_n: n must be in 1..4, got {n}")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise ValueError("bleu_n: need at least one reference")
    if not cand:
        warnings.warn("bleu_n: empty candidate scores 0")
        return 0.0
    log_precisions = []
    for k in range(1, n + 1):
        cand_counts = _ngram_counts(cand, k)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        for g, c in cand_counts.items():
            best = max((_ngram_counts(r, k).get(g, 0) for r in refs), default=0)
            clipped += min(c, best)
        if clipped == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = min(1.0, math.exp(1.0 - r_len / c_len))
    return bp * math.exp(sum(log_precisions) / n)


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


def rouge_l(candidate, references) -> float:
    """LCS F-measure (balanced harmonic mean), maximized over references."""
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise ValueError("rouge_l: need at least one reference")
    if not cand:
        return 0.0
    best = 0.0
    for ref in refs:
        if not ref:
            continue
        lcs = _lcs_length(cand, ref)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        best = max(best, 2.0 * p * r / (p + r))
    return best


def cider_scores(eval_set) -> np.ndarray:
    """Per-image CIDEr scores over a corpus of (candidate, references) pairs.

    Document frequencies come from the reference sets of the whole corpus.
    """
    pairs = [( _tokens(c), [_tokens(r) for r in refs]) for c, refs in eval_set]
    if not pairs:
        raise ValueError("cider: empty evaluation set")
    for _, refs in pairs:
        if not refs:
            raise ValueError("cider: every image needs at least one reference")
    n_images = len(pairs)
    if n_images == 1:
        warnings.warn("cider: single-image corpus has a degenerate IDF")
    max_n = 4
    dfs: list[dict[tuple[str, ...], int]] = [{} for _ in range(max_n)]
    for _, refs in pairs:
        for k in range(1, max_n + 1):
            seen: set[tuple[str, ...]] = set()
            for ref in refs:
                seen.update(_ngram_counts(ref, k))
            for g in seen:
                dfs[k - 1][g] = dfs[k - 1].get(g, 0) + 1

    def tfidf(tokens: list[str], k: int) -> dict[tuple[str, ...], float]:
        vec = {}
        for g, c in _ngram_counts(tokens, k).items():
            df = dfs[k - 1].get(g, 0)
            if df > 0:
                vec[g] = c * math.log(n_images / df)
        return vec

    def cosine(u: dict, w: dict) -> float:
        nu = math.sqrt(math.fsum(x * x for x in u.values()))
        nw = math.sqrt(math.fsum(x * x for x in w.values()))
        if nu == 0.0 or nw == 0.0:
            return 0.0
        if u == w:
            return 1.0
        dot = math.fsum(u[g] * w[g] for g in u if g in w)
        return dot / (nu * nw)

    out = np.zeros(n_images, dtype=np.float64)
    for i, (cand, refs) in enumerate(pairs):
        per_n = []
        for k in range(1, max_n + 1):
            cv = tfidf(cand, k)
            sims = [cosine(cv, tfidf(r, k)) for r in refs]
            per_n.append(math.fsum(sims) / len(sims))
        out[i] = 10.0 * math.fsum(per_n) / max_n
    return out


def cider(eval_set) -> float:
    """Corpus CIDEr: mean of the per-image scores."""
    return float(cider_scores(eval_set).mean())
