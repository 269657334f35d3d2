"""Caption quality metrics: BLEU-1..4, ROUGE-L, METEOR, CIDEr.

All metrics share one tokenization (the decoder's) and one container, a
:class:`ScoredCorpus` of (candidate, references) pairs per image.
Definitions follow the standard formulations:

* BLEU: corpus-level clipped modified n-gram precision with the closest
  reference length for the brevity penalty (ties go to the shorter
  reference).  Unsmoothed by default; optional add-epsilon smoothing
  rescues zero match counts (a candidate with no k-grams at all still
  scores zero).
* ROUGE-L: per image, the max over references of the LCS-based F-score
  with beta = 1.2; the corpus score is the mean over images.
* METEOR: exact unigram matching only (no stems or synonyms).  The
  fragmentation penalty uses the minimal chunk count over all maximum
  alignments, found by exact search.
* CIDEr: TF-IDF weighted n-gram cosine similarity, n = 1..4, averaged
  over n and references, scaled by 10.  IDF comes from the corpus
  itself, so a single-image corpus degenerates to all-zero IDF and a
  warning is raised.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

from .errors import ContractError
from .textdec import tokenize

ROUGE_BETA = 1.2
CIDER_MAX_N = 4
BLEU_EPSILON = 1e-9


@dataclass(frozen=True)
class CorpusEntry:
    image_id: str
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]


class ScoredCorpus:
    """Candidate and reference token sequences, one entry per image."""

    def __init__(self, entries: Sequence[CorpusEntry]):
        if not entries:
            raise ContractError("ScoredCorpus: need at least one entry")
        seen = set()
        for e in entries:
            if e.image_id in seen:
                raise ContractError(f"ScoredCorpus: duplicate image id {e.image_id!r}")
            seen.add(e.image_id)
            if not e.references:
                raise ContractError(f"ScoredCorpus: image {e.image_id!r} has no references")
            if any(len(r) == 0 for r in e.references):
                raise ContractError(f"ScoredCorpus: image {e.image_id!r} has an empty reference")
        self.entries = list(entries)

    @classmethod
    def from_texts(cls, items: Mapping[str, tuple[str, Sequence[str]]]) -> "ScoredCorpus":
        """Build from raw strings: image_id -> (candidate, references)."""
        entries = []
        for image_id, (candidate, references) in items.items():
            entries.append(CorpusEntry(
                image_id=str(image_id),
                candidate=tuple(tokenize(candidate)),
                references=tuple(tuple(tokenize(r)) for r in references),
            ))
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def _closest_ref_length(cand_len: int, ref_lens: Sequence[int]) -> int:
    """Reference length closest to the candidate's; ties to the shorter."""
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def bleu(corpus: ScoredCorpus, n: int = 4, smoothing: bool = False) -> float:
    """Corpus-level BLEU-n: geometric mean of clipped k-gram precisions.

    Numerators and denominators accumulate over the whole corpus before
    the ratio, and the brevity penalty compares total candidate length
    against the summed closest reference lengths.
    """
    if not 1 <= n <= 4:
        raise ContractError(f"bleu: n must be in 1..4, got {n}")
    numer = [0] * n
    denom = [0] * n
    cand_total = 0
    ref_total = 0
    for e in corpus.entries:
        cand_total += len(e.candidate)
        ref_total += _closest_ref_length(len(e.candidate), [len(r) for r in e.references])
        for k in range(1, n + 1):
            cand_counts = _ngrams(e.candidate, k)
            if not cand_counts:
                continue
            max_ref = Counter()
            for ref in e.references:
                for gram, count in _ngrams(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], count)
            numer[k - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            denom[k - 1] += sum(cand_counts.values())
    if cand_total == 0:
        return 0.0
    log_sum = 0.0
    for k in range(n):
        num, den = numer[k], denom[k]
        if den == 0:
            return 0.0  # candidate too short for any k-gram
        if num == 0:
            if not smoothing:
                return 0.0
            num = BLEU_EPSILON  # add-epsilon rescue for zero match counts
        log_sum += math.log(num / den)
    brevity = 1.0 if cand_total > ref_total else math.exp(1.0 - ref_total / cand_total)
    return brevity * math.exp(log_sum / n)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_l(corpus: ScoredCorpus, beta: float = ROUGE_BETA) -> float:
    """Mean over images of the best LCS F-score against any reference."""
    total = 0.0
    for e in corpus.entries:
        best = 0.0
        for ref in e.references:
            lcs = _lcs_length(e.candidate, ref)
            if lcs == 0 or not e.candidate:
                continue
            precision = lcs / len(e.candidate)
            recall = lcs / len(ref)
            denominator = recall + beta * beta * precision
            if denominator > 0:
                best = max(best, (1 + beta * beta) * precision * recall / denominator)
        total += best
    return total / len(corpus.entries)


# ---------------------------------------------------------------------------
# METEOR


def _best_alignment(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(max matches, min chunks over all maximum alignments).

    An alignment matches candidate positions to distinct reference
    positions with equal tokens.  A chunk is a maximal run of matches
    that is contiguous and in order on both sides.  Exact search with
    memoization over (candidate position, used reference positions,
    previous match), fine at caption scale.
    """
    shared = [j for j, w in enumerate(ref) if w in set(cand)]
    pos_of = {j: i for i, j in enumerate(shared)}

    @lru_cache(maxsize=None)
    def best(ci: int, used: int, prev: int) -> tuple[int, int]:
        if ci == len(cand):
            return (0, 0)
        # option 1: leave cand[ci] unmatched
        matches, chunks = best(ci + 1, used, -2)
        score = (matches, -chunks)
        for j in shared:
            bit = 1 << pos_of[j]
            if used & bit or ref[j] != cand[ci]:
                continue
            m, c = best(ci + 1, used | bit, j)
            c += 0 if prev == j - 1 else 1
            score = max(score, (m + 1, -c))
        return (score[0], -score[1])

    result = best(0, 0, -2)
    best.cache_clear()
    return result


def meteor(corpus: ScoredCorpus) -> float:
    """Exact-match METEOR: harmonic mean weighted toward recall, with a
    fragmentation penalty from the minimal chunk count."""
    total = 0.0
    for e in corpus.entries:
        best_score = 0.0
        for ref in e.references:
            matches, chunks = _best_alignment(e.candidate, ref)
            if matches == 0:
                continue
            precision = matches / len(e.candidate)
            recall = matches / len(ref)
            f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
            penalty = 0.5 * (chunks / matches) ** 3
            best_score = max(best_score, f_mean * (1.0 - penalty))
        total += best_score
    return total / len(corpus.entries)


# ---------------------------------------------------------------------------
# CIDEr


def cider(corpus: ScoredCorpus, max_n: int = CIDER_MAX_N) -> float:
    """TF-IDF n-gram cosine similarity, averaged over n and references.

    IDF(g) = ln(N / max(1, df(g))) where df counts images whose
    references contain g.  With a single image every IDF is zero and the
    score degenerates to 0; a warning flags that case.
    """
    n_images = len(corpus.entries)
    if n_images == 1:
        warnings.warn("cider: single-image corpus has degenerate IDF (all zeros)", stacklevel=2)
    idf: list[dict] = []
    for k in range(1, max_n + 1):
        df = Counter()
        for e in corpus.entries:
            grams = set()
            for ref in e.references:
                grams.update(_ngrams(ref, k).keys())
            df.update(grams)
        idf.append({g: math.log(n_images / max(1, c)) for g, c in df.items()})

    unseen_idf = math.log(n_images)  # df = 0 clamps to 1 in the denominator

    def tfidf(tokens, k):
        weights = {}
        for gram, count in _ngrams(tokens, k).items():
            weights[gram] = count * idf[k - 1].get(gram, unseen_idf)
        return weights

    def cosine(a, b):
        dot = sum(w * b.get(g, 0.0) for g, w in a.items())
        na = math.sqrt(sum(w * w for w in a.values()))
        nb = math.sqrt(sum(w * w for w in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return dot / (na * nb)

    total = 0.0
    for e in corpus.entries:
        per_n = []
        for k in range(1, max_n + 1):
            cand_vec = tfidf(e.candidate, k)
            sims = [cosine(cand_vec, tfidf(ref, k)) for ref in e.references]
            per_n.append(sum(sims) / len(sims))
        total += 10.0 * sum(per_n) / max_n
    return total / n_images


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class ScoreReport:
    """All seven metric values for one system on one corpus."""

    b1: float
    b2: float
    b3: float
    b4: float
    rouge_l: float
    meteor: float
    cider: float

    COLUMNS = ("B-1", "B-2", "B-3", "B-4", "R-L", "M", "C")

    def values(self) -> tuple[float, ...]:
        return (self.b1, self.b2, self.b3, self.b4, self.rouge_l, self.meteor, self.cider)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.COLUMNS, self.values()))


def score_report(corpus: ScoredCorpus, smoothing: bool = False) -> ScoreReport:
    """Run every metric over the corpus."""
    return ScoreReport(
        b1=bleu(corpus, 1, smoothing),
        b2=bleu(corpus, 2, smoothing),
        b3=bleu(corpus, 3, smoothing),
        b4=bleu(corpus, 4, smoothing),
        rouge_l=rouge_l(corpus),
        meteor=meteor(corpus),
        cider=cider(corpus),
    )


def format_reports(reports: Mapping[str, ScoreReport]) -> str:
    """Aligned table of one row per system, then machine-readable lines.

    The key=value section uses ``<row>.<metric>=<value>`` with full
    float precision.
    """
    if not reports:
        raise ContractError("format_reports: nothing to format")
    name_width = max(len("system"), max(len(n) for n in reports))
    header = "system".ljust(name_width) + "".join(c.rjust(9) for c in ScoreReport.COLUMNS)
    lines = [header]
    for name, report in reports.items():
        lines.append(name.ljust(name_width) + "".join(f"{v:9.4f}" for v in report.values()))
    lines.append("")
    for name, report in reports.items():
        for column, value in report.as_dict().items():
            lines.append(f"{name}.{column}={value!r}")
    return "\n".join(lines) + "\n"
