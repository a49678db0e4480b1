"""Caption metrics (BLEU, ROUGE-L, CIDEr-D, METEOR-lite, embedding F1) and the evaluation protocol.

All metrics take single-reference pairs of token lists. Text is normalised
once with :func:`normalize`: lowercase, punctuation to whitespace, whitespace
collapsed.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ContractError, MetricError
from .tensor import Rng

log = logging.getLogger(__name__)

MODALITIES = ("CT", "MRI", "XRAY", "OTHER")
_PUNCT = re.compile(r"[^\w\s]|_")


def normalize(text: str) -> list:
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class EvalPair:
    hypothesis: list
    reference: list
    modality: str = "OTHER"
    id: str = ""

    @classmethod
    def from_text(cls, hypothesis: str, reference: str, modality: str = "OTHER", id: str = ""):
        return cls(normalize(hypothesis), normalize(reference), canonical_modality(modality), id)


def canonical_modality(tag: str) -> str:
    tag = (tag or "").upper().replace("-", "").replace(" ", "")
    if tag in ("XRAY", "X", "RADIOGRAPH", "CR", "DX"):
        return "XRAY"
    if tag in MODALITIES:
        return tag
    log.warning("unknown modality %r mapped to OTHER", tag)
    return "OTHER"


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU --------------------------------------------------------------------

def bleu_stats(pairs, max_n: int = 4):
    """Corpus sums: (hyp_len, ref_len, [clipped matches per n], [hyp n-gram totals per n])."""
    clipped = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for p in pairs:
        c += len(p.hypothesis)
        r += len(p.reference)
        for n in range(1, max_n + 1):
            h, ref = ngrams(p.hypothesis, n), ngrams(p.reference, n)
            m = sum(min(cnt, ref[g]) for g, cnt in h.items())
            clipped[n - 1] += m
            totals[n - 1] += sum(h.values())
    return c, r, clipped, totals


def brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu(pairs, max_n: int = 4) -> float:
    """Corpus BLEU; precisions for n >= 2 use add-one smoothing."""
    pairs = list(pairs)
    if not pairs:
        raise MetricError("BLEU needs a non-empty corpus")
    c, r, clipped, totals = bleu_stats(pairs, max_n)
    if c == 0 or clipped[0] == 0:
        return 0.0
    logp = math.log(clipped[0] / totals[0])
    for n in range(1, max_n):
        logp += math.log((clipped[n] + 1) / (totals[n] + 1))
    return brevity_penalty(c, r) * math.exp(logp / max_n)


# -- ROUGE-L -----------------------------------------------------------------

def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp, ref) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("ROUGE-L needs a non-empty corpus")
    return float(np.mean([rouge_l_pair(p.hypothesis, p.reference) for p in pairs]))


# -- CIDEr-D -----------------------------------------------------------------

def _tfidf(counts: Counter, df: Counter, log_n: float, max_n: int):
    vec = [dict() for _ in range(max_n)]
    norm = [0.0] * max_n
    for g, tf in counts.items():
        n = len(g) - 1
        w = tf * (log_n - math.log(max(1.0, df[g])))
        vec[n][g] = w
        norm[n] += w * w
    return vec, [math.sqrt(x) for x in norm]


def cider_pair_scores(pairs, max_n: int = 4, sigma: float = 6.0) -> list:
    """Per-pair CIDEr-D with document frequencies taken from the references."""
    pairs = list(pairs)
    if len(pairs) < 2:
        log.warning("CIDEr on a %d-document corpus: IDF is degenerate", len(pairs))
    all_counts = lambda toks: sum((ngrams(toks, n) for n in range(1, max_n + 1)), Counter())
    refs = [all_counts(p.reference) for p in pairs]
    df = Counter()
    for rc in refs:
        df.update(rc.keys())
    log_n = math.log(float(len(pairs)))
    scores = []
    for p, rc in zip(pairs, refs):
        vh, nh = _tfidf(all_counts(p.hypothesis), df, log_n, max_n)
        vr, nr = _tfidf(rc, df, log_n, max_n)
        delta = len(p.hypothesis) - len(p.reference)
        penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
        val = 0.0
        for n in range(max_n):
            s = sum(min(w, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, w in vh[n].items())
            if nh[n] != 0 and nr[n] != 0:
                s /= nh[n] * nr[n]
            val += s * penalty
        scores.append(10.0 * val / max_n)
    return scores


def cider(pairs, max_n: int = 4, sigma: float = 6.0) -> float:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("CIDEr needs a non-empty corpus")
    return float(np.mean(cider_pair_scores(pairs, max_n, sigma)))


# -- METEOR (exact + optional synonym stage) ---------------------------------

def load_synonyms(path) -> dict:
    """One synonym group per line, whitespace separated; maps each word to its group head."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = line.lower().split()
            for w in words:
                table.setdefault(w, words[0])
    return table


def align(hyp, ref, synonyms: dict | None = None) -> list:
    """Unigram alignment as (hyp_idx, ref_idx) pairs.

    Each hypothesis token takes an unused reference position with the same
    word (or synonym group), preferring the one that extends the current
    chunk, otherwise the earliest.
    """
    canon = (lambda w: synonyms.get(w, w)) if synonyms else (lambda w: w)
    ref_c = [canon(w) for w in ref]
    used = set()
    pairs = []
    prev = None
    for i, w in enumerate(hyp):
        cw = canon(w)
        options = [j for j, rw in enumerate(ref_c) if rw == cw and j not in used]
        if not options:
            prev = None
            continue
        j = prev + 1 if prev is not None and prev + 1 in options else options[0]
        used.add(j)
        pairs.append((i, j))
        prev = j
    return pairs


def count_chunks(alignment) -> int:
    chunks = 0
    last = None
    for i, j in alignment:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def meteor_pair(hyp, ref, synonyms=None, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    a = align(hyp, ref, synonyms)
    m = len(a)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(a) / m) ** beta
    return fmean * (1 - penalty)


def meteor_lite(pairs, synonyms: dict | None = None) -> float:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("METEOR needs a non-empty corpus")
    return float(np.mean([meteor_pair(p.hypothesis, p.reference, synonyms) for p in pairs]))


# -- embedding greedy-matching F1 --------------------------------------------

class StaticEmbeddings:
    """Word -> vector lookup; unknown words map to the zero vector and are counted."""

    def __init__(self, table: dict, dim: int | None = None):
        self.table = {w: np.asarray(v, dtype=np.float64) for w, v in table.items()}
        self.dim = dim or len(next(iter(self.table.values())))
        self.oov = Counter()

    @classmethod
    def load(cls, path) -> "StaticEmbeddings":
        """Whitespace-separated text, one ``word v1 v2 ...`` row per line."""
        table = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.split()
            if len(parts) > 1:
                table[parts[0]] = [float(x) for x in parts[1:]]
        if not table:
            raise MetricError(f"no embeddings in {path}")
        return cls(table)

    def __call__(self, word: str) -> np.ndarray:
        v = self.table.get(word)
        if v is None:
            self.oov[word] += 1
            return np.zeros(self.dim)
        return v


def _unit_rows(words, emb) -> np.ndarray:
    m = np.stack([emb(w) for w in words])
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def embed_f1_pair(hyp, ref, emb) -> float:
    if not hyp or not ref:
        log.warning("embedding F1 on an empty side scores 0")
        return 0.0
    sim = _unit_rows(hyp, emb) @ _unit_rows(ref, emb).T
    precision = sim.max(axis=1).mean()
    recall = sim.max(axis=0).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def embed_score(pairs, embeddings) -> float:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("embedding F1 needs a non-empty corpus")
    return float(np.mean([embed_f1_pair(p.hypothesis, p.reference, embeddings) for p in pairs]))


# -- per-item scores, significance, aggregation ------------------------------

def per_item_scores(pairs, embeddings=None, synonyms=None) -> dict:
    """Sentence-level scores per metric, aligned with ``pairs``."""
    pairs = list(pairs)
    out = {
        "bleu": [bleu([p]) for p in pairs],
        "rouge_l": [rouge_l_pair(p.hypothesis, p.reference) for p in pairs],
        "meteor": [meteor_pair(p.hypothesis, p.reference, synonyms) for p in pairs],
    }
    if len(pairs) >= 2:
        out["cider"] = cider_pair_scores(pairs)
    if embeddings is not None:
        out["embed_f1"] = [embed_f1_pair(p.hypothesis, p.reference, embeddings) for p in pairs]
    return out


@dataclass
class PairedTestResult:
    p_value: float
    observed_diff: float
    n: int
    method: str
    iters: int
    insufficient_n: bool = False


def paired_test(scores_a, scores_b, method: str = "randomization", iters: int = 10000,
                rng: Rng | None = None) -> PairedTestResult:
    """Two-sided paired significance test on per-item scores.

    randomization: flip the sign of each difference at random and count
    flips whose |mean| reaches the observed one. bootstrap: resample items
    with replacement and count resamples whose mean difference does not
    keep the observed sign. Both use the (count + 1) / (iters + 1) estimate.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"paired test needs equal lengths, got {a.shape} and {b.shape}")
    d = a - b
    n = d.size
    obs = float(d.mean()) if n else 0.0
    if n < 2:
        return PairedTestResult(float("nan"), obs, n, method, iters, insufficient_n=True)
    rng = rng or Rng(42)
    if method == "randomization":
        signs = rng.integers(0, 2, size=(iters, n)) * 2 - 1
        stats_ = np.abs((signs * d).mean(axis=1))
        count = int(np.sum(stats_ >= abs(obs) - 1e-12))
    elif method == "bootstrap":
        idx = rng.integers(0, n, size=(iters, n))
        means = d[idx].mean(axis=1)
        if obs == 0:
            count = iters
        else:
            count = int(np.sum(np.sign(means) != np.sign(obs)))
    else:
        raise ContractError(f"unknown test method {method!r}")
    return PairedTestResult((count + 1) / (iters + 1), obs, n, method, iters)


def aggregate(values) -> dict:
    """Mean, sample std (n-1), and a 95% t-interval."""
    v = np.asarray(list(values), dtype=np.float64)
    n = v.size
    out = {"n": int(n), "values": v.tolist(), "mean": float(v.mean()) if n else float("nan")}
    if n < 2:
        out.update(std=None, ci_low=None, ci_high=None, half_width=None, insufficient_n=True)
        return out
    std = float(v.std(ddof=1))
    half = float(stats.t.ppf(0.975, n - 1) * std / math.sqrt(n))
    out.update(std=std, half_width=half, ci_low=out["mean"] - half, ci_high=out["mean"] + half,
               insufficient_n=False)
    return out


def corpus_scores(pairs, embeddings=None, synonyms=None) -> dict:
    pairs = list(pairs)
    out = {
        "bleu": bleu(pairs),
        "rouge_l": rouge_l(pairs),
        "cider": cider(pairs),
        "meteor": meteor_lite(pairs, synonyms),
    }
    if embeddings is not None:
        out["embed_f1"] = embed_score(pairs, embeddings)
    return out


def stratify(pairs, embeddings=None, synonyms=None) -> dict:
    """Corpus metrics per modality stratum; empty strata are reported with count 0 only."""
    groups = {m: [] for m in MODALITIES}
    for p in pairs:
        groups[canonical_modality(p.modality)].append(p)
    out = {}
    for m, members in groups.items():
        out[m] = {"count": len(members)}
        if members:
            out[m]["scores"] = corpus_scores(members, embeddings, synonyms)
    return out


@dataclass
class EvalReport:
    scores: dict
    strata: dict
    seeds: dict = field(default_factory=dict)
    significance: dict = field(default_factory=dict)
    count: int = 0

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "scores": self.scores,
            "strata": self.strata,
            "seeds": self.seeds,
            "significance": self.significance,
        }

    def to_table(self) -> str:
        metrics = list(self.scores)
        header = ["stratum", "n"] + metrics
        rows = [["ALL", str(self.count)] + [f"{self.scores[m]:.4f}" for m in metrics]]
        for name, sec in self.strata.items():
            vals = [f"{sec['scores'][m]:.4f}" if "scores" in sec else "-" for m in metrics]
            rows.append([name, str(sec["count"])] + vals)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
        lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
        for name, agg in self.seeds.items():
            if agg.get("std") is None:
                lines.append(f"{name}: mean {agg['mean']:.4f} (n={agg['n']}, insufficient n for CI)")
            else:
                lines.append(f"{name}: {agg['mean']:.4f} +/- {agg['std']:.4f} "
                             f"(95% CI {agg['ci_low']:.4f} .. {agg['ci_high']:.4f}, n={agg['n']})")
        for name, res in self.significance.items():
            lines.append(f"{name}: p={res['p_value']:.4g} (diff {res['observed_diff']:+.4f}, {res['method']})")
        return "\n".join(lines) + "\n"


def evaluate(pairs, embeddings=None, synonyms=None) -> EvalReport:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("cannot evaluate an empty corpus")
    return EvalReport(corpus_scores(pairs, embeddings, synonyms), stratify(pairs, embeddings, synonyms),
                      count=len(pairs))
