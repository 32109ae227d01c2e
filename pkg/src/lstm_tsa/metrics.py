"""Corpus-level BLEU@N and CIDEr-D over pre-tokenized captions."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


@dataclass
class EvaluationRecord:
    id: str
    candidate: list
    references: list

    def __post_init__(self):
        if not self.references or not any(self.references):
            raise ValueError(f"record {self.id!r} needs at least one non-empty reference")


def ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c_len, refs):
    return min((abs(len(r) - c_len), len(r)) for r in refs)[1]


def bleu_n(records, N=4):
    """Corpus BLEU@N in percent; no smoothing, so a zero precision gives 0."""
    records = list(records)
    if not records:
        raise ValueError("empty corpus")
    if N not in (1, 2, 3, 4):
        raise ValueError("N must be in 1..4")
    matched = [0] * N
    total = [0] * N
    cand_len = ref_len = 0
    for rec in records:
        cand = list(rec.candidate)
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), rec.references)
        for n in range(1, N + 1):
            counts = ngrams(cand, n)
            max_ref = Counter()
            for ref in rec.references:
                for g, k in ngrams(list(ref), n).items():
                    max_ref[g] = max(max_ref[g], k)
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / N
    brevity = min(0.0, 1.0 - ref_len / cand_len)
    return 100.0 * math.exp(brevity + log_prec)


def _tfidf(tokens, n_max, df, log_docs):
    vecs = []
    for n in range(1, n_max + 1):
        vecs.append({g: k * (log_docs - math.log(max(1.0, df[g]))) for g, k in ngrams(tokens, n).items()})
    norms = [math.sqrt(sum(w * w for w in v.values())) for v in vecs]
    return vecs, norms


def cider_d_scores(records, n_max=4, sigma=6.0):
    """Per-record CIDEr-D; document frequencies come from the references."""
    records = list(records)
    if not records:
        raise ValueError("empty corpus")
    df = Counter()
    for rec in records:
        df.update({g for ref in rec.references for n in range(1, n_max + 1) for g in ngrams(list(ref), n)})
    log_docs = math.log(len(records))
    scores = []
    for rec in records:
        cand = list(rec.candidate)
        c_vec, c_norm = _tfidf(cand, n_max, df, log_docs)
        acc = 0.0
        for ref in rec.references:
            ref = list(ref)
            r_vec, r_norm = _tfidf(ref, n_max, df, log_docs)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2))
            sims = []
            for n in range(n_max):
                val = sum(min(w, r_vec[n].get(g, 0.0)) * r_vec[n].get(g, 0.0) for g, w in c_vec[n].items())
                if c_norm[n] != 0 and r_norm[n] != 0:
                    val /= c_norm[n] * r_norm[n]
                sims.append(val * penalty)
            acc += sum(sims) / n_max
        scores.append(10.0 * acc / len(rec.references))
    return scores


def cider_d(records, n_max=4, sigma=6.0):
    scores = cider_d_scores(records, n_max, sigma)
    return math.fsum(scores) / len(scores)


def evaluate(records):
    records = list(records)
    report = {f"BLEU@{n}": bleu_n(records, n) for n in range(1, 5)}
    report["CIDEr-D"] = cider_d(records)
    return report


def format_report(report, machine=False):
    if machine:
        return "\n".join(f"{k}\t{v!r}" for k, v in report.items())
    return "\n".join(f"{k:<8} {v:8.4f}" for k, v in report.items())


def records_from(predictions, references):
    """Pair ``{id: tokens}`` predictions with ``{id: [ref tokens, ...]}`` references."""
    missing = sorted(set(references) - set(predictions))
    if missing:
        raise KeyError(f"no prediction for {len(missing)} video(s), e.g. {missing[0]!r}")
    return [EvaluationRecord(vid, predictions[vid], refs) for vid, refs in sorted(references.items())]
