"""Beam search, greedy and exhaustive decoding over a frozen captioner.

Every decoder ranks by raw summed log-probability (no length
normalisation).  A hypothesis ends when it emits ``<eos>`` or reaches
``max_len`` tokens.  Ties go to the lower token id, then to the earlier
hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .captioner import StepState
from .corpus import Vocabulary

EOS_ID = Vocabulary.eos
BOS_ID = Vocabulary.bos


@dataclass
class Hypothesis:
    tokens: list
    score: float
    state: StepState | None = None
    finished: bool = False


def _take(state, rows):
    return StepState(*(s[rows] for s in state))


def beam_search(model, video, A_i, A_v, beam_size=4, max_len=20, eos=EOS_ID):
    """Keep the ``beam_size`` best unfinished hypotheses per step.

    Candidates are scanned best-first; an EOS candidate met before the beam
    is full moves to the completed pool, as does anything reaching
    ``max_len``.  Search stops once no live hypothesis can beat the best
    completed one, since scores only decrease.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    state, ctx = model.start(video, A_i, A_v)
    beams = [Hypothesis([], 0.0)]
    prev = [BOS_ID]
    completed = []
    for t in range(max_len):
        state, logp = model.step(state, prev, ctx)
        scores = np.array([h.score for h in beams])[:, None] + logp
        # lexsort keys run last-to-first: score desc, then token id, then beam index
        rows, toks = np.indices(scores.shape)
        order = np.lexsort((rows.ravel(), toks.ravel(), -scores.ravel()))
        keep_rows, keep, capped = [], [], 0
        for flat in order:
            b, tok = divmod(int(flat), scores.shape[1])
            hyp = Hypothesis(beams[b].tokens + [tok], float(scores[b, tok]))
            if tok == eos or t == max_len - 1:
                hyp.finished = tok == eos
                completed.append(hyp)
                capped += t == max_len - 1
                if capped == beam_size:
                    break
            else:
                keep.append(hyp)
                keep_rows.append(b)
                if len(keep) == beam_size:
                    break
        best = max(h.score for h in completed) if completed else -np.inf
        if not keep or keep[0].score < best:
            break
        state = _take(state, np.array(keep_rows))
        for row, hyp in enumerate(keep):
            hyp.state = _take(state, np.array([row]))
        beams = keep
        prev = [h.tokens[-1] for h in beams]
    best = completed[0]
    for hyp in completed[1:]:
        if hyp.score > best.score:
            best = hyp
    best.state = None
    return best


def greedy_decode(model, video, A_i, A_v, max_len=20, eos=EOS_ID):
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state, ctx = model.start(video, A_i, A_v)
    tokens, score, prev = [], 0.0, BOS_ID
    for _ in range(max_len):
        state, logp = model.step(state, [prev], ctx)
        tok = int(np.argmax(logp[0]))
        score += float(logp[0, tok])
        tokens.append(tok)
        if tok == eos:
            return Hypothesis(tokens, score, finished=True)
        prev = tok
    return Hypothesis(tokens, score, finished=False)


def exhaustive_decode(model, video, A_i, A_v, max_len=3, budget=100_000, eos=EOS_ID):
    """Global argmax over every sentence of at most ``max_len`` tokens."""
    V = model.dims.vocab
    if V**max_len > budget:
        raise ValueError(f"|V|^max_len = {V}^{max_len} exceeds enumeration budget {budget}")
    state, ctx = model.start(video, A_i, A_v)
    best = [None]

    def visit(state, prev, tokens, score):
        state, logp = model.step(state, [prev], ctx)
        for tok in range(V):
            s = score + float(logp[0, tok])
            seq = tokens + [tok]
            if tok == eos or len(seq) == max_len:
                if best[0] is None or s > best[0].score:
                    best[0] = Hypothesis(seq, s, finished=tok == eos)
            else:
                visit(state, tok, seq, s)

    visit(state, BOS_ID, [], 0.0)
    return best[0]
