"""Beam search over a :class:`~commgame.seqmodels.StepModel`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seqmodels import BOS, EOS, StepModel


@dataclass(frozen=True)
class Hypothesis:
    sentence: tuple[int, ...]
    score: float


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 5
    t_max: int = 20
    length_norm: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


def _rank_key(h: Hypothesis, length_norm: bool):
    score = h.score / len(h.sentence) if length_norm else h.score
    return (-score, h.sentence)


def _settled(finished, frontier, K) -> bool:
    if len(finished) < K:
        return False
    kth = sorted(h.score for h in finished)[-K]
    return max(score for _, score in frontier) <= kth


def beam_search(model: StepModel, cfg: BeamConfig) -> list[Hypothesis]:
    """Return up to ``cfg.beam_size`` EOS-terminated hypotheses, best first.

    Candidates are walked best first: EOS-terminated ones ranked above the
    ``K``-th unfinished candidate retire, and the frontier keeps the ``K``
    best unfinished prefixes.  Search stops when nothing is left to extend, or
    when ``K`` hypotheses have finished and no live prefix scores above the
    ``K``-th of them (log-probabilities only fall as tokens are added, so no
    extension could enter the result).  At the last position only EOS may be emitted, so every
    result is a well-formed sentence of length <= ``t_max``.  Ties are
    broken by lexicographic token-id order.
    """
    K = cfg.beam_size
    state = model.start()
    frontier: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []
    for t in range(cfg.t_max):
        if not frontier or _settled(finished, frontier, K):
            break
        prev = [toks[-1] if toks else BOS for toks, _ in frontier]
        logp, state = model.step(state, prev)
        last = t == cfg.t_max - 1
        cands = []
        for row, (toks, score) in enumerate(frontier):
            allowed = (EOS,) if last else range(1, logp.shape[1])
            for tok in allowed:
                lp = logp[row, tok]
                if lp == -np.inf:
                    continue
                cands.append((score + float(lp), toks + (tok,), row))
        cands.sort(key=lambda c: (-c[0], c[1]))
        new_frontier, rows = [], []
        for score, toks, row in cands:
            if len(new_frontier) == K:
                break
            if toks[-1] == EOS:
                finished.append(Hypothesis(toks, score))
            elif len(new_frontier) < K:
                new_frontier.append((toks, score))
                rows.append(row)
        frontier = new_frontier
        if rows:
            state = state.select(rows)
    finished.sort(key=lambda h: _rank_key(h, cfg.length_norm))
    return finished[:K]


def greedy(model: StepModel, t_max: int = 20) -> Hypothesis:
    return beam_search(model, BeamConfig(beam_size=1, t_max=t_max))[0]
