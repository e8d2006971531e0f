"""BLEU, the two-step validation rule, retrieval baselines and test scoring.

BLEU here is corpus-level BLEU-4 over token ids with EOS stripped:

    score = 100 * BP * exp(mean_n log p_n),   BP = min(1, exp(1 - r / c))

``p_n`` are clipped n-gram precisions summed over the corpus, ``c`` is the
total hypothesis length and ``r`` the total of per-sentence closest
reference lengths (shorter wins ties).  ``p_1`` is never smoothed; for
``n >= 2`` a zero match count becomes ``1 / (total_n + 1)``.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore
from .corpus import Document
from .decode import BeamConfig, beam_search
from .seqmodels import EOS, CaptionerStep, TranslatorStep


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int


def _strip(sentence) -> tuple[int, ...]:
    return tuple(t for t in sentence if t != EOS)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps, refs, max_n: int = 4) -> BleuReport:
    """Corpus BLEU of ``hyps`` against lists of references ``refs``."""
    if not hyps:
        raise ValueError("bleu needs at least one hypothesis")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} reference sets")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref_set in zip(hyps, refs):
        h = _strip(hyp)
        rs = [_strip(x) for x in ref_set]
        c += len(h)
        r += min((abs(len(x) - len(h)), len(x)) for x in rs)[1]
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            maxref: Counter = Counter()
            for x in rs:
                maxref |= _ngrams(x, n)
            matches[n - 1] += sum(min(k, maxref[g]) for g, k in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = []
    for n in range(max_n):
        if n == 0 or matches[n] > 0:
            precisions.append(matches[n] / totals[n] if totals[n] else 0.0)
        else:
            precisions.append(1.0 / (totals[n] + 1))
    bp = 1.0 if c >= r else (math.exp(1 - r / c) if c else 0.0)
    if precisions[0] == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(min(score, 100.0), precisions, bp, c, r)


# ---------------------------------------------------------------- decoding helpers


def caption(captioner: ParamStore, z, beam: int = 5, t_max: int = 20) -> tuple[int, ...]:
    return beam_search(CaptionerStep(captioner, z), BeamConfig(beam, t_max))[0].sentence


def translate(translator: ParamStore, x, beam: int = 5, t_max: int = 20, with_score: bool = False):
    best = beam_search(TranslatorStep(translator, x), BeamConfig(beam, t_max))[0]
    return (best.sentence, best.score) if with_score else best.sentence


@dataclass
class ValidationResult:
    bleu: BleuReport
    pairs: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)


def validate(captioner: ParamStore, translator: ParamStore, D_zy_val: list[Document],
             beam: int = 5, t_max: int = 20) -> ValidationResult:
    """Two-step rule: caption each image, translate the caption, BLEU vs the gold target."""
    pairs = []
    for doc in D_zy_val:
        x_hat = caption(captioner, doc.features, beam, t_max)
        y_hat = translate(translator, x_hat, beam, t_max)
        pairs.append((x_hat, y_hat))
    report = bleu([y for _, y in pairs], [[d.text] for d in D_zy_val])
    return ValidationResult(report, pairs)


def evaluate_test(translator: ParamStore, test_pairs, beam: int = 5, multi_ref: bool = False,
                  t_max: int = 20) -> BleuReport:
    """Corpus BLEU of beam-decoded translations.

    With ``multi_ref`` each item of ``test_pairs`` is a group
    ``(sources, references)``; every source is translated and the
    highest-probability output is scored against all references.
    """
    if not test_pairs:
        raise ValueError("no test pairs")
    hyps, refs = [], []
    if multi_ref:
        for sources, references in test_pairs:
            outs = [translate(translator, x, beam, t_max, with_score=True) for x in sources]
            hyps.append(max(outs, key=lambda o: (o[1], tuple(-t for t in o[0])))[0])
            refs.append(list(references))
    else:
        for x, y in test_pairs:
            hyps.append(translate(translator, x, beam, t_max))
            refs.append([y])
    return bleu(hyps, refs)


def decode_test(translator: ParamStore, test_pairs, beam: int = 5, t_max: int = 20):
    return [(x, translate(translator, x, beam, t_max)) for x, _ in test_pairs]


# ---------------------------------------------------------------- baselines


def baseline_random(D_zy: list[Document], rng: np.random.Generator):
    """A translator that ignores its input and returns a random target text."""
    if not D_zy:
        raise ValueError("D_zy is empty")

    def translate_fn(x):
        return D_zy[int(rng.integers(len(D_zy)))].text

    return translate_fn


class TfidfIndex:
    """Raw term frequency times ``log(N / df)`` over token ids, IDF from the indexed corpus."""

    def __init__(self, docs: list[Document]):
        if not docs:
            raise ValueError("empty corpus")
        self.docs = docs
        counts = [Counter(_strip(d.text)) for d in docs]
        df: Counter = Counter()
        for c in counts:
            df.update(c.keys())
        n = len(docs)
        self.idf = {t: math.log(n / k) for t, k in df.items()}
        self.vectors = [self._weigh(c) for c in counts]
        self.norms = [math.sqrt(sum(v * v for v in vec.values())) for vec in self.vectors]

    def _weigh(self, counts: Counter) -> dict[int, float]:
        return {t: k * self.idf.get(t, 0.0) for t, k in counts.items()}

    def nearest(self, x) -> Document:
        q = self._weigh(Counter(_strip(x)))
        qn = math.sqrt(sum(v * v for v in q.values()))
        best, best_key = None, None
        for doc, vec, norm in zip(self.docs, self.vectors, self.norms):
            dot = sum(w * vec.get(t, 0.0) for t, w in q.items())
            cos = dot / (qn * norm) if qn > 0 and norm > 0 else 0.0
            key = (-cos, doc.image_id)
            if best_key is None or key < best_key:
                best, best_key = doc, key
        return best


def _pooled(docs: list[Document]) -> np.ndarray:
    return np.stack([d.features.mean(axis=0) for d in docs])


def nearest_image(z: np.ndarray, docs: list[Document], pooled: np.ndarray | None = None) -> Document:
    pooled = _pooled(docs) if pooled is None else pooled
    q = z.mean(axis=0)
    norms = np.linalg.norm(pooled, axis=1) * np.linalg.norm(q)
    cos = np.where(norms > 0, pooled @ q / np.where(norms > 0, norms, 1.0), 0.0)
    best = max(range(len(docs)), key=lambda i: (cos[i], -docs[i].image_id))
    return docs[best]


class TfidfBaseline:
    """Text retrieval in ``D_zx`` then image retrieval in ``D_zy``; returns a stored target text."""

    def __init__(self, D_zx: list[Document], D_zy: list[Document]):
        if not D_zx or not D_zy:
            raise ValueError("corpora must be nonempty")
        self.index = TfidfIndex(D_zx)
        self.D_zy = D_zy
        self.pooled = _pooled(D_zy)

    def __call__(self, x) -> tuple[int, ...]:
        via = self.index.nearest(x)
        return nearest_image(via.features, self.D_zy, self.pooled).text


def baseline_tfidf(x, D_zx: list[Document], D_zy: list[Document]) -> tuple[int, ...]:
    return TfidfBaseline(D_zx, D_zy)(x)


def evaluate_function(translate_fn, test_pairs) -> BleuReport:
    return bleu([translate_fn(x) for x, _ in test_pairs], [[y] for _, y in test_pairs])


# ---------------------------------------------------------------- reports


def write_report_csv(path, metrics: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v)) if isinstance(v, (float, np.floating)) else v])


def write_summary(path, title: str, metrics: dict) -> None:
    width = max(len(k) for k in metrics) if metrics else 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(title + "\n")
        for k, v in metrics.items():
            val = f"{v:.2f}" if isinstance(v, (float, np.floating)) else str(v)
            f.write(f"  {k.ljust(width)}  {val}\n")


def write_pairs(path, pairs, src_vocab, tgt_vocab) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x, y in pairs:
            f.write(" ".join(src_vocab.decode(x)) + "\t" + " ".join(tgt_vocab.decode(y)) + "\n")
