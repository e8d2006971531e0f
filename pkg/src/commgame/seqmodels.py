"""The two agents: an attention captioner over feature grids and an
attention encoder-decoder translator.

Both share one decoder design: a single-layer GRU fed with the previous
token embedding and an attention context, additive attention over a memory
of annotation vectors, and a linear readout of ``[state; context]``.

Token ids follow :class:`Vocab`: ``BOS=0`` is an input-only symbol fed as
the first decoder input and is never emitted, so a vocabulary of size ``V``
has ``V - 1`` output classes.  ``EOS=1`` terminates every sentence.

Dimensions are always read off the parameter shapes, so a :class:`ParamStore`
is self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

BOS, EOS, UNK = 0, 1, 2
RESERVED = ("<bos>", "<eos>", "<unk>")
INIT_SCALE = 0.08
MASK_NEG = -1e30


class Vocab:
    """Bijective token <-> id map with the reserved tokens first."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, words) -> tuple[int, ...]:
        """Map words to ids and append EOS."""
        return tuple(self.stoi.get(w, UNK) for w in words) + (EOS,)

    def decode(self, ids) -> list[str]:
        """Map ids back to words, dropping the terminal EOS."""
        return [self.itos[i] for i in ids if i != EOS]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> Vocab:
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


@dataclass(frozen=True)
class ModelConfig:
    """Sizes for both agents.  Vocab sizes count every id, BOS included."""

    src_vocab: int = 22
    tgt_vocab: int = 22
    embed_dim: int = 32
    hidden_dim: int = 64
    attention_dim: int = 32
    feature_dim: int = 16
    locations: int = 16
    t_max: int = 20

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "attention_dim", "feature_dim", "locations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.src_vocab < 2 or self.tgt_vocab < 2:
            raise ValueError("vocabularies need at least BOS and EOS")
        if self.t_max < 2:
            raise ValueError("t_max must be >= 2")


def check_sentence(tokens, vocab_size: int, t_max: int | None = None) -> tuple[int, ...]:
    """Validate a sentence and return it as a tuple of ids."""
    tokens = tuple(int(t) for t in tokens)
    if not tokens or tokens[-1] != EOS:
        raise ValueError(f"sentence must end with EOS: {tokens}")
    if EOS in tokens[:-1]:
        raise ValueError(f"EOS inside sentence: {tokens}")
    if BOS in tokens:
        raise ValueError(f"BOS inside sentence: {tokens}")
    bad = [t for t in tokens if not 0 <= t < vocab_size]
    if bad:
        raise ValueError(f"token id {bad[0]} out of vocabulary range [0, {vocab_size})")
    if t_max is not None and len(tokens) > t_max:
        raise ValueError(f"sentence length {len(tokens)} exceeds t_max={t_max}")
    return tokens


# ---------------------------------------------------------------- initialisation


def _gru_shapes(prefix: str, n_in: int, hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.W_x", (n_in, 3 * hidden)),
        (f"{prefix}.W_h", (hidden, 2 * hidden)),
        (f"{prefix}.U_h", (hidden, hidden)),
        (f"{prefix}.b", (3 * hidden,)),
    ]


def _decoder_shapes(cfg: ModelConfig, vocab: int, memory_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    e, h, a = cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim
    return [
        ("dec.emb", (vocab, e)),
        ("dec.init.W", (memory_dim, h)),
        ("dec.init.b", (h,)),
        ("att.W_s", (h, a)),
        ("att.W_m", (memory_dim, a)),
        ("att.b", (a,)),
        ("att.v", (a,)),
        *_gru_shapes("dec.gru", e + memory_dim, h),
        ("out.W", (h + memory_dim, vocab - 1)),
        ("out.b", (vocab - 1,)),
    ]


def captioner_shapes(cfg: ModelConfig):
    return _decoder_shapes(cfg, cfg.src_vocab, cfg.feature_dim + cfg.locations)


def translator_shapes(cfg: ModelConfig):
    e, h = cfg.embed_dim, cfg.hidden_dim
    return [
        ("enc.emb", (cfg.src_vocab, e)),
        *_gru_shapes("enc.fwd", e, h),
        *_gru_shapes("enc.bwd", e, h),
        *_decoder_shapes(cfg, cfg.tgt_vocab, 2 * h),
    ]


def _is_bias(name: str) -> bool:
    return name.endswith(".b")


def _init(shapes, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(rng_seed=seed)
    for name, shape in shapes:
        if _is_bias(name):
            store.add(name, np.zeros(shape))
        else:
            store.add(name, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))
    return store


def init_captioner(cfg: ModelConfig, seed: int) -> ParamStore:
    return _init(captioner_shapes(cfg), seed)


def init_translator(cfg: ModelConfig, seed: int) -> ParamStore:
    return _init(translator_shapes(cfg), seed)


def zeros_like_store(store: ParamStore) -> ParamStore:
    return ParamStore({k: np.zeros_like(v) for k, v in store.entries.items()}, store.rng_seed)


# ---------------------------------------------------------------- building blocks


def gru_cell(P, prefix: str, x_proj: Tensor, h: Tensor) -> Tensor:
    """One GRU update given the precomputed input projection ``x @ W_x``."""
    hd = h.shape[-1]
    gx = x_proj + P[f"{prefix}.b"]
    zr = ad.sigmoid(gx[:, : 2 * hd] + h @ P[f"{prefix}.W_h"])
    z, r = zr[:, :hd], zr[:, hd:]
    n = ad.tanh(gx[:, 2 * hd:] + (r * h) @ P[f"{prefix}.U_h"])
    return h + z * (n - h)


@dataclass
class DecoderState:
    """Everything a decoder step needs; rows index independent hypotheses."""

    memory: Tensor          # [B, L, M]
    memory_proj: Tensor     # [B, L, A]
    mask_bias: np.ndarray   # [B, L], 0 for real slots, MASK_NEG for padding
    h: Tensor               # [B, H]

    def select(self, rows) -> DecoderState:
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderState(
            Tensor(self.memory.value[rows]), Tensor(self.memory_proj.value[rows]),
            self.mask_bias[rows], Tensor(self.h.value[rows]))


def decoder_start(P, memory: Tensor, mask: np.ndarray) -> DecoderState:
    """Initial state ``tanh(mean(memory) W + b)`` plus cached attention keys."""
    mask = np.asarray(mask, dtype=ad.DTYPE)
    counts = mask.sum(axis=1, keepdims=True)
    mean = ad.masked_sum(memory, (mask / counts)[:, :, None], axis=1)
    h0 = ad.tanh(mean @ P["dec.init.W"] + P["dec.init.b"])
    proj = memory @ P["att.W_m"] + P["att.b"]
    return DecoderState(memory, proj, np.where(mask > 0, 0.0, MASK_NEG), h0)


def decoder_step(P, state: DecoderState, prev_tokens) -> tuple[Tensor, Tensor, Tensor]:
    """Advance one step.  Returns ``(log-probs over output classes, new h, attention)``.

    Output class ``k`` corresponds to token id ``k + 1``.
    """
    emb = ad.embedding(P["dec.emb"], prev_tokens)
    keys = ad.tanh(state.memory_proj + ad.reshape(state.h @ P["att.W_s"], (state.h.shape[0], 1, -1)))
    scores = keys @ P["att.v"] + state.mask_bias
    alpha = ad.softmax(scores, axis=-1)
    ctx = ad.sum(ad.reshape(alpha, alpha.shape + (1,)) * state.memory, axis=1)
    x = ad.concat([emb, ctx], axis=-1)
    h = gru_cell(P, "dec.gru", x @ P["dec.gru.W_x"], state.h)
    logits = ad.concat([h, ctx], axis=-1) @ P["out.W"] + P["out.b"]
    return ad.log_softmax(logits, axis=-1), h, alpha


def _pad(seqs, pad: int = EOS) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def encode_source(P, sources) -> tuple[Tensor, np.ndarray]:
    """Bidirectional GRU annotations ``[B, T, 2H]`` and their mask."""
    ids, mask = _pad(sources)
    B, T = ids.shape
    hd = P["enc.fwd.U_h"].shape[0]
    emb = ad.embedding(P["enc.emb"], ids)
    proj_f = emb @ P["enc.fwd.W_x"]
    proj_b = emb @ P["enc.bwd.W_x"]
    zero = Tensor(np.zeros((B, hd)))
    fwd = [None] * T
    bwd = [None] * T
    h = zero
    for t in range(T):
        m = mask[:, t: t + 1]
        h_new = gru_cell(P, "enc.fwd", proj_f[:, t, :], h)
        h = h_new if m.all() else h + (h_new - h) * m
        fwd[t] = h
    h = zero
    for t in reversed(range(T)):
        m = mask[:, t: t + 1]
        h_new = gru_cell(P, "enc.bwd", proj_b[:, t, :], h)
        h = h_new if m.all() else h + (h_new - h) * m
        bwd[t] = h
    ann = ad.stack([ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)], axis=1)
    return ann, mask


def _score_targets(P, state: DecoderState, targets, vocab_size: int, keep_attention: bool = False):
    ids, mask = _pad([check_sentence(t, vocab_size) for t in targets])
    B, T = ids.shape
    prev = np.full(B, BOS, dtype=np.int64)
    total = None
    attentions = []
    for t in range(T):
        logp, h, alpha = decoder_step(P, state, prev)
        state = DecoderState(state.memory, state.memory_proj, state.mask_bias, h)
        picked = ad.pick(logp, ids[:, t] - 1)
        if not mask[:, t].all():
            picked = picked * mask[:, t]
        total = picked if total is None else total + picked
        if keep_attention:
            attentions.append(alpha.value)
        prev = ids[:, t]
    if keep_attention:
        return total, attentions
    return total


def _vocab_size(P, key: str) -> int:
    return P[key].shape[0]


def _as_grids(grids) -> np.ndarray:
    arr = np.asarray(grids, dtype=ad.DTYPE)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or not np.isfinite(arr).all():
        raise ValueError("feature grids must be finite arrays of shape [L, D] or [B, L, D]")
    return arr


def grid_memory(z: np.ndarray) -> np.ndarray:
    """Annotation vectors for a feature grid: each cell's features followed by
    a one-hot code of the cell, so attention can address locations."""
    B, L, _ = z.shape
    return np.concatenate([z, np.broadcast_to(np.eye(L), (B, L, L))], axis=-1)


def _caption_memory(P, grids) -> np.ndarray:
    z = _as_grids(grids)
    if z.shape[-1] + z.shape[1] != P["att.W_m"].shape[0]:
        raise ad.ShapeError("caption", z.shape, P["att.W_m"].shape)
    return grid_memory(z)


def caption_scores(P, grids, sentences, keep_attention: bool = False):
    """Per-item ``log P(x | z)`` as a ``[B]`` tensor over a batch of grids."""
    memory = _caption_memory(P, grids)
    state = decoder_start(P, Tensor(memory), np.ones(memory.shape[:2]))
    return _score_targets(P, state, sentences, _vocab_size(P, "dec.emb"), keep_attention)


def translate_scores(P, sources, targets, keep_attention: bool = False):
    """Per-item ``log P(y | x)`` as a ``[B]`` tensor."""
    vs = _vocab_size(P, "enc.emb")
    sources = [check_sentence(s, vs) for s in sources]
    ann, mask = encode_source(P, sources)
    state = decoder_start(P, ann, mask)
    return _score_targets(P, state, targets, _vocab_size(P, "dec.emb"), keep_attention)


def caption_logprob(params: ParamStore, z, x) -> float:
    """``log P(x | z)`` for one grid and one sentence."""
    return float(caption_scores(params.constants(), z, [x]).value[0])


def translate_logprob(params: ParamStore, x, y) -> float:
    """``log P(y | x)`` for one source and one target sentence."""
    return float(translate_scores(params.constants(), [x], [y]).value[0])


def caption_logprob_grad(params: ParamStore, grids, sentences, weights=None):
    """Value and gradient of ``sum_i w_i log P(x_i | z_i)``."""
    P = params.leaves()
    scores = caption_scores(P, grids, sentences)
    return _weighted_value_and_grad(P, scores, weights)


def translate_logprob_grad(params: ParamStore, sources, targets, weights=None):
    """Value and gradient of ``sum_i w_i log P(y_i | x_i)``."""
    P = params.leaves()
    scores = translate_scores(P, sources, targets)
    return _weighted_value_and_grad(P, scores, weights)


def _weighted_value_and_grad(P, scores: Tensor, weights):
    w = np.ones(scores.shape) if weights is None else np.asarray(weights, dtype=ad.DTYPE)
    total = ad.sum(scores * w)
    ad.backward(total)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in P.items()}
    return scores.value.copy(), grads


# ---------------------------------------------------------------- incremental decoding


class StepModel:
    """Incremental decoder over one context, used by beam search.

    ``start()`` returns the initial state for a single hypothesis;
    ``step(state, prev)`` returns full-vocabulary log-probabilities (BOS
    column is ``-inf``) for every row of ``state`` and the advanced state.
    """

    vocab_size: int

    def __init__(self, params: ParamStore):
        self.P = params.constants()

    def start(self) -> DecoderState:
        raise NotImplementedError

    def step(self, state: DecoderState, prev) -> tuple[np.ndarray, DecoderState]:
        logp, h, _ = decoder_step(self.P, state, np.asarray(prev, dtype=np.int64))
        full = np.full((logp.shape[0], self.vocab_size), -np.inf)
        full[:, 1:] = logp.value
        return full, DecoderState(state.memory, state.memory_proj, state.mask_bias, h)


class CaptionerStep(StepModel):
    def __init__(self, params: ParamStore, z):
        super().__init__(params)
        self.memory = _caption_memory(self.P, z)
        self.vocab_size = _vocab_size(self.P, "dec.emb")

    def start(self) -> DecoderState:
        return decoder_start(self.P, Tensor(self.memory), np.ones(self.memory.shape[:2]))


class TranslatorStep(StepModel):
    def __init__(self, params: ParamStore, x):
        super().__init__(params)
        self.x = check_sentence(x, _vocab_size(self.P, "enc.emb"))
        self.vocab_size = _vocab_size(self.P, "dec.emb")

    def start(self) -> DecoderState:
        ann, mask = encode_source(self.P, [self.x])
        return decoder_start(self.P, ann, mask)


def step_distribution(model: StepModel, prefix) -> np.ndarray:
    """Next-token probabilities over the full vocabulary after ``prefix``."""
    state = model.start()
    prev = BOS
    for tok in prefix:
        _, state = model.step(state, [prev])
        prev = int(tok)
    logp, _ = model.step(state, [prev])
    return np.exp(logp[0])


def param_count(cfg: ModelConfig, kind: str) -> int:
    """Closed-form parameter count for ``kind`` in {"captioner", "translator"}."""
    e, h, a = cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim

    def gru(n_in):
        return n_in * 3 * h + h * 2 * h + h * h + 3 * h

    def decoder(v, m):
        return v * e + (m * h + h) + (h * a + m * a + a + a) + gru(e + m) + (h + m) * (v - 1) + (v - 1)

    if kind == "captioner":
        return decoder(cfg.src_vocab, cfg.feature_dim + cfg.locations)
    if kind == "translator":
        return cfg.src_vocab * e + 2 * gru(e) + decoder(cfg.tgt_vocab, 2 * h)
    raise ValueError(kind)
