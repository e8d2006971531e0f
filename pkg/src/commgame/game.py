"""The two-agent communication game and its trainers.

For a target-side document ``<z, y>`` the captioner proposes ``K`` middle
sentences by beam search, the translator scores the gold ``y`` from each,
and the log-probabilities serve as rewards:

    captioner grad  = 1/K sum_k r_k * grad log P(x_k | z)
    translator grad = 1/K sum_k grad log P(y | x_k)

Both agents then take a plain gradient-ascent step.  Mini-batches average
these per-document estimates.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .corpus import Document
from .decode import BeamConfig, Hypothesis, beam_search
from .eval import bleu, caption, translate
from .seqmodels import CaptionerStep, caption_scores, translate_logprob, translate_scores

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A non-finite value appeared in gradients or parameters."""


@dataclass
class GameConfig:
    beam_k: int = 2
    lr_captioner: float = 0.01
    lr_translator: float = 0.5
    lr_pretrain: float = 0.3
    freeze_captioner_epochs: int = 5
    lam: float = 10.0
    batch_size: int = 8
    max_epochs: int = 12
    pretrain_epochs: int = 20
    seed: int = 0
    clip_norm: float = 5.0
    normalize_reward: bool = False
    val_beam: int = 5
    t_max: int = 20
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.beam_k < 1:
            raise ValueError("beam_k must be >= 1")
        if self.lr_captioner < 0 or self.lr_translator < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class RewardedSample:
    x_mid: tuple[int, ...]
    r: float


@dataclass
class TrainState:
    step: int
    captioner: ParamStore
    translator: ParamStore
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_val: float = -1.0
    best_translator: ParamStore | None = None
    best_captioner: ParamStore | None = None
    checkpoints: list[tuple[int, float, ParamStore]] = field(default_factory=list)

    def rewards(self) -> list[float]:
        return [row["mean_reward"] for row in self.history if row.get("mean_reward") is not None]

    def epoch_rewards(self) -> dict[int, float]:
        per: dict[int, list[float]] = {}
        for row in self.history:
            if row.get("mean_reward") is not None:
                per.setdefault(row["epoch"], []).append(row["mean_reward"])
        return {e: float(np.mean(v)) for e, v in per.items()}


# ---------------------------------------------------------------- reward and gradients


def reward(translator: ParamStore, y, x_mid) -> float:
    return translate_logprob(translator, x_mid, y)


def _grads(P) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in P.items()}


def middle_sentences(captioner: ParamStore, z, K: int, t_max: int = 20) -> list[Hypothesis]:
    return beam_search(CaptionerStep(captioner, z), BeamConfig(K, t_max))


def weighted_gradients(captioner: ParamStore | None, translator: ParamStore, items, normalize: bool = False):
    """Gradients for explicitly weighted game samples.

    ``items`` is a list of ``(z, y, x_mid, weight)``.  Returns the captioner
    gradient of ``sum_i w_i r_i log P(x_i | z_i)`` (``None`` when
    ``captioner`` is ``None``), the translator gradient of
    ``sum_i w_i log P(y_i | x_i)``, and the raw rewards ``r_i``.
    """
    zs = [it[0] for it in items]
    ys = [it[1] for it in items]
    xs = [it[2] for it in items]
    w = np.array([it[3] for it in items], dtype=ad.DTYPE)
    T = translator.leaves()
    scores = translate_scores(T, xs, ys)
    r = scores.value.copy()
    ad.backward(ad.sum(scores * w))
    tr_grad = _grads(T)
    cap_grad = None
    if captioner is not None:
        C = captioner.leaves()
        cap_scores = caption_scores(C, np.stack(zs), xs)
        rr = r / np.array([len(y) for y in ys]) if normalize else r
        ad.backward(ad.sum(cap_scores * (w * rr)))
        cap_grad = _grads(C)
    return cap_grad, tr_grad, r


def game_gradients(captioner: ParamStore, translator: ParamStore, docs, K: int,
                   with_captioner: bool = True, t_max: int = 20, normalize: bool = False,
                   middles: list[list[Hypothesis]] | None = None):
    """Batch-mean beam estimate over ``docs`` (pairs ``(z, y)``).

    Returns ``(captioner grad or None, translator grad, mean reward, samples)``
    where ``samples`` holds one list of :class:`RewardedSample` per document.
    """
    if middles is None:
        middles = [middle_sentences(captioner, z, K, t_max) for z, _ in docs]
    B = len(docs)
    items = []
    for (z, y), hyps in zip(docs, middles):
        for h in hyps:
            items.append((z, y, h.sentence, 1.0 / (len(hyps) * B)))
    cap_grad, tr_grad, r = weighted_gradients(captioner if with_captioner else None, translator, items, normalize)
    samples, i = [], 0
    for hyps in middles:
        samples.append([RewardedSample(h.sentence, float(r[i + k])) for k, h in enumerate(hyps)])
        i += len(hyps)
    mean_reward = float(np.mean([np.mean([s.r for s in doc]) for doc in samples]))
    return cap_grad, tr_grad, mean_reward, samples


def estimate_gradients(captioner: ParamStore, translator: ParamStore, z, y, K: int, t_max: int = 20):
    """Single-document estimate: ``(captioner grad, translator grad, mean reward)``."""
    cap, tr, mean_r, _ = game_gradients(captioner, translator, [(z, y)], K, t_max=t_max)
    return cap, tr, mean_r


def caption_mle_gradient(captioner: ParamStore, docs: list[Document], lam: float = 1.0) -> dict[str, np.ndarray]:
    """``lam`` times the batch-mean gradient of ``log P(x | z)``."""
    C = captioner.leaves()
    scores = caption_scores(C, np.stack([d.features for d in docs]), [d.text for d in docs])
    ad.backward(ad.sum(scores) * (lam / len(docs)))
    return _grads(C)


def _check_finite(grads: dict[str, np.ndarray], what: str) -> None:
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {what}:{k}")


def _add(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: a[k] + b[k] for k in a}


def _ascend(params: ParamStore, grads, lr: float, clip: float, what: str) -> ParamStore:
    _check_finite(grads, what)
    if lr == 0:
        return params
    return params.apply_update(ad.clip_by_global_norm(grads, clip), lr)


def game_step(state: TrainState, docs, cfg: GameConfig, freeze_captioner: bool,
              mle_docs: list[Document] | None = None,
              middles: list[list[Hypothesis]] | None = None) -> TrainState:
    """One update on a mini-batch of target-side documents.

    ``docs`` is a :class:`Document` or a list of them.  ``mle_docs`` adds the
    ``lam``-weighted captioning likelihood term to the captioner gradient.
    """
    if isinstance(docs, Document):
        docs = [docs]
    pairs = [(d.features, d.text) for d in docs]
    update_cap = not freeze_captioner and cfg.lr_captioner > 0
    cap_grad, tr_grad, mean_r, _ = game_gradients(
        state.captioner, state.translator, pairs, cfg.beam_k,
        with_captioner=update_cap, t_max=cfg.t_max, normalize=cfg.normalize_reward, middles=middles)
    captioner = state.captioner
    if update_cap:
        if mle_docs and cfg.lam > 0:
            cap_grad = _add(cap_grad, caption_mle_gradient(state.captioner, mle_docs, cfg.lam))
        captioner = _ascend(state.captioner, cap_grad, cfg.lr_captioner, cfg.clip_norm, "captioner")
    translator = _ascend(state.translator, tr_grad, cfg.lr_translator, cfg.clip_norm, "translator")
    history = state.history + [{"step": state.step + 1, "epoch": state.epoch,
                                "mean_reward": mean_r, "val_bleu": None}]
    new = copy.copy(state)
    new.step, new.captioner, new.translator, new.history = state.step + 1, captioner, translator, history
    return new


# ---------------------------------------------------------------- trainers


def _batches(order, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def mean_caption_logprob(captioner: ParamStore, docs: list[Document], per_token: bool = False) -> float:
    scores = caption_scores(captioner.constants(), np.stack([d.features for d in docs]),
                            [d.text for d in docs]).value
    if per_token:
        return float(scores.sum() / sum(len(d.text) for d in docs))
    return float(scores.mean())


def pretrain_captioner(D_zx: list[Document], cfg: GameConfig, init: ParamStore,
                       D_val: list[Document] | None = None, epochs: int | None = None) -> ParamStore:
    """Maximum-likelihood captioner training; keeps the best held-out checkpoint.

    Without ``D_val`` the training documents themselves are the held-out set.
    """
    if not D_zx:
        raise ValueError("pretrain_captioner: empty corpus")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    held_out = D_val or D_zx
    rng = np.random.default_rng([cfg.seed, 2])
    params = init
    best, best_score = init, mean_caption_logprob(init, held_out)
    for epoch in range(epochs):
        for idx in _batches(rng.permutation(len(D_zx)), cfg.batch_size):
            batch = [D_zx[i] for i in idx]
            params = _ascend(params, caption_mle_gradient(params, batch), cfg.lr_pretrain, cfg.clip_norm, "captioner")
        score = mean_caption_logprob(params, held_out)
        log.info("pretrain epoch %d held-out logprob %.4f", epoch, score)
        if score > best_score:
            best, best_score = params, score
    return best


def validate_cached(captioner, translator, D_val, cfg: GameConfig, cache: dict) -> float:
    """Validation BLEU reusing captions while the captioner object is unchanged."""
    if cache.get("captions") is None or cache.get("key") is not captioner:
        cache["key"] = captioner
        cache["captions"] = [caption(captioner, d.features, cfg.val_beam, cfg.t_max) for d in D_val]
    hyps = [translate(translator, x, cfg.val_beam, cfg.t_max) for x in cache["captions"]]
    return bleu(hyps, [[d.text] for d in D_val]).score


def _train_game(captioner: ParamStore, translator: ParamStore, D_zy, D_zx, cfg: GameConfig,
                joint: bool, D_val=None, on_epoch=None) -> TrainState:
    state = TrainState(step=0, captioner=captioner, translator=translator)
    game_rng = np.random.default_rng([cfg.seed, 0])
    mle_rng = np.random.default_rng([cfg.seed, 1])
    middle_cache: dict = {}
    val_cache: dict = {}
    mle_order: list[int] = []
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        freeze = not joint or epoch < cfg.freeze_captioner_epochs
        for idx in _batches(game_rng.permutation(len(D_zy)), cfg.batch_size):
            docs = [D_zy[i] for i in idx]
            mle_docs = None
            if joint and not freeze and cfg.lam > 0 and D_zx:
                mle_docs = []
                for _ in docs:
                    if not mle_order:
                        mle_order = list(mle_rng.permutation(len(D_zx)))
                    mle_docs.append(D_zx[mle_order.pop()])
            if middle_cache.get("key") is not state.captioner:
                middle_cache = {"key": state.captioner}
            middles = []
            for d in docs:
                if d.image_id not in middle_cache:
                    middle_cache[d.image_id] = middle_sentences(state.captioner, d.features, cfg.beam_k, cfg.t_max)
                middles.append(middle_cache[d.image_id])
            state = game_step(state, docs, cfg, freeze, mle_docs, middles)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                val = validate_cached(state.captioner, state.translator, D_val, cfg, val_cache) if D_val else None
                state.checkpoints.append((state.step, val, state.translator))
        val = validate_cached(state.captioner, state.translator, D_val, cfg, val_cache) if D_val else None
        state.history[-1]["val_bleu"] = val
        log.info("epoch %d mean reward %.4f val BLEU %s", epoch, state.epoch_rewards()[epoch], val)
        if D_val and val > state.best_val:
            state.best_val = val
            state.best_translator = state.translator
            state.best_captioner = state.captioner
        if on_epoch is not None:
            on_epoch(state)
    if state.best_translator is None:
        state.best_translator, state.best_captioner = state.translator, state.captioner
    return state


def train_pre(captioner_fixed: ParamStore, translator: ParamStore, D_zy, cfg: GameConfig, D_val=None,
              on_epoch=None) -> TrainState:
    """Game training with the captioner frozen for the whole run.

    ``on_epoch(state)`` is called after each epoch's validation.
    """
    return _train_game(captioner_fixed, translator, D_zy, None, cfg, joint=False, D_val=D_val, on_epoch=on_epoch)


def train_joint(captioner: ParamStore, translator: ParamStore, D_zy, D_zx, cfg: GameConfig,
                D_val=None, on_epoch=None) -> TrainState:
    """Game training of both agents plus the ``lam``-weighted captioning term on ``D_zx``.

    Each mini-batch pairs its ``batch_size`` game documents with as many
    ``D_zx`` documents, drawn from an independent stream, so the game side
    sees exactly the documents a PRE. run with the same seed would.
    """
    return _train_game(captioner, translator, D_zy, D_zx, cfg, joint=True, D_val=D_val, on_epoch=on_epoch)


def oracle_gradient(translator: ParamStore, pairs) -> dict[str, np.ndarray]:
    T = translator.leaves()
    scores = translate_scores(T, [x for x, _ in pairs], [y for _, y in pairs])
    ad.backward(ad.sum(scores) * (1.0 / len(pairs)))
    return _grads(T)


def train_oracle(pairs, cfg: GameConfig, init: ParamStore, epochs: int | None = None) -> ParamStore:
    """Maximum-likelihood translator training on parallel pairs."""
    if not pairs:
        raise ValueError("train_oracle: empty corpus")
    epochs = cfg.max_epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 3])
    params = init
    for epoch in range(epochs):
        for idx in _batches(rng.permutation(len(pairs)), cfg.batch_size):
            batch = [pairs[i] for i in idx]
            params = _ascend(params, oracle_gradient(params, batch), cfg.lr_translator, cfg.clip_norm, "translator")
        log.info("oracle epoch %d done", epoch)
    return params


def config_dict(cfg: GameConfig) -> dict:
    return asdict(cfg)
