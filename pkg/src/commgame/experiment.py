"""End-to-end experiment on the synthetic world.

One seed runs the whole comparison: captioner pre-training, PRE. and JOINT
game training from the same translator initialisation, the ORACLE on the
ground-truth pairs of the ``D_zy`` images, and both retrieval baselines.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import corpus, game, plotting
from .eval import TfidfBaseline, baseline_random, evaluate_function, evaluate_test
from .seqmodels import ModelConfig, init_captioner, init_translator

log = logging.getLogger(__name__)

DEFAULT_NOISE = 0.3


@dataclass
class ExperimentConfig:
    n_per_side: int = 500
    noise_sigma: float = DEFAULT_NOISE
    game: game.GameConfig = field(default_factory=game.GameConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    test_beam: int = 5
    with_checkpoints: bool = False


@dataclass
class SeedResult:
    seed: int
    bleu: dict[str, float]
    pre_rewards: dict[int, float]
    joint_rewards: dict[int, float]
    checkpoints: list[tuple[int, float, float]] = field(default_factory=list)
    seconds: float = 0.0


def translator_seed(seed: int) -> int:
    return 1_000_003 * (seed + 1)


def run_seed(seed: int, cfg: ExperimentConfig | None = None) -> SeedResult:
    cfg = cfg or ExperimentConfig()
    t0 = time.time()
    gcfg = replace(cfg.game, seed=seed)
    split = corpus.make_splits(cfg.n_per_side, seed, cfg.noise_sigma)
    captioner = game.pretrain_captioner(split.D_zx, gcfg, init_captioner(cfg.model, seed), D_val=split.D_zx_val)
    tr0 = init_translator(cfg.model, translator_seed(seed))

    pre_cfg = gcfg
    if cfg.with_checkpoints and not gcfg.checkpoint_every:
        pre_cfg = replace(gcfg, checkpoint_every=max(1, len(split.D_zy) // gcfg.batch_size // 2))
    pre = game.train_pre(captioner, tr0, split.D_zy, pre_cfg, D_val=split.D_zy_val)
    joint = game.train_joint(captioner, tr0, split.D_zy, split.D_zx, gcfg, D_val=split.D_zy_val)
    oracle = game.train_oracle(split.parallel_pairs(), gcfg, tr0)

    tests = split.test_pairs
    bleu = {
        "random": evaluate_function(baseline_random(split.D_zy, np.random.default_rng([seed, 7])), tests).score,
        "tfidf": evaluate_function(TfidfBaseline(split.D_zx, split.D_zy), tests).score,
        "pre": evaluate_test(pre.best_translator, tests, cfg.test_beam).score,
        "joint": evaluate_test(joint.best_translator, tests, cfg.test_beam).score,
        "oracle": evaluate_test(oracle, tests, cfg.test_beam).score,
    }
    checkpoints = []
    if cfg.with_checkpoints:
        for step, val, params in pre.checkpoints:
            checkpoints.append((step, val, evaluate_test(params, tests, cfg.test_beam).score))
    result = SeedResult(seed, bleu, pre.epoch_rewards(), joint.epoch_rewards(), checkpoints, time.time() - t0)
    log.info("seed %d: %s (%.0fs)", seed, {k: round(v, 2) for k, v in bleu.items()}, result.seconds)
    return result


def median_bleu(results: list[SeedResult]) -> dict[str, float]:
    keys = results[0].bleu.keys()
    return {k: float(np.median([r.bleu[k] for r in results])) for k in keys}


def spearman(a, b) -> float:
    return float(stats.spearmanr(a, b).statistic)


def write_report(results: list[SeedResult], out) -> dict:
    """Per-seed BLEU table, medians, checkpoint correlation and figures under ``out``."""
    os.makedirs(out, exist_ok=True)
    systems = list(results[0].bleu)
    with open(os.path.join(out, "bleu.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["seed"] + systems)
        for r in results:
            w.writerow([r.seed] + [repr(float(r.bleu[k])) for k in systems])
    med = median_bleu(results)
    report = {"median": med, "seeds": [r.seed for r in results]}
    ckpts = next((r.checkpoints for r in results if r.checkpoints), [])
    if ckpts:
        with open(os.path.join(out, "checkpoints.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "val_bleu", "test_bleu"])
            for step, val, test in ckpts:
                w.writerow([step, repr(float(val)), repr(float(test))])
        report["spearman"] = spearman([c[1] for c in ckpts], [c[2] for c in ckpts])
        plotting.plot_val_test([(c[1], c[2]) for c in ckpts], os.path.join(out, "val_vs_test.png"),
                               report["spearman"])
    plotting.plot_bleu({k: [r.bleu[k] for r in results] for k in systems}, os.path.join(out, "bleu.png"))
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(f"median test BLEU over seeds {report['seeds']}\n")
        for k in systems:
            f.write(f"  {k:<7} {med[k]:6.2f}\n")
        if "spearman" in report:
            f.write(f"Spearman(val, test) over {len(ckpts)} PRE checkpoints: {report['spearman']:.3f}\n")
    return report
