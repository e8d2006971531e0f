"""Figures for training runs and experiment reports, written to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SYSTEM_ORDER = ("random", "tfidf", "pre", "joint", "oracle")


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_training(histories: dict[str, list[dict]], path) -> None:
    """Per-step mean reward and per-epoch validation BLEU, one line per run."""
    fig, (ax_r, ax_v) = plt.subplots(1, 2, figsize=(10, 4))
    for name, rows in histories.items():
        steps = [r["step"] for r in rows if r.get("mean_reward") is not None]
        rewards = [r["mean_reward"] for r in rows if r.get("mean_reward") is not None]
        ax_r.plot(steps, rewards, lw=0.8, label=name)
        val = [(r["step"], r["val_bleu"]) for r in rows if r.get("val_bleu") is not None]
        if val:
            ax_v.plot(*zip(*val), marker="o", label=name)
    ax_r.set_xlabel("step")
    ax_r.set_ylabel("mean reward (log-prob)")
    ax_v.set_xlabel("step")
    ax_v.set_ylabel("validation BLEU")
    for ax in (ax_r, ax_v):
        ax.grid(alpha=0.3)
        if histories:
            ax.legend()
    _save(fig, path)


def plot_bleu(per_seed: dict[str, list[float]], path) -> None:
    """Test BLEU per system: one dot per seed plus a bar at the median."""
    names = [n for n in SYSTEM_ORDER if n in per_seed] + [n for n in per_seed if n not in SYSTEM_ORDER]
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, name in enumerate(names):
        vals = sorted(per_seed[name])
        med = vals[len(vals) // 2] if len(vals) % 2 else 0.5 * (vals[len(vals) // 2 - 1] + vals[len(vals) // 2])
        ax.bar(i, med, color="lightsteelblue")
        ax.scatter([i] * len(vals), vals, color="k", s=12, zorder=3)
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("test BLEU")
    ax.set_ylim(0, 100)
    _save(fig, path)


def plot_val_test(points: list[tuple[float, float]], path, rho: float | None = None) -> None:
    """Validation BLEU against test BLEU across checkpoints."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    if points:
        v, t = zip(*points)
        ax.scatter(v, t)
    ax.set_xlabel("validation BLEU (image -> source -> target)")
    ax.set_ylabel("test BLEU")
    if rho is not None:
        ax.set_title(f"Spearman {rho:.3f}")
    ax.grid(alpha=0.3)
    _save(fig, path)
