"""Supervised N-way K-shot evaluation with a 95% confidence interval."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .episodes import sample_labeled_indices
from .model import predict

DESK_EPISODES = 600
PAPER_EPISODES = 1000
PAPER_REPEATS = 5
EVAL_QUERY = 15


def confidence_interval(accs):
    """``(mean, 1.96 * s / sqrt(T))`` with ``s`` the sample standard deviation."""
    a = np.asarray(accs, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise ValueError(f"confidence_interval needs at least 2 values, got {a.size}")
    return float(a.mean()), float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


@dataclass
class EvalReport:
    n_way: int
    k_shot: int
    m_query: int
    episode_count: int
    accuracies: list
    mean_accuracy: float
    ci95: float
    repeats: list = field(default_factory=list)
    seed: int = 0

    def summary(self):
        """One line in the usual table format, e.g. ``5-way 1-shot: 40.63 ± 0.61``."""
        return f"{self.n_way}-way {self.k_shot}-shot: {100 * self.mean_accuracy:.2f} ± {100 * self.ci95:.2f}"

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def _episode_seeds(seed, count):
    return np.random.SeedSequence([int(seed), 0x45564C]).spawn(count)


def evaluate(model, labeled_set, n_way=5, k_shot=1, m_query=EVAL_QUERY, T=DESK_EPISODES, seed=0, repeats=1):
    """Mean top-1 accuracy of prototype classification over ``T`` episodes.

    Only the images that some episode uses are embedded, once each, in
    evaluation mode; the model's parameters and batchnorm statistics are
    left untouched. With ``repeats > 1`` the protocol runs that many times
    with fresh episodes and the report carries the mean of the per-run
    means and of the per-run half-widths.
    """
    if T < 1 or repeats < 1:
        raise ValueError(f"need at least one episode and one repeat, got T={T}, repeats={repeats}")
    seqs = _episode_seeds(seed, T * repeats)
    plans = [sample_labeled_indices(labeled_set.labels, n_way, k_shot, m_query, np.random.default_rng(s)) for s in seqs]
    used = np.unique(np.concatenate([np.concatenate([s.ravel(), q.ravel()]) for _, s, q in plans]))
    emb = np.zeros((len(labeled_set), model.embed_dim), dtype=np.float32)
    emb[used] = model.embed_array(labeled_set.images[used])

    q_labels = np.repeat(np.arange(n_way), m_query)
    accs = np.empty(len(plans))
    for e, (_, s_idx, q_idx) in enumerate(plans):
        protos = emb[s_idx].astype(np.float64).mean(axis=1)
        pred = predict(emb[q_idx.ravel()], protos, literal=model.eq5_literal)
        accs[e] = (pred == q_labels).mean()

    runs = []
    for r in range(repeats):
        chunk = accs[r * T:(r + 1) * T]
        runs.append(confidence_interval(chunk) if T > 1 else (float(chunk[0]), 0.0))
    mean = float(np.mean([m for m, _ in runs]))
    ci = float(np.mean([h for _, h in runs]))
    return EvalReport(
        n_way=n_way, k_shot=k_shot, m_query=m_query, episode_count=T * repeats,
        accuracies=accs.tolist(), mean_accuracy=mean, ci95=ci,
        repeats=[list(r) for r in runs] if repeats > 1 else [], seed=int(seed),
    )
