import json
import math

import numpy as np
import pytest

from ulda.episodes import LabeledSet
from ulda.evaluator import EvalReport, confidence_interval, evaluate
from ulda.model import ProtoNet


def test_ci_examples():
    assert confidence_interval([0.5, 0.5, 0.5]) == (0.5, 0.0)
    m, h = confidence_interval([0.0, 1.0])
    assert m == 0.5 and abs(h - 1.96 * math.sqrt(0.5) / math.sqrt(2)) < 1e-12
    assert abs(h - 0.980) < 1e-3


def test_ci_linearity_and_rejection():
    a = np.random.default_rng(0).random(20)
    m, h = confidence_interval(a)
    m2, h2 = confidence_interval(a * 100)
    assert abs(m2 - 100 * m) < 1e-9 and abs(h2 - 100 * h) < 1e-9
    with pytest.raises(ValueError):
        confidence_interval([0.3])


class IndicatorModel:
    """Embeds each image as the one-hot of the class stored in its first pixel."""

    embed_dim = 4
    eq5_literal = False

    def embed_array(self, images):
        cls = np.round(images[:, 0, 0, 0] * 10).astype(int)
        return np.eye(4, dtype=np.float32)[cls]


def _indicator_set(per_class=20):
    labels = np.repeat(np.arange(4), per_class)
    images = np.random.default_rng(0).random((len(labels), 1, 4, 4)).astype(np.float32)
    images[:, 0, 0, 0] = labels / 10
    return LabeledSet(images, labels)


def test_perfect_separability():
    rep = evaluate(IndicatorModel(), _indicator_set(), n_way=3, k_shot=1, m_query=5, T=50, seed=0)
    assert rep.mean_accuracy == 1.0 and rep.ci95 == 0.0
    assert len(rep.accuracies) == rep.episode_count == 50


def test_report_json_and_summary(tmp_path):
    rep = EvalReport(5, 1, 15, 2, [0.4, 0.41], 0.4063, 0.0061)
    assert rep.summary() == "5-way 1-shot: 40.63 ± 0.61"
    path = tmp_path / "r.json"
    rep.write(path)
    data = json.loads(path.read_text())
    assert data["mean_accuracy"] == 0.4063 and data["episode_count"] == 2


def test_random_model_near_chance_and_untouched():
    ls = LabeledSet(np.random.default_rng(1).random((200, 1, 16, 16)).astype(np.float32), np.repeat(np.arange(10), 20))
    model = ProtoNet((1, 16, 16), 8, seed=0)
    before = {k: p.data.copy() for k, p in model.parameters().items()}
    stats = [b[3].running_mean.copy() for b in model.backbone.blocks]
    rep = evaluate(model, ls, 5, 1, 15, T=300, seed=2)
    assert 0.15 <= rep.mean_accuracy <= 0.25
    assert abs(rep.mean_accuracy - np.mean(rep.accuracies)) < 1e-9
    assert all(np.array_equal(before[k], p.data) for k, p in model.parameters().items())
    assert all(np.array_equal(s, b[3].running_mean) for s, b in zip(stats, model.backbone.blocks))
    again = evaluate(model, ls, 5, 1, 15, T=300, seed=2)
    assert again.accuracies == rep.accuracies


def test_repeats_mean_of_means():
    rep = evaluate(IndicatorModel(), _indicator_set(), 3, 1, 5, T=10, seed=0, repeats=3)
    assert rep.episode_count == 30 and len(rep.repeats) == 3
    assert abs(rep.mean_accuracy - np.mean([m for m, _ in rep.repeats])) < 1e-12


def test_insufficient_examples_rejected():
    with pytest.raises(ValueError, match="class"):
        evaluate(IndicatorModel(), _indicator_set(per_class=3), 3, 1, 5, T=5)
    with pytest.raises(ValueError, match="classes available"):
        evaluate(IndicatorModel(), _indicator_set(), 5, 1, 5, T=5)
