import numpy as np
import pytest

from ulda.autodiff import CheckpointError
from ulda.data_io import synthetic_splits
from ulda.episodes import EpisodeConfig, episode_seed, sample_episode
from ulda.trainer import (
    RunLog, TrainConfig, TrainingAborted, epoch_seed, load_checkpoint, lr_at, save_checkpoint, train,
    train_step, with_overrides,
)

SHAPE = (1, 16, 16)


@pytest.fixture(scope="module")
def data():
    return synthetic_splits(8, 5, 6, SHAPE, seed=0)


def _cfg(**kw):
    base = dict(epochs=1, episodes_per_epoch=2, filters=8, eval_episodes=0, seed=1, m_query=2)
    base.update(kw)
    return with_overrides(TrainConfig(), **base)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.001
    assert abs(lr_at(25, cfg) - 6e-5) < 1e-15
    assert abs(lr_at(55, cfg) - 2.4e-6) < 1e-15
    rates = [lr_at(e, cfg) for e in range(60)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        lr_at(60, cfg)
    comp = TrainConfig(lr_mode="compound")
    assert abs(lr_at(55, comp) - 0.001 * 0.06 * 0.012 * 0.0024) < 1e-18


def test_lr_schedule_scaled_for_short_runs():
    assert TrainConfig(epochs=10).schedule() == ((3, 0.06), (7, 0.012), (8, 0.0024))
    assert TrainConfig(epochs=60).schedule() == ((20, 0.06), (40, 0.012), (50, 0.0024))
    assert TrainConfig(epochs=1).schedule() == ()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_factors=((5, 0.1), (3, 0.01)))
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_factors=((10, 0.1),))
    with pytest.raises(ValueError):
        TrainConfig(lr_mode="cosine")


def test_single_step(data):
    pool, _ = data
    model, log = train(pool, _cfg(episodes_per_epoch=1))
    assert all(p.step_count == 1 for p in model.parameters().values())
    assert len(log) == 1


def test_runlog_deterministic_and_files(data, tmp_path):
    pool, test = data
    cfg = _cfg(epochs=2, eval_episodes=5, eval_m_query=2)
    _, a = train(pool, cfg, eval_set=test, out_dir=str(tmp_path))
    _, b = train(pool, cfg, eval_set=test)
    assert a.to_csv() == b.to_csv()
    lines = (tmp_path / "runlog.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_acc,loss_few,loss_self,lr,seconds,eval_acc" and len(lines) == 3
    assert (tmp_path / "last.bin").exists() and (tmp_path / "best.bin").exists()
    back = RunLog.read(tmp_path / "runlog.csv")
    assert back.to_csv() == a.to_csv()


def test_checkpoint_round_trip(data, tmp_path):
    pool, _ = data
    model, _ = train(pool, _cfg())
    path = str(tmp_path / "m.bin")
    save_checkpoint(model, path)
    back, meta = load_checkpoint(path)
    for (k, p), q in zip(model.parameters().items(), back.parameters().values()):
        assert np.array_equal(p.data, q.data) and np.array_equal(p.adam_m, q.adam_m)
        assert np.array_equal(p.adam_v, q.adam_v) and p.step_count == q.step_count
    for a, b in zip(model.backbone.blocks, back.backbone.blocks):
        assert np.array_equal(a[3].running_var, b[3].running_var)
    assert meta["epoch"] == -1


def test_corrupt_checkpoint_rejected(data, tmp_path):
    pool, _ = data
    model, _ = train(pool, _cfg())
    path = tmp_path / "m.bin"
    save_checkpoint(model, str(path))
    raw = path.read_bytes()
    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(CheckpointError, match="offset 0|byte 0"):
        load_checkpoint(str(path))
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_resume_one_episode_matches_straight_run(data, tmp_path):
    pool, _ = data
    cfg = _cfg()
    a_s, a_q = cfg.operator_sets(16)
    eps = [sample_episode(pool, cfg.episode, a_s, a_q, episode_seed(epoch_seed(1, 0), z)) for z in range(2)]
    from ulda.trainer import build_model
    straight = build_model(cfg, SHAPE)
    for ep in eps:
        train_step(straight, ep, 1e-3)
    split = build_model(cfg, SHAPE)
    train_step(split, eps[0], 1e-3)
    save_checkpoint(split, str(tmp_path / "half.bin"))
    resumed, _ = load_checkpoint(str(tmp_path / "half.bin"))
    train_step(resumed, eps[1], 1e-3)
    for p, q in zip(straight.parameters().values(), resumed.parameters().values()):
        assert np.array_equal(p.data, q.data)


def test_abort_and_resume_matches_straight(data, tmp_path):
    pool, test = data
    cfg = _cfg(epochs=3, eval_episodes=4, eval_m_query=2)
    _, straight = train(pool, cfg, eval_set=test)
    train(pool, cfg, eval_set=test, out_dir=str(tmp_path), end_epoch=2)
    model, meta = load_checkpoint(str(tmp_path / "last.bin"))
    assert meta["epoch"] == 1
    _, resumed = train(pool, cfg, eval_set=test, out_dir=str(tmp_path), model=model, start_epoch=2)
    assert resumed.to_csv() == straight.to_csv()


def test_gamma_zero_without_rotation_matches_detached_head(data):
    pool, _ = data
    cfg = _cfg(aug_support="TA", aug_query="TA", gamma=0.0, episodes_per_epoch=3)
    m1, l1 = train(pool, cfg)
    m2, l2 = train(pool, with_overrides(cfg, gamma=1.0))
    assert [r.loss_few for r in l1.records] == [r.loss_few for r in l2.records]
    head = m1.head.weight
    assert np.array_equal(head.data, m2.head.weight.data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_seed(data):
    pool, _ = data
    cfg = _cfg()
    from ulda.trainer import build_model
    model = build_model(cfg, SHAPE)
    model.backbone.blocks[0][0].data[...] = np.inf
    with pytest.raises(TrainingAborted) as info:
        train(pool, cfg, model=model)
    assert info.value.episode == 0 and str(info.value.seed) in str(info.value)


@pytest.mark.slow
def test_learning_signal():
    pool, _ = synthetic_splits(10, 1, 5, SHAPE, seed=0)
    wins = 0
    for seed in range(3):
        _, log = train(pool, _cfg(epochs=5, episodes_per_epoch=200, seed=seed))
        wins += log.records[-1].train_acc > log.records[0].train_acc
    assert wins >= 2
