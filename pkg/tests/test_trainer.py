import numpy as np
import pytest

from stabfeat.data.prep import TripletRecord, mine_triplets
from stabfeat.data.synthetic import generate_corpus
from stabfeat.exceptions import FormatError
from stabfeat.network import build_model, save_weights
from stabfeat.pipeline import training_data
from stabfeat.trainer import (
    EpochLog,
    TrainConfig,
    checkpoint,
    network_grad_check,
    read_loss_log,
    resume,
    train,
    write_loss_log,
)


@pytest.fixture(scope="module")
def setup():
    corpus = generate_corpus(n_frames=16, n_places=8, held_out=0, image_size=(16, 16), seed=3)
    records, _ = mine_triplets(corpus.loops, 16, negatives_per_query=1, gap=2, seed=0)
    return records[:4], training_data(corpus)


def fresh():
    return build_model(base_channels=2, seed=1)


def params_of(model):
    return {k: v.data.copy() for k, v in model.params.items()}


class TestConfig:
    def test_lr_steps(self):
        cfg = TrainConfig(lr=1.0, lr_decay_epochs=(2, 4))
        assert [cfg.lr_at(e) for e in range(6)] == [1.0, 1.0, 0.1, 0.1, 0.1 * 0.1, 0.1 * 0.1]

    @pytest.mark.parametrize(
        "kw", [dict(max_epochs=0), dict(lr=0.0), dict(lr_decay_epochs=(3, 3)), dict(mode="x"), dict(margin=-1)]
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(max_epochs=7, lr_decay_epochs=(1, 5), literal_schedule=True, mode="sparse")
        text = {k: str(v) for k, v in cfg.to_dict().items()}
        assert TrainConfig.from_dict(text) == cfg

    def test_empty_decay_list(self):
        assert TrainConfig.from_dict({"lr_decay_epochs": ""}).lr_decay_epochs == ()


class TestTrain:
    def test_schedule_columns(self, setup):
        records, data = setup
        cfg = TrainConfig(max_epochs=5, lr=0.01, lr_decay_epochs=(2, 4), seed=0)
        res = train(fresh(), records[:1], data, cfg)
        assert [e.epoch for e in res.log] == list(range(5))
        assert [e.lr for e in res.log] == [0.01, 0.01, 0.01 * 0.1, 0.01 * 0.1, 0.01 * 0.1 * 0.1]
        assert [e.w_sem for e in res.log] == [0.9**e for e in range(5)]
        assert [e.w_mat for e in res.log] == [1 - 0.9**e for e in range(5)]
        assert res.log[0].mean_hybrid == pytest.approx(res.log[0].mean_sem)

    def test_semantic_loss_decreases(self, setup):
        records, data = setup
        res = train(fresh(), records, data, TrainConfig(max_epochs=4, lr=0.05, lr_decay_epochs=()))
        assert res.log[-1].mean_sem < res.log[0].mean_sem

    def test_seeded(self, setup):
        records, data = setup
        cfg = TrainConfig(max_epochs=2, lr=0.05, seed=9)
        a, b = train(fresh(), records, data, cfg), train(fresh(), records, data, cfg)
        for k, v in params_of(a.model).items():
            np.testing.assert_array_equal(v, b.model.params[k].data)

    def test_resume_matches_uninterrupted(self, setup, tmp_path):
        records, data = setup
        cfg = TrainConfig(max_epochs=4, lr=0.05, seed=2, lr_decay_epochs=(1,), checkpoint_every=2)
        full = train(fresh(), records, data, cfg)
        train(fresh(), records, data, cfg, checkpoint_path=tmp_path / "ck.dsfw", stop_epoch=2)
        model, epoch, history = resume(tmp_path / "ck.dsfw", cfg)
        assert epoch == 2 and history == full.log[:2]
        rest = train(model, records, data, cfg, start_epoch=epoch, history=history)
        assert rest.log == full.log
        for k, v in params_of(full.model).items():
            np.testing.assert_array_equal(v, rest.model.params[k].data)

    def test_sparse_mode_runs(self, setup):
        records, data = setup
        cfg = TrainConfig(max_epochs=2, lr=0.05, mode="sparse", top_k=40, ransac_iters=50)
        res = train(fresh(), records[:2], data, cfg)
        assert len(res.log) == 2 and np.isfinite(res.log[1].mean_mat)

    def test_missing_payloads(self, setup):
        _, data = setup
        with pytest.raises(ValueError, match="no training triplets"):
            train(fresh(), [], data, TrainConfig())
        with pytest.raises(ValueError, match="no image"):
            train(fresh(), [TripletRecord(0, 1, 99)], data, TrainConfig())

    def test_bad_start_epoch(self, setup):
        records, data = setup
        with pytest.raises(ValueError, match="start epoch"):
            train(fresh(), records, data, TrainConfig(max_epochs=2), start_epoch=3)


class TestCheckpoint:
    def test_config_mismatch(self, tmp_path):
        checkpoint(fresh(), 0, tmp_path / "c", TrainConfig(lr=0.1), [])
        with pytest.raises(ValueError, match="lr=0.1"):
            resume(tmp_path / "c", TrainConfig(lr=0.2))

    def test_beyond_max_epochs(self, tmp_path):
        log = [EpochLog(e, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0) for e in range(3)]
        checkpoint(fresh(), 3, tmp_path / "c", TrainConfig(max_epochs=5), log)
        with pytest.raises(ValueError, match="beyond"):
            resume(tmp_path / "c", TrainConfig(max_epochs=2))

    def test_plain_weights_are_not_checkpoints(self, tmp_path):
        save_weights(fresh(), tmp_path / "w")
        with pytest.raises(FormatError, match="not a checkpoint"):
            resume(tmp_path / "w", TrainConfig())

    def test_log_length_checked(self, tmp_path):
        checkpoint(fresh(), 2, tmp_path / "c", TrainConfig(), [])
        with pytest.raises(FormatError, match="log rows"):
            resume(tmp_path / "c", TrainConfig())

    def test_log_is_exact(self, tmp_path):
        log = [EpochLog(0, 0.1, 1.0, 0.0, 1 / 3, 2 / 7, np.pi)]
        checkpoint(fresh(), 1, tmp_path / "c", TrainConfig(), log)
        assert resume(tmp_path / "c", TrainConfig())[2] == log


class TestLossLog:
    def test_round_trip(self, tmp_path):
        log = [EpochLog(e, 0.1 * e, 0.9**e, 1 - 0.9**e, 1 / 3, 0.0, 2 / 3) for e in range(3)]
        write_loss_log(tmp_path / "l.csv", log)
        assert read_loss_log(tmp_path / "l.csv") == log
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "epoch,lr,w_sem,w_mat,mean_sem,mean_mat,mean_hybrid"

    def test_bad_header(self, tmp_path):
        (tmp_path / "l.csv").write_text("a,b\n")
        with pytest.raises(FormatError, match="header"):
            read_loss_log(tmp_path / "l.csv")

    def test_bad_row(self, tmp_path):
        (tmp_path / "l.csv").write_text("epoch,lr,w_sem,w_mat,mean_sem,mean_mat,mean_hybrid\n0,x\n")
        with pytest.raises(FormatError) as info:
            read_loss_log(tmp_path / "l.csv")
        assert info.value.position == 2


@pytest.mark.parametrize("mode", ["dense", "sparse"])
def test_network_grad_check_one_seed(mode):
    assert network_grad_check(mode, seed=1) < 1e-3
