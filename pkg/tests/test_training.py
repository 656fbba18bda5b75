import numpy as np
import pytest

from kwtalab import nn, training
from kwtalab.attacks import AttackConfig
from kwtalab.data import Dataset, synthetic_blobs
from kwtalab.tensor import make_rng
from kwtalab.training import FinetuneSchedule, TrainConfig

WIDE = (-1e9, 1e9)


def blob_model(activation="relu", gamma=None, seed=0):
    return nn.build_model(nn.mlp_specs(2, [32], 2, activation, gamma), make_rng(seed))


def params_bytes(model):
    return b"".join(p.tobytes() for p in model.param_tensors())


class TestSgdStep:
    def test_first_step(self):
        p, g = [np.array([1.0])], [np.array([2.0])]
        v = training.sgd_step(p, g, None, 0.1, 0.9)
        np.testing.assert_allclose(p[0], [0.8])
        np.testing.assert_allclose(v[0], [-0.2])

    def test_momentum_accumulates(self):
        p, g = [np.array([1.0])], [np.array([2.0])]
        v = training.sgd_step(p, g, None, 0.1, 0.9)
        training.sgd_step(p, g, v, 0.1, 0.9)
        np.testing.assert_allclose(v[0], [-0.38])
        np.testing.assert_allclose(p[0], [0.42])

    def test_zero_lr_is_noop(self):
        p = [np.array([1.0, -2.0])]
        before = p[0].tobytes()
        training.sgd_step(p, [np.array([5.0, 5.0])], None, 0.0, 0.9)
        assert p[0].tobytes() == before

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            training.sgd_step([np.ones(2)], [np.ones(3)], None, 0.1, 0.0)


class TestConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig(lr_schedule=((0, 0.1), (5, 0.01)))
        assert cfg.lr_at(0) == 0.1 and cfg.lr_at(4) == 0.1 and cfg.lr_at(5) == 0.01

    @pytest.mark.parametrize("kw", [dict(momentum=1.0), dict(lr_schedule=()), dict(batch_size=0),
                                    dict(lr_schedule=((3, 0.1), (1, 0.1))), dict(loss="hinge")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestFinetuneSchedule:
    def test_default_stages(self):
        s = FinetuneSchedule(0.2, 0.08, 0.005).stages()
        assert len(s) == 24
        assert abs(s[0] - 0.195) < 1e-12
        assert s[-1] == 0.08
        assert all(b < a for a, b in zip(s, s[1:]))

    def test_uneven_step_lands_on_end(self):
        assert FinetuneSchedule(0.2, 0.1, 0.03).stages()[-1] == 0.1

    def test_no_stages_when_equal(self):
        assert FinetuneSchedule(0.1, 0.1, 0.01).stages() == []

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            FinetuneSchedule(0.1, 0.2, 0.01)


class TestTrainStandard:
    def test_blobs_reach_full_accuracy(self):
        ds = synthetic_blobs(200, make_rng(1))
        m = blob_model()
        res = training.train_standard(m, ds, TrainConfig(epochs=20, batch_size=16, lr_schedule=((0, 0.05),)))
        _, acc = training.evaluate(m, ds.images, ds.labels)
        assert acc == 1.0
        assert res.metrics[-1].accuracy == 1.0

    def test_kwta_mlp_trains(self):
        ds = synthetic_blobs(200, make_rng(2))
        m = blob_model("kwta", 0.25)
        training.train_standard(m, ds, TrainConfig(epochs=20, batch_size=16, lr_schedule=((0, 0.05),)))
        assert training.evaluate(m, ds.images, ds.labels)[1] == 1.0

    def test_zero_lr_leaves_weights(self):
        ds = synthetic_blobs(50, make_rng(1))
        m = blob_model()
        before = params_bytes(m)
        training.train_standard(m, ds, TrainConfig(epochs=2, lr_schedule=((0, 0.0),)))
        assert params_bytes(m) == before

    def test_deterministic(self):
        ds = synthetic_blobs(64, make_rng(1))
        a, b = blob_model(), blob_model()
        cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
        training.train_standard(a, ds, cfg)
        training.train_standard(b, ds, cfg)
        assert params_bytes(a) == params_bytes(b)

    def test_loss_decreases(self):
        ds = synthetic_blobs(128, make_rng(3))
        res = training.train_standard(blob_model(), ds, TrainConfig(epochs=5, batch_size=16))
        assert res.metrics[-1].loss < res.metrics[0].loss

    def test_mse_regression(self):
        t = np.linspace(-1, 1, 64)[:, None]
        ds = Dataset(t, 2 * t + 1)
        m = nn.build_model(nn.mlp_specs(1, [16], 1, "relu"), make_rng(0))
        res = training.train_standard(m, ds, TrainConfig(epochs=100, batch_size=8, loss="mse"))
        assert res.metrics[-1].loss < 0.01 * res.metrics[0].loss

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            training.train_standard(blob_model(), Dataset(np.zeros((0, 2)), np.zeros(0, int)), TrainConfig())

    def test_metrics_csv(self, tmp_path):
        ds = synthetic_blobs(32, make_rng(1))
        res = training.train_standard(blob_model(), ds, TrainConfig(epochs=2))
        training.write_metrics_csv(res.metrics, tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,split,loss,accuracy,gamma" and len(lines) == 3


class TestFinetune:
    def test_visits_every_stage(self):
        ds = synthetic_blobs(64, make_rng(1))
        m = blob_model("kwta", 0.5)
        sched = FinetuneSchedule(0.5, 0.3, 0.1, epochs_per_step=2, lr=0.01)
        res = training.finetune_sparsity(m, ds, sched, TrainConfig(batch_size=16))
        assert [round(x.gamma, 12) for x in res.metrics] == [0.4, 0.4, 0.3, 0.3]
        assert m.gammas == [0.3]

    def test_gamma_mismatch(self):
        with pytest.raises(ValueError):
            training.finetune_sparsity(blob_model("kwta", 0.4), synthetic_blobs(8, make_rng(0)),
                                       FinetuneSchedule(0.5, 0.3, 0.1), TrainConfig())

    def test_relu_model_rejected(self):
        with pytest.raises(ValueError):
            training.finetune_sparsity(blob_model(), synthetic_blobs(8, make_rng(0)),
                                       FinetuneSchedule(0.5, 0.3, 0.1), TrainConfig())


class TestAdversarial:
    def test_zero_epsilon_matches_standard(self):
        ds = synthetic_blobs(64, make_rng(1))
        a, b = blob_model(), blob_model()
        cfg = TrainConfig(epochs=3, batch_size=8)
        training.train_standard(a, ds, cfg)
        training.train_adversarial(b, ds, AttackConfig("fgsm", epsilon=0.0, clamp=WIDE), cfg)
        assert params_bytes(a) == params_bytes(b)

    def test_noise_family_rejected(self):
        with pytest.raises(ValueError):
            training.train_adversarial(blob_model(), synthetic_blobs(8, make_rng(0)),
                                       AttackConfig("gaussian_noise"), TrainConfig())

    def test_pgd_training_runs(self):
        ds = synthetic_blobs(64, make_rng(1))
        m = blob_model()
        res = training.train_adversarial(m, ds, AttackConfig("pgd", 0.5, steps=3, clamp=WIDE),
                                         TrainConfig(epochs=10, batch_size=16, lr_schedule=((0, 0.05),)))
        assert training.evaluate(m, ds.images, ds.labels)[1] == 1.0
        assert np.all(np.isfinite(res.batch_losses))
