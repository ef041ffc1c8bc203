import numpy as np
import pytest

from gaze_engine.data import Batch
from gaze_engine.errors import ConfigurationError, ContractError, NonFiniteLossError
from gaze_engine.geometry import Orientation
from gaze_engine.gradcheck import check_gradients
from gaze_engine.model import StudentConfig, build, forward
from gaze_engine.tensor import ConvSpec, Tensor, backward
from gaze_engine.training import (
    DistillConfig,
    FineTuneRegistry,
    TrainConfig,
    _BatchStream,
    desk_train_config,
    distill,
    euclidean_loss,
    fine_tune,
    orthogonal,
    predict,
    train,
)

from helpers import make_sample, tiny_config


def tiny_frames(n=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = make_sample(size=8, tight=8, seed=seed * 100 + i)
        t = rng.uniform(-3, 3, size=2)
        s.target = type(s.target)((0.0, 0.0), (float(t[0]), float(t[1])))
        s.dot_id = i
        out.append(s)
    return out


def tiny_student():
    return StudentConfig(input_size=8, convs=(ConvSpec(3, 3, 3, 2, stride=2),), pool_after=(), fc_feat=4, fc_grid=3)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.iterations, c.batch_size, c.lr_initial, c.lr_drop_iteration, c.lr_after_drop) == (
            150_000, 256, 0.001, 75_000, 0.0001)
        assert (c.momentum, c.weight_decay) == (0.9, 0.0005)

    def test_schedule(self):
        c = TrainConfig(iterations=10, lr_drop_iteration=4, lr_initial=1.0, lr_after_drop=0.1)
        assert [c.lr_at(i) for i in range(6)] == [1.0] * 4 + [0.1] * 2

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(iterations=10, lr_drop_iteration=20)
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigurationError):
            DistillConfig(0.0, 0.0, 0.0)

    def test_desk_overrides(self):
        assert desk_train_config(seed=3).seed == 3


class TestLoss:
    def test_hand_value(self):
        pred = Tensor([[1.0, 2.0], [0.0, 0.0]])
        target = np.array([[1.0, 0.0], [3.0, 4.0]], np.float32)
        # (4 + 25) / (2 * 2)
        assert float(euclidean_loss(pred, target).data) == pytest.approx(7.25)

    def test_gradient(self):
        pred = Tensor(np.random.default_rng(0).standard_normal((5, 2)), requires_grad=True)
        target = np.random.default_rng(1).standard_normal((5, 2)).astype(np.float32)
        assert check_gradients(lambda p: euclidean_loss(p, target), [pred]) < 1e-2
        pred.grad = None
        backward(euclidean_loss(pred, target))
        np.testing.assert_allclose(pred.grad, (pred.data - target) / 5, rtol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            euclidean_loss(Tensor(np.zeros((3, 2))), np.zeros((2, 2)))


class TestBatchStream:
    def test_each_epoch_covers_pool(self):
        s = _BatchStream(10, 4, False, np.random.default_rng(0))
        keys = np.concatenate([s.next() for _ in range(5)])
        assert sorted(keys[:10]) == list(range(10)) and sorted(keys[10:20]) == list(range(10))

    def test_augmented_pool(self):
        s = _BatchStream(3, 75, True, np.random.default_rng(0))
        assert sorted(s.next()) == list(range(75))


class TestTrain:
    def test_loss_decreases(self):
        frames = tiny_frames()
        p = build(tiny_config(), seed=0)
        before = float(euclidean_loss(predict(p, frames).pred, Batch.from_samples(frames).target_cm).data)
        train(p, frames, TrainConfig(iterations=150, batch_size=6, lr_initial=0.01, lr_drop_iteration=150,
                                     lr_after_drop=0.001, trace_every=50))
        after = float(euclidean_loss(predict(p, frames).pred, Batch.from_samples(frames).target_cm).data)
        assert after < 0.5 * before

    def test_single_step_matches_manual_update(self):
        frames = tiny_frames(4)
        cfg = TrainConfig(iterations=1, batch_size=4, lr_initial=0.05, lr_drop_iteration=1, lr_after_drop=0.05,
                          momentum=0.9, weight_decay=0.01)
        p = build(tiny_config(), seed=1)
        ref = p.copy()
        # a full-size batch is a permutation of the data; the loss is order free
        loss = euclidean_loss(forward(ref, frames).pred, Batch.from_samples(frames).target_cm)
        backward(loss)
        train(p, frames, cfg)
        for n in p.names():
            g = ref[n].grad + 0.01 * ref[n].data
            np.testing.assert_allclose(p[n].data, ref[n].data - 0.05 * g, rtol=1e-4, atol=1e-6)
            np.testing.assert_allclose(p.velocity[n], g, rtol=1e-4, atol=1e-6)

    def test_deterministic(self):
        cfg = TrainConfig(iterations=20, batch_size=5, lr_initial=0.01, lr_drop_iteration=10, lr_after_drop=0.001,
                          augment_train=True, seed=4)
        a, b = build(tiny_config(), seed=2), build(tiny_config(), seed=2)
        ra, rb = train(a, tiny_frames(), cfg), train(b, tiny_frames(), cfg)
        assert a.checksum() == b.checksum()
        assert ra.trace_csv() == rb.trace_csv()

    def test_trace(self):
        res = train(build(tiny_config()), tiny_frames(), TrainConfig(iterations=7, batch_size=4, lr_drop_iteration=5,
                                                                     trace_every=3))
        assert [r.step for r in res.trace] == [0, 3, 6]
        assert res.trace_csv().splitlines()[0] == "step,lr,loss"
        assert res.trace[-1].lr == 0.0001

    def test_nan_aborts(self):
        p = build(tiny_config())
        p["fc2.bias"].data[:] = np.nan
        with pytest.raises(NonFiniteLossError) as exc:
            train(p, tiny_frames(), TrainConfig(iterations=3, batch_size=4, lr_drop_iteration=3))
        assert exc.value.step == 0

    def test_empty(self):
        with pytest.raises(ContractError):
            train(build(tiny_config()), [], TrainConfig(iterations=1, lr_drop_iteration=1))


class TestFineTune:
    def test_leaves_generic_untouched(self):
        p = build(tiny_config())
        before = p.checksum()
        res = fine_tune(p, tiny_frames(), TrainConfig(iterations=5, batch_size=4, lr_drop_iteration=5))
        assert p.checksum() == before and res.params.checksum() != before
        assert all(r.lr == 0.0001 for r in res.trace)

    def test_mixed_subset(self):
        frames = tiny_frames(4)
        frames[0].orientation = Orientation.LANDSCAPE_LEFT
        with pytest.raises(ContractError):
            fine_tune(build(tiny_config()), frames, TrainConfig(iterations=1, lr_drop_iteration=1))

    def test_registry_fallback(self):
        generic, tuned = build(tiny_config(), seed=0), build(tiny_config(), seed=1)
        reg = FineTuneRegistry(generic)
        reg.register("synthPhone", Orientation.PORTRAIT, tuned)
        assert reg.lookup("synthPhone", "Portrait") is tuned
        assert reg.lookup("synthPhone", Orientation.LANDSCAPE_LEFT) is generic
        assert ("synthPhone", Orientation.PORTRAIT) in reg


class TestDistill:
    def test_orthogonal(self):
        q = orthogonal(np.random.default_rng(0), 6, 4)
        np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-5)

    def test_teacher_frozen_student_moves(self):
        teacher = build(tiny_config(), seed=0)
        student = build(tiny_student(), seed=0)
        t0, s0 = teacher.checksum(), student.checksum()
        res = distill(student, teacher, tiny_frames(), DistillConfig(),
                      TrainConfig(iterations=5, batch_size=4, lr_drop_iteration=5))
        assert teacher.checksum() == t0 and student.checksum() != s0
        assert res.projection["projection"].dims == (6, 4)

    def test_pure_imitation_matches_teacher(self):
        frames = tiny_frames(8)
        teacher = build(tiny_config(), seed=0)
        student = build(tiny_student(), seed=1)
        t_pred = predict(teacher, frames).pred.data
        gap = lambda: float(np.abs(predict(student, frames).pred.data - t_pred).mean())
        before = gap()
        distill(student, teacher, frames, DistillConfig(alpha=0.0, beta=1.0, gamma=0.0),
                TrainConfig(iterations=200, batch_size=8, lr_initial=0.01, lr_drop_iteration=200))
        assert gap() < 0.5 * before

    def test_rejects_teacher_as_student(self):
        with pytest.raises(ContractError):
            distill(build(tiny_config()), build(tiny_config()), tiny_frames(), DistillConfig(),
                    TrainConfig(iterations=1, lr_drop_iteration=1))
