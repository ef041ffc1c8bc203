import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaze_engine.data import Batch, augment_25
from gaze_engine.errors import ConfigurationError, ContractError
from gaze_engine.evaluation import (
    DeviceReport,
    DotResult,
    EvalReport,
    center_baseline,
    dot_error,
    error_heatmap,
    evaluate,
    evaluate_predictions,
    frame_error,
    heatmap_csv,
    predict_batch,
    sample_budget,
    study_csv,
    subjects_vs_samples_study,
)
from gaze_engine.geometry import DEVICES, DeviceSpec, Orientation, screen_center_cm
from gaze_engine.model import build, forward
from gaze_engine.synth import synth_generate
from gaze_engine.training import TrainConfig

from helpers import make_sample, tiny_config

SQUARE = DeviceSpec("square", 100, 100, 1.0, 1.0, 0.0, 1.0)  # screen spans x in [0, 1], y in [0, 1]
PORTRAIT = Orientation.PORTRAIT

coord = st.floats(-5, 5, allow_nan=False)
point = st.tuples(coord, coord)


@pytest.fixture(scope="module")
def small_corpus():
    _, frames = synth_generate(3, 2, 14, DEVICES["synthPhone"], PORTRAIT, seed=0, crop_size=8, tight_size=8)
    return frames


class TestFrameError:
    def test_hand_value(self):
        assert frame_error([[3.0, 4.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]) == pytest.approx(3.0)

    def test_truncation_applied(self):
        # (5, 0.5) clamps to (1, 0.5): distance 0.5 from (0.5, 0.5)
        assert frame_error([[5.0, 0.5]], [[0.5, 0.5]], SQUARE, PORTRAIT) == pytest.approx(0.5)

    def test_count_mismatch(self):
        with pytest.raises(ContractError):
            frame_error([[0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]])

    def test_center_baseline(self):
        c = screen_center_cm(SQUARE, PORTRAIT)
        np.testing.assert_allclose(c, [0.5, 0.5])
        assert center_baseline(SQUARE, PORTRAIT, [[0.5, 0.5], [0.5, 1.5]]) == pytest.approx(0.5)


class TestDotError:
    def test_symmetric_frames_cancel(self):
        assert dot_error([((0.5, 0.5), [[0.4, 0.5], [0.6, 0.5]])], SQUARE, PORTRAIT) == pytest.approx(0.0)

    def test_truncates_before_averaging(self):
        # averaging first would give mean (-4.7, .5) -> clamp (0, .5), distance 0.5 > frame error 0.3
        preds = [[-10.0, 0.5], [0.6, 0.5]]
        de = dot_error([((0.5, 0.5), preds)], SQUARE, PORTRAIT)
        fe = frame_error(preds, [[0.5, 0.5]] * 2, SQUARE, PORTRAIT)
        assert de == pytest.approx(0.2) and fe == pytest.approx(0.3)

    def test_frame_weighted(self):
        groups = [((0.0, 0.0), [[1.0, 0.0]]), ((0.0, 0.0), [[0.0, 0.0]] * 3)]
        assert dot_error(groups) == pytest.approx(0.25)

    def test_empty(self):
        with pytest.raises(ContractError):
            dot_error([])

    @settings(max_examples=200, deadline=None)
    @given(
        dots=st.lists(
            st.tuples(st.tuples(st.floats(0, 1), st.floats(0, 1)), st.lists(point, min_size=1, max_size=6)),
            min_size=1, max_size=5,
        )
    )
    def test_never_exceeds_frame_error(self, dots):
        preds = [p for _, ps in dots for p in ps]
        truths = [t for t, ps in dots for _ in ps]
        assert dot_error(dots, SQUARE, PORTRAIT) <= frame_error(preds, truths, SQUARE, PORTRAIT) + 1e-6


class TestPrediction:
    def test_test_augmentation_is_mean_of_25(self):
        p = build(tiny_config(), seed=0)
        s = make_sample(size=8, tight=8)
        manual = np.mean([forward(p, a).pred.data[0].astype(np.float64) for a in augment_25(s)], axis=0)
        np.testing.assert_allclose(predict_batch(p, Batch.from_samples([s]), test_augment=True)[0], manual, atol=1e-6)

    def test_plain_prediction(self):
        p = build(tiny_config(), seed=0)
        b = Batch.from_samples([make_sample(size=8, tight=8, seed=i) for i in range(3)])
        np.testing.assert_array_equal(predict_batch(p, b), forward(p, b).pred.data)


class TestReports:
    def test_groups_and_csv(self, small_corpus):
        frames = small_corpus
        truths = np.array([f.target.cam_cm for f in frames])
        rep = evaluate_predictions(frames, truths + 0.1)
        assert len(rep.devices) == 1
        d = rep.devices[0]
        assert d.n_frames == len(frames) and d.n_dots == 3 * 14
        assert rep.error_cm <= np.hypot(0.1, 0.1) + 1e-9
        assert rep.to_csv().splitlines()[0] == (
            "device,orientation,n_frames,n_dots,error_cm,dot_error_cm,baseline_center_error_cm")

    def test_perfect_predictions(self, small_corpus):
        truths = np.array([f.target.cam_cm for f in small_corpus])
        rep = evaluate_predictions(small_corpus, truths)
        assert rep.error_cm == pytest.approx(0.0, abs=1e-12) and rep.dot_error_cm == pytest.approx(0.0, abs=1e-12)

    def test_convexity_assertion(self):
        with pytest.raises(AssertionError):
            EvalReport([DeviceReport("d", "Portrait", 2, 1, 0.5, 0.6, 1.0)])

    def test_evaluate_runs_model(self, small_corpus):
        rep = evaluate(build(tiny_config(), seed=0), small_corpus)
        assert rep.dot_error_cm <= rep.error_cm + 1e-6


class TestHeatmap:
    def test_bins(self):
        dots = [
            DotResult("s", "s-0", 0, "d", "Portrait", (0.1, 0.1), (0.1, 0.4), 2),
            DotResult("s", "s-0", 1, "d", "Portrait", (0.2, 0.3), (0.2, 0.4), 2),
            DotResult("s", "s-0", 2, "d", "Portrait", (1.2, -0.2), (1.2, -0.2), 1),
        ]
        cells = error_heatmap(dots, cell_cm=0.5)
        # grid spans x bins 0..2 and y bins -1..0, top row first
        assert len(cells) == 6
        top_left = cells[0]
        assert (top_left.x_lo, top_left.y_lo, top_left.n_dots) == (0.0, 0.0, 2)
        assert top_left.mean_error_cm == pytest.approx(0.2)
        empty = [c for c in cells if c.n_dots == 0]
        assert len(empty) == 4
        assert ",," in heatmap_csv(cells)


class TestStudy:
    def test_budget_selection(self, small_corpus):
        rng = np.random.default_rng(0)
        pick = sample_budget(small_corpus, 2, 5, rng)
        assert len(pick) == 10 and len({f.subject_id for f in pick}) == 2

    def test_infeasible_budget(self, small_corpus):
        with pytest.raises(ConfigurationError):
            sample_budget(small_corpus, 4, 1, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            sample_budget(small_corpus, 1, 1000, np.random.default_rng(0))

    def test_runs_each_budget(self, small_corpus):
        train_f = [f for f in small_corpus if f.subject_id != "subj0002"]
        test_f = [f for f in small_corpus if f.subject_id == "subj0002"]
        cfg = TrainConfig(iterations=3, batch_size=4, lr_drop_iteration=3)
        rows = subjects_vs_samples_study(train_f, test_f, [(2, 6), (1, 12)], 0, tiny_config(), cfg)
        assert [(r.n_subjects, r.samples_per) for r in rows] == [(2, 6), (1, 12)]
        assert study_csv(rows).splitlines()[0] == "n_subjects,samples_per,error"
