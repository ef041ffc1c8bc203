import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaze_engine.calibration import (
    CalibrationModel,
    calibrate_sessions,
    calibration_csv,
    calibration_rows,
    fit_calibration,
    select_calibration_dots,
)
from gaze_engine.data import sessions_from_frames
from gaze_engine.errors import ContractError
from gaze_engine.evaluation import evaluate
from gaze_engine.geometry import DEVICES, Orientation
from gaze_engine.model import build
from gaze_engine.synth import synth_generate

from helpers import tiny_config


def ridge_oracle(f, y, lam):
    """Normal equations with an unpenalised bias, solved directly."""
    x = np.hstack([f, np.ones((len(f), 1))])
    d = np.eye(x.shape[1])
    d[-1, -1] = 0.0
    return np.linalg.solve(x.T @ x + lam * d, x.T @ y).T


@pytest.fixture(scope="module")
def corpus():
    _, frames = synth_generate(2, 2, 18, DEVICES["synthPhone"], Orientation.PORTRAIT, seed=1, crop_size=8, tight_size=None)
    return frames


class TestFit:
    def test_exact_affine_recovery(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((30, 5))
        w = rng.standard_normal((2, 5))
        b = np.array([0.7, -1.2])
        m = fit_calibration(f, f @ w.T + b, ridge_lambda=0.0)
        np.testing.assert_allclose(m.weights, np.hstack([w, b[:, None]]), atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(m=st.integers(3, 20), d=st.integers(1, 8), lam=st.floats(1e-3, 10), seed=st.integers(0, 1000))
    def test_matches_normal_equations(self, m, d, lam, seed):
        rng = np.random.default_rng(seed)
        f, y = rng.standard_normal((m, d)), rng.standard_normal((m, 2))
        np.testing.assert_allclose(fit_calibration(f, y, lam).weights, ridge_oracle(f, y, lam), atol=1e-8)

    def test_heavy_ridge_predicts_mean(self):
        rng = np.random.default_rng(1)
        f, y = rng.standard_normal((20, 4)), rng.standard_normal((20, 2))
        m = fit_calibration(f, y, ridge_lambda=1e9)
        np.testing.assert_allclose(m.apply(f, None), np.repeat(y.mean(0)[None], 20, axis=0), atol=1e-6)

    def test_rank_deficient_minimum_norm(self):
        f = np.ones((5, 3))  # constant features: only the bias is identifiable
        m = fit_calibration(f, np.tile([1.0, 2.0], (5, 1)), ridge_lambda=0.0)
        np.testing.assert_allclose(m.apply(f, None), np.tile([1.0, 2.0], (5, 1)), atol=1e-9)

    def test_identity_model(self):
        raw = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(CalibrationModel(None).apply(np.zeros((1, 4)), raw), raw)

    def test_invalid_inputs(self):
        with pytest.raises(ContractError):
            fit_calibration(np.zeros((3, 2)), np.zeros((4, 2)))
        with pytest.raises(ContractError):
            fit_calibration(np.zeros((3, 2)), np.zeros((3, 2)), ridge_lambda=-1.0)
        with pytest.raises(ContractError):
            CalibrationModel(None, k_points=7)


class TestDotSelection:
    def test_nested_and_disjoint(self, corpus):
        session = sessions_from_frames(corpus)[0]
        prev = set()
        for k in (4, 5, 9, 13):
            calib, evaluation = select_calibration_dots(session, k)
            ids = {d.dot_id for d in calib}
            assert len(ids) == k and prev <= ids
            assert not ids & {d.dot_id for d in evaluation}
            assert all(not d.is_fixed for d in evaluation)
            prev = ids

    def test_invalid_k(self, corpus):
        with pytest.raises(ContractError):
            select_calibration_dots(sessions_from_frames(corpus)[0], 6)

    def test_incomplete_session(self):
        _, frames = synth_generate(1, 1, 10, DEVICES["synthPhone"], Orientation.PORTRAIT, seed=0, crop_size=8, tight_size=None)
        with pytest.raises(ContractError):
            select_calibration_dots(sessions_from_frames(frames)[0], 4)


class TestSessions:
    def test_k0_equals_plain_evaluation(self, corpus):
        p = build(tiny_config(), seed=0)
        res = calibrate_sessions(p, corpus, 0)
        frames = [f for r in res for f in r.eval_frames]
        assert sorted(f.frame_id for f in frames) == sorted(f.frame_id for f in corpus)
        rows = calibration_rows(res, 0)
        plain = evaluate(p, corpus)
        assert np.mean([r.error_cm for r in rows]) == pytest.approx(plain.error_cm)

    def test_k13_fits_per_session(self, corpus):
        res = calibrate_sessions(build(tiny_config(), seed=0), corpus, 13)
        assert len(res) == 2
        assert all(r.model.k_points == 13 and r.model.weights.shape == (2, 7) for r in res)
        assert all(len(r.eval_frames) == 2 * 5 for r in res)

    def test_csv(self, corpus):
        rows = calibration_rows(calibrate_sessions(build(tiny_config(), seed=0), corpus, 4), 4)
        lines = calibration_csv(rows).splitlines()
        assert lines[0] == "subject,k,error_cm,dot_error_cm"
        assert lines[1].startswith("subj0000,4,")
