import numpy as np
import pytest
import torch

from valvenet.core import ViewLabel
from valvenet.curriculum import (
    CurriculumState,
    per_landmark_validation_error,
    sample_minibatch,
    update_sampling_weights,
    weight_entropy,
)
from valvenet.errors import EmptyLandmarkCohort


class _OffsetModel:
    """Stands in for the network: returns targets plus a fixed offset."""

    def __init__(self, targets, offset):
        self.targets = targets
        self.offset = np.asarray(offset, dtype=np.float64)
        self._i = 0

    def eval(self):
        return self

    def __call__(self, x):
        n = x.shape[0]
        out = self.targets[self._i : self._i + n] + self.offset
        self._i += n
        return torch.as_tensor(out)


def _valset(n=6):
    rng = np.random.default_rng(0)
    targets = np.zeros((n, 10, 2))
    present = np.zeros((n, 10), dtype=bool)
    views = [ViewLabel.CH2, ViewLabel.CH3, ViewLabel.CH4] * (n // 3)
    from valvenet.core import landmarks_for_view

    for i, v in enumerate(views):
        for lid in landmarks_for_view(v):
            targets[i, lid - 1] = rng.uniform(10, 50, 2)
            present[i, lid - 1] = True
    images = rng.random((n, 32, 32)).astype(np.float32)
    return images, targets, present, views


class TestValidationError:
    def test_perfect_predictor(self):
        images, targets, present, _ = _valset()
        model = _OffsetModel(targets, (0.0, 0.0))
        errors = per_landmark_validation_error(model, images, targets, present)
        np.testing.assert_allclose(errors, np.zeros(10))

    def test_pythagorean_offset(self):
        images, targets, present, _ = _valset()
        model = _OffsetModel(targets, (3.0, 4.0))
        errors = per_landmark_validation_error(model, images, targets, present)
        np.testing.assert_allclose(errors, np.full(10, 5.0))

    def test_mean_of_two_samples(self):
        # landmark 1 off by 3 px in one sample and 5 px in another
        targets = np.zeros((2, 10, 2))
        present = np.zeros((2, 10), dtype=bool)
        targets[:, 0] = [20.0, 20.0]
        targets[:, 1] = [30.0, 30.0]
        present[:, 0] = present[:, 1] = True
        preds = targets.copy()
        preds[0, 0, 0] += 3.0
        preds[1, 0, 0] += 5.0

        class _Fixed:
            def __init__(self):
                self._i = 0

            def eval(self):
                return self

            def __call__(self, x):
                n = x.shape[0]
                out = preds[self._i : self._i + n]
                self._i += n
                return torch.as_tensor(out)

        images = np.zeros((2, 32, 32), dtype=np.float32)
        with pytest.raises(EmptyLandmarkCohort):
            per_landmark_validation_error(_Fixed(), images, targets, present)
        # present only ids 1 and 2 -> cohorts for 3..10 empty; now fill all ids
        present_all = np.ones((2, 10), dtype=bool)
        targets_all = np.full((2, 10, 2), 25.0)
        preds_all = targets_all.copy()
        preds_all[0, 0, 0] += 3.0
        preds_all[1, 0, 0] += 5.0

        class _Fixed2(_Fixed):
            def __call__(self, x):
                n = x.shape[0]
                out = preds_all[self._i : self._i + n]
                self._i += n
                return torch.as_tensor(out)

        errors = per_landmark_validation_error(_Fixed2(), images, targets_all, present_all)
        assert errors[0] == pytest.approx(4.0)
        np.testing.assert_allclose(errors[1:], 0.0)


class TestWeights:
    def test_equal_errors_uniform(self):
        errors = np.full(10, 2.0)
        views = [ViewLabel.CH2, ViewLabel.CH3, ViewLabel.CH4, ViewLabel.CH2]
        w = update_sampling_weights(errors, views)
        np.testing.assert_allclose(w, 0.25)

    def test_proportionality_example(self):
        # image A: CH2 landmarks mean 3.0; image B: CH4 mean 1.0 -> (0.75, 0.25)
        errors = np.zeros(10)
        errors[0] = errors[1] = 3.0
        errors[4] = errors[5] = errors[8] = errors[9] = 1.0
        w = update_sampling_weights(errors, [ViewLabel.CH2, ViewLabel.CH4])
        np.testing.assert_allclose(w, [0.75, 0.25])

    def test_all_zero_uniform_floor_rule(self):
        w = update_sampling_weights(np.zeros(10), [ViewLabel.CH2] * 5)
        np.testing.assert_allclose(w, 0.2)

    def test_exact_proportionality_property(self):
        rng = np.random.default_rng(0)
        errors = rng.uniform(0.5, 5.0, 10)
        views = [ViewLabel.CH2, ViewLabel.CH3, ViewLabel.CH4]
        w = update_sampling_weights(errors, views)
        from valvenet.core import landmarks_for_view

        scores = [np.mean([errors[i - 1] for i in landmarks_for_view(v)]) for v in views]
        assert w[0] / w[1] == pytest.approx(scores[0] / scores[1], rel=1e-12)
        assert w[1] / w[2] == pytest.approx(scores[1] / scores[2], rel=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        errors = rng.uniform(0.1, 4.0, 10)
        views = [ViewLabel.CH2, ViewLabel.CH3, ViewLabel.CH4] * 3
        w1 = update_sampling_weights(errors, views)
        for c in (0.5, 3.0, 117.0):
            np.testing.assert_allclose(update_sampling_weights(errors * c, views), w1)

    def test_floor_guarantee(self):
        errors = np.zeros(10)
        errors[0] = errors[1] = 10.0  # only CH2 has error
        views = [ViewLabel.CH2, ViewLabel.CH4]
        w = update_sampling_weights(errors, views)
        assert w[1] > 0
        assert w[1] == pytest.approx(1e-3 / (1 + 1e-3))

    def test_state_invariants(self):
        with pytest.raises(ValueError):
            CurriculumState(np.zeros(10), np.array([0.5, 0.4]))
        state = CurriculumState.initial(4)
        np.testing.assert_allclose(state.per_image_weight, 0.25)
        assert state.epoch_length == 400


class TestSampling:
    def test_batch_size(self):
        idx = sample_minibatch(np.array([0.5, 0.5]), 16, np.random.default_rng(0))
        assert idx.shape == (16,)

    def test_floored_weight_rarely_drawn(self):
        errors = np.zeros(10)
        errors[0] = errors[1] = 1.0
        w = update_sampling_weights(errors, [ViewLabel.CH2, ViewLabel.CH4])
        idx = sample_minibatch(w, 100_000, np.random.default_rng(1))
        freq = np.mean(idx == 1)
        assert freq == pytest.approx(1e-3, abs=5e-4)

    def test_monte_carlo_frequency(self):
        idx = sample_minibatch(np.array([0.75, 0.25]), 100_000, np.random.default_rng(7))
        freq = np.mean(idx == 0)
        assert 0.745 <= freq <= 0.755

    def test_entropy(self):
        assert weight_entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2))
