import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oen.losses import LabelRangeError, cross_entropy_loss, one_hot, soft_dice_loss
from oen.metrics import dice_coefficient
from oen.tensor import GradTape, ShapeError, Tensor, finite_diff_grad, relative_error


def softmax(x, axis=0):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestSoftDice:
    def test_perfect_prediction(self):
        target = np.random.default_rng(0).integers(0, 3, size=(10, 12))
        assert soft_dice_loss(one_hot(target, 3), target).item() < 1e-6

    def test_uniform_half_on_all_foreground(self):
        target = np.ones((10, 10), dtype=int)
        assert soft_dice_loss(np.full((1, 10, 10), 0.5), target).item() == pytest.approx(0.2, abs=1e-6)

    def test_disjoint(self):
        target = np.zeros((10, 10), dtype=int)
        target[:5] = 1
        pred = one_hot(1 - target, 2)
        assert soft_dice_loss(pred, target).item() == pytest.approx(1.0, abs=1e-6)

    def test_empty_class_counts_as_perfect(self):
        target = np.zeros((4, 4), dtype=int)
        loss = soft_dice_loss(one_hot(target, 2), target)
        assert loss.per_class[1] == pytest.approx(0.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_exclude_background(self):
        target = np.zeros((6, 6), dtype=int)
        target[:2] = 1
        pred = np.stack([np.full((6, 6), 0.6), np.full((6, 6), 0.4)])
        full = soft_dice_loss(pred, target)
        fg = soft_dice_loss(pred, target, exclude_background=True)
        assert set(fg.per_class) == {1}
        assert fg.item() == pytest.approx(full.per_class[1])
        assert full.item() == pytest.approx(np.mean(list(full.per_class.values())))

    def test_batched_sums_over_batch(self):
        rng = np.random.default_rng(1)
        target = rng.integers(0, 2, size=(3, 5, 5))
        pred = softmax(rng.normal(size=(3, 2, 5, 5)), axis=1)
        flat_pred = np.concatenate(list(pred), axis=1)
        flat_target = np.concatenate(list(target), axis=0)
        assert soft_dice_loss(pred, target).item() == pytest.approx(soft_dice_loss(flat_pred, flat_target).item())

    def test_matches_hard_dice_on_one_hot(self):
        rng = np.random.default_rng(2)
        target = rng.integers(0, 3, size=(16, 16))
        guess = rng.integers(0, 3, size=(16, 16))
        expected = 1 - np.mean([dice_coefficient(guess, target, k) for k in range(3)])
        assert soft_dice_loss(one_hot(guess, 3), target).item() == pytest.approx(expected, abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 4), st.integers(0, 2**31 - 1))
    def test_in_unit_interval(self, k, seed):
        rng = np.random.default_rng(seed)
        target = rng.integers(0, k, size=(6, 7))
        v = soft_dice_loss(softmax(rng.normal(size=(k, 6, 7)) * 3), target).item()
        assert 0.0 <= v <= 1.0

    def test_decreasing_in_overlap(self):
        # move mass onto true pixels while keeping sum(p^2) fixed
        target = np.array([[1, 1, 0, 0]])
        a = np.array([[[0.5, 0.0, 0.5, 0.0]]])
        b = np.array([[[0.5, 0.5, 0.0, 0.0]]])
        assert soft_dice_loss(b, target).item() < soft_dice_loss(a, target).item()


class TestCrossEntropy:
    def test_confident_correct(self):
        target = np.random.default_rng(0).integers(0, 3, size=(5, 5))
        assert cross_entropy_loss(one_hot(target, 3), target).item() <= -np.log(1 - 1e-12) + 1e-15

    def test_uniform_binary(self):
        target = np.random.default_rng(0).integers(0, 2, size=(5, 5))
        assert cross_entropy_loss(np.full((1, 5, 5), 0.5), target).item() == pytest.approx(np.log(2), abs=1e-6)
        assert cross_entropy_loss(np.full((2, 5, 5), 0.5), target).item() == pytest.approx(np.log(2), abs=1e-6)

    def test_quarter_on_true_class(self):
        target = np.random.default_rng(0).integers(0, 4, size=(5, 5))
        assert cross_entropy_loss(np.full((4, 5, 5), 0.25), target).item() == pytest.approx(np.log(4), abs=1e-6)

    def test_confident_wrong_is_clamped(self):
        target = np.zeros((2, 2), dtype=int)
        v = cross_entropy_loss(one_hot(np.ones((2, 2), dtype=int), 2), target).item()
        assert np.isfinite(v) and v == pytest.approx(-np.log(1e-12))


@pytest.mark.parametrize("fn", [soft_dice_loss, cross_entropy_loss])
def test_errors(fn):
    with pytest.raises(LabelRangeError):
        fn(np.full((2, 3, 3), 0.5), np.full((3, 3), 2))
    with pytest.raises(LabelRangeError):
        fn(np.full((2, 3, 3), 0.5), np.full((3, 3), -1))
    with pytest.raises(ShapeError):
        fn(np.full((2, 3, 3), 0.5), np.zeros((3, 4), dtype=int))
    with pytest.raises(ShapeError):
        fn(np.full((2, 3, 3), 0.5), np.zeros((3,), dtype=int))


@pytest.mark.parametrize("fn", [soft_dice_loss, cross_entropy_loss])
@pytest.mark.parametrize("channels", [1, 2, 4])
def test_gradients(fn, channels):
    rng = np.random.default_rng(channels)
    target = rng.integers(0, max(channels, 2), size=(2, 5, 6))
    logits = rng.normal(size=(2, channels, 5, 6))
    pred = 1 / (1 + np.exp(-logits)) if channels == 1 else softmax(logits, axis=1)
    x = Tensor(pred)
    with GradTape() as tape:
        tape.watch(x)
        y = fn(x, target).value
    g = tape.backward(y)[x].data
    assert relative_error(g, finite_diff_grad(lambda t: fn(t, target).value, pred, 1e-6)).max() < 1e-4
