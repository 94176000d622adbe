import math

import numpy as np
import pytest
import torch

from stainforge.errors import ConfigError, ShapeMismatchError
from stainforge.losses import (
    LossWeights,
    gan1_d_loss,
    gan2_d_loss,
    gan_g_loss,
    l1_loss,
    task_loss,
    total_objective,
)

LN2 = math.log(2.0)


def probs(*values):
    return torch.tensor(values, dtype=torch.float32)


class TestDiscriminatorLosses:
    def test_uninformative_discriminator(self):
        loss = gan1_d_loss(probs(0.5, 0.5), probs(0.5, 0.5))
        assert float(loss) == pytest.approx(2 * LN2, abs=1e-6)

    def test_perfect_discriminator_near_zero(self):
        loss = gan1_d_loss(probs(1.0, 1.0), probs(0.0, 0.0))
        assert 0.0 <= float(loss) < 1e-5

    def test_symmetric_at_half(self):
        a = gan1_d_loss(probs(0.5), probs(0.5))
        b = gan1_d_loss(probs(0.5), probs(0.5))
        assert float(a) == float(b)

    def test_gan2_same_function_different_routing(self):
        real, fake = probs(0.7, 0.2), probs(0.4, 0.9)
        assert float(gan2_d_loss(real, fake)) == float(gan1_d_loss(real, fake))

    def test_gan2_uninformative(self):
        loss = gan2_d_loss(probs(0.5, 0.5), probs(0.5, 0.5))
        assert float(loss) == pytest.approx(2 * LN2, abs=1e-6)

    def test_nonnegative_and_finite_on_extremes(self):
        for r in (0.0, 0.5, 1.0):
            for f in (0.0, 0.5, 1.0):
                loss = float(gan1_d_loss(probs(r), probs(f)))
                assert math.isfinite(loss) and loss >= 0.0


class TestGeneratorLoss:
    def test_winning_generator_near_zero(self):
        assert 0.0 <= float(gan_g_loss(probs(1.0, 1.0))) < 1e-5

    def test_half_is_ln2(self):
        assert float(gan_g_loss(probs(0.5, 0.5))) == pytest.approx(LN2, abs=1e-6)

    def test_strictly_decreasing_in_d_fake(self):
        values = [float(gan_g_loss(probs(p))) for p in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestL1Loss:
    def test_identical_inputs(self):
        x = torch.rand(2, 3, 4, 4)
        assert float(l1_loss(x, x)) == 0.0

    def test_zeros_vs_ones(self):
        assert float(l1_loss(torch.zeros(2, 3, 4, 4), torch.ones(2, 3, 4, 4))) == 1.0

    def test_half_pixels_off_by_two_tenths(self):
        recon = torch.zeros(1, 1, 2, 2)
        target = torch.zeros(1, 1, 2, 2)
        target[0, 0, 0] = 0.2  # half the entries off by 0.2
        assert float(l1_loss(recon, target)) == pytest.approx(0.1, abs=1e-7)

    def test_symmetry(self):
        a, b = torch.rand(8), torch.rand(8)
        assert float(l1_loss(a, b)) == pytest.approx(float(l1_loss(b, a)), abs=1e-7)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a, b, c = (torch.from_numpy(rng.random(16)) for _ in range(3))
            assert float(l1_loss(a, c)) <= float(l1_loss(a, b)) + float(
                l1_loss(b, c)
            ) + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            l1_loss(torch.zeros(2, 3), torch.zeros(3, 2))


class TestTaskLoss:
    def test_perfect_predictions(self):
        labels = torch.tensor([1, 0, 1])
        assert float(task_loss(probs(1.0, 0.0, 1.0), labels)) < 1e-5

    def test_half_is_ln2(self):
        labels = torch.tensor([1, 0])
        assert float(task_loss(probs(0.5, 0.5), labels)) == pytest.approx(
            LN2, abs=1e-6
        )

    def test_label_swap_raises_loss(self):
        p = probs(0.9)
        right = float(task_loss(p, torch.tensor([1])))
        wrong = float(task_loss(p, torch.tensor([0])))
        assert right == pytest.approx(-math.log(0.9), abs=1e-6)
        assert wrong == pytest.approx(-math.log(0.1), abs=1e-5)


class TestTotalObjective:
    def test_published_weights_stage1_example(self):
        bundle = total_objective(
            {"gan1": torch.tensor(0.7), "l1": torch.tensor(0.01)},
            LossWeights(),
            stage=1,
        )
        assert float(bundle.total) == pytest.approx(1.7, abs=1e-6)

    def test_zero_weights_zero_total(self):
        weights = LossWeights(gan1=0, gan2=0, l1=0, task=0)
        bundle = total_objective(
            {
                "gan1": torch.tensor(1.0),
                "l1": torch.tensor(1.0),
                "gan2": torch.tensor(1.0),
                "task": torch.tensor(1.0),
            },
            weights,
            stage=3,
        )
        assert float(bundle.total) == 0.0

    def test_stage3_includes_task_at_default_ten(self):
        terms = {
            "gan1": torch.tensor(0.0),
            "l1": torch.tensor(0.0),
            "gan2": torch.tensor(0.0),
            "task": torch.tensor(0.25),
        }
        bundle = total_objective(terms, LossWeights(), stage=3)
        assert float(bundle.total) == pytest.approx(2.5, abs=1e-6)

    def test_inactive_terms_absent(self):
        bundle = total_objective(
            {
                "gan1": torch.tensor(0.1),
                "l1": torch.tensor(0.2),
                "gan2": torch.tensor(0.3),
                "task": torch.tensor(0.4),
            },
            LossWeights(),
            stage=1,
        )
        assert set(bundle.terms) == {"gan1", "l1"}

    def test_missing_active_term_rejected(self):
        with pytest.raises(ConfigError):
            total_objective({"gan1": torch.tensor(0.1)}, LossWeights(), stage=1)

    def test_bad_stage_rejected(self):
        with pytest.raises(ConfigError):
            total_objective({}, LossWeights(), stage=4)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(l1=-1.0)


class TestFinitenessProperties:
    def test_all_losses_finite_and_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            p = torch.from_numpy(rng.random(8).astype(np.float32))
            q = torch.from_numpy(rng.random(8).astype(np.float32))
            y = torch.from_numpy((rng.random(8) > 0.5).astype(np.int64))
            for value in (
                float(gan1_d_loss(p, q)),
                float(gan_g_loss(p)),
                float(task_loss(p, y)),
                float(l1_loss(p, q)),
            ):
                assert math.isfinite(value) and value >= 0.0
