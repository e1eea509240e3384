"""
Test for CRBM pretraining and the staged training schedule
"""

import unittest

import numpy as np
import torch

from core import TrainingDivergenceError
from datagen import (ExcitationSpec, WindowedDataset, collect_trajectory, generate_excitation,
                     train_validation_split, windows_from_episodes)
from plants import PlantConfig, make_plant
from surrogate import SurrogateModel, fingerprint, loss
from training import (HISTORY_COLUMNS, CRBMConfig, StageConfig, TrainConfig, fine_tune, pretrain_crbm, train)

M, N, D = 2, 3, 1


def linear_episodes(seconds=30.0, seed=0):
    plant = make_plant(PlantConfig("Linear"))
    signal = generate_excitation(ExcitationSpec(duration_s=seconds, seed=seed, hold_s=0.3))
    return [collect_trajectory(plant, signal, np.array([0.0]))]


def small_model(episodes, seed=0):
    model = SurrogateModel.create(1, 1, M=M, N=N, d=D, h_dim=4, hidden=8, seed=seed)
    model.fit_normalization(episodes)
    return model


def quick_config(epochs=4, **kwargs):
    stage = StageConfig(epochs=epochs, batch_size=32, learning_rate=1e-2)
    return TrainConfig(stage2=stage, stage3=stage, **kwargs)


class TestTrain(unittest.TestCase):
    """Test cases for the staged training schedule"""

    def setUp(self):
        episodes = linear_episodes()
        train_eps, val_eps = train_validation_split(episodes, 0.2)
        self.data = windows_from_episodes(train_eps, M, N, D)
        self.validation = windows_from_episodes(val_eps, M, N, D)
        self.model = small_model(train_eps)

    def test_zero_epochs_leave_model_unchanged(self):
        before = fingerprint(self.model)
        result = train(self.model, self.data, quick_config(epochs=0))
        self.assertEqual(fingerprint(result.model), before)
        self.assertEqual(len(result.history), 0)
        print("✓ Zero-epoch training test passed")

    def test_history_and_best_checkpoint(self):
        initial = loss(self.model, self.validation)
        result = train(self.model, self.data, quick_config(), self.validation)
        history = result.history
        self.assertEqual(list(history.columns), HISTORY_COLUMNS)
        self.assertEqual(list(history["stage"].unique()), ["single_step", "multi_step"])
        self.assertEqual(len(history), 2 * (4 + 1))
        for _, stage in history.groupby("stage"):
            best = stage["best_val_loss"].to_numpy()
            self.assertTrue(np.all(np.diff(best) <= 0))
            self.assertEqual(best[-1], stage["val_loss"].min())
        final = loss(result.model, self.validation)
        self.assertAlmostEqual(final, history[history["stage"] == "multi_step"]["best_val_loss"].iloc[-1], places=10)
        self.assertLess(final, initial)
        print("✓ Training history test passed")

    def test_training_is_deterministic(self):
        episodes = linear_episodes()
        a = train(small_model(episodes), self.data, quick_config(epochs=2)).model
        b = train(small_model(episodes), self.data, quick_config(epochs=2)).model
        self.assertEqual(fingerprint(a), fingerprint(b))
        print("✓ Training determinism test passed")

    def test_divergence_reports_stage(self):
        targets = self.data.targets.copy()
        targets[0, 0, 0] = np.nan
        poisoned = WindowedDataset(self.data.z_hist, self.data.u_hist, self.data.controls, targets, M, N, D)
        with self.assertRaises(TrainingDivergenceError) as ctx:
            train(self.model, poisoned, quick_config(single_step=False))
        self.assertEqual(ctx.exception.stage, "multi_step")
        self.assertEqual(ctx.exception.epoch, 1)
        print("✓ Training divergence test passed")

    def test_mismatched_windows(self):
        other = windows_from_episodes(linear_episodes(), M, N + 1, D)
        with self.assertRaises(ValueError):
            train(self.model, other, quick_config())
        with self.assertRaises(ValueError):
            train(self.model, self.data, TrainConfig(clip_norm=0.0))
        print("✓ Window mismatch test passed")

    def test_fine_tune_runs_multi_step_only(self):
        result = fine_tune(self.model, self.data, epochs=2, learning_rate=1e-3, batch_size=16)
        self.assertEqual(list(result.history["stage"].unique()), ["multi_step"])
        self.assertEqual(len(result.history), 3)
        print("✓ Fine-tuning test passed")


class TestCRBM(unittest.TestCase):
    """Test cases for CRBM pretraining"""

    def setUp(self):
        episodes = linear_episodes(seconds=20.0, seed=1)
        self.data = windows_from_episodes(episodes, M, N, D)
        self.model = small_model(episodes, seed=3)

    def test_zero_epochs_is_passthrough(self):
        before = fingerprint(self.model)
        cell = pretrain_crbm(self.model, self.data, CRBMConfig(epochs=0))
        self.assertIs(cell, self.model.cell)
        self.assertEqual(fingerprint(self.model), before)
        print("✓ CRBM passthrough test passed")

    def test_pretraining_sets_first_latent_layer(self):
        reference = small_model(linear_episodes(seconds=20.0, seed=1), seed=3)
        reference.reset_parameters(3)
        pretrain_crbm(self.model, self.data, CRBMConfig(epochs=3, hidden_units=5, batch_size=16), seed=3)
        first = self.model.cell.latent.layers[0].linear
        self.assertEqual(tuple(first.weight.shape), tuple(reference.cell.latent.layers[0].linear.weight.shape))
        self.assertFalse(torch.equal(first.weight, reference.cell.latent.layers[0].linear.weight))
        for name, param in self.model.named_parameters():
            if not name.startswith("cell.latent.layers.0"):
                self.assertTrue(torch.equal(param, dict(reference.named_parameters())[name]), name)
        self.assertTrue(torch.all(torch.isfinite(first.weight)))
        print("✓ CRBM first-layer test passed")

    def test_pretraining_then_training(self):
        config = quick_config(epochs=1, crbm_pretrain=True, crbm=CRBMConfig(epochs=2, hidden_units=4))
        result = train(self.model, self.data, config)
        self.assertTrue(np.isfinite(result.final_train_loss))
        print("✓ CRBM followed by training test passed")


if __name__ == '__main__':
    unittest.main()
