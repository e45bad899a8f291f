import math

import numpy as np
import pytest
import torch

from helpers import central_difference_gradcheck
from violinmotion.bf_model import (BfBranchConfig, BfProbabilities,
                                   bf_forward, build_bf_network, ce_loss,
                                   decode_onehot)
from violinmotion.errors import ConfigError, DimensionMismatch

TINY = BfBranchConfig(n_classes=3, conv_channels=(2, 2, 2), rnn_hidden=8,
                      rnn_layers=2, fc_hidden=8, dropout=0.0, n_mels=16)


class TestConfig:
    def test_default_rnn_input_width(self):
        cfg = BfBranchConfig(n_classes=5)
        # 128 channels x 128/16 frequency bins
        assert cfg.rnn_input_dim == 1024

    def test_indivisible_mel_count(self):
        with pytest.raises(ConfigError):
            BfBranchConfig(n_classes=5, n_mels=100)

    def test_bad_class_count(self):
        with pytest.raises(ConfigError):
            BfBranchConfig(n_classes=4)

    def test_parameter_count_deterministic(self):
        a = build_bf_network(TINY).parameter_count()
        b = build_bf_network(TINY).parameter_count()
        assert a == b


class TestForward:
    def test_output_shape_and_row_sums(self):
        torch.manual_seed(0)
        cfg = BfBranchConfig(n_classes=5, conv_channels=(4, 4, 8),
                             rnn_hidden=16, fc_hidden=8, n_mels=32)
        net = build_bf_network(cfg)
        probs = bf_forward(net, np.random.default_rng(0).normal(size=(200, 32)))
        assert probs.data.shape == (200, 5)
        assert np.abs(probs.data.sum(axis=1) - 1.0).max() < 1e-6

    def test_single_frame(self):
        torch.manual_seed(0)
        net = build_bf_network(TINY)
        probs = bf_forward(net, np.zeros((1, 16)))
        assert probs.data.shape == (1, 3)
        assert np.all(np.isfinite(probs.data))

    def test_eval_mode_deterministic(self):
        torch.manual_seed(0)
        cfg = BfBranchConfig(n_classes=3, conv_channels=(2, 2, 2),
                             rnn_hidden=8, fc_hidden=8, dropout=0.5, n_mels=16)
        net = build_bf_network(cfg)
        x = np.random.default_rng(1).normal(size=(20, 16))
        assert np.array_equal(bf_forward(net, x).data, bf_forward(net, x).data)

    def test_time_preserved_for_many_lengths(self):
        torch.manual_seed(0)
        net = build_bf_network(TINY)
        rng = np.random.default_rng(2)
        for t in (1, 2, 7, 31, 64):
            assert bf_forward(net, rng.normal(size=(t, 16))).data.shape[0] == t

    def test_wrong_feature_width(self):
        net = build_bf_network(TINY)
        with pytest.raises(DimensionMismatch):
            bf_forward(net, np.zeros((5, 32)))


class TestDecode:
    def test_argmax(self):
        out = decode_onehot(np.array([[0.1, 0.7, 0.2]]))
        assert out.tolist() == [[0.0, 1.0, 0.0]]

    def test_tie_breaks_to_lowest_index(self):
        out = decode_onehot(np.array([[0.5, 0.5]]))
        assert out.tolist() == [[1.0, 0.0]]

    def test_idempotent(self):
        probs = np.array([[0.2, 0.5, 0.3], [0.9, 0.05, 0.05]])
        once = decode_onehot(probs)
        assert np.array_equal(decode_onehot(once), once)

    def test_row_scaling_invariance(self):
        rng = np.random.default_rng(3)
        probs = rng.uniform(0.01, 1.0, size=(50, 6))
        probs /= probs.sum(axis=1, keepdims=True)
        scaled = probs * rng.uniform(0.5, 3.0, size=(50, 1))
        assert np.array_equal(decode_onehot(probs), decode_onehot(scaled))

    def test_accepts_probability_objects(self):
        probs = BfProbabilities(np.array([[0.3, 0.7]]))
        assert decode_onehot(probs).tolist() == [[0.0, 1.0]]


class TestCeLoss:
    def test_perfect_prediction(self):
        target = torch.eye(3)[torch.tensor([0, 1, 2, 1])].double()
        assert float(ce_loss(target, target)) <= 1e-6

    def test_uniform_three_class(self):
        probs = torch.full((4, 3), 1.0 / 3.0, dtype=torch.float64)
        target = torch.eye(3)[torch.tensor([2, 0, 1, 1])].double()
        assert float(ce_loss(probs, target)) == pytest.approx(math.log(3.0),
                                                              abs=1e-9)

    def test_hand_example(self):
        probs = torch.tensor([[0.5, 0.5], [0.25, 0.75]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        expected = -(math.log(0.5) + math.log(0.75)) / 2
        assert float(ce_loss(probs, target)) == pytest.approx(expected,
                                                              abs=1e-9)

    def test_batched_mean(self):
        probs = torch.tensor([[[0.5, 0.5]], [[0.25, 0.75]]],
                             dtype=torch.float64)
        target = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]],
                              dtype=torch.float64)
        expected = -(math.log(0.5) + math.log(0.75)) / 2
        assert float(ce_loss(probs, target)) == pytest.approx(expected,
                                                              abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            ce_loss(torch.zeros(3, 2), torch.zeros(3, 3))

    def test_zero_probability_clamped(self):
        probs = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert torch.isfinite(ce_loss(probs, target))


class TestProbabilitiesType:
    def test_rejects_non_stochastic(self):
        with pytest.raises(DimensionMismatch):
            BfProbabilities(np.array([[0.5, 0.6]]))

    def test_rejects_negative(self):
        with pytest.raises(DimensionMismatch):
            BfProbabilities(np.array([[-0.1, 1.1]]))


def test_gradient_check_tiny_crnn():
    """Autograd vs central differences on every parameter of the tiny net."""
    torch.manual_seed(0)
    net = build_bf_network(TINY).double()
    net.train()  # batch stats in use; dropout is 0 in the tiny config
    x = torch.randn(1, 4, 16, dtype=torch.float64)
    target = torch.zeros(1, 4, 3, dtype=torch.float64)
    target[0, torch.arange(4), torch.tensor([0, 1, 2, 0])] = 1.0
    err = central_difference_gradcheck(net, lambda: ce_loss(net(x), target))
    assert err < 1e-4
