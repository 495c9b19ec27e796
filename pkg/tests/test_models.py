import numpy as np
import pytest
import torch

from wbmark.data import DatasetSplit
from wbmark.errors import InputError, TrainingError
from wbmark.models import (BENCHMARKS, TrainConfig, activation_maps, build_model,
                           checkpoint_to_model, default_watermark_layer,
                           evaluate_accuracy, n_fc_layers, state_to_checkpoint,
                           train_baseline, train_task)
from tests.conftest import make_synthetic


def param_count(model):
    return sum(p.numel() for p in model.parameters())


class TestBuildModel:
    def test_bm1_parameter_count(self):
        # 784*512 + 512 + 512*512 + 512 + 512*10 + 10
        assert param_count(build_model(1, seed=0)) == 669_706

    def test_bm4_has_two_batchnorm_groups(self):
        model = build_model(4, seed=0)
        bns = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm2d)]
        assert len(bns) == 2

    def test_same_seed_bitwise_identical(self):
        a, b = build_model(1, seed=9), build_model(1, seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a, b = build_model(1, seed=1), build_model(1, seed=2)
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_unknown_id_rejected(self):
        with pytest.raises(InputError):
            build_model(7, seed=0)
        with pytest.raises(InputError):
            build_model("mystery_net", seed=0)

    def test_benchmark_table(self):
        assert BENCHMARKS[1].dataset == "mnist" and BENCHMARKS[1].arch == "bm1_mlp"
        assert BENCHMARKS[2].dataset == "cifar10" and BENCHMARKS[2].arch == "bm2_cnn"
        assert BENCHMARKS[3].dataset == "cifar10" and BENCHMARKS[3].arch == "bm3_resnet18"
        assert BENCHMARKS[4].dataset == "mnist" and BENCHMARKS[4].arch == "bm4_lenet"

    def test_forward_shapes(self):
        for bid in (1, 2, 3, 4):
            model = build_model(bid, seed=0)
            x = torch.zeros((2, *model.input_shape))
            assert model(x).shape == (2, 10)

    def test_watermark_layer_widths(self):
        # second-to-last layer widths: 512 for the MLP/CNN/ResNet18, 64 for LeNet
        for bid, width in ((1, 512), (2, 512), (3, 512), (4, 64)):
            model = build_model(bid, seed=0)
            layer = default_watermark_layer(model)
            x = torch.zeros((1, *model.input_shape))
            pre = model.forward_with_preacts(x)[1]
            assert pre[layer].shape[1] == width


class TestActivationMaps:
    def test_identity_layer(self):
        model = build_model(1, seed=0)
        fc = model.head.fcs[1]
        with torch.no_grad():
            fc.weight.zero_()
            fc.weight[:, :].copy_(torch.eye(512))
            fc.bias.zero_()
        x = torch.randn(3, 1, 28, 28)
        first = activation_maps(model, 0, x).values
        second = activation_maps(model, 1, x).values
        assert torch.allclose(second, torch.relu(first), atol=1e-6)

    def test_zero_weight_layer_returns_bias(self):
        model = build_model(1, seed=0)
        fc = model.head.fcs[1]
        with torch.no_grad():
            fc.weight.zero_()
            fc.bias.copy_(torch.arange(512, dtype=torch.float32))
        out = activation_maps(model, 1, torch.randn(4, 1, 28, 28)).values
        assert torch.allclose(out, torch.arange(512, dtype=torch.float32).expand(4, -1))

    def test_matches_dense_matmul_oracle(self):
        model = build_model(1, seed=3)
        x = torch.randn(8, 1, 28, 28)
        batch = activation_maps(model, 1, x)
        assert batch.pre_activation

        # independent path: numpy mat-mul through layer 0 + relu
        w0 = model.head.fcs[0].weight.detach().numpy().astype(np.float64)
        b0 = model.head.fcs[0].bias.detach().numpy().astype(np.float64)
        w1 = model.head.fcs[1].weight.detach().numpy().astype(np.float64)
        b1 = model.head.fcs[1].bias.detach().numpy().astype(np.float64)
        flat = x.numpy().reshape(8, -1).astype(np.float64)
        hidden = np.maximum(flat @ w0.T + b0, 0.0)
        expected = hidden @ w1.T + b1
        got = batch.values.numpy().astype(np.float64)
        denom = np.maximum(np.abs(expected), 1.0)
        assert (np.abs(got - expected) / denom).max() < 1e-5

    def test_invalid_layer_rejected(self):
        model = build_model(1, seed=0)
        with pytest.raises(InputError):
            activation_maps(model, 5, torch.zeros(1, 1, 28, 28))
        assert n_fc_layers(model) == 3


class TestCheckpointConversion:
    def test_state_round_trip(self, synth_base):
        model = checkpoint_to_model(synth_base)
        again = state_to_checkpoint(model, synth_base.meta)
        for name, t in synth_base.tensors.items():
            assert np.array_equal(again.tensors[name], t)

    def test_shape_mismatch_rejected(self, synth_base):
        bad = synth_base.copy()
        bad.tensors["head.fcs.0.weight"] = bad.tensors["head.fcs.0.weight"][:, :100]
        with pytest.raises(InputError):
            checkpoint_to_model(bad)

    def test_name_mismatch_rejected(self, synth_base):
        bad = synth_base.copy()
        bad.tensors["extra"] = np.zeros(3, dtype=np.float32)
        with pytest.raises(InputError):
            checkpoint_to_model(bad)


class TestTraining:
    def test_loss_decreases(self, synth_base):
        assert synth_base.meta["last_epoch_loss"] < synth_base.meta["first_epoch_loss"]

    def test_divergence_reports_epoch(self, synth_train):
        model = build_model(1, seed=0)
        cfg = TrainConfig(epochs=2, learning_rate=1e6, optimizer="sgd", seed=0)
        with pytest.raises(TrainingError) as exc:
            train_task(model, synth_train, 2, cfg, torch.Generator().manual_seed(0))
        assert exc.value.epoch is not None

    def test_zero_epochs_keeps_init_and_chance_accuracy(self, synth_train, synth_test):
        cfg = TrainConfig(epochs=0, seed=5)
        ckpt = train_baseline(BENCHMARKS[1], synth_train, synth_test, cfg)
        init = build_model(1, seed=5)
        for name, t in state_to_checkpoint(init, {}).tensors.items():
            assert np.array_equal(ckpt.tensors[name], t)
        assert 0.0 <= ckpt.meta["final_accuracy"] <= 0.35

    def test_deterministic_repeat(self, synth_train, synth_test):
        cfg = TrainConfig(epochs=1, seed=11)
        a = train_baseline(BENCHMARKS[1], synth_train, synth_test, cfg)
        b = train_baseline(BENCHMARKS[1], synth_train, synth_test, cfg)
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name])


class TestEvaluate:
    def test_perfect_toy_model(self, synth_base, synth_train):
        model = checkpoint_to_model(synth_base)
        few = synth_train.subset(np.arange(64))
        assert evaluate_accuracy(model, few) > 0.95

    def test_constant_output_is_chance(self):
        model = build_model(1, seed=0)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        balanced = make_synthetic(500, seed=2)
        acc = evaluate_accuracy(model, balanced)
        assert acc == pytest.approx(np.mean(balanced.labels == 0), abs=1e-9)

    def test_shape_mismatch(self, synth_base):
        cifar_like = DatasetSplit(np.zeros((4, 3, 32, 32), dtype=np.float32),
                                  np.zeros(4, dtype=np.int64))
        with pytest.raises(InputError):
            evaluate_accuracy(synth_base, cifar_like)
