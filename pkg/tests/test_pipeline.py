"""Workflow contracts: warm-up equivalence, preparation, training loop,
conversion, calibration, and evaluation."""

import numpy as np
import pytest

from frostnet import Tensor, ops
from frostnet.arch import build_frostnet
from frostnet.data import epoch_batches, synthetic_dataset, ImageDataset
from frostnet.graph import FAKE_QUANT, FP, INT8, BatchNormNode, InputNode, ModelGraph
from frostnet.optim import GradBoostHyper, GradBoostSGD, GradBoostState, sgd_step
from frostnet.pipeline import (EpochRecord, TrainRunReport, calibrate,
                               convert_int8, evaluate, prepare_qat, qat_train,
                               statassist_warmup)
from frostnet.tensor import Parameter


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(n_train=600, n_test=200, seed=11)


def tiny_model(seed=0):
    return build_frostnet("cifar", 0.5, 10, 32, seed=seed)


def data_fn_for(dataset, batch_size=100, seed=5):
    def data_fn(epoch):
        return epoch_batches(dataset, batch_size, epoch, seed=seed, train=True)
    return data_fn


class TestStatAssistWarmup:
    def test_momentum_charged(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        opt = GradBoostSGD(model.parameters(), lr=0.05, momentum=0.9, seed=1)
        statassist_warmup(model, opt, data_fn_for(train), 1)
        assert any(np.any(st.m != 0) for st in opt.states)

    def test_bit_identical_to_standalone_fp_epoch(self, tiny_data):
        """The warm-up epoch must equal an independently written FP loop."""
        train, _ = tiny_data
        model_a = tiny_model(seed=4)
        opt_a = GradBoostSGD(model_a.parameters(), lr=0.05, momentum=0.9,
                             weight_decay=1e-4, seed=2)
        statassist_warmup(model_a, opt_a, data_fn_for(train), 1)

        # standalone trainer: plain forward/loss/backward/step, no pipeline
        model_b = tiny_model(seed=4)
        params = model_b.parameters()
        states = {p.name: GradBoostState.for_param(p) for p in params}
        hyper = GradBoostHyper(boost_prob=0.0)
        for x, y in data_fn_for(train)(0):
            logits = model_b.forward(x, training=True)
            loss = ops.softmax_cross_entropy(logits, y)
            for p in params:
                p.grad = None
            loss.backward()
            for p in params:
                if p.grad is not None:
                    sgd_step(p, p.grad, states[p.name], lr=0.05, momentum=0.9,
                             weight_decay=1e-4, hyper=hyper)
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert np.array_equal(pa.data, pb.data), pa.name
        for pa, st in zip(opt_a.params, opt_a.states):
            assert np.array_equal(st.m, states[pa.name].m), pa.name

    def test_zero_lr_training_leaves_weights(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        before = [p.data.copy() for p in model.parameters()]
        opt = GradBoostSGD(model.parameters(), lr=1e-30, momentum=0.9, seed=1)
        rep = TrainRunReport()
        statassist_warmup(model, opt, data_fn_for(train), 1, rep,
                          lr_fn=lambda e: 0.0)
        for p, b in zip(model.parameters(), before):
            if "running" not in p.name:
                assert np.allclose(p.data, b)
        assert rep.records[0].lr == 0.0

    def test_requires_fp_epochs(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        opt = GradBoostSGD(model.parameters(), lr=0.05, seed=1)
        with pytest.raises(ValueError, match="epoch"):
            statassist_warmup(model, opt, data_fn_for(train), 0)

    def test_boost_disabled_during_warmup(self, tiny_data):
        train, _ = tiny_data
        a = tiny_model(seed=3)
        ha = GradBoostHyper(boost_prob=0.9)
        opt_a = GradBoostSGD(a.parameters(), lr=0.05, hyper=ha, seed=6)
        statassist_warmup(a, opt_a, data_fn_for(train), 1)
        b = tiny_model(seed=3)
        opt_b = GradBoostSGD(b.parameters(), lr=0.05,
                             hyper=GradBoostHyper(boost_prob=0.0), seed=6)
        statassist_warmup(b, opt_b, data_fn_for(train), 1)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)
        assert opt_a.boost_enabled  # restored afterward


class TestPrepareQat:
    def test_mode_transition(self):
        model = tiny_model()
        assert model.mode == FP
        prepare_qat(model)
        assert model.mode == FAKE_QUANT

    def test_prepare_twice_rejected(self):
        model = tiny_model()
        prepare_qat(model)
        with pytest.raises(RuntimeError, match="twice|fp-mode"):
            prepare_qat(model)

    def test_standalone_batchnorm_rejected(self):
        g = ModelGraph()
        g.add(InputNode())
        g.add(BatchNormNode("lonely_bn", ["input"], 3))
        with pytest.raises(ValueError, match="lonely_bn"):
            prepare_qat(g)

    def test_parameters_preserved(self):
        model = tiny_model()
        before = {p.name: p for p in model.parameters()}
        prepare_qat(model)
        after = {p.name: p for p in model.parameters()}
        assert before.keys() == after.keys()
        for name in before:
            assert before[name] is after[name]


class TestQatTrain:
    def test_zero_epochs_noop(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        prepare_qat(model)
        before = [p.data.copy() for p in model.parameters()]
        opt = GradBoostSGD(model.parameters(), lr=0.05, seed=1)
        rep = TrainRunReport()
        qat_train(model, opt, data_fn_for(train), 0, rep)
        assert rep.records == []
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.data, b)

    def test_requires_prepared_model(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        opt = GradBoostSGD(model.parameters(), lr=0.05, seed=1)
        with pytest.raises(RuntimeError, match="prepared"):
            qat_train(model, opt, data_fn_for(train), 1)

    def test_exhausted_data_rejected(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        prepare_qat(model)
        opt = GradBoostSGD(model.parameters(), lr=0.05, seed=1)

        def flaky(epoch):
            return iter([]) if epoch > 0 else data_fn_for(train)(0)

        with pytest.raises(RuntimeError, match="exhausted"):
            qat_train(model, opt, flaky, 2)

    def test_report_has_grad_stats(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        prepare_qat(model)
        opt = GradBoostSGD(model.parameters(), lr=0.05, seed=1)
        rep = TrainRunReport()
        qat_train(model, opt, data_fn_for(train), 1, rep)
        stats = rep.records[0].grad_stats
        assert "stem" in stats and "block0" in stats
        assert 0.0 <= stats["stem"]["zero_fraction"] <= 1.0
        assert stats["stem"]["median_abs"] >= 0.0


class TestConvertInt8:
    def _trained(self, tiny_data, epochs=2):
        train, test = tiny_data
        model = tiny_model()
        opt = GradBoostSGD(model.parameters(), lr=0.05, momentum=0.9, seed=1)
        statassist_warmup(model, opt, data_fn_for(train), 1)
        prepare_qat(model)
        qat_train(model, opt, data_fn_for(train), epochs, epoch_offset=1)
        return model, test

    def test_convert_requires_fake_quant(self):
        model = tiny_model()
        with pytest.raises(RuntimeError, match="fake_quant"):
            convert_int8(model)

    def test_unobserved_activation_rejected(self):
        model = tiny_model()
        prepare_qat(model)
        with pytest.raises(ValueError, match="unobserved"):
            convert_int8(model)

    def test_top1_agreement_and_eval_only(self, tiny_data):
        model, test = self._trained(tiny_data)
        from frostnet.tensor import no_grad
        xs = []
        preds_fq = []
        for x, y in epoch_batches(test, 100, 0, 0, train=False):
            with no_grad():
                preds_fq.append(model.forward(x, training=False)
                                .data.argmax(axis=1))
            xs.append(x)
        convert_int8(model)
        assert model.mode == INT8
        preds_int = [model.forward(x).argmax(axis=1) for x in xs]
        agree = np.mean(np.concatenate(preds_fq) == np.concatenate(preds_int))
        assert agree >= 0.99
        with pytest.raises(RuntimeError, match="evaluation-only"):
            model.forward(xs[0], training=True)

    def test_int8_outputs_are_uint8_grids(self, tiny_data):
        model, test = self._trained(tiny_data)
        convert_int8(model)
        x = test.images[:4].astype(np.float32)
        from frostnet.data import normalize
        values = {}
        from frostnet.graph import _Ctx
        ctx = _Ctx(False, False, False)
        values["input"] = normalize(test.images[:4])
        for node in model.nodes[1:]:
            values[node.name] = node.forward(
                [values[i] for i in node.inputs], ctx)
            if node.kind.startswith("int_"):
                assert values[node.name].dtype == np.uint8, node.name


class TestCalibrate:
    def test_requires_batches(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        prepare_qat(model)
        with pytest.raises(ValueError, match="batch"):
            calibrate(model, data_fn_for(train), 0)

    def test_constant_zero_batches_degenerate_safe(self):
        model = tiny_model()
        prepare_qat(model)

        def zeros(_epoch):
            for _ in range(2):
                yield np.zeros((8, 3, 32, 32), np.float32), None

        calibrate(model, zeros, 2)
        for node in model.quant_boundary_nodes():
            st = node.out_quant.stats()
            assert st.scale > 0

    def test_absolute_mode_idempotent(self, tiny_data):
        train, _ = tiny_data
        model = tiny_model()
        prepare_qat(model, observer_mode="absolute")
        calibrate(model, data_fn_for(train), 3)
        first = {n.name: n.out_quant.stats() for n in model.quant_boundary_nodes()}
        calibrate(model, data_fn_for(train), 3)
        second = {n.name: n.out_quant.stats() for n in model.quant_boundary_nodes()}
        assert first == second

    def test_post_quantization_accuracy_budget(self, tiny_data):
        # post-quantize a briefly FP-trained model; int8 within 5 points
        train, test = tiny_data
        model = tiny_model()
        opt = GradBoostSGD(model.parameters(), lr=0.05, momentum=0.9, seed=1)
        statassist_warmup(model, opt, data_fn_for(train), 4)
        fp_acc = evaluate(model, test)
        prepare_qat(model)
        calibrate(model, data_fn_for(train), 4)
        convert_int8(model)
        int8_acc = evaluate(model, test)
        assert int8_acc >= fp_acc - 0.05


class TestEvaluate:
    def test_perfect_memorization(self, tiny_data):
        train, _ = tiny_data
        sub = ImageDataset(train.images[:50], train.labels[:50], "memorize")
        model = tiny_model()
        opt = GradBoostSGD(model.parameters(), lr=0.05, momentum=0.9, seed=1)

        def data_fn(e):
            return epoch_batches(sub, 25, e, seed=1, train=True,
                                 augment_data=False)

        from frostnet.optim import lr_schedule
        statassist_warmup(model, opt, data_fn, 60,
                          lr_fn=lambda e: lr_schedule("poly", e, 60, 0.05))
        assert evaluate(model, sub) == 1.0

    def test_chance_level_untrained(self):
        _, test = synthetic_dataset(n_train=10, n_test=2500, seed=3)
        model = tiny_model(seed=8)
        acc = evaluate(model, test)
        assert abs(acc - 0.1) < 0.03

    def test_deterministic(self, tiny_data):
        _, test = tiny_data
        model = tiny_model()
        assert evaluate(model, test) == evaluate(model, test)

    def test_empty_split_rejected(self):
        model = tiny_model()
        empty = ImageDataset(np.zeros((0, 3, 32, 32), np.uint8),
                             np.zeros(0, np.int64), "empty")
        with pytest.raises(ValueError, match="empty"):
            evaluate(model, empty)


class TestReport:
    def test_monotone_epochs_enforced(self):
        rep = TrainRunReport()
        rep.add(EpochRecord(0, "fp", 1.0, 0.1, 0.05, 1.0))
        with pytest.raises(ValueError, match="monotonically"):
            rep.add(EpochRecord(0, "fp", 1.0, 0.1, 0.05, 1.0))

    def test_roundtrip(self):
        rep = TrainRunReport(meta={"k": 1})
        rep.add(EpochRecord(0, "fp", 1.0, 0.1, 0.05, 1.0,
                            {"stem": {"zero_fraction": 0.0, "median_abs": 1e-3}}))
        back = TrainRunReport.from_dict(rep.to_dict())
        assert back.meta == rep.meta
        assert vars(back.records[0]) == vars(rep.records[0])
