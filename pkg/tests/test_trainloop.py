import copy
import math
import struct
from dataclasses import replace

import numpy as np
import pytest

from predalign import numkernel as nk
from predalign import synthdomains as sd
from predalign import trainloop as tl
from predalign.detector import ssd_loss

LN2 = math.log(2)


@pytest.fixture(scope="module")
def data():
    src, tgt = sd.domain_pair(0.2)
    return tl.Datasets(
        sd.generate_dataset(sd.DatasetSpec("source_train", 24, 0), src),
        sd.generate_dataset(sd.DatasetSpec("target_train_unlabeled", 12, 10_000), tgt),
        sd.generate_dataset(sd.DatasetSpec("target_test", 6, 20_000), tgt),
        sd.generate_dataset(sd.DatasetSpec("target_labels", 6, 30_000), tgt),
    )


def quick(mode="norm_p", **kw):
    base = dict(pretrain_iterations=12, pretrain_milestones=(8,), da_iterations=4, da_milestones=(),
                source_batch=4, target_batch=4)
    base.update(kw)
    return tl.TrainConfig(mode=mode, **base)


def blind(discs):
    for d in (discs.feature, discs.prediction):
        for k, p in d.params.items():
            if k.startswith(("conv2", "fc2")):
                p.data[...] = 0
    return discs


def batches(data, n=4):
    s = sd.stack_images(data.source_train[:n])
    t = sd.stack_images(data.target_train[:n])
    gts = [sc.training_boxes for sc in data.source_train[:n]]
    return s, gts, t


class TestConfig:
    def test_mode_defaults(self):
        assert tl.TrainConfig(mode="norm_d_and_p").alpha == 0.1
        c = tl.TrainConfig(mode="norm_p")
        assert (c.alpha, c.a) == (0.1, (3.0, 1.0))
        assert tl.FULL_SCALE_ALPHA == {"without_norm": 1.0, "norm_d_and_p": 0.1, "norm_p": 1.0}
        assert tl.TrainConfig(mode="without_norm").alpha == 1.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            tl.TrainConfig(mode="fancy")
        with pytest.raises(ValueError):
            tl.TrainConfig(alpha=-0.5)
        with pytest.raises(ValueError):
            tl.TrainConfig(source_batch=0)

    def test_full_scale_budgets_accepted(self):
        c = tl.TrainConfig(**tl.FULL_SCALE_PRETRAIN)
        assert (c.pretrain_iterations, c.pretrain_milestones) == (40000, (28000, 35000))
        for mode, n in tl.FULL_SCALE_DA_ITERATIONS.items():
            assert tl.TrainConfig(mode=mode, da_iterations=n).da_iterations == n
        assert tl.FULL_SCALE_DA_ITERATIONS == {"plain_adv": 15000, "without_norm": 15000,
                                          "norm_d_and_p": 10000, "norm_p": 10000}

    def test_for_mode_resets_alpha(self):
        c = tl.TrainConfig(mode="without_norm").for_mode("norm_p")
        assert c.alpha == 0.1 and c.a == (3.0, 1.0)

    def test_lr_schedule(self):
        assert [tl.lr_at(1.0, i, (2, 4)) for i in range(6)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


class TestPretrain:
    def test_held_out_loss_drops(self, data):
        cfg = quick(pretrain_iterations=60, pretrain_milestones=(45,), source_batch=8)
        held = sd.generate_dataset(sd.DatasetSpec("source_train", 8, 500), sd.SOURCE_PARAMS)
        imgs, gts = sd.stack_images(held), [sc.training_boxes for sc in held]

        def loss(m):
            with nk.no_grad():
                _, loc, conf = m(imgs)
                return ssd_loss(loc, conf, gts, m.defaults).item()

        init = tl.new_model(cfg)
        trained = tl.pretrain_source(cfg, data.source_train, copy.deepcopy(init))
        assert loss(trained) < loss(init)

    def test_deterministic(self, data):
        a = tl.pretrain_source(quick(), data.source_train)
        b = tl.pretrain_source(quick(), data.source_train)
        assert a.checksum() == b.checksum()

    def test_divergence_aborts(self, data):
        with pytest.raises(tl.TrainingDiverged, match="iteration"):
            tl.pretrain_source(quick(lr=1e12, pretrain_iterations=30), data.source_train)


class TestDiscriminatorStep:
    def test_blind_values_and_freeze(self, data):
        s, _, t = batches(data)
        for mode, expected in (("norm_p", 4 * LN2), ("without_norm", 4 * LN2), ("plain_adv", 2 * LN2)):
            cfg = quick(mode)
            model = tl.new_model(cfg)
            discs = blind(tl.new_discriminators(model, 0))
            before = model.checksum()
            p_before = discs.prediction.checksum()
            opt = nk.SGD(discs.parameters(), 1e-3, 0.9)
            loss = tl.da_step_discriminators(model, discs, s, t, cfg, opt)
            assert abs(loss - expected) <= 1e-6  # float32 model
            assert model.checksum() == before
            if mode == "plain_adv":
                assert discs.prediction.checksum() == p_before

    def test_norm_d_and_p_blind_value(self, data):
        # weighted terms at D = 0.5 equal ln 2 times the mean weight
        s, _, t = batches(data)
        cfg = quick("norm_d_and_p")
        model = tl.new_model(cfg)
        discs = blind(tl.new_discriminators(model, 0))
        loss = tl.da_step_discriminators(model, discs, s, t, cfg, nk.SGD(discs.parameters(), 1e-3))
        with nk.no_grad():
            ws = tl._cwn(model(s)[2], cfg.a).mean()
            wt = tl._cwn(model(t)[2], cfg.a).mean()
        assert loss == pytest.approx(2 * LN2 + LN2 * (ws + wt), abs=1e-5)

    def test_descent_on_fixed_batch(self, data):
        s, _, t = batches(data)
        cfg = quick("without_norm")
        model = tl.new_model(cfg)
        discs = tl.new_discriminators(model, 1)
        opt = nk.SGD(discs.parameters(), 1e-2, 0.0)
        losses = [tl.da_step_discriminators(model, discs, s, t, cfg, opt) for _ in range(12)]
        assert all(b < a for a, b in zip(losses, losses[1:11]))


class TestModelStep:
    def test_freezes_discriminators(self, data):
        s, gts, t = batches(data)
        for mode in ("plain_adv", "without_norm", "norm_d_and_p", "norm_p", "without_da"):
            cfg = quick(mode)
            model = tl.new_model(cfg)
            discs = tl.new_discriminators(model, 0)
            before = discs.checksum()
            m_before = model.checksum()
            tl.da_step_model(model, discs, s, gts, t, cfg, nk.SGD(model.parameters(), 1e-2, 0.9))
            assert discs.checksum() == before and model.checksum() != m_before

    def test_alpha_zero_matches_plain_adv(self, data):
        s, gts, t = batches(data)
        sums = []
        for cfg in (quick("norm_p", alpha=0.0), quick("plain_adv")):
            model = tl.new_model(cfg)
            discs = tl.new_discriminators(model, 0)
            loss = tl.da_step_model(model, discs, s, gts, t, cfg, nk.SGD(model.parameters(), 1e-2, 0.9))
            sums.append((loss, model.checksum()))
        assert sums[0] == sums[1]

    def test_balanced_norm_p_equals_without_norm(self, data):
        s, gts, t = batches(data)
        out = []
        for cfg in (quick("norm_p", alpha=1.0, a=(1.0, 1.0)), quick("without_norm")):
            model = tl.new_model(cfg)
            model = copy.deepcopy(model)
            for p in model.params.values():
                p.data = p.data.astype(np.float64)
            model.dtype = np.float64
            # template 0 argmaxes background, template 1 foreground: exactly half each
            conf_b = model.params["head.conf.bias"].data
            model.params["head.conf.weight"].data[...] = 0
            conf_b[...] = [5.0, 0.0, 0.0, 5.0]
            discs = tl.new_discriminators(model, 0)
            for d in (discs.feature, discs.prediction):
                for p in d.params.values():
                    p.data = p.data.astype(np.float64)
            loss = tl.da_step_model(model, discs, s.astype(np.float64), gts, t.astype(np.float64), cfg,
                                    nk.SGD(model.parameters(), 1e-2, 0.9))
            out.append((loss, np.concatenate([p.data.ravel() for p in model.parameters()])))
        assert out[0][0] == pytest.approx(out[1][0], abs=1e-9)
        np.testing.assert_allclose(out[0][1], out[1][1], rtol=0, atol=1e-9)

    def test_reference_needs_labels(self, data):
        s, gts, t = batches(data)
        cfg = quick("reference")
        model = tl.new_model(cfg)
        with pytest.raises(ValueError):
            tl.da_step_model(model, tl.new_discriminators(model, 0), s, gts, t, cfg, nk.SGD(model.parameters(), 1e-2))


@pytest.fixture(scope="module")
def pretrained(data):
    return tl.pretrain_source(quick(), data.source_train)


class TestAdapt:
    def test_without_da_is_noop(self, data, pretrained):
        out = tl.adapt(pretrained, quick("without_da"), data)
        assert out.checksum() == pretrained.checksum() and out is not pretrained

    def test_input_model_untouched(self, data, pretrained):
        before = pretrained.checksum()
        out = tl.adapt(pretrained, quick("norm_p"), data)
        assert pretrained.checksum() == before and out.checksum() != before

    @pytest.mark.parametrize("mode", ["plain_adv", "without_norm", "norm_d_and_p", "norm_p", "reference"])
    def test_purity_every_iteration(self, data, pretrained, mode):
        history = []
        tl.adapt(pretrained, quick(mode, da_iterations=6), data, check_purity=True, history=history)
        assert len(history) == 6 and all(np.isfinite(l2) for _, l2 in history)

    def test_divergence_names_mode(self, data, pretrained):
        with pytest.raises(tl.TrainingDiverged, match="norm_p"):
            tl.adapt(pretrained, quick("norm_p", da_lr=1e12, da_iterations=40), data)


class TestExperiment:
    def test_ordering_stats_and_determinism(self, data):
        cfg = quick(pretrain_iterations=6, da_iterations=2)
        modes = ["norm_p", "without_da"]
        stats, runs = tl.run_experiment(cfg, data, 2, modes)
        assert [(r.mode, r.seed) for r in runs] == [("norm_p", 0), ("norm_p", 1), ("without_da", 0), ("without_da", 1)]
        for s in stats:
            vals = [r.metrics.AP for r in runs if r.mode == s.mode]
            assert s.avr["AP"] == pytest.approx(np.mean(vals))
            assert s.stderr["AP"] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(2))
        _, again = tl.run_experiment(cfg, data, 2, modes)
        assert [r.metrics for r in runs] == [r.metrics for r in again]

    def test_single_repetition_zero_stderr(self, data):
        stats, _ = tl.run_experiment(quick(pretrain_iterations=4, da_iterations=1), data, 1, ["plain_adv"])
        assert all(v == 0.0 for v in stats[0].stderr.values())

    def test_summary_formula(self):
        from predalign.evalmetrics import MetricsReport
        runs = [tl.RunResult("norm_p", i, MetricsReport(v, v, v, v, v, 0.5)) for i, v in enumerate((0.1, 0.2, 0.3))]
        s = tl.summarize(runs, ["norm_p"])[0]
        assert s.avr["AP"] == pytest.approx(0.2) and s.stderr["AP"] == pytest.approx(0.1 / math.sqrt(3))

    def test_rejects_zero_repetitions(self, data):
        with pytest.raises(ValueError):
            tl.run_experiment(quick(), data, 0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = tl.new_model(quick(), seed=3)
        tl.save_checkpoint(m, tmp_path / "m.ckpt")
        back = tl.load_checkpoint(tl.new_model(quick(), seed=4), tmp_path / "m.ckpt")
        assert back.checksum() == m.checksum()

    def test_header(self, tmp_path):
        m = tl.new_model(quick())
        tl.save_checkpoint(m, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"PALN"
        assert struct.unpack_from("<II", raw, 4) == (1, len(m.params))

    def test_bad_magic_and_version(self, tmp_path):
        m = tl.new_model(quick())
        p = tmp_path / "m.ckpt"
        tl.save_checkpoint(m, p)
        raw = p.read_bytes()
        p.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="magic"):
            tl.read_checkpoint(p)
        p.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
        with pytest.raises(ValueError, match="version"):
            tl.read_checkpoint(p)
        p.write_bytes(raw[:200])
        with pytest.raises(ValueError, match="truncated"):
            tl.read_checkpoint(p)
