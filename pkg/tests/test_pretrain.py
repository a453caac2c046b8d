import math

import numpy as np
import pytest

from conftest import tiny_config
from oracles import bce_loop, infonce_two_loop
from ssit import numerics as nx
from ssit.data import synth_image
from ssit.numerics.gradcheck import directional_check
from ssit import pretrain as pt
from ssit import vit
from ssit.numerics import Tensor
from ssit.saliency import fine_grained_saliency


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tiny_data(cfg, n=8, seed=0):
    rng = np.random.default_rng(seed)
    s = cfg.vit.image_size
    images = [rng.random((s, s, 3)) for _ in range(n)]
    return images, [fine_grained_saliency(im) for im in images]


def fixed_batch(cfg, n=4, seed=0):
    images, sals = tiny_data(cfg, n, seed)
    return pt.build_batch(images, sals, np.arange(n), 0, cfg)


class TestMomentum:
    def params(self, rng):
        return {"a": Tensor(rng.random((3, 4))), "b": Tensor(rng.random(5))}

    def test_alpha_one_freezes(self, rng):
        key, query = self.params(rng), self.params(rng)
        before = {k: v.data.copy() for k, v in key.items()}
        pt.momentum_update(key, query, 1.0)
        for k in key:
            assert np.array_equal(key[k].data, before[k])

    def test_alpha_zero_copies(self, rng):
        key, query = self.params(rng), self.params(rng)
        pt.momentum_update(key, query, 0.0)
        for k in key:
            assert np.array_equal(key[k].data, query[k].data)

    def test_half_twice(self, rng):
        key, query = self.params(rng), self.params(rng)
        k0 = {k: v.data.astype(np.float64) for k, v in key.items()}
        pt.momentum_update(key, query, 0.5)
        pt.momentum_update(key, query, 0.5)
        for k in key:
            np.testing.assert_allclose(key[k].data, 0.25 * k0[k] + 0.75 * query[k].data, atol=1e-7)

    def test_tree_mismatch(self, rng):
        with pytest.raises(ValueError):
            pt.momentum_update({"a": Tensor(np.zeros(2))}, {"b": Tensor(np.zeros(2))}, 0.5)
        with pytest.raises(ValueError):
            pt.momentum_update({"a": Tensor(np.zeros(2))}, {"a": Tensor(np.zeros(3))}, 0.5)


class TestContrastive:
    def test_uniform_similarity(self):
        for b in (2, 5, 16):
            q = np.zeros((b, 4))
            q[:, 0] = 1.0
            with nx.default_dtype(np.float64):
                loss = pt.contrastive_loss(Tensor(q), Tensor(q), 0.2).item()
            assert loss == pytest.approx(math.log(b), abs=1e-6)

    def test_orthonormal_pair(self):
        e = np.eye(2)
        with nx.default_dtype(np.float64):
            loss = pt.contrastive_loss(Tensor(e), Tensor(e), 0.2).item()
        assert loss == pytest.approx(math.log1p(math.exp(-5)), abs=1e-9)
        assert loss == pytest.approx(0.00672, abs=1e-5)

    def test_two_loop_oracle(self, rng):
        q, k = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16)
        with nx.default_dtype(np.float64):
            loss = pt.contrastive_loss(Tensor(q), Tensor(k), 0.2).item()
        assert loss == pytest.approx(infonce_two_loop(q, k, 0.2), abs=1e-6)

    def test_key_detached(self, rng):
        q = Tensor(unit_rows(rng, 4, 8), requires_grad=True)
        k = Tensor(unit_rows(rng, 4, 8), requires_grad=True)
        nx.backward(pt.contrastive_loss(q, k, 0.2))
        assert q.grad is not None and k.grad is None

    def test_needs_negatives(self, rng):
        with pytest.raises(ValueError, match="negatives"):
            pt.contrastive_loss(Tensor(unit_rows(rng, 1, 4)), Tensor(unit_rows(rng, 1, 4)), 0.2)


class TestSegmentation:
    def test_half_is_ln2(self):
        with nx.default_dtype(np.float64):
            loss = pt.seg_loss(Tensor(np.full((4, 4), 0.5)), np.eye(4)).item()
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_prediction(self):
        y = np.eye(4)
        with nx.default_dtype(np.float64):
            assert pt.seg_loss(Tensor(y), y).item() < 1e-6

    def test_loop_oracle(self, rng):
        p, y = rng.uniform(0.01, 0.99, (4, 4)), (rng.random((4, 4)) > 0.5).astype(float)
        with nx.default_dtype(np.float64):
            loss = pt.seg_loss(Tensor(p), y).item()
        assert loss == pytest.approx(bce_loop(p, y), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            pt.seg_loss(Tensor(np.full((4, 4), 0.5)), np.zeros((4, 5)))

    def test_zero_decoder(self, rng):
        params = {"decoder.weight": Tensor(np.zeros((8, 16))), "decoder.bias": Tensor(np.zeros(16))}
        out = pt.decode_segmentation(Tensor(rng.random((2, 9, 8))), params, 4, (3, 3))
        assert out.shape == (2, 12, 12)
        assert np.all(out.data == 0.5)

    def test_view_dims_micro(self, rng):
        cfg = pt.RunConfig().vit
        q = pt.init_query_encoder(cfg, pt.HeadConfig(), rng)
        enc = vit.forward(pt.subtree(q, "backbone."), cfg, vit.patchify(rng.random((1, 64, 64, 3)), 8))
        assert pt.decode_segmentation(enc.patch_reprs, q, 8, enc.grid).shape == (1, 64, 64)

    def test_spatial_placement(self, rng):
        params = {"decoder.weight": Tensor(rng.standard_normal((8, 16))), "decoder.bias": Tensor(np.zeros(16))}
        reps = rng.random((1, 6, 8))
        base = pt.decode_segmentation(Tensor(reps), params, 4, (2, 3)).data[0]
        moved = reps.copy()
        moved[0, 4] += 1.0  # patch row 1, column 1
        diff = pt.decode_segmentation(Tensor(moved), params, 4, (2, 3)).data[0] != base
        assert diff[4:8, 4:8].all()
        diff[4:8, 4:8] = False
        assert not diff.any()

    def test_count_mismatch(self, rng):
        params = {"decoder.weight": Tensor(np.zeros((8, 16))), "decoder.bias": Tensor(np.zeros(16))}
        with pytest.raises(ValueError):
            pt.decode_segmentation(Tensor(rng.random((1, 5, 8))), params, 4, (2, 3))


class TestSchedules:
    def test_endpoints(self):
        assert pt.schedules(0, 100, 10, 1e-3) == (0.0, 0.99)
        lr, _ = pt.schedules(10, 100, 10, 1e-3)
        assert lr == pytest.approx(1e-3)
        assert pt.schedules(100, 100, 10, 1e-3) == (0.0, 1.0)
        assert pt.schedules(250, 100, 10, 1e-3) == (0.0, 1.0)

    def test_shapes(self):
        lrs, alphas = zip(*(pt.schedules(t, 100, 10, 1e-3) for t in range(101)))
        assert all(a <= b for a, b in zip(lrs[:10], lrs[1:11]))
        assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
        assert all(a <= b for a, b in zip(alphas, alphas[1:]))
        for t in (0, 17, 50, 93):
            expected = 1 - (1 - 0.99) * (math.cos(math.pi * t / 100) + 1) / 2
            assert alphas[t] == pytest.approx(expected, abs=1e-15)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            pt.schedules(-1, 10, 1, 1e-3)


class TestTrainStep:
    def test_key_is_closed_form_ema(self):
        cfg = tiny_config()
        state = pt.init_state(cfg, 4)
        batch = fixed_batch(cfg)
        for _ in range(3):
            before = {k: v.data.astype(np.float64) for k, v in state.key.items()}
            _, alpha = state.current_schedule()
            state, _ = pt.train_step(state, batch)
            for k, v in state.key.items():
                expected = alpha * before[k] + (1 - alpha) * state.query[k].data.astype(np.float64)
                np.testing.assert_allclose(v.data, expected, atol=1e-6)
                assert v.grad is None and not v.requires_grad

    def test_alpha_one_freezes_key(self):
        cfg = tiny_config(alpha_start=1.0, alpha_end=1.0)
        state = pt.init_state(cfg, 4)
        before = {k: v.data.copy() for k, v in state.key.items()}
        state, _ = pt.train_step(state, fixed_batch(cfg))
        state, _ = pt.train_step(state, fixed_batch(cfg, seed=1))
        for k, v in state.key.items():
            assert np.array_equal(v.data, before[k])

    def test_sequence_lengths_and_total(self):
        cfg = tiny_config()
        state = pt.init_state(cfg, 4)
        _, m = pt.train_step(state, fixed_batch(cfg))
        n = cfg.vit.num_patches
        assert m["query_len"] == n + 1
        assert m["keep"] == n - math.floor(25 * n / 100)
        total = np.float32(m["l_cl"]) * np.float32(1.0) + np.float32(m["l_seg"]) * np.float32(10.0)
        assert abs(m["loss"] - float(total)) <= 1e-7 * max(1.0, abs(m["loss"]))

    def test_plain_momentum_contrast_equivalence(self):
        # m = 0 and lambda_seg = 0: the loss is ordinary MoCo on the same views
        cfg = tiny_config(masking_ratio=0.0, lambda_seg=0.0)
        state = pt.init_state(cfg, 4)
        batch = fixed_batch(cfg)
        p = cfg.vit.patch_size

        def head(params, x, names):
            for prefix, layers in names:
                for i in range(1, layers + 1):
                    x = x @ params[f"{prefix}.fc{i}.weight"].data + params[f"{prefix}.fc{i}.bias"].data
                    if i < layers:
                        x = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
            return x / np.linalg.norm(x, axis=1, keepdims=True)

        k_enc = vit.forward(pt.subtree(state.key, "backbone."), cfg.vit, vit.patchify(batch.key, p))
        q_enc = vit.forward(state.backbone(), cfg.vit, vit.patchify(batch.query, p))
        k = head(state.key, k_enc.class_repr.data, [("proj", 3)])
        q = head(state.query, q_enc.class_repr.data, [("proj", 3), ("pred", 2)])
        _, m = pt.train_step(state, batch)
        assert m["l_cl"] == pytest.approx(infonce_two_loop(q, k, cfg.pretrain.tau), abs=1e-5)
        assert m["loss"] == m["l_cl"] and m["keep"] == cfg.vit.num_patches

    def test_nan_guard(self):
        cfg = tiny_config()
        state = pt.init_state(cfg, 4)
        state.query["decoder.bias"].data[:] = np.nan
        with pytest.raises(pt.NumericalError):
            pt.train_step(state, fixed_batch(cfg))

    def test_joint_loss_gradients(self):
        cfg = tiny_config()
        with nx.default_dtype(np.float64):
            state = pt.init_state(cfg, 4)
            batch = fixed_batch(cfg)
            errors = directional_check(lambda: pt.compute_losses(state, batch)[0], state.query,
                                          np.random.default_rng(0), h=1e-4)
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-3, (worst, errors[worst])


class TestLoop:
    def test_deterministic_stream(self):
        cfg = tiny_config()
        images, sals = tiny_data(cfg)
        _, a = pt.run_pretraining(cfg, images, sals, max_steps=5)
        _, b = pt.run_pretraining(cfg, images, sals, max_steps=5)
        assert [pt.format_metrics(m) for m in a] == [pt.format_metrics(m) for m in b]

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_config()
        images, sals = tiny_data(cfg)
        _, full = pt.run_pretraining(cfg, images, sals, max_steps=5)
        state, first = pt.run_pretraining(cfg, images, sals, max_steps=3)
        pt.save_checkpoint(state, tmp_path / "s.sstc")
        resumed = pt.load_checkpoint(tmp_path / "s.sstc")
        _, rest = pt.run_pretraining(resumed.config, images, sals, state=resumed, max_steps=2)
        assert [pt.format_metrics(m) for m in first + rest] == [pt.format_metrics(m) for m in full]

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = tiny_config()
        images, sals = tiny_data(cfg)
        state, _ = pt.run_pretraining(cfg, images, sals, max_steps=2)
        pt.save_checkpoint(state, tmp_path / "s.sstc")
        back = pt.load_checkpoint(tmp_path / "s.sstc")
        assert back.step == state.step == 2 and back.opt.step == state.opt.step
        assert back.config.to_dict() == state.config.to_dict()
        for k in state.query:
            assert np.array_equal(back.query[k].data, state.query[k].data)
            assert np.array_equal(back.opt.m[k], state.opt.m[k])
            assert np.array_equal(back.opt.v[k], state.opt.v[k])
        for k in state.key:
            assert np.array_equal(back.key[k].data, state.key[k].data)
        backbone, vcfg = pt.load_backbone(tmp_path / "s.sstc")
        assert vcfg == cfg.vit and set(backbone) == set(vit.param_shapes(cfg.vit))

    def test_truncated_checkpoint(self, tmp_path):
        cfg = tiny_config()
        state = pt.init_state(cfg, 2)
        path = tmp_path / "s.sstc"
        pt.save_checkpoint(state, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(nx.CorruptRecordError):
            pt.load_checkpoint(path)

    def test_metrics_file_and_checkpoints(self, tmp_path):
        cfg = tiny_config(checkpoint_every=1, epochs=2)
        images, sals = tiny_data(cfg)
        state, hist = pt.run_pretraining(cfg, images, sals, metrics_path=tmp_path / "m.jsonl",
                                         checkpoint_dir=tmp_path)
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == len(hist) == state.total_steps == 4
        assert sorted(p.name for p in tmp_path.glob("*.sstc")) == ["ckpt_epoch0001.sstc", "ckpt_epoch0002.sstc"]

    def test_single_sample_overfit(self):
        cfg = pt.RunConfig(seed=1)
        # long schedule: the learning rate stays near its base value over the 200 steps
        cfg.pretrain.epochs, cfg.pretrain.warmup_epochs = 1000, 10
        image = synth_image(np.random.default_rng(2), grade=2)
        one = pt.build_batch([image], [fine_grained_saliency(image)], [0], 0, cfg)
        # a duplicated sample gives a constant contrastive term, isolating the decoder objective
        batch = pt.BatchViews(*(np.concatenate([x, x]) for x in one))
        state = pt.init_state(cfg, 1)
        losses = []
        for _ in range(200):
            state, m = pt.train_step(state, batch)
            losses.append(m["l_seg"])
        assert min(losses) < 0.1 * losses[0]
