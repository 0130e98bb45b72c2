import struct

import numpy as np
import pytest

from occlusion_attn import model as M
from occlusion_attn import tensor as T
from occlusion_attn.model import (FaceModel, ModelConfig, Variant, load_checkpoint,
                                  read_checkpoint, save_checkpoint)
from occlusion_attn.training import OptimizerState, sgd_step

SMALL = dict(n_classes=4, widths=(8, 16), strides=(2, 1), embedding_dim=8, reduction=4)


def small(variant, seed=0, **kw):
    return FaceModel(ModelConfig(variant=variant, init_seed=seed, **{**SMALL, **kw}))


def batch(seed=0, n=6, size=12):
    r = np.random.default_rng(seed)
    images = r.uniform(size=(n, 3, size, size)).astype(np.float32)
    return images, r.integers(0, 4, n), np.arange(n) % 2


def grads(model):
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for k, p in model.named_parameters().items()}


class TestVariants:
    def test_heads_per_variant(self):
        for v in Variant:
            m = small(v)
            assert (m.mask_head is not None) == v.has_mask_head
            assert (m.adv_head is not None) == v.has_adv_head

    def test_row_names(self):
        assert Variant.MFSA_CAL.row_name(0.5) == "MFSA + CAL + MA=0.5"
        assert Variant.BASELINE_ADV.row_name(0.1) == "Baseline + Adv + MA=0.1"
        assert Variant.CBAM_CAL_ADV.row_name(0.1) == "CBAM + CAL + Adv + MA=0.1"
        assert Variant.BASELINE.row_name(0) == "Baseline"

    def test_needs_two_classes(self):
        with pytest.raises(ValueError, match="at least 2 classes"):
            ModelConfig(n_classes=1)

    def test_mask_and_adv_heads_share_no_parameters(self):
        m = small(Variant.CBAM_CAL_ADV)
        mask = {id(p) for p in m.mask_head.parameters()}
        adv = {id(p) for p in m.adv_head.parameters()}
        assert mask and adv and not mask & adv
        assert m.mask_head.weight.shape == m.adv_head.weight.shape


class TestForwardTrain:
    def test_baseline_has_no_auxiliary_losses(self):
        out = small(Variant.BASELINE).forward_train(*batch())
        assert out.loss_mask is None and out.loss_adv is None
        assert out.loss_total.item() == out.loss_arc.item()

    def test_zero_mask_weight_gives_arcface_only_gradient(self):
        images, labels, flags = batch()
        a = small(Variant.MFSA_CAL, w_mask=0.0)
        T.backward(a.forward_train(images, labels, flags).loss_total)
        b = small(Variant.MFSA_CAL, w_mask=0.0)
        T.backward(b.forward_train(images, labels, flags).loss_arc)
        ga, gb = grads(a), grads(b)
        for k in ga:
            np.testing.assert_array_equal(ga[k], gb[k], err_msg=k)

    @pytest.mark.parametrize("variant", list(Variant))
    def test_loss_finite_non_negative_100_seeds(self, variant):
        m = small(variant, n_classes=3, widths=(4, 8), embedding_dim=4, reduction=2)
        for seed in range(100):
            r = np.random.default_rng(seed)
            loss = m.forward_train(r.uniform(size=(4, 3, 8, 8)), r.integers(0, 3, 4),
                                   r.integers(0, 2, 4)).loss_total.item()
            assert np.isfinite(loss) and loss >= 0

    @pytest.mark.parametrize("variant", [Variant.CBAM_CAL, Variant.MFSA_CAL])
    def test_branch_gradient_routing(self, variant):
        images, labels, flags = batch()
        m = small(variant)
        T.backward(m.forward_train(images, labels, flags).loss_arc)
        g = grads(m)
        assert all(not g[k].any() for k in g if k.startswith("mask_head"))
        m.zero_grad()
        T.backward(m.forward_train(images, labels, flags).loss_mask)
        g = grads(m)
        assert all(not g[k].any() for k in g if k.startswith(("embed", "arcface")))
        assert any(g[k].any() for k in g if k.startswith("mask_head"))
        shared = "mfsa" if variant is Variant.MFSA_CAL else "cbam.spatial"
        assert any(g[k].any() for k in g if k.startswith(shared))

    @pytest.mark.parametrize("variant", [Variant.BASELINE_ADV, Variant.CBAM_CAL_ADV])
    def test_gradient_reversal_sign(self, variant, monkeypatch):
        images, labels, flags = batch()
        m = small(variant)
        T.backward(m.forward_train(images, labels, flags).loss_adv)
        reversed_ = grads(m)
        m.zero_grad()
        monkeypatch.setattr(M.T, "grad_reverse", lambda x, lam=1.0: x)
        T.backward(m.forward_train(images, labels, flags).loss_adv)
        control = grads(m)
        for k in control:
            if k.startswith("adv_head"):
                np.testing.assert_allclose(reversed_[k], control[k], rtol=1e-5)
            elif control[k].any():
                np.testing.assert_allclose(reversed_[k], -control[k], rtol=1e-4, atol=1e-7)
        assert control["backbone.0.conv.weight"].any()

    @pytest.mark.parametrize("variant", list(Variant))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_five_step_smoke_strictly_decreasing(self, variant, seed):
        images, labels, flags = batch(seed, n=8)
        m = small(variant, seed)
        params = m.parameters()
        state = OptimizerState.create(params)
        losses = []
        for _ in range(5):
            out = m.forward_train(images, labels, flags)
            losses.append(out.loss_total.item())
            m.zero_grad()
            T.backward(out.loss_total)
            sgd_step(params, state, 1e-4, 0.9, 5e-4)
        assert all(b < a for a, b in zip(losses, losses[1:])), losses


class TestEmbed:
    def test_deterministic_and_shaped(self):
        m = small(Variant.MFSA_CAL)
        images, _, _ = batch()
        a = m.embed(np.concatenate([images[:2], images[:2]]))
        assert a.shape == (4, 8)
        assert a[0].tobytes() == a[2].tobytes()

    def test_flip_changes_embedding(self):
        m = small(Variant.CBAM_CAL)
        images, _, _ = batch()
        e = m.embed(images[:1])
        f = m.embed(images[:1, :, :, ::-1].copy())
        assert not np.allclose(e, f)

    def test_restores_training_mode(self):
        m = small(Variant.BASELINE)
        m.embed(batch()[0])
        assert m.training

    def test_attention_maps_need_attention(self):
        with pytest.raises(ValueError):
            small(Variant.BASELINE).attention_maps(batch()[0])
        maps = small(Variant.MFSA_CAL).attention_maps(batch()[0])
        assert set(maps) == {"a_um", "a_m", "a_bg"} and maps["a_um"].shape == (6, 6, 6)


class TestCheckpoint:
    def test_round_trip_and_header(self, tmp_path):
        m = small(Variant.MFSA_CAL)
        m.forward_train(*batch())  # moves BN running stats off their init
        path = tmp_path / "ck.bin"
        save_checkpoint(m, path)
        raw = path.read_bytes()
        assert raw[:4] == b"MFSA"
        version, count = struct.unpack_from("<II", raw, 4)
        assert version == 1 and count == len(M.state_arrays(m))
        other = small(Variant.MFSA_CAL, seed=9)
        load_checkpoint(other, path)
        for k, v in M.state_arrays(m).items():
            np.testing.assert_array_equal(M.state_arrays(other)[k], v)
        np.testing.assert_array_equal(other.embed(batch()[0]), m.embed(batch()[0]))

    def test_stores_raw_proxy(self, tmp_path):
        m = small(Variant.MFSA_CAL)
        save_checkpoint(m, tmp_path / "ck.bin")
        arrays = read_checkpoint(tmp_path / "ck.bin")
        np.testing.assert_array_equal(arrays["mfsa.f.0.weight"], m.mfsa.layer1.weight.data)

    def test_mismatch_and_corruption(self, tmp_path):
        save_checkpoint(small(Variant.BASELINE), tmp_path / "a.bin")
        with pytest.raises(ValueError, match="mismatch"):
            load_checkpoint(small(Variant.MFSA_CAL), tmp_path / "a.bin")
        (tmp_path / "b.bin").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            read_checkpoint(tmp_path / "b.bin")
