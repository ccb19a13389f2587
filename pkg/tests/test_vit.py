import numpy as np
import pytest

from gradcheck import sampled_check
from selfvitmil import tensor as T
from selfvitmil import vit
from selfvitmil.tensor import DimensionError, ParameterError, Tensor
from selfvitmil.vit import ViTConfig, ViTModel

SMALL = ViTConfig(image_size=32, patch_size=16, embed_dim=16, num_blocks=2, num_heads=2, mlp_hidden_dim=32)


def _images(cfg, n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, cfg.channels, cfg.image_size, cfg.image_size))


class TestConfig:
    def test_patch_count(self):
        assert ViTConfig.vit_b16().num_patches == 196
        assert ViTConfig.desk().num_patches == 16

    def test_indivisible_image(self):
        with pytest.raises(ParameterError):
            ViTConfig(image_size=30, patch_size=8)

    def test_indivisible_heads(self):
        with pytest.raises(ParameterError):
            ViTConfig(embed_dim=15, num_heads=2)

    def test_init_statistics(self):
        m = ViTModel.init(ViTConfig.desk(), seed=0)
        pos = m.params["pos_embed"].data
        assert abs(pos.std() - 0.02) < 0.005 and np.abs(pos).max() <= 0.04


class TestTokenize:
    def test_paper_shape(self):
        cfg = ViTConfig(image_size=224, patch_size=16, embed_dim=8, num_blocks=1, num_heads=2, mlp_hidden_dim=8)
        tokens = vit.tokenize(_images(cfg, 1)[0], ViTModel.init(cfg))
        assert tokens.shape == (197, 8)

    def test_small_shape(self):
        tokens = vit.tokenize(_images(SMALL, 1)[0], ViTModel.init(SMALL))
        assert tokens.shape == (5, 16)

    def test_batch_shape(self):
        assert vit.tokenize(_images(SMALL, 3), ViTModel.init(SMALL)).shape == (3, 5, 16)

    def test_wrong_size(self):
        with pytest.raises(DimensionError):
            vit.tokenize(np.zeros((3, 16, 16)), ViTModel.init(SMALL))

    def test_patch_permutation_without_positions(self):
        m = ViTModel.init(SMALL, seed=1)
        m.params["pos_embed"].data[:] = 0.0
        img = _images(SMALL, 1, seed=2)[0]
        swapped = img.copy()
        swapped[:, :16, :16], swapped[:, 16:, 16:] = img[:, 16:, 16:], img[:, :16, :16]
        a = vit.tokenize(img, m).data[1:]
        b = vit.tokenize(swapped, m).data[1:]
        assert not np.allclose(a, b)
        np.testing.assert_allclose(b, a[[3, 1, 2, 0]], atol=1e-12)

    def test_pseudo_inverse_round_trip(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=64, num_blocks=1, num_heads=2, mlp_hidden_dim=8)
        m = ViTModel.init(cfg, seed=3)
        m.params["pos_embed"].data[:] = 0.0
        m.params["cls_token"].data[:] = 0.0
        img = _images(cfg, 1, seed=4)[0]
        tokens = vit.tokenize(img, m).data[1:]
        w = m.params["proj.w"].data
        recon = (tokens - m.params["proj.b"].data) @ np.linalg.pinv(w)
        np.testing.assert_allclose(recon, vit.patchify(img[None], 4)[0], atol=1e-10)


def _zero_block(d, h):
    names = [n[len("blocks.0."):] for n in vit.block_names(0)]
    w = {n: Tensor(np.zeros((d, d)) if n.startswith("attn.w") else np.zeros(d)) for n in names}
    w["ln1.gamma"] = w["ln2.gamma"] = Tensor(np.ones(d))
    w["mlp.w1"], w["mlp.b1"] = Tensor(np.zeros((d, h))), Tensor(np.zeros(h))
    w["mlp.w2"] = Tensor(np.zeros((h, d)))
    return w


class TestEncoderBlock:
    def test_zero_weights_are_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 16))
        out = vit.encoder_block(Tensor(x), _zero_block(16, 32), num_heads=2)
        np.testing.assert_array_equal(out.data, x)

    def test_attention_rows_normalised(self):
        m = ViTModel.init(SMALL, seed=1)
        tokens = vit.tokenize(_images(SMALL, 2), m)
        _, att = vit.encoder_block(tokens, m.block(0), 2, return_attention=True)
        np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_single_token_attends_to_itself(self):
        m = ViTModel.init(SMALL, seed=2)
        w = m.block(0)
        x = np.random.default_rng(3).normal(size=(1, 1, 16))
        out = vit.attention(Tensor(x), w, num_heads=2).data
        v = x @ w["attn.w_v"].data + w["attn.b_v"].data
        np.testing.assert_allclose(out, v @ w["attn.w_o"].data + w["attn.b_o"].data, atol=1e-12)


class TestForward:
    def test_one_block_is_one_encoder_application(self):
        cfg = ViTConfig(image_size=32, patch_size=16, embed_dim=16, num_blocks=1, num_heads=2, mlp_hidden_dim=32)
        m = ViTModel.init(cfg, seed=0)
        img = _images(cfg, 1)[0]
        x = vit.encoder_block(vit.tokenize(img, m), m.block(0), 2)
        expected = T.layer_norm(x[0], m.params["norm.gamma"], m.params["norm.beta"]).data
        np.testing.assert_array_equal(vit.forward(img, m).data[0], expected)

    def test_shapes(self):
        m = ViTModel.init(SMALL)
        assert vit.forward(_images(SMALL, 1)[0], m).shape == (2, 16)
        assert vit.forward(_images(SMALL, 3), m).shape == (3, 2, 16)

    def test_deterministic(self):
        a = vit.forward(_images(SMALL, 2), ViTModel.init(SMALL, seed=5)).data
        b = vit.forward(_images(SMALL, 2), ViTModel.init(SMALL, seed=5)).data
        assert a.tobytes() == b.tobytes()

    def test_finite_on_random_images(self):
        m = ViTModel.init(ViTConfig.desk(), seed=0)
        with T.no_grad():
            out = vit.forward(_images(ViTConfig.desk(), 1000, seed=6), m).data
        assert np.isfinite(out).all()

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for trial in range(3):
            m = ViTModel.init(SMALL, seed=trial)
            imgs = _images(SMALL, 2, seed=10 + trial)
            r = rng.normal(size=(2, 2, 16))
            err = sampled_check(lambda: (vit.forward(imgs, m) * Tensor(r)).sum(), m.params, rng)
            assert err < 1e-4


class TestFeatures:
    def test_width(self):
        m = ViTModel.init(ViTConfig.desk())
        assert vit.extract_features(_images(ViTConfig.desk(), 1)[0], m).shape == (80,)

    def test_k_last_one_repeats_last_row(self):
        m = ViTModel.init(SMALL, seed=1)
        img = _images(SMALL, 1)[0]
        f = vit.extract_features(img, m, k_last=1)
        last = vit.forward(img, m).data[-1]
        np.testing.assert_array_equal(f, np.concatenate([last, last]))

    def test_tail_is_mean(self):
        m = ViTModel.init(ViTConfig.desk(), seed=2)
        f = vit.extract_features(_images(ViTConfig.desk(), 4), m)
        segments = f[:, :64].reshape(4, 4, 16)
        np.testing.assert_allclose(f[:, 64:], segments.mean(axis=1), atol=1e-12)

    def test_k_last_too_large(self):
        with pytest.raises(ParameterError):
            vit.extract_features(_images(SMALL, 1)[0], ViTModel.init(SMALL), k_last=3)

    def test_embed_tiles_order_and_batching(self):
        m = ViTModel.init(ViTConfig.desk(), seed=3)
        tiles = list(np.random.default_rng(4).integers(0, 256, size=(5, 32, 32, 3), dtype=np.uint8))
        full = vit.embed_tiles(tiles, m, batch_size=256)
        chunked = vit.embed_tiles(tiles, m, batch_size=2)
        np.testing.assert_allclose(full, chunked, atol=1e-12)
        np.testing.assert_allclose(full[2], vit.extract_features(vit.prepare_images(tiles[2]), m)[0], atol=1e-12)

    def test_paper_preset_features(self):
        cfg = ViTConfig.vit_b16()
        m = ViTModel.init(cfg, seed=0)
        assert vit.extract_features(_images(cfg, 1)[0], m).shape == (3840,)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = ViTModel.init(SMALL, seed=7)
        m.save(tmp_path / "m.ckpt", {"note": "x"})
        back, header = ViTModel.load(tmp_path / "m.ckpt")
        assert back.config == SMALL and header["note"] == "x"
        for k, v in m.params.items():
            assert back.params[k].data.tobytes() == v.data.tobytes()
