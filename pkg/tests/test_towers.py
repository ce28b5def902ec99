"""Dual-tower model: masking semantics, shared encoder, checkpoint round-trip."""

import numpy as np
import pytest

from imsearch.tensor import grad_check
from imsearch.towers import (ItemInput, ModelConfig, TitleTokens, TwoTowerModel,
                             empty_image, load_checkpoint, pad_or_truncate,
                             save_checkpoint, tokenize)

CFG = ModelConfig(token_dim=16, n_heads=2, ffn_dim=32, output_dim=16,
                  vocab_size=64, max_title_len=8, k_images=4)


@pytest.fixture(scope="module")
def model():
    return TwoTowerModel.init(CFG, seed=3)


def random_image(rng, size=16):
    return rng.uniform(0.0, 1.0, size=(size, size))


class TestTokenizer:
    def test_deterministic_and_stable(self):
        a = tokenize("Sepatu Pria Casual 42", 1000)
        b = tokenize("Sepatu Pria Casual 42", 1000)
        assert a.tolist() == b.tolist()
        assert len(a) == 4

    def test_punctuation_only_is_empty(self):
        assert len(tokenize("?! .", 1000)) == 0
        assert len(tokenize("!!!", 1000)) == 0

    def test_case_insensitive(self):
        assert tokenize("TAS Kulit", 100).tolist() == tokenize("tas kulit", 100).tolist()


class TestPadOrTruncate:
    def test_pads_with_empty_images(self):
        rng = np.random.default_rng(0)
        i1, i2 = random_image(rng), random_image(rng)
        pixels, valid = pad_or_truncate([i1, i2], 4)
        assert pixels.shape == (4, 16, 16)
        assert valid.tolist() == [True, True, False, False]
        np.testing.assert_array_equal(pixels[0], i1)
        np.testing.assert_array_equal(pixels[2], empty_image())
        np.testing.assert_array_equal(pixels[3], empty_image())

    def test_truncates_to_first_k(self):
        rng = np.random.default_rng(1)
        imgs = [random_image(rng) for _ in range(6)]
        pixels, valid = pad_or_truncate(imgs, 4)
        assert valid.all()
        for i in range(4):
            np.testing.assert_array_equal(pixels[i], imgs[i])

    def test_exact_k_unchanged(self):
        rng = np.random.default_rng(2)
        imgs = [random_image(rng) for _ in range(4)]
        pixels, valid = pad_or_truncate(imgs, 4)
        assert valid.all()
        np.testing.assert_array_equal(pixels, np.stack(imgs))


class TestImageTower:
    def test_identical_images_identical_embeddings(self, model):
        img = random_image(np.random.default_rng(3))
        _, e1 = model.encode_image(img)
        _, e2 = model.encode_image(img.copy())
        np.testing.assert_array_equal(e1, e2)

    def test_empty_image_is_finite(self, model):
        tokens, emb = model.encode_image(empty_image())
        assert np.isfinite(tokens).all()
        assert np.isfinite(emb).all()

    def test_unit_norm(self, model):
        rng = np.random.default_rng(4)
        for _ in range(5):
            _, emb = model.encode_image(random_image(rng))
            assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-6)

    def test_wrong_shape_rejected(self, model):
        with pytest.raises(ValueError):
            model.encode_image(np.zeros((8, 8)))

    def test_query_equals_pooled_image_path(self, model):
        img = random_image(np.random.default_rng(5))
        _, pooled = model.encode_image(img)
        np.testing.assert_array_equal(model.query_embedding(img), pooled)

    def test_local_smoothness(self, model):
        img = random_image(np.random.default_rng(6))
        base = model.query_embedding(img)
        bumped = img.copy()
        bumped[3, 7] += 1e-6
        moved = model.query_embedding(bumped)
        assert np.linalg.norm(moved - base) < 1e-3


class TestTitleTower:
    def test_deterministic(self, model):
        t = TitleTokens.from_text("sepatu lari ringan", CFG)
        _, c1 = model.encode_title(t)
        _, c2 = model.encode_title(t)
        np.testing.assert_array_equal(c1, c2)

    def test_empty_title_uses_cls_path(self, model):
        seq, cls = model.encode_title(TitleTokens.empty(CFG))
        assert np.isfinite(seq).all()
        assert np.isfinite(cls).all()

    def test_position_sensitivity(self, model):
        a = TitleTokens.from_text("merah tas kulit", CFG)
        b = TitleTokens.from_text("kulit tas merah", CFG)
        _, ca = model.encode_title(a)
        _, cb = model.encode_title(b)
        assert np.abs(ca - cb).max() > 1e-8

    def test_out_of_vocab_rejected(self, model):
        bad = TitleTokens(np.array([999] + [0] * 7), np.array([True] + [False] * 7))
        with pytest.raises(ValueError):
            model.encode_title(bad)


class TestFusion:
    def _item(self, rng, n_images, title="tas kulit asli"):
        return ItemInput.build(title, [random_image(rng) for _ in range(n_images)],
                               CFG)

    def test_all_empty_images_equal_image_default_path(self, model):
        rng = np.random.default_rng(7)
        item = self._item(rng, 0)
        generic = model.item_embedding(item)
        via_default = model.fuse_merge_attention(item.title, item.images,
                                                 item.image_valid,
                                                 image_default=True)
        np.testing.assert_allclose(generic, via_default, atol=1e-12)

    def test_padded_slot_content_cannot_leak(self, model):
        rng = np.random.default_rng(8)
        item = self._item(rng, 2)
        base = model.item_embedding(item)
        mangled = item.images.copy()
        mangled[2] = random_image(rng)
        mangled[3] = 7.5
        out = model.fuse_merge_attention(item.title, mangled, item.image_valid)
        assert np.abs(out - base).max() < 1e-6

    def test_single_image_matches_padded_path(self, model):
        rng = np.random.default_rng(9)
        img = random_image(rng)
        title = TitleTokens.from_text("botol minum", CFG)
        padded, valid = pad_or_truncate([img], 4)
        via_padding = model.fuse_merge_attention(title, padded, valid)
        narrow, narrow_valid = pad_or_truncate([img], 1)
        via_k1 = model.fuse_merge_attention(title, narrow, narrow_valid)
        np.testing.assert_allclose(via_padding, via_k1, atol=1e-12)

    def test_item_embedding_contract(self, model):
        rng = np.random.default_rng(10)
        item = self._item(rng, 3)
        emb = model.item_embedding(item)
        assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_array_equal(emb, model.item_embedding(item))

    def test_title_only_item_is_finite(self, model):
        item = self._item(np.random.default_rng(11), 0)
        emb = model.item_embedding(item)
        assert np.isfinite(emb).all()
        assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-6)

    def test_image_order_sensitivity_is_recorded(self, model):
        # slot offsets make the fusion order-sensitive by design
        rng = np.random.default_rng(12)
        i1, i2 = random_image(rng), random_image(rng)
        title = TitleTokens.from_text("gelas kaca", CFG)
        a_pix, a_valid = pad_or_truncate([i1, i2], 4)
        b_pix, b_valid = pad_or_truncate([i2, i1], 4)
        a = model.fuse_merge_attention(title, a_pix, a_valid)
        b = model.fuse_merge_attention(title, b_pix, b_valid)
        assert np.abs(a - b).max() > 1e-8

    def test_title_default_masks_tokens_but_keeps_readout(self, model):
        rng = np.random.default_rng(13)
        item = self._item(rng, 2, title="celana panjang")
        blanked = model.fuse_merge_attention(item.title, item.images,
                                             item.image_valid, title_default=True)
        other = self._item(rng, 0, title="baju renang anak")
        blanked_other = model.fuse_merge_attention(other.title, item.images,
                                                   item.image_valid,
                                                   title_default=True)
        np.testing.assert_allclose(blanked, blanked_other, atol=1e-12)


class TestSharedEncoder:
    def test_single_weight_storage(self, model):
        query_side = model.image_encoder_params()
        item_side = model.image_encoder_params()
        assert query_side.keys() == item_side.keys()
        for key in query_side:
            assert query_side[key] is item_side[key]
            assert query_side[key] is model.params[key]


class TestCheckpoint:
    def test_bit_exact_round_trip(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(model.with_stage(1).with_stage(2), path)
        loaded = load_checkpoint(path)
        assert loaded.cfg == model.cfg
        assert loaded.trained_stages == (1, 2)
        for name, tensor in model.params.items():
            np.testing.assert_array_equal(loaded.params[name].data, tensor.data)
        second = tmp_path / "model2.ckpt"
        save_checkpoint(loaded, second)
        assert path.read_bytes() == second.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestGradientFlow:
    def test_fusion_params_receive_gradient(self, model):
        rng = np.random.default_rng(14)
        item = ItemInput.build("jam tangan", [random_image(rng)], CFG)

        weights = rng.standard_normal((1, CFG.output_dim))

        def f(w):
            out = model.fuse_t(item.title.ids[None], item.title.valid[None],
                               item.images[None], item.image_valid[None])
            return (out * weights).sum()

        err = grad_check(f, model.params["proj_fusion.w"], eps=1e-5,
                         max_coords=6, rng=rng)
        assert err < 1e-6
