import numpy as np
import pytest
import torch

from adaptkit import EncoderConfig, SyntheticBackbone, available_backends, create_backend
from adaptkit.errors import ArgumentError, BackendError, ConfigurationError

from conftest import finite_diff_grad, random_image


class TestEncoderConfig:
    def test_grid_arithmetic(self):
        cfg = EncoderConfig(patch_size=14, embed_dim=16, input_resolution=518)
        assert cfg.grid_size == 37
        assert cfg.tokens_per_image == 1369

    def test_resolution_must_divide(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(patch_size=14, input_resolution=520)

    def test_layers_strictly_increasing(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(feature_layers=(6, 6, 12))
        with pytest.raises(ConfigurationError):
            EncoderConfig(feature_layers=())

    def test_embed_dim_positive(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(embed_dim=0)


class TestEncodeImage:
    def test_shape_law_518(self, rng):
        cfg = EncoderConfig(patch_size=14, embed_dim=16, input_resolution=518, text_width=16)
        backbone = SyntheticBackbone(cfg, seed=0)
        feats = backbone.encode_image(random_image(rng, 518))
        assert feats.grid_shape == (37, 37)
        for tokens in feats.per_layer_patch_tokens:
            assert tokens.shape == (1369, 16)
        assert feats.global_token.shape == (16,)

    def test_deterministic_bitwise(self, tiny_backbone, rng):
        img = random_image(rng, 56)
        a = tiny_backbone.encode_image(img)
        b = tiny_backbone.encode_image(img)
        for ta, tb in zip(a.per_layer_patch_tokens, b.per_layer_patch_tokens):
            assert torch.equal(ta, tb)
        assert torch.equal(a.global_token, b.global_token)

    def test_one_pixel_changes_features(self, tiny_backbone, rng):
        img = random_image(rng, 56)
        other = img.copy()
        other[3, 3, 0] = min(1.0, other[3, 3, 0] + 0.25)
        a = tiny_backbone.encode_image(img)
        b = tiny_backbone.encode_image(other)
        assert any(
            not torch.equal(ta, tb)
            for ta, tb in zip(a.per_layer_patch_tokens, b.per_layer_patch_tokens)
        )

    def test_identical_patches_identical_tokens(self, tiny_config, rng):
        # no positional mixing: tokens depend on patch content only
        backbone = SyntheticBackbone(tiny_config, seed=0, positional_mix=0.0)
        patch = rng.rand(14, 14, 3).astype(np.float32)
        img = np.tile(patch, (4, 4, 1))
        feats = backbone.encode_image(img)
        for tokens in feats.per_layer_patch_tokens:
            assert torch.equal(tokens, tokens[0].expand_as(tokens))

    def test_positional_mix_breaks_position_invariance(self, tiny_config, rng):
        backbone = SyntheticBackbone(tiny_config, seed=0, positional_mix=0.5)
        patch = rng.rand(14, 14, 3).astype(np.float32)
        img = np.tile(patch, (4, 4, 1))
        tokens = backbone.encode_image(img).per_layer_patch_tokens[0]
        assert not torch.equal(tokens[0], tokens[1])

    def test_tokens_unit_norm(self, tiny_backbone, rng):
        feats = tiny_backbone.encode_image(random_image(rng, 56))
        for tokens in feats.per_layer_patch_tokens:
            norms = tokens.norm(dim=1)
            assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)

    def test_wrong_resolution_rejected(self, tiny_backbone, rng):
        with pytest.raises(ConfigurationError):
            tiny_backbone.encode_image(random_image(rng, 42))

    def test_mean_pool_recovered_at_zero_salience(self, tiny_config, rng):
        backbone = SyntheticBackbone(tiny_config, seed=0, global_salience=0.0)
        feats = backbone.encode_image(random_image(rng, 56))
        mean = feats.per_layer_patch_tokens[-1].double().mean(dim=0)
        mean = (mean / mean.norm()).float()
        assert torch.allclose(feats.global_token, mean, atol=1e-6)


class TestStaticText:
    def test_singleton_mean_is_template_embedding(self, tiny_backbone):
        one = tiny_backbone.encode_static_text(["plain sample"], ["broken sample"])
        direct = tiny_backbone._encode_text("plain sample")
        assert torch.allclose(one.normal, direct / direct.norm(), atol=1e-6)

    def test_duplicate_templates_idempotent(self, tiny_backbone):
        a = tiny_backbone.encode_static_text(["a"], ["b"])
        b = tiny_backbone.encode_static_text(["a", "a"], ["b", "b"])
        assert torch.allclose(a.normal, b.normal, atol=1e-6)
        assert torch.allclose(a.abnormal, b.abnormal, atol=1e-6)

    def test_default_templates_unit_norm(self, tiny_backbone):
        emb = tiny_backbone.encode_static_text()
        assert abs(float(emb.normal.norm()) - 1.0) < 1e-6
        assert abs(float(emb.abnormal.norm()) - 1.0) < 1e-6

    def test_empty_templates_rejected(self, tiny_backbone):
        with pytest.raises(ArgumentError):
            tiny_backbone.encode_static_text([], ["x"])


class TestPromptTokens:
    def test_r12_gives_single_vector(self, tiny_backbone, tiny_config):
        tokens = torch.zeros(12, tiny_config.text_width)
        emb = tiny_backbone.encode_prompt_tokens(tokens)
        assert emb.shape == (tiny_config.embed_dim,)

    def test_capacity_enforced(self, tiny_backbone, tiny_config):
        tokens = torch.zeros(tiny_config.prompt_length_capacity + 1, tiny_config.text_width)
        with pytest.raises(ArgumentError):
            tiny_backbone.encode_prompt_tokens(tokens)

    def test_zero_matrix_deterministic(self, tiny_backbone, tiny_config):
        tokens = torch.zeros(5, tiny_config.text_width)
        a = tiny_backbone.encode_prompt_tokens(tokens)
        b = tiny_backbone.encode_prompt_tokens(tokens)
        assert torch.equal(a, b)

    def test_gradient_matches_finite_differences(self, tiny_backbone, tiny_config):
        torch.manual_seed(0)
        tokens = torch.randn(4, tiny_config.text_width, dtype=torch.float64, requires_grad=True)
        target = torch.randn(tiny_config.embed_dim, dtype=torch.float64)

        def loss_fn():
            return (tiny_backbone.encode_prompt_tokens(tokens) * target).sum()

        loss = loss_fn()
        loss.backward()
        numeric = finite_diff_grad(loss_fn, tokens)
        assert torch.allclose(tokens.grad, numeric, rtol=1e-4, atol=1e-7)


class TestRegistry:
    def test_synthetic_registered(self):
        assert "synthetic" in available_backends()
        assert "clip-vit-l-14-336" in available_backends()

    def test_unknown_backend(self):
        with pytest.raises(BackendError):
            create_backend("no-such-backend")

    def test_clip_backend_requires_weights(self, monkeypatch):
        monkeypatch.delenv("ADAPTKIT_BACKBONE_PATH", raising=False)
        with pytest.raises(BackendError):
            create_backend("clip-vit-l-14-336")

    def test_clip_backend_rejects_missing_dir(self, monkeypatch):
        monkeypatch.setenv("ADAPTKIT_BACKBONE_PATH", "/nonexistent/weights")
        with pytest.raises(BackendError):
            create_backend("clip-vit-l-14-336")

    def test_describe_restore_roundtrip(self, tiny_config):
        from adaptkit import restore_backend

        backbone = SyntheticBackbone(tiny_config, seed=7, positional_mix=0.25)
        clone = restore_backend("synthetic", backbone.describe())
        img = np.random.RandomState(3).rand(56, 56, 3).astype(np.float32)
        a = backbone.encode_image(img)
        b = clone.encode_image(img)
        for ta, tb in zip(a.per_layer_patch_tokens, b.per_layer_patch_tokens):
            assert torch.equal(ta, tb)
        assert torch.equal(a.global_token, b.global_token)
