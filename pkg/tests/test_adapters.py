import math

import numpy as np
import pytest
import torch

from adaptkit import ClassEmbeddings, TextualAdapter, VisualAdapter, score_image, score_pixels
from adaptkit.backbone import EmbeddingSource
from adaptkit.errors import ArgumentError, ConfigurationError

from conftest import finite_diff_grad


def two_class_softmax_oracle(tokens, w_a, w_n, tau):
    """Scalar-loop brute force of the two-class cosine softmax."""
    out = []
    for row in tokens:
        na = math.sqrt(sum(x * x for x in w_a))
        nn_ = math.sqrt(sum(x * x for x in w_n))
        nr = math.sqrt(sum(x * x for x in row))
        sa = sum(a * r for a, r in zip(w_a, row)) / (na * nr)
        sn = sum(b * r for b, r in zip(w_n, row)) / (nn_ * nr)
        ea, en = math.exp(sa / tau), math.exp(sn / tau)
        out.append(ea / (ea + en))
    return out


def make_embeddings(d, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return ClassEmbeddings(
        normal=torch.randn(d, generator=g, dtype=dtype),
        abnormal=torch.randn(d, generator=g, dtype=dtype),
    )


class TestVisualAdapter:
    def test_zero_init_is_identity(self):
        adapter = VisualAdapter(16)
        tokens = torch.randn(9, 16)
        glob = torch.randn(16)
        assert torch.equal(adapter.adapt_tokens(tokens), tokens)
        assert torch.equal(adapter.adapt_global(glob), glob)

    def test_hidden_width_is_quarter(self):
        adapter = VisualAdapter(16)
        assert adapter.local_mlp[0].out_features == 4
        assert adapter.global_mlp[0].out_features == 4

    def test_pure_function(self):
        adapter = VisualAdapter(8)
        with torch.no_grad():
            adapter.local_mlp[2].weight.add_(0.3)
        tokens = torch.randn(5, 8)
        assert torch.equal(adapter.adapt_tokens(tokens), adapter.adapt_tokens(tokens))

    def test_dimension_mismatch(self):
        adapter = VisualAdapter(8)
        with pytest.raises(ConfigurationError):
            adapter.adapt_tokens(torch.randn(5, 9))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        adapter = VisualAdapter(8).double()
        with torch.no_grad():  # leave the zero init so gradients are non-trivial
            for p in adapter.parameters():
                p.add_(0.1 * torch.randn_like(p))
        tokens = torch.randn(6, 8, dtype=torch.float64)

        def loss_fn():
            return (adapter.adapt_tokens(tokens) ** 2).sum()

        loss = loss_fn()
        loss.backward()
        for param in adapter.local_mlp.parameters():
            numeric = finite_diff_grad(loss_fn, param)
            assert torch.allclose(param.grad, numeric, rtol=1e-4, atol=1e-7)


class TestTextualAdapter:
    def test_equal_prompts_equal_embeddings(self, tiny_backbone, tiny_config):
        adapter = TextualAdapter(tiny_config.text_width, prompt_length=6)
        with torch.no_grad():
            adapter.abnormal_prompt_tokens.copy_(adapter.normal_prompt_tokens)
        emb = adapter.embeddings(tiny_backbone)
        assert torch.equal(emb.normal, emb.abnormal)
        assert emb.source == EmbeddingSource.LEARNED_PROMPTS

    def test_default_length_gives_vectors(self, tiny_backbone, tiny_config):
        adapter = TextualAdapter(tiny_config.text_width)  # r = 12
        assert adapter.normal_prompt_tokens.shape == (12, tiny_config.text_width)
        emb = adapter.embeddings(tiny_backbone)
        assert emb.normal.shape == (tiny_config.embed_dim,)
        assert emb.abnormal.shape == (tiny_config.embed_dim,)

    def test_invalid_length(self):
        with pytest.raises(ArgumentError):
            TextualAdapter(16, prompt_length=0)

    def test_gradient_through_encoder(self, tiny_backbone, tiny_config):
        torch.manual_seed(2)
        adapter = TextualAdapter(tiny_config.text_width, prompt_length=3, dtype=torch.float64)
        target = torch.randn(tiny_config.embed_dim, dtype=torch.float64)

        def loss_fn():
            return (adapter.embeddings(tiny_backbone).abnormal * target).sum()

        loss_fn().backward()
        numeric = finite_diff_grad(loss_fn, adapter.abnormal_prompt_tokens)
        assert torch.allclose(adapter.abnormal_prompt_tokens.grad, numeric, rtol=1e-4, atol=1e-7)


class TestScorePixels:
    def test_equal_similarity_gives_half(self):
        emb = ClassEmbeddings(normal=torch.tensor([1.0, 0.0]), abnormal=torch.tensor([0.0, 1.0]))
        tokens = torch.tensor([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5], [3.0, 3.0]])
        grid = score_pixels(tokens, emb, temperature=1.0)
        assert torch.allclose(grid, torch.full((2, 2), 0.5))

    def test_token_scale_invariance(self, rng):
        emb = make_embeddings(6)
        tokens = torch.tensor(rng.randn(4, 6))
        scaled = tokens.clone()
        scaled[2] *= 37.5
        a = score_pixels(tokens, emb, 0.07)
        b = score_pixels(scaled, emb, 0.07)
        assert torch.allclose(a, b, atol=1e-12)

    def test_matches_bruteforce_oracle(self, rng):
        emb = make_embeddings(5, seed=3)
        tokens = torch.tensor(rng.randn(4, 5))
        grid = score_pixels(tokens, emb, temperature=1.0)
        oracle = two_class_softmax_oracle(
            tokens.tolist(), emb.abnormal.tolist(), emb.normal.tolist(), 1.0
        )
        assert np.max(np.abs(grid.reshape(-1).numpy() - np.array(oracle))) < 1e-9

    def test_output_strictly_inside_unit_interval(self, rng):
        emb = make_embeddings(8, seed=5)
        tokens = torch.tensor(rng.randn(16, 8))
        for tau in (0.07, 1.0):
            grid = score_pixels(tokens, emb, tau)
            assert float(grid.min()) > 0.0
            assert float(grid.max()) < 1.0

    def test_monotone_in_abnormal_similarity(self):
        w_n = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        w_a = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        emb = ClassEmbeddings(normal=w_n, abnormal=w_a)
        # unit tokens [c, s*cos(phi), s*sin(phi)]: cos(w_n,.) = c stays fixed
        # while cos(w_a,.) = s*cos(phi) grows as phi shrinks
        c, s = 0.5, math.sqrt(1 - 0.25)
        scores = []
        for phi in np.linspace(1.4, 0.0, 8):
            token = torch.tensor(
                [[c, s * math.cos(phi), s * math.sin(phi)]], dtype=torch.float64
            )
            scores.append(float(score_pixels(token, emb, 1.0, (1, 1))))
        assert all(b > a for a, b in zip(scores, scores[1:]))

    def test_argmax_invariant_under_temperature(self, rng):
        emb = make_embeddings(6, seed=7)
        tokens = torch.tensor(rng.randn(9, 6))
        hottest = {
            tau: int(score_pixels(tokens, emb, tau).argmax()) for tau in (0.03, 0.07, 0.5, 1.0)
        }
        assert len(set(hottest.values())) == 1

    def test_temperature_validation(self, rng):
        emb = make_embeddings(4)
        with pytest.raises(ArgumentError):
            score_pixels(torch.tensor(rng.randn(4, 4)), emb, temperature=0.0)

    def test_grid_shape_required_for_non_square(self, rng):
        emb = make_embeddings(4)
        tokens = torch.tensor(rng.randn(6, 4))
        with pytest.raises(ArgumentError):
            score_pixels(tokens, emb, 1.0)
        grid = score_pixels(tokens, emb, 1.0, grid_shape=(2, 3))
        assert grid.shape == (2, 3)


class TestScoreImage:
    def test_equal_similarity_gives_half(self):
        emb = ClassEmbeddings(normal=torch.tensor([1.0, 0.0]), abnormal=torch.tensor([0.0, 1.0]))
        assert float(score_image(torch.tensor([1.0, 1.0]), emb, 1.0)) == pytest.approx(0.5)

    def test_analytic_orthogonal_case(self):
        w_a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        w_n = torch.tensor([0.0, 1.0], dtype=torch.float64)
        emb = ClassEmbeddings(normal=w_n, abnormal=w_a)
        score = float(score_image(w_a.clone(), emb, temperature=1.0))
        expected = math.exp(1.0) / (math.exp(1.0) + math.exp(0.0))
        assert abs(score - expected) < 1e-12
        assert expected == pytest.approx(0.7311, abs=1e-4)

    def test_matches_score_pixels_on_1x1(self, rng):
        emb = make_embeddings(5, seed=11)
        token = torch.tensor(rng.randn(5))
        via_pixels = float(score_pixels(token.unsqueeze(0), emb, 0.07, (1, 1)))
        via_image = float(score_image(token, emb, 0.07))
        assert abs(via_pixels - via_image) < 1e-12
