"""Visual and textual adapters plus the two-class softmax scoring rules.

The visual adapter applies residual two-layer MLPs to the final-layer
patch tokens and the global image token; the textual adapter holds two
learnable prompt-token matrices that the frozen text encoder turns into
class embeddings. Scoring compares tokens against a normal/abnormal
embedding pair via cosine similarity and a two-class softmax.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .backbone import Backbone, ClassEmbeddings, EmbeddingSource, VisionFeatures
from .errors import ArgumentError, ConfigurationError

# Raw cosines live in [-1, 1]; a plain softmax over them is nearly uniform,
# so scores default to the conventional CLIP logit scale. Pass 1.0 to get
# the literal un-tempered equation.
DEFAULT_TEMPERATURE = 0.07


class VisualAdapter(nn.Module):
    """Residual MLPs for patch tokens (local) and the global token.

    Hidden width is d//4 and the second layer of each MLP starts at zero,
    so a freshly constructed adapter is exactly the identity map.
    """

    def __init__(self, embed_dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        hidden = max(1, embed_dim // 4)
        self.embed_dim = embed_dim
        self.local_mlp = _residual_mlp(embed_dim, hidden, dtype)
        self.global_mlp = _residual_mlp(embed_dim, hidden, dtype)

    def adapt_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.embed_dim:
            raise ConfigurationError(
                f"adapter built for d={self.embed_dim}, got tokens with d={tokens.shape[-1]}"
            )
        return tokens + self.local_mlp(tokens)

    def adapt_global(self, token: torch.Tensor) -> torch.Tensor:
        if token.shape[-1] != self.embed_dim:
            raise ConfigurationError(
                f"adapter built for d={self.embed_dim}, got global token with d={token.shape[-1]}"
            )
        return token + self.global_mlp(token)

    def forward(self, features: VisionFeatures) -> VisionFeatures:
        """Adapt the final configured layer; earlier layers are not consumed."""
        adapted = self.adapt_tokens(features.final_layer_tokens)
        global_token = self.adapt_global(features.global_token)
        return VisionFeatures(
            per_layer_patch_tokens=[adapted],
            global_token=global_token,
            grid_shape=features.grid_shape,
        )


def _residual_mlp(dim: int, hidden: int, dtype: torch.dtype) -> nn.Sequential:
    first = nn.Linear(dim, hidden, dtype=dtype)
    second = nn.Linear(hidden, dim, dtype=dtype)
    nn.init.zeros_(second.weight)
    nn.init.zeros_(second.bias)
    return nn.Sequential(first, nn.ReLU(), second)


class TextualAdapter(nn.Module):
    """Two learnable prompt-token matrices, one per class, of length r.

    Init scale is large enough that the two classes start from distinct
    embeddings; with near-zero prompts the frozen encoder maps both to
    almost the same vector and early training stalls on breaking the tie.
    """

    INIT_SCALE = 0.5

    def __init__(
        self,
        text_width: int,
        prompt_length: int = 12,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if prompt_length <= 0:
            raise ArgumentError("prompt_length must be positive")
        self.prompt_length = prompt_length
        shape = (prompt_length, text_width)
        self.normal_prompt_tokens = nn.Parameter(_init_prompts(shape, dtype, generator))
        self.abnormal_prompt_tokens = nn.Parameter(_init_prompts(shape, dtype, generator))

    def embeddings(self, backbone: Backbone) -> ClassEmbeddings:
        normal = backbone.encode_prompt_tokens(self.normal_prompt_tokens)
        abnormal = backbone.encode_prompt_tokens(self.abnormal_prompt_tokens)
        return ClassEmbeddings(normal=normal, abnormal=abnormal, source=EmbeddingSource.LEARNED_PROMPTS)


def _init_prompts(shape, dtype, generator):
    return TextualAdapter.INIT_SCALE * torch.randn(shape, dtype=dtype, generator=generator)


def _two_class_logit_gap(tokens: torch.Tensor, class_emb: ClassEmbeddings) -> torch.Tensor:
    """cos(w_a, t) - cos(w_n, t) per row."""
    if tokens.shape[-1] != class_emb.normal.shape[-1]:
        raise ConfigurationError(
            f"tokens (d={tokens.shape[-1]}) and embeddings (d={class_emb.normal.shape[-1]}) disagree"
        )
    unit = tokens / tokens.norm(dim=-1, keepdim=True)
    w_a = class_emb.abnormal / class_emb.abnormal.norm()
    w_n = class_emb.normal / class_emb.normal.norm()
    return unit @ (w_a - w_n).to(unit.dtype)


def score_pixels(
    patch_tokens: torch.Tensor,
    class_emb: ClassEmbeddings,
    temperature: float = DEFAULT_TEMPERATURE,
    grid_shape: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Per-patch anomaly probabilities rearranged to grid order.

    softmax over {cos(w_a, F_i)/t, cos(w_n, F_i)/t}, abnormal channel.
    Returns a [grid_h, grid_w] tensor in (0, 1); differentiable.
    """
    if temperature <= 0:
        raise ArgumentError("temperature must be positive")
    n = patch_tokens.shape[0]
    if grid_shape is None:
        side = int(math.isqrt(n))
        if side * side != n:
            raise ArgumentError(f"cannot infer a square grid from {n} tokens; pass grid_shape")
        grid_shape = (side, side)
    if grid_shape[0] * grid_shape[1] != n:
        raise ArgumentError(f"grid {grid_shape} does not hold {n} tokens")
    gap = _two_class_logit_gap(patch_tokens, class_emb)
    return torch.sigmoid(gap / temperature).reshape(grid_shape)


def score_image(
    global_token: torch.Tensor,
    class_emb: ClassEmbeddings,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Image-level anomaly probability from the global token; scalar in (0, 1)."""
    if temperature <= 0:
        raise ArgumentError("temperature must be positive")
    gap = _two_class_logit_gap(global_token.unsqueeze(0), class_emb)[0]
    return torch.sigmoid(gap / temperature)
