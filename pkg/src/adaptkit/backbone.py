"""Frozen vision-language encoder pair behind a pluggable backend registry.

Two backends ship with the package:

* ``synthetic`` — a seed-deterministic stand-in used by the test suite and
  the desk-scale training harness. Patch tokens are a fixed random
  projection of the raw patch pixels (optionally mixed with a positional
  component), so identical patches map to identical tokens and any pixel
  change perturbs the features.
* ``clip-vit-l-14-336`` — real CLIP weights loaded from a local directory
  (``ADAPTKIT_BACKBONE_PATH``); optional, requires ``transformers``.

All backends are immutable after construction: encoding the same input
twice returns bitwise-identical features.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ArgumentError, BackendError, ConfigurationError

DEFAULT_NORMAL_TEMPLATES = ("a photo of a normal object",)
DEFAULT_ABNORMAL_TEMPLATES = ("a photo of a damaged object",)


@dataclass(frozen=True)
class EncoderConfig:
    """Static description of an encoder pair.

    ``feature_layers`` are 1-based transformer block indices whose patch
    tokens are exposed; the global image token always comes from the last
    configured layer. ``text_width`` is the token width accepted by the
    text encoder (learned prompt tokens live in this width).
    """

    patch_size: int = 14
    embed_dim: int = 768
    feature_layers: tuple[int, ...] = (6, 12, 18, 24)
    input_resolution: int = 518
    prompt_length_capacity: int = 77
    text_width: int = 768

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigurationError("embed_dim must be positive")
        if self.input_resolution % self.patch_size != 0:
            raise ConfigurationError(
                f"input_resolution {self.input_resolution} is not a multiple of "
                f"patch_size {self.patch_size}"
            )
        if not self.feature_layers:
            raise ConfigurationError("feature_layers must be non-empty")
        if list(self.feature_layers) != sorted(set(self.feature_layers)):
            raise ConfigurationError("feature_layers must be strictly increasing")
        object.__setattr__(self, "feature_layers", tuple(self.feature_layers))

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def tokens_per_image(self) -> int:
        return self.grid_size * self.grid_size


@dataclass
class VisionFeatures:
    """Per-layer patch tokens plus the final-layer global token of one image."""

    per_layer_patch_tokens: list[torch.Tensor]  # each [grid_h*grid_w, d]
    global_token: torch.Tensor  # [d]
    grid_shape: tuple[int, int]

    def __post_init__(self):
        n = self.grid_shape[0] * self.grid_shape[1]
        d = self.global_token.shape[-1]
        for tokens in self.per_layer_patch_tokens:
            if tokens.shape != (n, d):
                raise ConfigurationError(
                    f"layer tokens have shape {tuple(tokens.shape)}, expected {(n, d)}"
                )

    @property
    def final_layer_tokens(self) -> torch.Tensor:
        return self.per_layer_patch_tokens[-1]

    @property
    def embed_dim(self) -> int:
        return int(self.global_token.shape[-1])


class EmbeddingSource(str, Enum):
    STATIC_TEMPLATE = "static_template"
    LEARNED_PROMPTS = "learned_prompts"


@dataclass
class ClassEmbeddings:
    """Paired normal/abnormal text embeddings used by the softmax scoring."""

    normal: torch.Tensor  # [d]
    abnormal: torch.Tensor  # [d]
    source: EmbeddingSource = EmbeddingSource.STATIC_TEMPLATE

    def __post_init__(self):
        if self.normal.shape != self.abnormal.shape:
            raise ConfigurationError("normal/abnormal embeddings differ in shape")
        with torch.no_grad():
            if not (torch.isfinite(self.normal).all() and torch.isfinite(self.abnormal).all()):
                raise ConfigurationError("class embeddings must be finite")


def _as_image_tensor(image, resolution: int) -> torch.Tensor:
    """Accept [h, w, 3] numpy or torch in [0, 1]; validate squareness."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"expected [h, w, 3] image, got {tuple(image.shape)}")
    if image.shape[0] != resolution or image.shape[1] != resolution:
        raise ConfigurationError(
            f"image is {image.shape[0]}x{image.shape[1]}, backend expects "
            f"{resolution}x{resolution}; resize before encoding"
        )
    return image.to(torch.float64)


class Backbone:
    """Interface shared by all backends. Weights are frozen by contract."""

    config: EncoderConfig
    name: str

    def describe(self) -> dict:
        """JSON-serialisable constructor descriptor (stored in checkpoints)."""
        return {"encoder": _encoder_to_dict(self.config)}

    def encode_image(self, image) -> VisionFeatures:
        raise NotImplementedError

    def encode_prompt_tokens(self, prompt_tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_static_text(
        self,
        normal_templates: Sequence[str] = DEFAULT_NORMAL_TEMPLATES,
        abnormal_templates: Sequence[str] = DEFAULT_ABNORMAL_TEMPLATES,
    ) -> ClassEmbeddings:
        if not normal_templates or not abnormal_templates:
            raise ArgumentError("template lists must be non-empty")
        normal = self._encode_template_set(normal_templates)
        abnormal = self._encode_template_set(abnormal_templates)
        return ClassEmbeddings(normal=normal, abnormal=abnormal, source=EmbeddingSource.STATIC_TEMPLATE)

    def _encode_template_set(self, templates: Sequence[str]) -> torch.Tensor:
        embs = torch.stack([self._encode_text(t) for t in templates])
        mean = embs.mean(dim=0)
        return mean / mean.norm()

    def _encode_text(self, template: str) -> torch.Tensor:
        raise NotImplementedError


class SyntheticBackbone(Backbone):
    """Deterministic hermetic encoder pair.

    Each configured layer projects centred patch pixels through a fixed
    seeded Gaussian matrix followed by tanh and L2 normalisation, so cosine
    similarity reduces to a dot product at the boundary. With
    ``positional_mix == 0`` (the default) identical patches at different
    positions map to identical tokens; a positive mix blends in a seeded
    per-position embedding before re-normalising.

    The global token imitates attention pooling: patch tokens are pooled
    with weights softmax(global_salience * distance from the image's own
    mean token), and the pooled deviation from the mean is amplified by
    ``global_deviation_gain`` before re-normalising, so unusual content
    dominates the image embedding the way attended tokens dominate a CLS
    token. ``global_salience=0`` degrades to the plain mean.

    The text side embeds UTF-8 bytes through a seeded table, pools with
    per-position weights and runs a small fixed MLP; the same pathway
    consumes learned prompt-token matrices, keeping the whole text path
    differentiable with respect to its inputs.
    """

    name = "synthetic"

    def __init__(
        self,
        config: EncoderConfig | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
        positional_mix: float = 0.0,
        global_salience: float = 8.0,
        global_deviation_gain: float = 4.0,
    ):
        self.config = config or EncoderConfig()
        self.seed = seed
        self.dtype = dtype
        self.positional_mix = float(positional_mix)
        self.global_salience = float(global_salience)
        self.global_deviation_gain = float(global_deviation_gain)

        cfg = self.config
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self._layer_weights = []
        self._layer_bias = []
        for layer in cfg.feature_layers:
            rng = np.random.RandomState(_mix_seed(seed, 1000 + layer))
            w = rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(cfg.embed_dim, patch_dim))
            b = rng.normal(0.0, 0.1, size=(cfg.embed_dim,))
            self._layer_weights.append(torch.from_numpy(w))
            self._layer_bias.append(torch.from_numpy(b))

        rng = np.random.RandomState(_mix_seed(seed, 7))
        hidden = 2 * max(cfg.embed_dim, cfg.text_width)
        self._byte_table = torch.from_numpy(rng.normal(0.0, 1.0, size=(256, cfg.text_width)))
        self._pos_weights = torch.from_numpy(
            rng.normal(1.0, 0.2, size=(cfg.prompt_length_capacity, cfg.text_width))
        )
        self._text_w1 = torch.from_numpy(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.text_width), size=(hidden, cfg.text_width))
        )
        self._text_b1 = torch.from_numpy(rng.normal(0.0, 0.1, size=(hidden,)))
        self._text_w2 = torch.from_numpy(
            rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(cfg.embed_dim, hidden))
        )
        self._pos_cache: dict[int, torch.Tensor] = {}

    def describe(self) -> dict:
        return {
            "encoder": _encoder_to_dict(self.config),
            "seed": self.seed,
            "dtype": str(self.dtype).removeprefix("torch."),
            "positional_mix": self.positional_mix,
            "global_salience": self.global_salience,
            "global_deviation_gain": self.global_deviation_gain,
        }

    def encode_image(self, image) -> VisionFeatures:
        cfg = self.config
        img = _as_image_tensor(image, cfg.input_resolution)
        g, p = cfg.grid_size, cfg.patch_size
        # [res, res, 3] -> [g*g, p*p*3], row-major over the patch grid
        patches = (
            img.reshape(g, p, g, p, 3).permute(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        )
        centred = patches - 0.5
        per_layer = []
        for li in range(len(cfg.feature_layers)):
            tokens = torch.tanh(centred @ self._layer_weights[li].T + self._layer_bias[li])
            if self.positional_mix > 0.0:
                tokens = tokens + self.positional_mix * self._positional(li, g)
            tokens = tokens / tokens.norm(dim=1, keepdim=True)
            per_layer.append(tokens.to(self.dtype))
        final = per_layer[-1].to(torch.float64)
        mean = final.mean(dim=0)
        if self.global_salience > 0.0:
            dist = (final - mean).norm(dim=1)
            weights = torch.softmax(self.global_salience * dist, dim=0)
            pooled = weights @ final
            global_token = mean + self.global_deviation_gain * (pooled - mean)
        else:
            global_token = mean
        global_token = (global_token / global_token.norm()).to(self.dtype)
        return VisionFeatures(
            per_layer_patch_tokens=per_layer, global_token=global_token, grid_shape=(g, g)
        )

    def encode_prompt_tokens(self, prompt_tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if prompt_tokens.ndim != 2 or prompt_tokens.shape[1] != cfg.text_width:
            raise ArgumentError(
                f"prompt tokens must be [r, {cfg.text_width}], got {tuple(prompt_tokens.shape)}"
            )
        r = prompt_tokens.shape[0]
        if r > cfg.prompt_length_capacity:
            raise ArgumentError(
                f"prompt length {r} exceeds capacity {cfg.prompt_length_capacity}"
            )
        dt = prompt_tokens.dtype if prompt_tokens.is_floating_point() else self.dtype
        pos = self._pos_weights[:r].to(dt)
        pooled = (prompt_tokens.to(dt) * pos).mean(dim=0)
        h = torch.tanh(self._text_w1.to(dt) @ pooled + self._text_b1.to(dt))
        emb = self._text_w2.to(dt) @ h
        return emb / emb.norm()

    def _encode_text(self, template: str) -> torch.Tensor:
        data = template.encode("utf-8")[: self.config.prompt_length_capacity]
        idx = torch.tensor(list(data), dtype=torch.long)
        tokens = self._byte_table[idx]
        return self.encode_prompt_tokens(tokens).to(self.dtype)

    def _positional(self, layer_index: int, grid: int) -> torch.Tensor:
        key = layer_index * 100000 + grid
        if key not in self._pos_cache:
            rng = np.random.RandomState(_mix_seed(self.seed, 50000 + key))
            emb = rng.normal(0.0, 1.0, size=(grid * grid, self.config.embed_dim))
            self._pos_cache[key] = torch.from_numpy(emb)
        return self._pos_cache[key]


def _mix_seed(seed: int, salt: int) -> int:
    return (seed * 1000003 + salt) % (2**31 - 1)


class ClipBackbone(Backbone):
    """Real CLIP weights loaded from a local directory via ``transformers``.

    ``patch_projection`` selects whether patch tokens are taken before or
    after the final visual projection; both variants are exposed because
    published descriptions leave this open.
    """

    name = "clip-vit-l-14-336"

    def __init__(
        self,
        config: EncoderConfig | None = None,
        weights_path: str | None = None,
        patch_projection: str = "post",
    ):
        path = weights_path or os.environ.get("ADAPTKIT_BACKBONE_PATH")
        if not path:
            raise BackendError(
                "real backend needs a weights directory: pass weights_path or set "
                "ADAPTKIT_BACKBONE_PATH"
            )
        if not os.path.isdir(path):
            raise BackendError(f"backbone weights directory not found: {path}")
        if patch_projection not in ("pre", "post"):
            raise BackendError("patch_projection must be 'pre' or 'post'")
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendError(
                "the real backend requires the optional 'transformers' dependency"
            ) from exc

        self._model = CLIPModel.from_pretrained(path).eval()
        for param in self._model.parameters():
            param.requires_grad_(False)
        self._tokenizer = CLIPTokenizer.from_pretrained(path)
        self.patch_projection = patch_projection

        vision = self._model.config.vision_config
        embed_dim = (
            self._model.config.projection_dim if patch_projection == "post" else vision.hidden_size
        )
        base = config or EncoderConfig()
        self.config = EncoderConfig(
            patch_size=vision.patch_size,
            embed_dim=embed_dim,
            feature_layers=base.feature_layers,
            input_resolution=base.input_resolution,
            prompt_length_capacity=self._model.config.text_config.max_position_embeddings,
            text_width=self._model.config.text_config.hidden_size,
        )
        # stock CLIP preprocessing; encode_image receives raw [0,1] pixels
        self._pixel_mean = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(3, 1, 1)
        self._pixel_std = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(3, 1, 1)

    def describe(self) -> dict:
        return {"encoder": _encoder_to_dict(self.config), "patch_projection": self.patch_projection}

    @torch.no_grad()
    def encode_image(self, image) -> VisionFeatures:
        cfg = self.config
        img = _as_image_tensor(image, cfg.input_resolution).to(torch.float32)
        pixels = ((img.permute(2, 0, 1) - self._pixel_mean) / self._pixel_std).unsqueeze(0)
        vision = self._model.vision_model
        out = vision(pixel_values=pixels, output_hidden_states=True, interpolate_pos_encoding=True)
        per_layer = []
        for layer in cfg.feature_layers:
            hidden = out.hidden_states[layer][0]  # [1+n, width], index 0 is CLS
            tokens = hidden[1:]
            if self.patch_projection == "post":
                tokens = self._model.visual_projection(vision.post_layernorm(tokens))
            tokens = tokens / tokens.norm(dim=1, keepdim=True)
            per_layer.append(tokens)
        pooled = self._model.visual_projection(vision.post_layernorm(out.hidden_states[-1][0][:1]))[0]
        if self.patch_projection == "pre":
            pooled = out.hidden_states[-1][0][0]
        global_token = pooled / pooled.norm()
        g = cfg.grid_size
        return VisionFeatures(
            per_layer_patch_tokens=per_layer, global_token=global_token, grid_shape=(g, g)
        )

    def encode_prompt_tokens(self, prompt_tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        r = prompt_tokens.shape[0]
        if r + 2 > cfg.prompt_length_capacity:
            raise ArgumentError(f"prompt length {r} exceeds capacity {cfg.prompt_length_capacity - 2}")
        text_model = self._model.text_model
        emb_table = text_model.embeddings.token_embedding
        sot = emb_table(torch.tensor([self._tokenizer.bos_token_id]))
        eot = emb_table(torch.tensor([self._tokenizer.eos_token_id]))
        seq = torch.cat([sot, prompt_tokens.to(sot.dtype), eot], dim=0).unsqueeze(0)
        positions = text_model.embeddings.position_embedding(
            torch.arange(seq.shape[1]).unsqueeze(0)
        )
        hidden = seq + positions
        mask = _causal_mask(seq.shape[1], hidden.dtype)
        for block in text_model.encoder.layers:
            hidden = block(hidden, attention_mask=None, causal_attention_mask=mask)[0]
        hidden = text_model.final_layer_norm(hidden)
        pooled = hidden[0, -1]  # EOT position
        emb = self._model.text_projection(pooled)
        return emb / emb.norm()

    def _encode_text(self, template: str) -> torch.Tensor:
        with torch.no_grad():
            ids = self._tokenizer([template], return_tensors="pt", padding=True)
            emb = self._model.get_text_features(**ids)[0]
            return emb / emb.norm()


def _causal_mask(length: int, dtype: torch.dtype) -> torch.Tensor:
    mask = torch.full((length, length), float("-inf"), dtype=dtype)
    mask.triu_(1)
    return mask.unsqueeze(0).unsqueeze(0)


def _encoder_to_dict(config: EncoderConfig) -> dict:
    return {
        "patch_size": config.patch_size,
        "embed_dim": config.embed_dim,
        "feature_layers": list(config.feature_layers),
        "input_resolution": config.input_resolution,
        "prompt_length_capacity": config.prompt_length_capacity,
        "text_width": config.text_width,
    }


def encoder_config_from_dict(data: dict) -> EncoderConfig:
    data = dict(data)
    data["feature_layers"] = tuple(data["feature_layers"])
    return EncoderConfig(**data)


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def restore_backend(backbone_id: str, descriptor: dict) -> Backbone:
    """Rebuild the backend a checkpoint was trained with."""
    desc = dict(descriptor)
    config = encoder_config_from_dict(desc.pop("encoder"))
    if "dtype" in desc:
        desc["dtype"] = _DTYPES[desc["dtype"]]
    return create_backend(backbone_id, config=config, **desc)


BackendFactory = Callable[..., Backbone]
_REGISTRY: dict[str, BackendFactory] = {}


def register_backend(name: str, factory: BackendFactory) -> None:
    _REGISTRY[name] = factory


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


def create_backend(name: str, **kwargs) -> Backbone:
    """Instantiate a registered backend by string id."""
    if name not in _REGISTRY:
        raise BackendError(f"unknown backend {name!r}; available: {available_backends()}")
    return _REGISTRY[name](**kwargs)


register_backend("synthetic", SyntheticBackbone)
register_backend("clip-vit-l-14-336", ClipBackbone)
