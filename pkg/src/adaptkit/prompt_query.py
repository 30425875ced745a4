"""Comparative learning between a query image and its k-shot normal prompts.

Pipeline: every query patch token is matched to its nearest neighbour in
the prompt token bank (exhaustive squared-Euclidean search, ties to the
lowest bank index), the absolute aligned residual is added back onto the
query tokens, and the resulting multi-layer joint features feed a small
upsampling segmentation head and a pooled global MLP head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import nearest_rows
from .backbone import Backbone, VisionFeatures
from .errors import ArgumentError, ConfigurationError


@dataclass
class PromptBank:
    """Stacked patch tokens of k normal prompt images, one matrix per layer."""

    per_layer_tokens: list[torch.Tensor]  # each [k*n, d]
    k: int
    class_id: str | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ArgumentError("prompt bank needs k >= 1")
        rows = {int(t.shape[0]) for t in self.per_layer_tokens}
        if len(rows) != 1:
            raise ConfigurationError(f"bank layers disagree on row count: {sorted(rows)}")

    @property
    def num_layers(self) -> int:
        return len(self.per_layer_tokens)


def build_prompt_bank(prompt_images, k: int, backbone: Backbone, class_id: str | None = None) -> PromptBank:
    """Encode the first k prompt images and stack their tokens per layer."""
    if not 1 <= k <= len(prompt_images):
        raise ArgumentError(f"k={k} out of range for {len(prompt_images)} prompt images")
    encoded = [backbone.encode_image(img) for img in prompt_images[:k]]
    per_layer = [
        torch.cat([feats.per_layer_patch_tokens[li] for feats in encoded], dim=0)
        for li in range(len(encoded[0].per_layer_patch_tokens))
    ]
    return PromptBank(per_layer_tokens=per_layer, k=k, class_id=class_id)


def bank_from_features(feature_list: list[VisionFeatures], class_id: str | None = None) -> PromptBank:
    """Bank over already-encoded prompt features (used by the trainer's cache)."""
    per_layer = [
        torch.cat([feats.per_layer_patch_tokens[li] for feats in feature_list], dim=0)
        for li in range(len(feature_list[0].per_layer_patch_tokens))
    ]
    return PromptBank(per_layer_tokens=per_layer, k=len(feature_list), class_id=class_id)


def align(query_tokens: torch.Tensor, bank_layer: torch.Tensor) -> torch.Tensor:
    """Replace each query row by its nearest bank row (Euclidean, lowest-index ties)."""
    idx, _ = nearest_rows(query_tokens.detach().numpy(), bank_layer.detach().numpy())
    return bank_layer[torch.from_numpy(idx)]


@dataclass
class JointFeature:
    """Per-layer contextual + aligned-residual features of one query."""

    per_layer: list[torch.Tensor]  # each [n, d]
    grid_shape: tuple[int, int]

    @property
    def concat_width(self) -> int:
        return sum(int(t.shape[1]) for t in self.per_layer)

    def as_grid(self) -> torch.Tensor:
        """Channel-concatenated grid tensor [1, sum(d), grid_h, grid_w]."""
        gh, gw = self.grid_shape
        planes = [t.T.reshape(1, t.shape[1], gh, gw) for t in self.per_layer]
        return torch.cat(planes, dim=1)


def joint_feature(query: VisionFeatures, bank: PromptBank, context: bool = True) -> JointFeature:
    """Aggregate query tokens with the absolute aligned residual, layer by layer.

    With ``context=False`` only the residual is kept (the ablation mode).
    """
    if len(query.per_layer_patch_tokens) != bank.num_layers:
        raise ConfigurationError(
            f"query has {len(query.per_layer_patch_tokens)} layers, bank has {bank.num_layers}"
        )
    per_layer = []
    for q, b in zip(query.per_layer_patch_tokens, bank.per_layer_tokens):
        residual = (q - align(q, b)).abs()
        per_layer.append(q + residual if context else residual)
    return JointFeature(per_layer=per_layer, grid_shape=query.grid_shape)


class SegmentationHead(nn.Module):
    """1x1 entry projection, two 2x-upsampling deconv blocks, 1x1 exit to 2 classes.

    Channel widths halve across blocks (128 -> 64 -> 32). Each block is a
    3x3 convolution, BatchNorm, ReLU and a 2x2 stride-2 deconvolution; the
    deconvolution carries the halving.
    """

    def __init__(self, in_width: int, base_width: int = 128, num_blocks: int = 2):
        super().__init__()
        self.in_width = in_width
        self.entry = nn.Conv2d(in_width, base_width, kernel_size=1)
        blocks = []
        width = base_width
        for _ in range(num_blocks):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(width, width, kernel_size=3, padding=1),
                    nn.BatchNorm2d(width),
                    nn.ReLU(inplace=True),
                    nn.ConvTranspose2d(width, width // 2, kernel_size=2, stride=2),
                )
            )
            width //= 2
        self.blocks = nn.ModuleList(blocks)
        self.exit = nn.Conv2d(width, 2, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [B, in_width, gh, gw] -> two-class logits [B, 2, 4*gh, 4*gw]."""
        if x.shape[1] != self.in_width:
            raise ConfigurationError(
                f"segmentation head expects {self.in_width} channels, got {x.shape[1]}"
            )
        x = self.entry(x)
        for block in self.blocks:
            x = block(x)
        return self.exit(x)

    def anomaly_map(self, x: torch.Tensor, out_resolution: int) -> torch.Tensor:
        """Softmaxed abnormal channel resized to [B, out, out], values in [0, 1]."""
        logits = self.forward(x)
        prob = torch.softmax(logits, dim=1)[:, 1:2]
        prob = F.interpolate(prob, size=(out_resolution, out_resolution), mode="bilinear", align_corners=False)
        return prob[:, 0]


class GlobalScoreHead(nn.Module):
    """MLP over the pooled joint feature; widths halve from 128 down to 2."""

    def __init__(self, in_width: int, base_width: int = 128):
        super().__init__()
        self.in_width = in_width
        widths = [base_width]
        while widths[-1] > 2:
            widths.append(widths[-1] // 2)
        layers: list[nn.Module] = [nn.Linear(in_width, widths[0])]
        for prev, nxt in zip(widths[:-1], widths[1:]):
            layers.append(nn.ReLU(inplace=True))
            layers.append(nn.Linear(prev, nxt))
        self.mlp = nn.Sequential(*layers)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        """pooled: [B, in_width] -> two-class logits [B, 2]."""
        if pooled.shape[-1] != self.in_width:
            raise ConfigurationError(
                f"global head expects width {self.in_width}, got {pooled.shape[-1]}"
            )
        return self.mlp(pooled)


def pool_joint_feature(jf: JointFeature) -> torch.Tensor:
    """(AvgPool + MaxPool)/2 over spatial positions per layer, concatenated. [width]"""
    pooled = []
    for tokens in jf.per_layer:
        pooled.append((tokens.mean(dim=0) + tokens.max(dim=0).values) / 2)
    return torch.cat(pooled)


def segment(jf: JointFeature, head: SegmentationHead, out_resolution: int) -> torch.Tensor:
    """Anomaly map [out, out] in [0, 1] for a single joint feature."""
    return head.anomaly_map(jf.as_grid(), out_resolution)[0]


def global_score(jf: JointFeature, head: GlobalScoreHead) -> torch.Tensor:
    """Image-level anomaly probability (scalar in (0, 1)) for a single joint feature."""
    logits = head(pool_joint_feature(jf).unsqueeze(0))[0]
    return torch.softmax(logits, dim=0)[1]
