"""Training of the three adapters on a labelled base dataset.

The backbone stays frozen throughout. In the default ``alternating`` mode
three decoupled loss groups are summed: the visual branch scores adapted
tokens against static text embeddings (gradients reach only the visual
adapter), the textual branch scores raw tokens against learned prompt
embeddings (gradients reach only the prompt tokens), and the prompt-query
branch trains its two heads on joint features built from one normal
prompt per query. ``joint`` mode instead couples adapted tokens with
learned embeddings in a single branch; the remaining modes isolate single
branches for ablations.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .adapters import TextualAdapter, VisualAdapter, score_image, score_pixels
from .backbone import (
    Backbone,
    ClassEmbeddings,
    DEFAULT_ABNORMAL_TEMPLATES,
    DEFAULT_NORMAL_TEMPLATES,
    EncoderConfig,
    VisionFeatures,
)
from .checkpoint import Checkpoint
from .data import DatasetSpec, Sample, load_and_resize, scan
from .errors import ArgumentError, ConfigurationError, ProtocolError, TrainingDivergedError
from .prompt_query import (
    GlobalScoreHead,
    SegmentationHead,
    bank_from_features,
    joint_feature,
    pool_joint_feature,
)

logger = logging.getLogger(__name__)

MODES = ("alternating", "joint", "zero_shot_only", "pqa_only", "context_off")
_EPS = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 0.001
    batch_size: int = 8
    mode: str = "alternating"
    seed: int = 0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    temperature: float = 0.07
    prompt_length: int = 12
    ce_weight: float = 1.0
    focal_weight: float = 1.0
    dice_weight: float = 1.0
    normal_templates: tuple[str, ...] = DEFAULT_NORMAL_TEMPLATES
    abnormal_templates: tuple[str, ...] = DEFAULT_ABNORMAL_TEMPLATES

    def __post_init__(self):
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ArgumentError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.focal_alpha < 1:
            raise ArgumentError("focal_alpha must lie in (0, 1)")
        if self.dice_smooth <= 0:
            raise ArgumentError("dice_smooth must be positive")

    @property
    def uses_zero_shot_branches(self) -> bool:
        return self.mode in ("alternating", "joint", "zero_shot_only")

    @property
    def uses_pqa_branch(self) -> bool:
        return self.mode in ("alternating", "joint", "pqa_only", "context_off")

    @property
    def pqa_context(self) -> bool:
        return self.mode != "context_off"


@dataclass
class TrainBatch:
    """Queries with pixel masks and labels, plus one normal prompt per query."""

    query_images: list
    pixel_masks: list  # binary [res, res] arrays
    image_labels: list[int]
    prompt_images: list

    def __post_init__(self):
        n = len(self.query_images)
        if not (len(self.pixel_masks) == len(self.image_labels) == len(self.prompt_images) == n):
            raise ArgumentError("batch fields must have equal length")
        for mask, label in zip(self.pixel_masks, self.image_labels):
            nonzero = bool(np.asarray(mask).any())
            if nonzero != (label == 1):
                raise ArgumentError("mask nonzero somewhere iff label == 1 violated")


def classification_loss(pred, label: int):
    """Binary cross-entropy on a scalar probability; clamped at 1e-7 from 0/1."""
    if not torch.is_tensor(pred):
        pred = torch.tensor(float(pred), dtype=torch.float64)
    p = pred.clamp(_EPS, 1.0 - _EPS)
    return -(torch.log(p) if label == 1 else torch.log1p(-p))


def focal_loss(pred_map, mask, gamma: float = 2.0, alpha: float = 0.25):
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t) over pixels."""
    pred_map, mask = _paired(pred_map, mask)
    p_t = pred_map * mask + (1.0 - pred_map) * (1.0 - mask)
    alpha_t = alpha * mask + (1.0 - alpha) * (1.0 - mask)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t.clamp(min=_EPS))).mean()


def dice_loss(pred_map, mask, smooth: float = 1.0):
    """1 - (2*sum(p*m) + s) / (sum(p) + sum(m) + s); exactly 0 on a binary match."""
    pred_map, mask = _paired(pred_map, mask)
    inter = (pred_map * mask).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred_map.sum() + mask.sum() + smooth)


def segmentation_loss(pred_map, mask, cfg: TrainConfig):
    """Focal + Dice for a pixel map against a binary mask of the same shape."""
    return cfg.focal_weight * focal_loss(
        pred_map, mask, cfg.focal_gamma, cfg.focal_alpha
    ) + cfg.dice_weight * dice_loss(pred_map, mask, cfg.dice_smooth)


def _paired(pred_map, mask):
    if not torch.is_tensor(pred_map):
        pred_map = torch.as_tensor(pred_map, dtype=torch.float64)
    if not torch.is_tensor(mask):
        mask = torch.as_tensor(np.asarray(mask))
    if pred_map.shape != mask.shape:
        raise ArgumentError(f"map shape {tuple(pred_map.shape)} != mask shape {tuple(mask.shape)}")
    return pred_map, mask.to(pred_map.dtype)


class AdapterSet(nn.Module):
    """All trainable parameters: visual + textual adapters and the two heads."""

    def __init__(self, encoder: EncoderConfig, prompt_length: int = 12):
        super().__init__()
        width = encoder.embed_dim * len(encoder.feature_layers)
        self.visual = VisualAdapter(encoder.embed_dim)
        self.textual = TextualAdapter(encoder.text_width, prompt_length)
        self.seg_head = SegmentationHead(width)
        self.global_head = GlobalScoreHead(width)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})


def _resize_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Nearest-neighbour downsample that keeps the mask strictly binary."""
    return F.interpolate(mask[None, None].float(), size=(size, size), mode="nearest")[0, 0]


def compute_branch_losses(
    query_feats: list[VisionFeatures],
    masks: list[torch.Tensor],
    labels: list[int],
    prompt_feats: list[VisionFeatures],
    adapters: AdapterSet,
    backbone: Backbone,
    cfg: TrainConfig,
    static_emb: ClassEmbeddings,
) -> dict[str, torch.Tensor]:
    """Per-branch mean losses over one batch of pre-encoded features."""
    losses: dict[str, torch.Tensor] = {}
    grid = query_feats[0].grid_shape[0]

    if cfg.uses_zero_shot_branches:
        learned_emb = adapters.textual.embeddings(backbone)
        if cfg.mode == "joint":
            pairs = [("joint", True, learned_emb)]
        else:
            pairs = [("visual", True, static_emb), ("textual", False, learned_emb)]
        for name, adapt, emb in pairs:
            terms = []
            for feats, mask, label in zip(query_feats, masks, labels):
                if adapt:
                    tokens = adapters.visual.adapt_tokens(feats.final_layer_tokens)
                    glob = adapters.visual.adapt_global(feats.global_token)
                else:
                    tokens, glob = feats.final_layer_tokens, feats.global_token
                pmap = score_pixels(tokens, emb, cfg.temperature, feats.grid_shape)
                pscore = score_image(glob, emb, cfg.temperature)
                terms.append(
                    cfg.ce_weight * classification_loss(pscore, label)
                    + segmentation_loss(pmap, _resize_mask(mask, grid), cfg)
                )
            losses[name] = torch.stack(terms).mean()

    if cfg.uses_pqa_branch:
        grids, pooled = [], []
        for feats, pf in zip(query_feats, prompt_feats):
            bank = bank_from_features([pf])
            jf = joint_feature(feats, bank, context=cfg.pqa_context)
            grids.append(jf.as_grid())
            pooled.append(pool_joint_feature(jf))
        batch_grid = torch.cat(grids, dim=0)
        out_size = grid * 4  # two 2x deconvolution blocks
        seg_maps = adapters.seg_head.anomaly_map(batch_grid, out_size)
        seg_masks = torch.stack([_resize_mask(m, out_size) for m in masks])
        global_logits = adapters.global_head(torch.stack(pooled))
        global_probs = torch.softmax(global_logits, dim=1)[:, 1]
        terms = []
        for i, label in enumerate(labels):
            terms.append(
                cfg.ce_weight * classification_loss(global_probs[i], label)
                + segmentation_loss(seg_maps[i], seg_masks[i], cfg)
            )
        losses["pqa"] = torch.stack(terms).mean()

    losses["total"] = torch.stack([v for k, v in losses.items() if k != "total"]).sum()
    return losses


def train_step(
    batch: TrainBatch,
    adapters: AdapterSet,
    backbone: Backbone,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    static_emb: ClassEmbeddings,
    step_index: int = 0,
) -> dict[str, float]:
    """One optimizer update over a batch; returns the per-branch loss report."""
    query_feats = [backbone.encode_image(img) for img in batch.query_images]
    prompt_feats = (
        [backbone.encode_image(img) for img in batch.prompt_images]
        if cfg.uses_pqa_branch
        else [None] * len(batch.query_images)
    )
    masks = [torch.as_tensor(np.asarray(m)) for m in batch.pixel_masks]
    losses = compute_branch_losses(
        query_feats, masks, batch.image_labels, prompt_feats, adapters, backbone, cfg, static_emb
    )
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise TrainingDivergedError(f"non-finite {name} loss at step {step_index}")
    optimizer.zero_grad()
    losses["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def fit(dataset, cfg: TrainConfig, backbone: Backbone) -> Checkpoint:
    """Train all adapters on the dataset's train split; reproducible per seed."""
    samples = _train_samples(dataset)
    resolution = backbone.config.input_resolution
    labels = [s.label for s in samples]
    if 1 not in labels:
        raise ProtocolError("training data has no anomalous samples; losses degenerate")
    if 0 not in labels:
        raise ProtocolError("training data has no normal samples; prompt pairing impossible")

    torch.manual_seed(cfg.seed)
    rng = np.random.RandomState(cfg.seed)
    adapters = AdapterSet(backbone.config, cfg.prompt_length)
    optimizer = torch.optim.Adam(adapters.parameters(), lr=cfg.learning_rate)
    static_emb = backbone.encode_static_text(cfg.normal_templates, cfg.abnormal_templates)

    loaded = [load_and_resize(s, resolution) for s in samples]
    features = [backbone.encode_image(img) for img, _ in loaded]
    masks = [torch.as_tensor(mask) for _, mask in loaded]
    normals_by_cat: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        if s.label == 0:
            normals_by_cat.setdefault(s.category, []).append(i)
    for s in samples:
        if s.category not in normals_by_cat:
            raise ProtocolError(f"category {s.category!r} has no normal training images")

    history: list[dict] = []
    step_index = 0
    adapters.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            prompt_idx = [_pick_prompt(rng, normals_by_cat[samples[i].category], i) for i in idx]
            losses = compute_branch_losses(
                [features[i] for i in idx],
                [masks[i] for i in idx],
                [samples[i].label for i in idx],
                [features[j] for j in prompt_idx],
                adapters,
                backbone,
                cfg,
                static_emb,
            )
            for name, value in losses.items():
                if not torch.isfinite(value):
                    raise TrainingDivergedError(f"non-finite {name} loss at step {step_index}")
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            for name, value in losses.items():
                sums[name] = sums.get(name, 0.0) + float(value.detach())
            batches += 1
            step_index += 1
        epoch_losses = {k: v / batches for k, v in sums.items()}
        history.append({"epoch": epoch, **epoch_losses})
        logger.info(
            "epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in epoch_losses.items())
        )
    adapters.eval()

    return Checkpoint(
        arrays=adapters.state_arrays(),
        train_config=_config_dict(cfg),
        backbone_id=backbone.name,
        backbone_config=backbone.describe(),
        seed=cfg.seed,
        version=__version__,
        history=history,
    )


def _train_samples(dataset) -> list[Sample]:
    if isinstance(dataset, DatasetSpec):
        dataset = scan(dataset)
    train = [s for s in dataset if s.split == "train"]
    if not train:
        raise ProtocolError("dataset has no train-split samples")
    return train


def _pick_prompt(rng: np.random.RandomState, pool: list[int], query_index: int) -> int:
    candidates = [i for i in pool if i != query_index]
    if not candidates:
        candidates = pool  # single-normal category: the query is its own prompt
    return candidates[rng.randint(len(candidates))]


def _config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["normal_templates"] = list(cfg.normal_templates)
    out["abnormal_templates"] = list(cfg.abnormal_templates)
    return out


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    for key in ("normal_templates", "abnormal_templates"):
        if key in data:
            data[key] = tuple(data[key])
    return TrainConfig(**data)
