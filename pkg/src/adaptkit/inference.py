"""Zero-/few-shot prediction with branch fusion and map export.

Zero-shot fuses the visual-adapter and textual-adapter branches; few-shot
adds the prompt-query branch. Branch maps are bilinearly interpolated to
the input resolution *before* averaging, and the fused outputs are the
exact arithmetic mean of the stored per-branch outputs.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .adapters import score_image, score_pixels
from .backbone import Backbone, restore_backend
from .checkpoint import Checkpoint
from .errors import ArgumentError, CheckpointError, DataError
from .prompt_query import PromptBank, build_prompt_bank, global_score, joint_feature, segment
from .training import AdapterSet, config_from_dict

ZERO_SHOT_PARAMS = ("visual.", "textual.")
FEW_SHOT_PARAMS = ZERO_SHOT_PARAMS + ("seg_head.", "global_head.")


@dataclass
class Prediction:
    """Fused anomaly score and map plus the per-branch outputs behind them."""

    score: float
    map: np.ndarray  # [res, res] float32 in [0, 1]
    shots: int
    path: str | None = None
    branch_scores: dict[str, float] = field(default_factory=dict)
    branch_maps: dict[str, np.ndarray] = field(default_factory=dict)


class Predictor:
    """Checkpoint + backbone bound together for repeated inference."""

    def __init__(self, checkpoint: Checkpoint, backbone: Backbone | None = None):
        self.backbone = backbone or restore_backend(
            checkpoint.backbone_id, checkpoint.backbone_config
        )
        self.cfg = config_from_dict(checkpoint.train_config)
        checkpoint.require(ZERO_SHOT_PARAMS)
        self.adapters = AdapterSet(self.backbone.config, self.cfg.prompt_length)
        self.adapters.load_arrays(checkpoint.arrays)
        self.adapters.eval()
        self._has_pqa = all(
            any(name.startswith(p) for name in checkpoint.arrays) for p in FEW_SHOT_PARAMS
        )
        with torch.no_grad():
            self.static_emb = self.backbone.encode_static_text(
                self.cfg.normal_templates, self.cfg.abnormal_templates
            )
            self.learned_emb = self.adapters.textual.embeddings(self.backbone)

    def zero_shot(self, image, path: str | None = None) -> Prediction:
        with torch.no_grad():
            feats = self.backbone.encode_image(image)
            scores, maps = self._zero_shot_branches(feats)
        return _fuse(scores, maps, shots=0, path=path)

    def few_shot(self, image, bank: PromptBank, path: str | None = None) -> Prediction:
        if bank is None:
            raise ArgumentError("few-shot prediction needs a non-empty prompt bank")
        if not self._has_pqa:
            raise CheckpointError("checkpoint lacks prompt-query head parameters")
        res = self.backbone.config.input_resolution
        with torch.no_grad():
            feats = self.backbone.encode_image(image)
            scores, maps = self._zero_shot_branches(feats)
            jf = joint_feature(feats, bank, context=self.cfg.pqa_context)
            maps["pqa"] = segment(jf, self.adapters.seg_head, res).numpy().astype(np.float32)
            scores["pqa"] = float(global_score(jf, self.adapters.global_head))
        return _fuse(scores, maps, shots=bank.k, path=path)

    def _zero_shot_branches(self, feats):
        """Branch scores/maps at input resolution. In joint mode both zero-shot
        branches collapse to one computation (adapted tokens vs learned prompts)."""
        res = self.backbone.config.input_resolution
        tau = self.cfg.temperature
        adapted_tokens = self.adapters.visual.adapt_tokens(feats.final_layer_tokens)
        adapted_global = self.adapters.visual.adapt_global(feats.global_token)
        if self.cfg.mode == "joint":
            routes = {
                "visual": (adapted_tokens, adapted_global, self.learned_emb),
                "textual": (adapted_tokens, adapted_global, self.learned_emb),
            }
        else:
            routes = {
                "visual": (adapted_tokens, adapted_global, self.static_emb),
                "textual": (feats.final_layer_tokens, feats.global_token, self.learned_emb),
            }
        scores: dict[str, float] = {}
        maps: dict[str, np.ndarray] = {}
        for name, (tokens, glob, emb) in routes.items():
            grid_map = score_pixels(tokens, emb, tau, feats.grid_shape)
            maps[name] = _to_resolution(grid_map, res)
            scores[name] = float(score_image(glob, emb, tau))
        return scores, maps

    def bank_for(self, prompt_images, k: int, class_id: str | None = None) -> PromptBank:
        with torch.no_grad():
            return build_prompt_bank(prompt_images, k, self.backbone, class_id)


def _to_resolution(grid_map: torch.Tensor, resolution: int) -> np.ndarray:
    up = F.interpolate(
        grid_map[None, None], size=(resolution, resolution), mode="bilinear", align_corners=False
    )[0, 0]
    return up.numpy().astype(np.float32)


def _fuse(scores: dict, maps: dict, shots: int, path: str | None) -> Prediction:
    names = sorted(maps)
    fused_map = maps[names[0]].copy()
    for name in names[1:]:
        fused_map = fused_map + maps[name]
    fused_map = fused_map / len(names)
    fused_score = sum(scores[n] for n in names) / len(names)
    return Prediction(
        score=fused_score,
        map=fused_map,
        shots=shots,
        path=path,
        branch_scores=dict(scores),
        branch_maps=dict(maps),
    )


def predict_zero_shot(image, checkpoint: Checkpoint, backbone: Backbone | None = None) -> Prediction:
    return Predictor(checkpoint, backbone).zero_shot(image)


def predict_few_shot(
    image, prompt_bank: PromptBank, checkpoint: Checkpoint, backbone: Backbone | None = None
) -> Prediction:
    return Predictor(checkpoint, backbone).few_shot(image, prompt_bank)


def predict_batch(
    images,
    bank: PromptBank | None,
    checkpoint: Checkpoint,
    workers: int = 1,
    backbone: Backbone | None = None,
    paths: list[str] | None = None,
) -> list[Prediction]:
    """Order-preserving batch prediction; results do not depend on worker count."""
    if workers < 1:
        raise ArgumentError("workers must be >= 1")
    if not images:
        return []
    predictor = Predictor(checkpoint, backbone)
    paths = paths or [None] * len(images)

    def run(item):
        index, (image, path) = item
        try:
            if bank is None:
                return predictor.zero_shot(image, path)
            return predictor.few_shot(image, bank, path)
        except Exception as exc:
            raise type(exc)(f"image index {index}: {exc}") from exc

    items = list(enumerate(zip(images, paths)))
    if workers == 1:
        return [run(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


def prediction_record(pred: Prediction) -> dict:
    return {
        "path": pred.path,
        "score": pred.score,
        "shots": pred.shots,
        "branch_scores": pred.branch_scores,
    }


def save_prediction_json(pred: Prediction, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prediction_record(pred), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_map_png(anomaly_map: np.ndarray, path: str) -> None:
    """8-bit grayscale export of a [0, 1] map."""
    gray = np.clip(np.round(anomaly_map * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path, format="PNG")


def save_overlay_png(image: np.ndarray, anomaly_map: np.ndarray, path: str, alpha: float = 0.5) -> None:
    """False-colour overlay of the map on the input image (same dimensions)."""
    if image.shape[:2] != anomaly_map.shape:
        raise DataError(
            f"image {image.shape[:2]} and map {anomaly_map.shape} dimensions differ"
        )
    heat = _jet(np.clip(anomaly_map, 0.0, 1.0))
    blended = (1.0 - alpha) * image + alpha * heat
    Image.fromarray(np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)).save(
        path, format="PNG"
    )


def _jet(values: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4.0 * values - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * values - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * values - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)
