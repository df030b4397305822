"""Full segmentation model: backbone stub, top-down neck, selection, fusion,
FCN heads, and the composite training objective.

Pipeline (training): image -> pyramid -> top-down enhance -> flatten ->
importance scores -> hard Gumbel decisions -> masked full-scale fusion per
scale -> upsample to stride 4 -> channel merge -> FCN head -> x4 upsample ->
logits.  Inference swaps the mask for a top-k gather and needs no sampling.
The ablation baseline keeps only the neck: enhanced levels resampled to
stride 8, a deeper FCN head, and no selection or fusion.

The auxiliary head reads the raw stage-3 backbone features and its loss is
weighted by `aux_weight`; the ratio loss pulls every score column's mean
toward `target_ratio`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import selection as selection_mod
from .fusion import FusionDiagnostics, MCAParams, ProjectionGenerator, fuse_all_scales
from .pyramid import (
    NUM_LEVELS,
    ConvStage,
    LateralSet,
    TokenSequence,
    ToyBackbone,
    extract_pyramid,
    rearrange,
    sequence_length,
    top_down_enhance,
)
from .selection import DecisionSet, ScoreMatrix, ScorerMLP, gumbel_sample, score, topk_select
from .tensor import (
    ConfigurationError,
    Tensor,
    concat,
    conv2d,
    cross_entropy,
    downsample_nearest,
    glorot_uniform,
    upsample_nearest,
    zeros_param,
)

IGNORE_INDEX = 255


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    num_classes: int = 4
    base_channels: int = 8
    common_dim: int = 32          # 256 mirrors the reference large-scale setting
    heads: int = 8
    target_ratio: float = 0.6
    ratio_weight: float = 0.4
    aux_weight: float = 0.4
    reduction_ratio: int = 4
    gumbel_temperature: float = 1.0
    use_projection_on: Tuple[int, ...] = (1,)
    eq5_literal: bool = False
    residual: bool = True
    merge: str = "concat"
    use_fff: bool = True
    use_sfs: bool = True
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.image_h % 32 or self.image_w % 32:
            raise ConfigurationError(f"image {self.image_h}x{self.image_w} not divisible by 32")
        if self.common_dim % self.heads:
            raise ConfigurationError(f"common_dim {self.common_dim} not divisible by heads {self.heads}")
        if not 0.0 < self.target_ratio <= 1.0:
            raise ConfigurationError(f"target_ratio {self.target_ratio} outside (0, 1]")
        if self.gumbel_temperature <= 0:
            raise ConfigurationError("gumbel_temperature must be > 0")
        if self.reduction_ratio < 1:
            raise ConfigurationError("reduction_ratio must be >= 1")
        if self.merge not in ("concat", "sum"):
            raise ConfigurationError(f"merge must be concat|sum, got {self.merge!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        bad = set(self.use_projection_on) - set(range(1, NUM_LEVELS + 1))
        if bad:
            raise ConfigurationError(f"use_projection_on has invalid scales {sorted(bad)}")
        if self.use_sfs and not self.use_fff:
            raise ConfigurationError("use_sfs requires use_fff (selection gates the fusion)")
        return self

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(image_h=32, image_w=32, num_classes=3, base_channels=4,
                    common_dim=16, heads=4)
        base.update(overrides)
        return cls(**base).validate()

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "use_projection_on" in data:
            data["use_projection_on"] = tuple(data["use_projection_on"])
        return cls(**data).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["use_projection_on"] = list(self.use_projection_on)
        return d

    def replace(self, **overrides) -> "ModelConfig":
        d = asdict(self)
        d.update(overrides)
        d["use_projection_on"] = tuple(d["use_projection_on"])
        return ModelConfig(**d).validate()


@dataclass
class ForwardResult:
    logits: Tensor
    aux_logits: Tensor
    scores: Optional[ScoreMatrix]
    decisions: Optional[DecisionSet]
    sequence: Optional[TokenSequence]
    fusion_diagnostics: FusionDiagnostics
    mode: str

    def keep_ratios(self) -> List[float]:
        if self.scores is None or self.decisions is None:
            return [1.0] * NUM_LEVELS
        L = self.sequence.length
        return [self.decisions.keep_ratio(i, L) for i in range(1, NUM_LEVELS + 1)]


class FCNHead:
    """3x3 conv stack (depth 1 or 2) with GELU, then a 1x1 classifier."""

    def __init__(self, in_ch: int, hidden: int, num_classes: int, depth: int,
                 rng: np.random.Generator, prefix: str):
        self.prefix = prefix
        self.convs: List[ConvStage] = []
        ch = in_ch
        for _ in range(depth):
            self.convs.append(ConvStage(
                weight=glorot_uniform(rng, (hidden, ch, 3, 3), ch * 9, hidden),
                bias=zeros_param((hidden,)),
                stride=1,
            ))
            ch = hidden
        self.classifier = ConvStage(
            weight=glorot_uniform(rng, (num_classes, ch, 1, 1), ch, num_classes),
            bias=zeros_param((num_classes,)),
            stride=1,
        )

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv2d(x, conv.weight, stride=1, pad=1) + conv.bias.reshape(-1, 1, 1)
            x = x.gelu()
        return conv2d(x, self.classifier.weight) + self.classifier.bias.reshape(-1, 1, 1)

    def parameters(self):
        for i, conv in enumerate(self.convs, start=1):
            yield f"{self.prefix}.conv{i}.weight", conv.weight
            yield f"{self.prefix}.conv{i}.bias", conv.bias
        yield f"{self.prefix}.classifier.weight", self.classifier.weight
        yield f"{self.prefix}.classifier.bias", self.classifier.bias


class SegmentationModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        C, D = config.base_channels, config.common_dim
        self.backbone = ToyBackbone.create(C, rng)
        self.laterals = LateralSet.create(C, D, rng)
        self.scorer = ScorerMLP.create(D, rng) if (config.use_sfs and config.use_fff) else None
        self.mca: List[MCAParams] = []
        self.generators: Dict[int, ProjectionGenerator] = {}
        if config.use_fff:
            self.mca = [MCAParams.create(D, config.heads, rng) for _ in range(NUM_LEVELS)]
            for scale in sorted(config.use_projection_on):
                n_tokens = (config.image_h // (2 ** (scale + 1))) * (config.image_w // (2 ** (scale + 1)))
                self.generators[scale] = ProjectionGenerator.create(
                    D, n_tokens, config.reduction_ratio, rng)
            merged = NUM_LEVELS * D if config.merge == "concat" else D
            self.head = FCNHead(merged, D, config.num_classes, depth=1, rng=rng, prefix="head")
        else:
            merged = NUM_LEVELS * D if config.merge == "concat" else D
            self.head = FCNHead(merged, D, config.num_classes, depth=2, rng=rng, prefix="head")
        self.aux_head = FCNHead(4 * C, D, config.num_classes, depth=1, rng=rng, prefix="aux_head")

    # -- parameter registry ------------------------------------------------
    def parameters(self):
        yield from self.backbone.parameters()
        yield from self.laterals.parameters()
        if self.scorer is not None:
            yield from self.scorer.parameters()
        for i, p in enumerate(self.mca, start=1):
            yield from p.parameters(f"mca.{i}")
        for scale in sorted(self.generators):
            yield from self.generators[scale].parameters(f"projection.{scale}")
        yield from self.head.parameters()
        yield from self.aux_head.parameters()

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        params = dict(self.parameters())
        if set(params) != set(arrays):
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            raise ConfigurationError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            if p.shape != arrays[name].shape:
                raise ConfigurationError(f"shape mismatch for {name}: {p.shape} vs {arrays[name].shape}")
            p.data[...] = arrays[name]

    def draw_gumbel_noise(self, rng: np.random.Generator) -> np.ndarray:
        L = sequence_length(self.config.image_h, self.config.image_w)
        return selection_mod.draw_gumbel_noise(rng, L)

    # -- forward --------------------------------------------------------------
    def forward(
        self,
        image: Tensor,
        mode: str = "train",
        rng: Optional[np.random.Generator] = None,
        hard_decisions: bool = True,
        gumbel_noise: Optional[np.ndarray] = None,
    ) -> ForwardResult:
        cfg = self.config
        if mode not in ("train", "infer"):
            raise ConfigurationError(f"mode must be train|infer, got {mode!r}")
        if image.shape != (3, cfg.image_h, cfg.image_w):
            raise ConfigurationError(
                f"image shape {image.shape} != configured (3, {cfg.image_h}, {cfg.image_w})")

        diagnostics = FusionDiagnostics()
        p = extract_pyramid(image, self.backbone, cfg.common_dim)
        top_down_enhance(p, self.laterals)
        seq = rearrange(p)

        scores: Optional[ScoreMatrix] = None
        decisions: Optional[DecisionSet] = None
        if cfg.use_fff:
            if cfg.use_sfs:
                scores = score(seq, self.scorer)
                if mode == "train":
                    decisions = gumbel_sample(
                        scores, cfg.gumbel_temperature, rng=rng,
                        noise=gumbel_noise, hard=hard_decisions)
                else:
                    decisions = topk_select(scores, cfg.target_ratio)
            else:
                if mode == "train":
                    ones = Tensor(np.ones((seq.length, NUM_LEVELS)))
                    decisions = DecisionSet(mode="training", Q=ones)
                else:
                    all_idx = [np.arange(seq.length, dtype=np.int64) for _ in range(NUM_LEVELS)]
                    decisions = DecisionSet(mode="inference", topk=all_idx)
            fused = fuse_all_scales(
                p, seq, decisions, self.mca, self.generators,
                residual=cfg.residual, literal=cfg.eq5_literal, diagnostics=diagnostics)
            maps = [f.feature_map for f in fused]
            at_stride4 = [maps[0]] + [upsample_nearest(maps[i], 2 ** i) for i in range(1, NUM_LEVELS)]
            merged = concat(at_stride4, axis=0) if cfg.merge == "concat" else _sum_maps(at_stride4)
            logits = upsample_nearest(self.head(merged), 4)
        else:
            enhanced = p.enhanced_levels
            at_stride8 = [downsample_nearest(enhanced[0], 2), enhanced[1],
                          upsample_nearest(enhanced[2], 2), upsample_nearest(enhanced[3], 4)]
            merged = concat(at_stride8, axis=0) if cfg.merge == "concat" else _sum_maps(at_stride8)
            logits = upsample_nearest(self.head(merged), 8)

        aux_logits = upsample_nearest(self.aux_head(p.raw_levels[2]), 16)
        return ForwardResult(
            logits=logits,
            aux_logits=aux_logits,
            scores=scores,
            decisions=decisions,
            sequence=seq,
            fusion_diagnostics=diagnostics,
            mode=mode,
        )


def _sum_maps(maps: List[Tensor]) -> Tensor:
    acc = maps[0]
    for m in maps[1:]:
        acc = acc + m
    return acc


def ratio_loss(P: Tensor, rho: float) -> Tensor:
    """Mean over scales of (rho - column mean)^2."""
    deviation = rho - P.mean(axis=0)
    return (deviation * deviation).mean()


def total_loss(result: ForwardResult, labels: np.ndarray, config: ModelConfig):
    """Composite objective and its per-term breakdown (floats)."""
    seg = cross_entropy(result.logits, labels, IGNORE_INDEX)
    aux = cross_entropy(result.aux_logits, labels, IGNORE_INDEX)
    total = seg + config.aux_weight * aux
    breakdown = {"seg": seg.item(), "aux": aux.item(), "ratio": 0.0}
    if result.scores is not None:
        ratio = ratio_loss(result.scores.P, config.target_ratio)
        total = total + config.ratio_weight * ratio
        breakdown["ratio"] = ratio.item()
    breakdown["total"] = total.item()
    return total, breakdown
