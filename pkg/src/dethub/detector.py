"""Query-adapted detector: backbone, query-based RPN, decoder stages, alignment scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import cxcywh_to_xyxy, xyxy_to_cxcywh
from .errors import ConfigError, DataError
from .queryhub import DetectionHub, DyConv, KernelGenerator, QueryInteraction, hub_adapt

STRIDES = (4, 8, 16, 32)
POOL_SIZE = 7
MIN_BOX = 1e-4
_MAX_DWH = math.log(1000.0 / 16)


@dataclass
class DetectorConfig:
    hidden_dim: int = 64
    feature_channels: int = 64
    backbone_width: int = 32
    backbone_depth: int = 2
    backbone_bias: bool = True
    num_queries: int = 300
    num_stages: int = 6
    heads: int = 8
    kernel_size: int = 3
    bottleneck_ratio: float = 0.25
    embed_dim: int = 64
    rpn_adaptation: bool = True
    decoder_adaptation: bool = True
    linear_test_mode: bool = False
    detach_boxes: bool = True

    @property
    def c_mid(self) -> int:
        return max(1, int(round(self.feature_channels * self.bottleneck_ratio)))


class Backbone(nn.Module):
    """Four-stage CNN with lateral 1x1 projections to a uniform channel count."""

    def __init__(self, width: int = 32, out_channels: int = 64, depth: int = 2, bias: bool = True):
        super().__init__()
        self.stem = nn.Conv2d(3, width, 3, stride=2, padding=1, bias=bias)
        stages, laterals = [], []
        c = width
        for i in range(4):
            c_out = width * 2 ** i
            layers = [nn.Conv2d(c, c_out, 3, stride=2, padding=1, bias=bias), nn.ReLU()]
            for _ in range(depth - 1):
                layers += [nn.Conv2d(c_out, c_out, 3, padding=1, bias=bias), nn.ReLU()]
            stages.append(nn.Sequential(*layers))
            laterals.append(nn.Conv2d(c_out, out_channels, 1, bias=bias))
            c = c_out
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(laterals)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = F.relu(self.stem(images))
        pyramid = []
        for stage, lateral in zip(self.stages, self.laterals):
            x = stage(x)
            pyramid.append(lateral(x))
        return pyramid


def extract_features(image: torch.Tensor, backbone: Backbone) -> list[torch.Tensor]:
    """Feature pyramid at strides 4, 8, 16, 32 for ``[3, H, W]`` or ``[B, 3, H, W]``."""
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    if x.shape[-1] < 32 or x.shape[-2] < 32:
        raise DataError(f"image {tuple(x.shape[-2:])} is smaller than 32x32")
    feats = backbone(x)
    return feats if batched else [f[0] for f in feats]


def pool_regions(pyramid: Sequence[torch.Tensor], boxes_xyxy: torch.Tensor,
                 image_size: tuple[int, int], size: int = POOL_SIZE) -> torch.Tensor:
    """Bilinear ``size x size`` region features, one pyramid level per box.

    ``boxes_xyxy`` is normalized ``[B, N, 4]``; returns ``[B, N, C, size, size]``.
    Levels follow the usual scale rule (canonical 224 px box at the stride-16 level).
    """
    b, n, _ = boxes_xyxy.shape
    h_img, w_img = image_size
    steps = (torch.arange(size, dtype=boxes_xyxy.dtype, device=boxes_xyxy.device) + 0.5) / size
    x1, y1, x2, y2 = boxes_xyxy.unbind(-1)
    xs = x1[..., None] + steps * (x2 - x1)[..., None]
    ys = y1[..., None] + steps * (y2 - y1)[..., None]
    grid = torch.stack(torch.broadcast_tensors(xs[:, :, None, :], ys[:, :, :, None]), dim=-1)
    grid = (grid * 2 - 1).reshape(b, n * size, size, 2)
    with torch.no_grad():
        scale = torch.sqrt(((x2 - x1) * w_img * (y2 - y1) * h_img).clamp(min=1e-6))
        level = torch.floor(4 + torch.log2(scale / 224.0)).clamp(2, 5).long() - 2
    out = None
    for i, feat in enumerate(pyramid):
        sampled = F.grid_sample(feat, grid, mode="bilinear", align_corners=False)
        sampled = sampled.view(b, -1, n, size, size).permute(0, 2, 1, 3, 4)
        sel = (level == i)[..., None, None, None].to(sampled.dtype)
        out = sampled * sel if out is None else out + sampled * sel
    return out


@dataclass
class ProposalSet:
    boxes: torch.Tensor          # [B, N, 4] normalized cxcywh
    object_features: torch.Tensor  # [B, N, d]
    degenerate: int = 0


def apply_deltas(boxes: torch.Tensor, deltas: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Shift/scale cxcywh boxes by ``(dx, dy, dw, dh)`` and clip to the unit square."""
    cx, cy, w, h = boxes.unbind(-1)
    dx, dy, dw, dh = deltas.unbind(-1)
    dw, dh = dw.clamp(max=_MAX_DWH), dh.clamp(max=_MAX_DWH)
    new = torch.stack([cx + dx * w, cy + dy * h, w * torch.exp(dw), h * torch.exp(dh)], -1)
    return clip_boxes(new)


def clip_boxes(boxes: torch.Tensor) -> tuple[torch.Tensor, int]:
    xyxy = cxcywh_to_xyxy(boxes).clamp(0.0, 1.0)
    x1, y1, x2, y2 = xyxy.unbind(-1)
    small = ((x2 - x1) < MIN_BOX) | ((y2 - y1) < MIN_BOX)
    degenerate = int(small.sum())
    if degenerate:
        x1 = torch.minimum(x1, torch.full_like(x1, 1 - MIN_BOX))
        y1 = torch.minimum(y1, torch.full_like(y1, 1 - MIN_BOX))
        x2 = torch.maximum(x2, x1 + MIN_BOX)
        y2 = torch.maximum(y2, y1 + MIN_BOX)
        xyxy = torch.stack([x1, y1, x2, y2], -1)
    return xyxy_to_cxcywh(xyxy), degenerate


class DecoderStage(nn.Module):
    """One refinement stage: pooled regions filtered by the queries' dynamic kernels."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        d, c = cfg.hidden_dim, cfg.feature_channels
        self.kernels = KernelGenerator(d, c, cfg.c_mid, c, k=cfg.kernel_size)
        self.dyconv = DyConv(cfg.c_mid, linear_test_mode=cfg.linear_test_mode)
        self.flatten = nn.Linear(c * POOL_SIZE * POOL_SIZE, d)
        self.obj_norm = nn.LayerNorm(d)
        self.cls_proj = nn.Linear(d, d)
        self.reg = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 4))
        self.update = nn.Linear(d, d)
        self.query_norm = nn.LayerNorm(d)
        nn.init.zeros_(self.reg[-1].weight)
        nn.init.zeros_(self.reg[-1].bias)
        self.linear_test_mode = cfg.linear_test_mode

    def forward(self, pyramid, boxes: torch.Tensor, queries: torch.Tensor, image_size):
        b, n, _ = boxes.shape
        regions = pool_regions(pyramid, cxcywh_to_xyxy(boxes), image_size)
        k1, k2 = self.kernels(queries)
        filtered = self.dyconv(regions, k1, k2)
        obj = self.flatten(filtered.flatten(2))
        if not self.linear_test_mode:
            obj = F.relu(self.obj_norm(obj))
        f_c = self.cls_proj(obj)
        new_boxes, degenerate = apply_deltas(boxes, self.reg(obj))
        next_queries = self.query_norm(queries + self.update(obj))
        return ProposalSet(new_boxes, obj, degenerate), f_c, next_queries


def decode_stage(pyramid, proposals: ProposalSet, q_star: torch.Tensor, stage: DecoderStage,
                 image_size) -> tuple[ProposalSet, torch.Tensor]:
    out, f_c, _ = stage(pyramid, proposals.boxes, q_star, image_size)
    return out, f_c


class QueryRPN(nn.Module):
    """Learnable proposal boxes refined once by a dynamic-convolution interaction."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.proposal_boxes = nn.Parameter(
            torch.tensor([0.5, 0.5, 1.0, 1.0]).repeat(cfg.num_queries, 1))
        self.stage = DecoderStage(cfg)

    def forward(self, pyramid, queries: torch.Tensor, image_size) -> tuple[ProposalSet, torch.Tensor]:
        b = queries.shape[0]
        boxes = self.proposal_boxes.unsqueeze(0).expand(b, -1, -1)
        boxes, _ = clip_boxes(boxes)
        proposals, _, next_queries = self.stage(pyramid, boxes, queries, image_size)
        return proposals, next_queries


def query_rpn(pyramid, q_star: torch.Tensor, rpn: QueryRPN, image_size) -> ProposalSet:
    squeeze = q_star.dim() == 2
    if squeeze:
        q_star = q_star.unsqueeze(0)
        pyramid = [p.unsqueeze(0) for p in pyramid]
    proposals, _ = rpn(pyramid, q_star, image_size)
    if squeeze:
        proposals = ProposalSet(proposals.boxes[0], proposals.object_features[0], proposals.degenerate)
    return proposals


def align_logits(f_c: torch.Tensor, f_e: torch.Tensor) -> torch.Tensor:
    if f_c.shape[-1] != f_e.shape[-1]:
        raise ValueError(f"object features d={f_c.shape[-1]} != language features d={f_e.shape[-1]}")
    return f_c @ f_e.transpose(-1, -2)


def align_scores(f_c: torch.Tensor, f_e: torch.Tensor, valid_mask: torch.Tensor | None = None):
    """Region-word alignment ``sigmoid(F_C F_E^T)``; pad tokens score 0."""
    s = torch.sigmoid(align_logits(f_c, f_e))
    if valid_mask is not None:
        s = s * valid_mask.unsqueeze(-2).to(s.dtype)
    return s


def pool_category_scores(token_scores: torch.Tensor, category_tokens: torch.Tensor) -> torch.Tensor:
    """Mean token score over each category's span; truncated categories score 0.

    ``category_tokens`` is the binary ``[C, T]`` span map.
    """
    counts = category_tokens.sum(-1)
    pooled = token_scores @ category_tokens.transpose(-1, -2).to(token_scores.dtype)
    return pooled / counts.clamp(min=1).to(token_scores.dtype)


@dataclass
class StageOutput:
    boxes: torch.Tensor   # [B, N, 4] normalized cxcywh
    logits: torch.Tensor  # [B, N, T] alignment logits


@dataclass
class ForwardOutput:
    stages: list[StageOutput]
    rpn_boxes: torch.Tensor
    degenerate_boxes: int = 0


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        if cfg.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        self.cfg = cfg
        d = cfg.hidden_dim
        self.backbone = Backbone(cfg.backbone_width, cfg.feature_channels, cfg.backbone_depth,
                                 cfg.backbone_bias)
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, d) * 0.5)
        self.hub = DetectionHub(d, cfg.embed_dim, cfg.heads)
        self.interaction = QueryInteraction(d, cfg.heads)
        self.rpn = QueryRPN(cfg)
        self.stages = nn.ModuleList(DecoderStage(cfg) for _ in range(cfg.num_stages))

    @property
    def adapts(self) -> bool:
        return self.cfg.rpn_adaptation or self.cfg.decoder_adaptation

    def adapted_queries(self, E: torch.Tensor, valid_mask: torch.Tensor | None = None):
        """``Q*`` for a batch of embeddings ``E [B, T, e]``."""
        return self.interaction(hub_adapt(self.queries, E, self.hub, valid_mask))

    def forward(self, images: torch.Tensor, E: torch.Tensor, F_E: torch.Tensor,
                valid_mask: torch.Tensor) -> ForwardOutput:
        b = images.shape[0]
        image_size = tuple(images.shape[-2:])
        pyramid = extract_features(images, self.backbone)
        plain = self.queries.unsqueeze(0).expand(b, -1, -1)
        q_star = self.adapted_queries(E, valid_mask) if self.adapts else None
        rpn_q = q_star if self.cfg.rpn_adaptation else plain
        proposals, rpn_next = self.rpn(pyramid, rpn_q, image_size)
        queries = q_star if self.cfg.decoder_adaptation else plain
        if self.cfg.rpn_adaptation == self.cfg.decoder_adaptation:
            queries = rpn_next
        boxes = proposals.boxes
        degenerate = proposals.degenerate
        outputs = []
        for stage in self.stages:
            if self.cfg.detach_boxes:
                boxes = boxes.detach()
            prop, f_c, queries = stage(pyramid, boxes, queries, image_size)
            boxes = prop.boxes
            degenerate += prop.degenerate
            logits = align_logits(f_c, F_E)
            outputs.append(StageOutput(boxes, logits))
        return ForwardOutput(outputs, proposals.boxes, degenerate)


@dataclass
class DetectionOutput:
    boxes: np.ndarray           # [N, 4] absolute xyxy pixels
    token_scores: np.ndarray    # [N, T]
    category_scores: np.ndarray  # [N, C]
    source_dataset: str
    per_stage_outputs: list = field(default_factory=list)


def embedding_tensors(embedding, device=None, dtype=torch.float32):
    return (torch.tensor(np.asarray(embedding.E), dtype=dtype, device=device),
            torch.tensor(np.asarray(embedding.F_E), dtype=dtype, device=device),
            torch.tensor(np.asarray(embedding.valid_mask), device=device))


@torch.no_grad()
def predict(image: torch.Tensor, dataset, model: Detector, known_datasets=None) -> DetectionOutput:
    """Run the detector on one ``[3, H, W]`` image conditioned on ``dataset``.

    ``dataset`` supplies ``name``, ``prompt`` and ``embedding``. If
    ``known_datasets`` is given, names outside it are rejected.
    """
    if known_datasets is not None and dataset.name not in known_datasets:
        raise DataError(f"unknown dataset {dataset.name!r}")
    E, F_E, mask = embedding_tensors(dataset.embedding, device=image.device,
                                     dtype=next(model.parameters()).dtype)
    out = model(image.unsqueeze(0), E[None], F_E[None], mask[None])
    h, w = image.shape[-2:]
    scale = torch.tensor([w, h, w, h], dtype=image.dtype)
    cat_tokens = torch.as_tensor(dataset.prompt.category_token_matrix())
    stages = []
    for st in out.stages:
        tok = align_scores_from_logits(st.logits[0], mask)
        stages.append({"boxes": (cxcywh_to_xyxy(st.boxes[0]) * scale).numpy(),
                       "token_scores": tok.numpy()})
    final = out.stages[-1]
    token_scores = align_scores_from_logits(final.logits[0], mask)
    return DetectionOutput(
        boxes=(cxcywh_to_xyxy(final.boxes[0]) * scale).numpy(),
        token_scores=token_scores.numpy(),
        category_scores=pool_category_scores(token_scores, cat_tokens.to(token_scores.dtype)).numpy(),
        source_dataset=dataset.name,
        per_stage_outputs=stages,
    )


def align_scores_from_logits(logits: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits) * valid_mask.to(logits.dtype)


def top_detections(output: DetectionOutput, top_k: int = 100, categories: Sequence[str] | None = None):
    """Top-k (query, category) pairs by category score, as dicts."""
    scores = output.category_scores
    flat = scores.ravel()
    k = min(top_k, flat.size)
    if k == 0:
        return []
    idx = np.argsort(-flat, kind="stable")[:k]
    dets = []
    for i in idx:
        q, c = divmod(int(i), scores.shape[1])
        dets.append({
            "category": categories[c] if categories is not None else c,
            "category_index": c,
            "score": float(flat[i]),
            "box": [float(v) for v in output.boxes[q]],
        })
    return dets
