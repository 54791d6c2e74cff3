"""Joint multi-dataset training loop with step-decay schedule, metrics log and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from ..config import TrainConfig
from ..data import SamplerSource, make_sampler_plan
from ..errors import ConfigError, NumericError
from ..losses import LossWeights, total_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .runtime import (
    DatasetBundle,
    PromptResolver,
    build_model,
    frozen_embedder,
    image_tensor,
    load_dataset_dir,
    normalized_gt,
)

logger = logging.getLogger(__name__)


def lr_at(step: int, total_steps: int, base_lr: float, milestones: Sequence[float],
          gamma: float = 0.1) -> float:
    """Step-decayed learning rate; ``step`` is 0-based."""
    passed = sum(step >= milestone_step(m, total_steps) for m in milestones)
    return base_lr * gamma ** passed


def milestone_step(fraction: float, total_steps: int) -> int:
    return int(round(fraction * total_steps))


def loss_weights(cfg: TrainConfig) -> LossWeights:
    lc = cfg.loss
    return LossWeights(align=lc.align_weight, l1=lc.l1_weight, giou=lc.giou_weight,
                       cost_class=lc.cost_class, cost_l1=lc.cost_l1, cost_giou=lc.cost_giou,
                       focal_gamma=lc.focal_gamma)


def batch_stream(bundles: Sequence[DatasetBundle], cfg: TrainConfig) -> Iterator[list]:
    """Endless stream of batches; epoch ``e`` reshuffles with seed ``sampler.seed + e``."""
    sources = [SamplerSource(b.name, b.records, b.descriptor.category_frequencies) for b in bundles]
    epoch = 0
    while True:
        plan = make_sampler_plan(sources, cfg.train.batch_size, cfg.sampler.seed + epoch,
                                 cfg.sampler.balancing, cfg.sampler.rebalance_threshold,
                                 cfg.sampler.homogeneous_batches)
        yield from plan.batches()
        epoch += 1


def set_determinism(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.train.seed)
    np.random.seed(cfg.train.seed)
    if cfg.train.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def prepare_batch(batch, bundles: dict[str, DatasetBundle], resolver: PromptResolver, size: int):
    images, E, F_E, masks, items = [], [], [], [], []
    for name, image_id in batch:
        bundle = bundles[name]
        rec = bundle.record(image_id)
        img, sx, sy = image_tensor(bundle.image(image_id), size)
        cond = resolver.for_record(name, rec)
        labels = cond.label_map[rec.labels] if len(rec.labels) else np.zeros(0, dtype=np.int64)
        h, w = bundle.image(image_id).shape[:2]
        gt = normalized_gt(rec, labels, (h, w))
        images.append(img)
        E.append(torch.tensor(np.asarray(cond.embedding.E)))
        F_E.append(torch.tensor(np.asarray(cond.embedding.F_E)))
        masks.append(torch.tensor(np.asarray(cond.embedding.valid_mask)))
        items.append((gt, cond))
    return torch.stack(images), torch.stack(E), torch.stack(F_E), torch.stack(masks), items


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_path: Path
    final_loss: float
    embedder_fingerprint_start: str
    embedder_fingerprint_end: str
    steps: int


def _batch_loss(out, items, weights: LossWeights):
    losses, parts = [], {"align": 0.0, "l1": 0.0, "giou": 0.0}
    for b, (gt, cond) in enumerate(items):
        stage_outputs = [(st.logits[b], st.boxes[b]) for st in out.stages]
        loss, br = total_loss(stage_outputs, gt, cond.category_tokens,
                              torch.tensor(np.asarray(cond.embedding.valid_mask)), weights,
                              rpn_boxes=out.rpn_boxes[b])
        losses.append(loss)
        for k in parts:
            parts[k] += br[k] / len(items)
    return torch.stack(losses).mean(), parts


def train(cfg: TrainConfig, out_dir: str | Path, bundles: Sequence[DatasetBundle] | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Train one model on every dataset in ``bundles`` (or ``cfg.datasets``)."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if bundles is None:
        if not cfg.datasets:
            raise ConfigError("no datasets configured")
        bundles = [load_dataset_dir(p, "train", cfg) for p in cfg.datasets]
    by_name = {b.name: b for b in bundles}
    if len(by_name) != len(bundles):
        raise ConfigError("dataset names must be unique")
    set_determinism(cfg)
    embedder = frozen_embedder(cfg)
    fp_start = embedder.fingerprint()
    model = build_model(cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optimizer.lr,
                            weight_decay=cfg.optimizer.weight_decay)
    resolver = PromptResolver(cfg, [b.descriptor for b in bundles])
    start_step = 0
    if resume is not None:
        state, manifest = load_checkpoint(resume)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        start_step = manifest["step"]
        if manifest["total_steps"] != cfg.train.steps:
            raise ConfigError("resume requires the same train.steps as the checkpoint")
    weights = loss_weights(cfg)
    total = cfg.train.steps
    milestone_steps = {milestone_step(m, total) for m in cfg.optimizer.milestones}
    stream = batch_stream(bundles, cfg)
    for _ in range(start_step):
        next(stream)
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    last_loss = math.nan
    ckpt_dir = None
    t0 = time.time()
    with open(metrics_path, mode, encoding="utf-8") as log:
        for step in range(start_step, total):
            lr = lr_at(step, total, cfg.optimizer.lr, cfg.optimizer.milestones, cfg.optimizer.gamma)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = next(stream)
            images, E, F_E, masks, items = prepare_batch(batch, by_name, resolver, cfg.train.image_size)
            out = model(images, E, F_E, masks)
            loss, parts = _batch_loss(out, items, weights)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at step {step + 1}: {parts}, batch={batch}, lr={lr}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optimizer.grad_clip)
            opt.step()
            last_loss = float(loss.detach())
            done = step + 1
            if (done % cfg.train.log_every == 0 or step == start_step or done == total
                    or step in milestone_steps):
                tags: dict[str, int] = {}
                for name, _ in batch:
                    tags[name] = tags.get(name, 0) + 1
                log.write(json.dumps({
                    "step": done, "lr": lr, "loss_total": last_loss,
                    "loss_align": parts["align"], "loss_l1": parts["l1"], "loss_giou": parts["giou"],
                    "grad_norm": float(grad_norm), "degenerate_boxes": out.degenerate_boxes,
                    "datasets": tags, "elapsed": round(time.time() - t0, 3),
                }) + "\n")
                log.flush()
            at_milestone = done in milestone_steps
            periodic = cfg.train.checkpoint_every and done % cfg.train.checkpoint_every == 0
            if at_milestone or periodic or done == total:
                ckpt_dir = save_checkpoint(out_dir, model, opt, cfg, done, bundles, resolver,
                                           embedder, fp_start)
    fp_end = embedder.fingerprint()
    if fp_end != fp_start:
        raise NumericError("frozen embedder changed during training")
    if ckpt_dir is None:
        ckpt_dir = save_checkpoint(out_dir, model, opt, cfg, total, bundles, resolver, embedder, fp_start)
    return TrainResult(ckpt_dir, metrics_path, last_loss, fp_start, fp_end, total)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]

