"""COCO-style mean average precision and per-dataset evaluation of a checkpoint."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..boxes import cxcywh_to_xyxy
from ..config import from_dict
from ..detector import DetectionOutput, pool_category_scores, top_detections
from ..errors import DataError, EmbedderMismatch
from ..taxonomy import DEFAULT_TOKENIZER
from .checkpoint import load_checkpoint
from .runtime import DatasetBundle, PromptResolver, build_model, image_tensor, load_dataset_dir

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, np.inf), "small": (0.0, 32.0 ** 2), "medium": (32.0 ** 2, 96.0 ** 2),
               "large": (96.0 ** 2, np.inf)}


@dataclass
class EvalReport:
    dataset: str
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    APs: float | None = None
    APm: float | None = None
    APl: float | None = None
    per_category: dict = field(default_factory=dict)
    num_images: int = 0
    num_predictions: int = 0
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / np.maximum(area_a[:, None] + area_b[None, :] - inter, 1e-12)


def _check_boxes(boxes: np.ndarray, what: str) -> None:
    if boxes.size and (not np.isfinite(boxes).all() or (boxes[:, 2] < boxes[:, 0]).any()
                       or (boxes[:, 3] < boxes[:, 1]).any()):
        raise DataError(f"malformed {what} box (expect finite x1 <= x2, y1 <= y2)")


def _match_image(dets: np.ndarray, scores: np.ndarray, gts: np.ndarray, gt_ignore: np.ndarray,
                 thr: float):
    """Greedy COCO matching for one image/category at one threshold.

    Returns per-detection (matched, ignored) flags in descending score order.
    """
    order = np.argsort(-scores, kind="mergesort")
    dets = dets[order]
    gt_order = np.argsort(gt_ignore, kind="mergesort")  # non-ignored ground truth first
    gts, gt_ignore = gts[gt_order], gt_ignore[gt_order]
    ious = _iou_matrix(dets, gts)
    taken = np.zeros(len(gts), dtype=bool)
    matched = np.zeros(len(dets), dtype=bool)
    ignored = np.zeros(len(dets), dtype=bool)
    for d in range(len(dets)):
        best, best_iou = -1, min(thr, 1 - 1e-10)
        for g in range(len(gts)):
            if taken[g]:
                continue
            if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                break
            if ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best > -1:
            taken[best] = True
            matched[d] = True
            ignored[d] = gt_ignore[best]
    return order, matched, ignored


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_pos: int) -> float:
    tp_c, fp_c = np.cumsum(tp), np.cumsum(fp)
    recall = tp_c / n_pos
    precision = tp_c / np.maximum(tp_c + fp_c, np.spacing(1))
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(sampled.mean())


def compute_map(predictions: Sequence[dict], ground_truths: Sequence[dict],
                categories: Sequence | None = None, iou_thresholds=IOU_THRESHOLDS,
                area_range: str = "all") -> dict:
    """Mean AP over categories, then over IoU thresholds.

    Predictions are dicts with ``image_id``, ``category``, ``score`` and ``box``
    (absolute x1, y1, x2, y2); ground truths carry ``image_id``, ``category``,
    ``box``. Categories without ground truth get AP ``None`` and are excluded
    from the mean.
    """
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    if categories is None:
        categories = sorted({g["category"] for g in ground_truths} | {p["category"] for p in predictions},
                            key=str)
    lo, hi = AREA_RANGES[area_range]
    per_cat = np.full((len(categories), len(thresholds)), np.nan)
    for ci, cat in enumerate(categories):
        gts_by_img: dict = {}
        for g in ground_truths:
            if g["category"] == cat:
                gts_by_img.setdefault(g["image_id"], []).append(g["box"])
        dets_by_img: dict = {}
        for p in predictions:
            if p["category"] == cat:
                dets_by_img.setdefault(p["image_id"], []).append((p["box"], p["score"]))
        gt_arrays = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts_by_img.items()}
        ignore = {}
        n_pos = 0
        for k, arr in gt_arrays.items():
            _check_boxes(arr, "ground-truth")
            area = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
            ignore[k] = (area < lo) | (area > hi)
            n_pos += int((~ignore[k]).sum())
        if n_pos == 0:
            continue
        for ti, thr in enumerate(thresholds):
            all_scores, all_tp, all_fp = [], [], []
            for img in set(dets_by_img) | set(gt_arrays):
                entries = dets_by_img.get(img, [])
                dets = np.asarray([e[0] for e in entries], dtype=np.float64).reshape(-1, 4)
                scores = np.asarray([e[1] for e in entries], dtype=np.float64)
                _check_boxes(dets, "predicted")
                gts = gt_arrays.get(img, np.zeros((0, 4)))
                gi = ignore.get(img, np.zeros(0, dtype=bool))
                order, matched, ign = _match_image(dets, scores, gts, gi, thr)
                d_area = (dets[order, 2] - dets[order, 0]) * (dets[order, 3] - dets[order, 1])
                out_of_range = (~matched) & ((d_area < lo) | (d_area > hi))
                keep = ~(ign | out_of_range)
                all_scores.append(scores[order][keep])
                all_tp.append(matched[keep])
                all_fp.append(~matched[keep])
            scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
            order = np.argsort(-scores, kind="mergesort")
            tp = np.concatenate(all_tp)[order] if all_tp else np.zeros(0, bool)
            fp = np.concatenate(all_fp)[order] if all_fp else np.zeros(0, bool)
            per_cat[ci, ti] = _interpolated_ap(tp.astype(float), fp.astype(float), n_pos) if len(tp) else 0.0

    def mean_at(mask):
        vals = per_cat[:, mask]
        valid = ~np.isnan(vals[:, 0]) if vals.size else np.zeros(0, bool)
        if not valid.any():
            return 0.0
        return float(np.mean(vals[valid].mean(axis=0)))

    all_thr = np.ones(len(thresholds), dtype=bool)
    result = {
        "AP": mean_at(all_thr),
        "per_category": {str(c): (None if np.isnan(per_cat[i, 0]) else float(per_cat[i].mean()))
                         for i, c in enumerate(categories)},
    }
    for name, value in (("AP50", 0.5), ("AP75", 0.75)):
        mask = np.isclose(thresholds, value)
        result[name] = mean_at(mask) if mask.any() else None
    return result


def report_from(predictions, ground_truths, categories, dataset: str, num_images: int,
                metadata: dict | None = None) -> EvalReport:
    main = compute_map(predictions, ground_truths, categories)
    sizes = {}
    for key, rng in (("APs", "small"), ("APm", "medium"), ("APl", "large")):
        r = compute_map(predictions, ground_truths, categories, area_range=rng)
        has_gt = any(v is not None for v in r["per_category"].values())
        sizes[key] = r["AP"] if has_gt else None
    return EvalReport(dataset=dataset, AP=main["AP"], AP50=main["AP50"], AP75=main["AP75"],
                      per_category=main["per_category"], num_images=num_images,
                      num_predictions=len(predictions), metadata=metadata or {}, **sizes)


@torch.no_grad()
def run_inference(model, bundle: DatasetBundle, resolver: PromptResolver, image_size: int,
                  top_k: int = 100, batch_size: int = 8) -> list[dict]:
    """Top-k detections for every image of ``bundle`` under its evaluation prompt."""
    model.eval()
    cond = resolver.dataset(bundle.name)
    E = torch.tensor(np.asarray(cond.embedding.E))
    F_E = torch.tensor(np.asarray(cond.embedding.F_E))
    mask = torch.tensor(np.asarray(cond.embedding.valid_mask))
    cat_tokens = cond.category_tokens[torch.as_tensor(cond.label_map)]
    categories = bundle.descriptor.categories
    preds = []
    records = bundle.records
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        tensors, scales = [], []
        for rec in chunk:
            img = bundle.image(rec.image_id)
            t, _, _ = image_tensor(img, image_size)
            tensors.append(t)
            h, w = img.shape[:2]
            scales.append(torch.tensor([w, h, w, h], dtype=torch.float32))
        n = len(chunk)
        out = model(torch.stack(tensors), E.expand(n, -1, -1), F_E.expand(n, -1, -1),
                    mask.expand(n, -1))
        final = out.stages[-1]
        token_scores = torch.sigmoid(final.logits) * mask.to(final.logits.dtype)
        cat_scores = pool_category_scores(token_scores, cat_tokens)
        boxes = cxcywh_to_xyxy(final.boxes)
        for i, rec in enumerate(chunk):
            scale = scales[i]
            result = DetectionOutput(
                boxes=(boxes[i] * scale).numpy(), token_scores=token_scores[i].numpy(),
                category_scores=cat_scores[i].numpy(), source_dataset=bundle.name)
            for det in top_detections(result, top_k, categories):
                det["image_id"] = rec.image_id
                det["dataset"] = bundle.name
                preds.append(det)
    return preds


def ground_truth_list(bundle: DatasetBundle) -> list[dict]:
    cats = bundle.descriptor.categories
    return [{"image_id": r.image_id, "category": cats[int(l)], "box": [float(v) for v in b]}
            for r in bundle.records for b, l in zip(r.boxes, r.labels)]


def evaluate(checkpoint, dataset, split: str | None = None, top_k: int | None = None,
             embedder_id: str | None = None, predictions_path=None) -> EvalReport:
    """Evaluate a checkpoint on one dataset using only that dataset's descriptor.

    ``dataset`` is a `DatasetBundle` or a dataset directory. ``embedder_id``
    (if given) must equal the checkpoint's.
    """
    state, manifest = load_checkpoint(checkpoint)
    cfg = from_dict(manifest["config"])
    if embedder_id is not None and embedder_id != manifest["embedder_id"]:
        raise EmbedderMismatch(
            f"dataset embedder {embedder_id!r} != checkpoint embedder {manifest['embedder_id']!r}")
    if manifest.get("tokenizer") != DEFAULT_TOKENIZER.name:
        raise EmbedderMismatch(f"checkpoint tokenizer {manifest.get('tokenizer')!r} is not available")
    if not isinstance(dataset, DatasetBundle):
        dataset = load_dataset_dir(dataset, split or cfg.eval.split, cfg)
    if dataset.descriptor.embedding.embedder_id != manifest["embedder_id"]:
        raise EmbedderMismatch(
            f"dataset {dataset.name!r} embedded with {dataset.descriptor.embedding.embedder_id!r}, "
            f"checkpoint expects {manifest['embedder_id']!r}")
    if dataset.descriptor.prompt.max_length != cfg.prompt.max_length:
        raise DataError("dataset prompt length differs from the checkpoint's prompt.max_length")
    model = build_model(cfg)
    model.load_state_dict(state["model"])
    global_cats = manifest.get("global_categories") if cfg.adaptation.mode == "global-embedding" else None
    if global_cats is not None:
        missing = [c for c in dataset.descriptor.categories if c not in global_cats]
        if missing:
            raise DataError(f"global-embedding checkpoint has no categories {missing}")
    resolver = PromptResolver(cfg, [dataset.descriptor], global_categories=global_cats)
    preds = run_inference(model, dataset, resolver, cfg.train.image_size, top_k or cfg.eval.top_k)
    if predictions_path is not None:
        write_predictions(predictions_path, preds)
    meta = {"checkpoint_step": manifest["step"], "config_hash": manifest["config_hash"],
            "embedder_id": manifest["embedder_id"], "adaptation_mode": cfg.adaptation.mode}
    return report_from(preds, ground_truth_list(dataset), dataset.descriptor.categories,
                       dataset.name, len(dataset.records), meta)


def write_predictions(path, predictions: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in predictions:
            f.write(json.dumps({"image_id": p["image_id"], "dataset": p["dataset"],
                                "category": p["category"], "score": p["score"],
                                "box": p["box"]}) + "\n")
