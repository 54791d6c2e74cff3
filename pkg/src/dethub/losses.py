"""Set matching, region-word alignment loss and box losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .boxes import cxcywh_to_xyxy, elementwise_giou, pairwise_giou
from .detector import pool_category_scores
from .errors import DataError, NumericError


@dataclass
class LossWeights:
    align: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    cost_class: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    eps: float = 1e-7
    focal_gamma: float = 0.0


@dataclass
class CostMatrix:
    costs: np.ndarray
    components: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.costs.shape


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int]

    @property
    def num_queries(self) -> int:
        return len(self.pairs) + len(self.unmatched_queries)

    def per_query(self) -> list[int | None]:
        out: list[int | None] = [None] * self.num_queries
        for q, g in self.pairs:
            out[q] = g
        return out

    @property
    def query_index(self) -> list[int]:
        return [q for q, _ in sorted(self.pairs, key=lambda p: p[1])]

    @property
    def gt_index(self) -> list[int]:
        return sorted(g for _, g in self.pairs)


@torch.no_grad()
def matching_cost(category_scores, pred_boxes, gt_labels, gt_boxes,
                  lambda_cls: float = 2.0, lambda_l1: float = 5.0,
                  lambda_giou: float = 2.0) -> CostMatrix:
    """Pairwise query-to-object cost.

    ``category_scores`` is ``[N_q, C]`` in [0, 1] (or None to drop the class
    term); boxes are normalized cxcywh ``[N_q, 4]`` and ``[N_gt, 4]``.
    """
    pred_boxes = torch.as_tensor(pred_boxes, dtype=torch.float64)
    gt_boxes = torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4)
    n_q, n_gt = pred_boxes.shape[0], gt_boxes.shape[0]
    bad = ~torch.isfinite(pred_boxes).all(-1)
    if bad.any():
        raise NumericError(f"non-finite predicted boxes at queries {bad.nonzero().flatten().tolist()}")
    if not torch.isfinite(gt_boxes).all():
        raise NumericError("non-finite ground-truth boxes")
    labels = torch.as_tensor(np.asarray(gt_labels), dtype=torch.long).reshape(-1)
    if category_scores is not None and n_gt:
        scores = torch.as_tensor(category_scores, dtype=torch.float64)
        if not torch.isfinite(scores).all():
            rows = (~torch.isfinite(scores)).any(-1).nonzero().flatten().tolist()
            raise NumericError(f"non-finite category scores at queries {rows}")
        cls = 1.0 - scores[:, labels]
    else:
        cls = torch.zeros(n_q, n_gt, dtype=torch.float64)
    l1 = torch.cdist(pred_boxes, gt_boxes, p=1) if n_gt else torch.zeros(n_q, 0, dtype=torch.float64)
    giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt_boxes))
    costs = lambda_cls * cls + lambda_l1 * l1 + lambda_giou * giou
    return CostMatrix(costs.numpy(), {"class": cls.numpy(), "l1": l1.numpy(), "giou": giou.numpy()})


def _optimal_total(c: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum())


def hungarian_match(costs: CostMatrix | np.ndarray, tie_break: bool = True) -> Assignment:
    """Minimum-cost one-to-one assignment of every object to a query.

    Among equal-cost optima the pair list sorted by object is lexicographically
    smallest in query index.
    """
    c = np.asarray(costs.costs if isinstance(costs, CostMatrix) else costs, dtype=np.float64)
    n_q, n_gt = c.shape
    if n_gt > n_q:
        raise DataError("more objects than queries")
    if n_gt == 0:
        return Assignment([], list(range(n_q)))
    ct = c.T  # objects x queries
    rows, cols = linear_sum_assignment(ct)
    chosen = dict(zip(rows.tolist(), cols.tolist()))
    if tie_break:
        best = float(ct[rows, cols].sum())
        tol = 1e-9 * max(1.0, abs(best))
        big = np.abs(ct).sum() + 1.0
        forced = ct.copy()
        for g in range(n_gt):
            for q in range(chosen[g]):
                if np.isinf(forced[g, q]) or forced[g, q] >= big:
                    continue
                trial = forced.copy()
                trial[g, :] = big
                trial[:, q] = big
                trial[g, q] = ct[g, q]
                if _optimal_total(trial) <= best + tol:
                    break
            else:
                q = chosen[g]
            forced[g, :] = big
            forced[:, q] = big
            forced[g, q] = ct[g, q]
            r2, c2 = linear_sum_assignment(forced)
            chosen = dict(zip(r2.tolist(), c2.tolist()))
    pairs = sorted((q, g) for g, q in chosen.items())
    used = {q for q, _ in pairs}
    return Assignment(pairs, [q for q in range(n_q) if q not in used])


def _masked_mean_over_queries(per_token: torch.Tensor, valid_mask) -> torch.Tensor:
    if valid_mask is not None:
        mask = torch.as_tensor(valid_mask, device=per_token.device)
        per_token = per_token * mask.unsqueeze(-2).to(per_token.dtype)
    return per_token.sum(-1).mean()


def alignment_loss(S, T_hat, valid_mask=None, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy summed over valid tokens, averaged over queries."""
    S = torch.as_tensor(S)
    T_hat = torch.as_tensor(T_hat, dtype=S.dtype)
    if S.shape != T_hat.shape:
        raise ValueError(f"scores {tuple(S.shape)} and targets {tuple(T_hat.shape)} differ")
    s = S.clamp(eps, 1 - eps)
    bce = -(T_hat * torch.log(s) + (1 - T_hat) * torch.log(1 - s))
    return _masked_mean_over_queries(bce, valid_mask)


def alignment_loss_from_logits(logits: torch.Tensor, T_hat, valid_mask=None,
                               focal_gamma: float = 0.0) -> torch.Tensor:
    """Same objective as `alignment_loss`, evaluated stably on pre-sigmoid logits.

    ``focal_gamma > 0`` switches on focal reweighting; 0 is plain BCE.
    """
    T_hat = torch.as_tensor(T_hat, dtype=logits.dtype)
    if logits.shape != T_hat.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(T_hat.shape)} differ")
    bce = F.binary_cross_entropy_with_logits(logits, T_hat, reduction="none")
    if focal_gamma:
        p = torch.sigmoid(logits)
        p_t = p * T_hat + (1 - p) * (1 - T_hat)
        bce = bce * (1 - p_t) ** focal_gamma
    return _masked_mean_over_queries(bce, valid_mask)


def box_loss(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, assignment: Assignment,
             lambda_l1: float = 5.0, lambda_giou: float = 2.0):
    """Weighted L1 + (1 - GIoU) averaged over matched pairs; returns (total, l1, giou)."""
    if not assignment.pairs:
        zero = pred_boxes.sum() * 0.0
        return zero, zero, zero
    q = torch.tensor([p[0] for p in assignment.pairs])
    g = torch.tensor([p[1] for p in assignment.pairs])
    pb, gb = pred_boxes[q], torch.as_tensor(gt_boxes, dtype=pred_boxes.dtype)[g]
    l1 = (pb - gb).abs().sum(-1).mean()
    giou = (1 - elementwise_giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb))).mean()
    return lambda_l1 * l1 + lambda_giou * giou, l1, giou


def targets_from_assignment(assignment: Assignment, gt_labels, category_tokens: torch.Tensor,
                            num_queries: int) -> torch.Tensor:
    target = torch.zeros(num_queries, category_tokens.shape[-1], dtype=category_tokens.dtype)
    for q, g in assignment.pairs:
        target[q] = category_tokens[int(gt_labels[g])]
    return target


@dataclass
class GroundTruth:
    labels: torch.Tensor  # [N_gt] category index in the image's prompt
    boxes: torch.Tensor   # [N_gt, 4] normalized cxcywh


def stage_loss(logits: torch.Tensor, boxes: torch.Tensor, gt: GroundTruth, category_tokens,
               valid_mask, weights: LossWeights, tie_break: bool = False):
    """Loss of one decoder stage for one image; returns (total, breakdown)."""
    category_tokens = torch.as_tensor(category_tokens, dtype=logits.dtype)
    mask = torch.as_tensor(valid_mask)
    scores = torch.sigmoid(logits.detach()) * mask.to(logits.dtype)
    cat_scores = pool_category_scores(scores, category_tokens)
    cost = matching_cost(cat_scores, boxes.detach(), gt.labels, gt.boxes,
                         weights.cost_class, weights.cost_l1, weights.cost_giou)
    assignment = hungarian_match(cost, tie_break=tie_break)
    target = targets_from_assignment(assignment, gt.labels, category_tokens, logits.shape[0])
    align = alignment_loss_from_logits(logits, target, mask, weights.focal_gamma)
    boxes_total, l1, giou = box_loss(boxes, gt.boxes, assignment, weights.l1, weights.giou)
    total = weights.align * align + boxes_total
    return total, {"align": align, "l1": l1, "giou": giou, "assignment": assignment}


def rpn_box_loss(boxes: torch.Tensor, gt: GroundTruth, weights: LossWeights, tie_break: bool = False):
    cost = matching_cost(None, boxes.detach(), gt.labels, gt.boxes, 0.0, weights.cost_l1,
                         weights.cost_giou)
    assignment = hungarian_match(cost, tie_break=tie_break)
    total, l1, giou = box_loss(boxes, gt.boxes, assignment, weights.l1, weights.giou)
    return total, {"l1": l1, "giou": giou}


def total_loss(stage_outputs, gt: GroundTruth, category_tokens, valid_mask,
               weights: LossWeights | None = None, rpn_boxes: torch.Tensor | None = None,
               tie_break: bool = False):
    """Deep-supervised loss for one image.

    ``stage_outputs`` is a sequence of ``(logits [N, T], boxes [N, 4])``.
    Returns the scalar and a breakdown with float components.
    """
    weights = weights or LossWeights()
    total = 0.0
    parts = {"align": 0.0, "l1": 0.0, "giou": 0.0}
    for logits, boxes in stage_outputs:
        t, br = stage_loss(logits, boxes, gt, category_tokens, valid_mask, weights, tie_break)
        total = total + t
        for k in parts:
            parts[k] = parts[k] + br[k]
    if rpn_boxes is not None:
        t, br = rpn_box_loss(rpn_boxes, gt, weights, tie_break)
        total = total + t
        parts["l1"] = parts["l1"] + br["l1"]
        parts["giou"] = parts["giou"] + br["giou"]
    return total, {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}
