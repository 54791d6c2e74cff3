from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_err
from dethub.boxes import cxcywh_to_xyxy
from dethub.detector import (
    Backbone,
    DecoderStage,
    Detector,
    DetectorConfig,
    ProposalSet,
    align_scores,
    decode_stage,
    extract_features,
    pool_category_scores,
    predict,
    query_rpn,
    top_detections,
)
from dethub.errors import DataError
from dethub.losses import GroundTruth, total_loss
from dethub.taxonomy import EmbedderSpec, embed_prompt, tokenize_prompt

SMALL = dict(hidden_dim=16, feature_channels=8, backbone_width=4, backbone_depth=1, num_queries=5,
             num_stages=2, heads=2, embed_dim=12)


def _embedding(text="circle, square", max_length=8, d=16, embed_dim=12, seed=0, contextual=True):
    prompt = tokenize_prompt(text, max_length)
    emb = embed_prompt(prompt, EmbedderSpec(embed_dim=embed_dim, seed=seed, contextual=contextual), d)
    as_t = lambda a: torch.tensor(np.asarray(a))  # noqa: E731
    return prompt, emb, as_t(emb.E).float(), as_t(emb.F_E).float(), as_t(emb.valid_mask)


def test_pyramid_sizes():
    feats = extract_features(torch.randn(3, 64, 64), Backbone(8, 16, 1))
    assert [tuple(f.shape[-2:]) for f in feats] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert all(f.shape[0] == 16 for f in feats)


def test_zero_image_biasless_gives_zero_features():
    feats = extract_features(torch.zeros(3, 64, 64), Backbone(8, 16, 1, bias=False))
    assert all(not f.any() for f in feats)


def test_features_deterministic_and_size_check():
    bb = Backbone(8, 16, 1)
    img = torch.randn(3, 64, 64)
    a, b = extract_features(img, bb), extract_features(img.clone(), bb)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    with pytest.raises(DataError):
        extract_features(torch.randn(3, 31, 64), bb)


def test_rpn_initial_proposals_whole_image():
    torch.manual_seed(0)
    cfg = DetectorConfig(**SMALL)
    model = Detector(cfg)
    pyramid = extract_features(torch.randn(3, 64, 64), model.backbone)
    props = query_rpn(pyramid, torch.randn(5, 16), model.rpn, (64, 64))
    assert props.boxes.shape == (5, 4)
    assert torch.allclose(props.boxes, torch.tensor([0.5, 0.5, 1.0, 1.0]).expand(5, 4))


def test_zero_regression_passes_boxes_through():
    torch.manual_seed(0)
    cfg = DetectorConfig(**SMALL)
    stage = DecoderStage(cfg)
    pyramid = [p.unsqueeze(0) for p in extract_features(torch.randn(3, 64, 64), Backbone(4, 8, 1))]
    boxes = torch.tensor([[[0.3, 0.4, 0.2, 0.3], [0.6, 0.5, 0.4, 0.2]]])
    out, f_c = decode_stage(pyramid, ProposalSet(boxes, torch.zeros(1, 2, 16)), torch.randn(1, 2, 16),
                            stage, (64, 64))
    assert torch.allclose(out.boxes, boxes, atol=1e-6)
    assert f_c.shape == (1, 2, 16)


def test_default_stage_count():
    assert DetectorConfig().num_stages == 6


def test_per_query_isolation_linear_mode():
    torch.manual_seed(0)
    cfg = DetectorConfig(**SMALL, linear_test_mode=True)
    stage = DecoderStage(cfg)
    pyramid = [p.unsqueeze(0) for p in extract_features(torch.randn(3, 64, 64), Backbone(4, 8, 1))]
    boxes = torch.rand(1, 5, 2) * 0.4 + 0.3
    boxes = torch.cat([boxes, torch.full((1, 5, 2), 0.3)], -1)
    q = torch.randn(1, 5, 16)
    a, fa, _ = stage(pyramid, boxes, q, (64, 64))
    q2 = q.clone()
    q2[0, 3] += torch.randn(16)
    b, fb, _ = stage(pyramid, boxes, q2, (64, 64))
    keep = [0, 1, 2, 4]
    assert torch.equal(fa[0, keep], fb[0, keep])
    assert torch.equal(a.boxes[0, keep], b.boxes[0, keep])
    assert not torch.equal(fa[0, 3], fb[0, 3])


def test_align_scores_examples():
    f_e = torch.randn(4, 8)
    s = align_scores(torch.zeros(3, 8), f_e)
    assert torch.all(s == 0.5)
    f_c = torch.zeros(1, 8)
    f_c[0, 0] = 1.0
    f_e = torch.zeros(2, 8)
    f_e[:, 0] = 1.0
    s = align_scores(f_c, f_e, torch.tensor([True, False]))
    assert abs(float(s[0, 0]) - 0.73106) < 1e-5 and float(s[0, 1]) == 0.0
    with pytest.raises(ValueError):
        align_scores(torch.zeros(3, 8), torch.zeros(4, 6))


def test_score_shape_at_defaults():
    s = align_scores(torch.randn(300, 64), torch.randn(512, 64))
    assert s.shape == (300, 512)


def test_category_pooling_mean():
    prompt = tokenize_prompt("cat, traffic light", 8)
    tokens = torch.tensor(prompt.category_token_matrix())
    scores = torch.rand(3, 8)
    pooled = pool_category_scores(scores, tokens)
    a, b = prompt.span_map[0]
    assert b - a == 1 and torch.allclose(pooled[:, 0], scores[:, a])
    a, b = prompt.span_map[1]
    assert b - a == 2
    assert torch.allclose(pooled[:, 1], (scores[:, a] + scores[:, a + 1]) / 2)


def _model(**kw):
    torch.manual_seed(0)
    return Detector(DetectorConfig(**{**SMALL, **kw}))


def test_predict_only_dataset_categories():
    model = _model()
    prompt, emb, *_ = _embedding()
    ds = SimpleNamespace(name="A", prompt=prompt, embedding=emb)
    out = predict(torch.randn(3, 64, 48), ds, model, known_datasets={"A"})
    assert out.category_scores.shape == (5, 2)
    assert out.boxes.shape == (5, 4)
    assert np.all(out.boxes[:, 2] > out.boxes[:, 0]) and np.all(out.boxes[:, 3] > out.boxes[:, 1])
    assert np.all(out.boxes[:, [0, 2]] <= 48 + 1e-4) and np.all(out.boxes[:, [1, 3]] <= 64 + 1e-4)
    assert np.all((out.category_scores >= 0) & (out.category_scores <= 1))
    dets = top_detections(out, 100, prompt.categories)
    assert len(dets) == 10 and {d["category"] for d in dets} <= {"circle", "square"}
    with pytest.raises(DataError):
        predict(torch.randn(3, 64, 64), SimpleNamespace(name="Z", prompt=prompt, embedding=emb), model,
                known_datasets={"A"})


def test_adaptation_flag_changes_outputs():
    torch.manual_seed(1)
    img = torch.randn(1, 3, 64, 64)
    _, _, Ea, Fa, ma = _embedding("circle, square", seed=0)
    _, _, Eb, _, mb = _embedding("triangle, box", seed=0)
    for seed in range(3):
        on, off = _model(), _model(rpn_adaptation=False, decoder_adaptation=False)
        torch.manual_seed(seed)
        with torch.no_grad():
            for p in on.parameters():
                p.add_(0.01 * torch.randn_like(p))
            for name, p in off.named_parameters():
                p.copy_(dict(on.named_parameters())[name])
            for st in on.stages:
                torch.nn.init.normal_(st.reg[-1].weight, std=0.1)
            for st_on, st_off in zip(on.stages, off.stages):
                st_off.reg[-1].weight.copy_(st_on.reg[-1].weight)
        a = on(img, Ea[None], Fa[None], ma[None]).stages[-1].logits
        b = on(img, Eb[None], Fa[None], mb[None]).stages[-1].logits
        assert not torch.allclose(a, b)
        c = off(img, Ea[None], Fa[None], ma[None]).stages[-1].logits
        d = off(img, Eb[None], Fa[None], mb[None]).stages[-1].logits
        assert torch.equal(c, d)


def test_gradient_wrt_embedding_zero_without_adaptation():
    model = _model(rpn_adaptation=False, decoder_adaptation=False)
    _, _, E, F_E, mask = _embedding()
    E = E[None].clone().requires_grad_(True)
    out = model(torch.randn(1, 3, 64, 64), E, F_E[None], mask[None])
    loss = sum(s.logits.sum() + s.boxes.sum() for s in out.stages)
    loss.backward()
    assert E.grad is None or not E.grad.any()
    model = _model()
    E2 = E.detach().clone().requires_grad_(True)
    out = model(torch.randn(1, 3, 64, 64), E2, F_E[None], mask[None])
    sum(s.logits.sum() for s in out.stages).backward()
    assert E2.grad is not None and E2.grad.abs().sum() > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_box_validity_property(seed):
    torch.manual_seed(seed)
    model = Detector(DetectorConfig(**SMALL))
    with torch.no_grad():
        for st_ in list(model.stages) + [model.rpn.stage]:
            torch.nn.init.normal_(st_.reg[-1].weight, std=1.0)
            torch.nn.init.normal_(st_.reg[-1].bias, std=1.0)
    _, _, E, F_E, mask = _embedding()
    out = model(torch.randn(2, 3, 64, 64) * 3, E[None].expand(2, -1, -1), F_E[None].expand(2, -1, -1),
                mask[None].expand(2, -1))
    for boxes in [out.rpn_boxes] + [s.boxes for s in out.stages]:
        xyxy = cxcywh_to_xyxy(boxes)
        assert torch.isfinite(boxes).all()
        assert (boxes[..., 2:] > 0).all()
        assert (xyxy >= -1e-6).all() and (xyxy <= 1 + 1e-6).all()


def test_category_order_permutes_scores():
    model = _model()
    img = torch.randn(3, 64, 64)
    outs = []
    for text in ("circle, square, triangle", "triangle, circle, square"):
        prompt, emb, *_ = _embedding(text, contextual=False)
        outs.append(predict(img, SimpleNamespace(name="A", prompt=prompt, embedding=emb), model))
    # positional codes are off, so each span's token scores depend only on its own tokens
    assert np.allclose(outs[0].category_scores[:, [2, 0, 1]], outs[1].category_scores, atol=1e-6)


def test_end_to_end_gradient_two_queries(float64):
    torch.manual_seed(0)
    cfg = DetectorConfig(hidden_dim=8, feature_channels=4, backbone_width=4, backbone_depth=1,
                         num_queries=2, num_stages=2, heads=2, embed_dim=6, detach_boxes=False)
    model = Detector(cfg).double()
    with torch.no_grad():
        model.rpn.proposal_boxes.copy_(torch.tensor([[0.4, 0.45, 0.5, 0.6], [0.6, 0.5, 0.4, 0.5]]))
        for st_ in model.stages:
            torch.nn.init.normal_(st_.reg[-1].weight, std=0.01)
    prompt = tokenize_prompt("a, b", 3)  # three valid tokens
    emb = embed_prompt(prompt, EmbedderSpec(embed_dim=6), 8)
    E = torch.tensor(np.asarray(emb.E), dtype=torch.float64)[None]
    F_E = torch.tensor(np.asarray(emb.F_E), dtype=torch.float64)[None]
    mask = torch.tensor(np.asarray(emb.valid_mask))[None]
    img = torch.randn(1, 3, 32, 32)
    gt = GroundTruth(torch.tensor([1]), torch.tensor([[0.55, 0.5, 0.3, 0.4]]))
    tokens = torch.tensor(prompt.category_token_matrix(), dtype=torch.float64)

    def loss():
        out = model(img, E, F_E, mask)
        stages = [(s.logits[0], s.boxes[0]) for s in out.stages]
        return total_loss(stages, gt, tokens, mask[0], rpn_boxes=out.rpn_boxes[0])[0]

    model.zero_grad()
    loss().backward()
    with torch.no_grad():
        for p in (model.queries, model.stages[0].kernels.to_k1.bias, model.hub.attn.q_proj.weight):
            assert rel_err(p.grad, central_difference(loss, p)) < 1e-3
