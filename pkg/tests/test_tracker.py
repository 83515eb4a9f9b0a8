import numpy as np
import pytest
import torch
from torchvision.ops import nms as tv_nms

from antiuav.geometry import BoundingBox
from antiuav.tracker import boxes as B
from antiuav.tracker import (
    QueryGuidedTracker,
    ShapeError,
    TrackerConfig,
    checkpoint_bytes,
    csm_modulate,
    detect,
    encode_query,
    extract_features,
    init_query,
    ism_modulate,
    load_checkpoint,
    rcnn_forward,
    rpn_forward,
    save_checkpoint,
    select_proposals,
    track_step,
)
from gradcases import CASES, max_relative_error
from oracles import _overlap


@pytest.fixture(scope="module")
def model():
    return QueryGuidedTracker(TrackerConfig(), seed=3).eval()


def frame(seed=0, size=64, channels=1):
    return np.random.default_rng(seed).integers(0, 256, size=(size, size, channels), dtype=np.uint8)


def brute_nms(boxes, scores, threshold):
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -i))
        keep.append(best)
        remaining = [i for i in remaining
                     if i != best and _overlap(boxes[i], boxes[best]) <= threshold]
    return keep


class TestBoxes:
    def test_anchor_layout(self):
        a = B.make_anchors(2, 3, 8, 16.0, (0.5, 1.0, 2.0))
        assert a.shape == (18, 4)
        # (row, col, ratio): index 3 is row 0, col 1, ratio 0.5
        assert ((a[3, 0] + a[3, 2]) / 2).item() == 12.0 and ((a[3, 1] + a[3, 3]) / 2).item() == 4.0
        areas = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
        assert torch.allclose(areas, torch.full_like(areas, 256.0))
        hw = (a[:3, 3] - a[:3, 1]) / (a[:3, 2] - a[:3, 0])
        assert torch.allclose(hw, torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64))

    @pytest.mark.parametrize("weights", [B.RPN_WEIGHTS, B.RCNN_WEIGHTS])
    def test_encode_decode_round_trip(self, weights):
        g = torch.Generator().manual_seed(0)
        refs = torch.rand(50, 2, generator=g, dtype=torch.float64) * 50
        refs = torch.cat([refs, refs + 5 + torch.rand(50, 2, generator=g, dtype=torch.float64) * 20], 1)
        boxes = torch.rand(50, 2, generator=g, dtype=torch.float64) * 50
        boxes = torch.cat([boxes, boxes + 1 + torch.rand(50, 2, generator=g, dtype=torch.float64) * 30], 1)
        assert torch.allclose(B.decode(B.encode(boxes, refs, weights), refs, weights), boxes, atol=1e-9)

    def test_decode_clamps_log_ratio(self):
        d = torch.tensor([[0.0, 0.0, 100.0, 100.0]], dtype=torch.float64)
        out = B.decode(d, torch.tensor([[0.0, 0.0, 16.0, 16.0]], dtype=torch.float64))
        assert torch.isfinite(out).all() and (out[0, 2] - out[0, 0]).item() == pytest.approx(1000.0)

    def test_score_order_ties_go_to_lower_index(self):
        assert B.score_order(np.array([0.5, 0.9, 0.5, 0.9])).tolist() == [1, 3, 0, 2]

    @pytest.mark.parametrize("threshold", [0.3, 0.5, 0.7])
    def test_nms_matches_brute_force(self, threshold):
        rng = np.random.default_rng(int(threshold * 10))
        for _ in range(20):
            xy = rng.uniform(0, 40, size=(30, 2))
            boxes = np.concatenate([xy, xy + rng.uniform(4, 20, size=(30, 2))], axis=1)
            scores = rng.integers(0, 8, size=30).astype(float)  # many ties
            assert B.nms(boxes, scores, threshold).tolist() == brute_nms(boxes.tolist(), scores, threshold)

    def test_nms_agrees_with_torchvision_without_ties(self):
        rng = np.random.default_rng(5)
        xy = rng.uniform(0, 40, size=(60, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(4, 20, size=(60, 2))], axis=1)
        scores = rng.random(60)
        ref = tv_nms(torch.from_numpy(boxes), torch.from_numpy(scores), 0.6).numpy()
        assert B.nms(boxes, scores, 0.6).tolist() == ref.tolist()
        assert B.nms(boxes, scores, 0.6, limit=4).tolist() == ref[:4].tolist()


class TestModules:
    def test_feature_and_head_shapes(self, model):
        feats = extract_features(model, np.stack([frame(0), frame(1)]))
        assert feats.shape == (2, 32, 8, 8)
        q = encode_query(feats, BoundingBox(20, 20, 36, 34), batch_index=1)
        assert q.shape == (32, 7, 7)
        t = csm_modulate(q, feats[0], model.csm)
        assert t.shape == (32, 8, 8)
        scores, deltas = rpn_forward(t, model.rpn)
        assert scores.shape == (1, 192) and deltas.shape == (1, 192, 4)
        xk = torch.stack([q, q, q])
        logits, refine = rcnn_forward(ism_modulate(q, xk, model.ism), model.rcnn)
        assert logits.shape == (3,) and refine.shape == (3, 4)

    def test_shape_errors(self, model):
        with pytest.raises(ShapeError):
            extract_features(model, frame(size=24))
        with pytest.raises(ShapeError):
            extract_features(model, frame(channels=3))
        with pytest.raises(ShapeError):
            csm_modulate(torch.zeros(32, 6, 6), torch.zeros(32, 8, 8), model.csm)
        with pytest.raises(ShapeError):
            ism_modulate(torch.zeros(16, 7, 7), torch.zeros(2, 32, 7, 7), model.ism)
        with pytest.raises(ValueError):
            encode_query(torch.zeros(1, 32, 8, 8), BoundingBox(3, 3, 3, 9))

    def test_zero_query_gives_constant_modulation(self, model):
        x = torch.randn(32, 8, 8)
        with torch.no_grad():
            out = csm_modulate(torch.zeros(32, 7, 7), x, model.csm)
        expected = model.csm.f_out.bias.detach()[:, None, None].expand_as(out)
        assert torch.allclose(out, expected)

    def test_initial_classification_bias(self):
        m = QueryGuidedTracker(TrackerConfig(), seed=0)
        assert torch.all(m.rpn.cls.bias == -2.0) and torch.all(m.rcnn.cls.bias == -2.0)
        assert torch.all(m.rpn.reg.bias == 0.0)

    def test_ism_identity(self):
        m = QueryGuidedTracker(TrackerConfig(channels=8), seed=0).ism
        with torch.no_grad():
            m.f_z.weight.zero_()
            m.f_z.bias.fill_(1.0)
            for conv in (m.f_x, m.f_out):
                conv.weight.copy_(torch.eye(8)[:, :, None, None])
                conv.bias.zero_()
            xk = torch.randn(5, 8, 7, 7)
            assert torch.allclose(ism_modulate(torch.randn(8, 7, 7), xk, m), xk)

    def test_csm_translation_equivariant_in_interior(self, model):
        g = torch.Generator().manual_seed(1)
        z = torch.randn(32, 3, 3, generator=g)
        x = torch.randn(32, 16, 16, generator=g)
        shifted = torch.roll(x, shifts=(2, 3), dims=(1, 2))
        with torch.no_grad():
            a = torch.roll(csm_modulate(z, x, model.csm), shifts=(2, 3), dims=(1, 2))
            b = csm_modulate(z, shifted, model.csm)
        assert torch.allclose(a[:, 4:-2, 5:-2], b[:, 4:-2, 5:-2], atol=1e-5)

    def test_select_proposals(self, model):
        feats = extract_features(model, frame(2))
        q = encode_query(feats, BoundingBox(10, 10, 30, 24))
        scores, deltas = rpn_forward(csm_modulate(q, feats[0], model.csm), model.rpn)
        props = select_proposals(scores[0], deltas[0], model.anchors(8, 8), 16, (64, 64))
        assert 0 < len(props.boxes) <= 16
        assert torch.all(props.scores[:-1] >= props.scores[1:])
        assert props.boxes.min() >= 0 and props.boxes.max() <= 64
        with pytest.raises(ValueError):
            select_proposals(scores[0], deltas[0], model.anchors(8, 8), 0, (64, 64))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    for seed in range(3):
        assert max_relative_error(CASES[name], seed) < 1e-4


class TestInference:
    def test_detect_and_threshold(self, model):
        f = frame(3)
        q = init_query(model, f, BoundingBox(20, 20, 36, 36))
        out = detect(model, q, f)
        assert out.box is not None and 0.0 <= out.confidence <= 1.0
        assert track_step(model, q, f, theta_exist=0.0).present
        absent = track_step(model, q, f, theta_exist=1.01)
        assert not absent.present and absent.box is None

    def test_checkpoint_round_trip(self, model, tmp_path):
        data = checkpoint_bytes(model, {"steps": 3})
        assert data == checkpoint_bytes(model, {"steps": 3})
        save_checkpoint(tmp_path / "m.ckpt", model, {"steps": 3})
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"steps": 3} and loaded.cfg == model.cfg
        for (ka, va), (kb, vb) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        assert checkpoint_bytes(loaded, {"steps": 3}) == data

    def test_checkpoint_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"PK\x03\x04")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")
