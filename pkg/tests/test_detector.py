import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossmix_lab import boxes as bx
from lossmix_lab import detector as D
from lossmix_lab import tensor as T
from lossmix_lab.scenegen import SceneConfig, generate_scene

CFG = D.DetectorConfig()


def test_init_deterministic_bounded_and_finite():
    a, b = D.init_params(3, CFG), D.init_params(3, CFG)
    assert a.keys() == D.param_shapes(CFG).keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
        assert a[k].shape == D.param_shapes(CFG)[k]
        assert np.all(np.isfinite(a[k]))
        if k.endswith(".b"):
            assert not a[k].any()
        else:
            assert np.abs(a[k]).max() <= np.sqrt(6.0 / D.fan_in(a[k].shape))
    assert not np.array_equal(a["conv1.w"], D.init_params(4, CFG)["conv1.w"])


def test_forward_shapes_and_zero_image():
    p = D.init_params(0, CFG)
    out = D.forward(p, np.zeros((2, 64, 64, 3)), CFG)
    G, K, C = 8, 16, 3
    assert out.features.shape == (2, G, G, 16)
    assert out.s1_obj.shape == (2 * G * G, 1) and out.s1_delta.shape == (2 * G * G, 4)
    assert out.proposals.shape == (2, K, 4) and out.proposal_scores.shape == (2, K)
    assert out.s2_cls.shape == (2 * K, C + 1) and out.s2_delta.shape == (2 * K, 4 * C)
    for node in (out.s1_obj, out.s1_delta, out.s2_cls, out.s2_delta):
        assert np.all(np.isfinite(node.value))
    props = out.proposals
    assert props.min() >= 0 and props[..., [0, 2]].max() <= 64 and props[..., [1, 3]].max() <= 64
    assert np.all(props[..., 2] > props[..., 0]) and np.all(props[..., 3] > props[..., 1])


def test_forward_rejects_wrong_shape():
    with pytest.raises(T.ShapeError):
        D.forward(D.init_params(0, CFG), np.zeros((1, 32, 32, 3)), CFG)


def test_identical_images_identical_outputs():
    p = D.init_params(1, CFG)
    img = generate_scene(5, SceneConfig()).image
    out = D.forward(p, np.stack([img, img]), CFG)
    K = CFG.num_proposals
    np.testing.assert_array_equal(out.proposals[0], out.proposals[1])
    np.testing.assert_array_equal(out.s2_cls.value[:K], out.s2_cls.value[K:])
    single = D.forward(p, img, CFG)
    np.testing.assert_array_equal(single.s2_cls.value, out.s2_cls.value[:K])


def test_select_proposals_tie_break_and_full_k():
    cells = CFG.num_cells
    zeros = np.zeros((cells, 4))
    boxes, logits, idx = D.select_proposals(np.zeros(cells), zeros, 16, CFG)
    np.testing.assert_array_equal(idx, np.arange(16))
    _, _, idx = D.select_proposals(np.zeros(cells), zeros, cells, CFG)
    np.testing.assert_array_equal(np.sort(idx), np.arange(cells))
    with pytest.raises(ValueError):
        D.select_proposals(np.zeros(cells), zeros, cells + 1, CFG)


def test_zero_deltas_decode_to_anchor():
    a = D.anchors(CFG)
    np.testing.assert_array_equal(bx.decode(a, np.zeros_like(a)), a)
    cx = (a[:, 0] + a[:, 2]) / 2
    assert np.all(a[:, 2] - a[:, 0] == 16) and cx[0] == 4.0 and cx[1] == 12.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.integers(0, 63))
def test_encode_decode_round_trip(delta, cell):
    ref = D.anchors(CFG)[cell:cell + 1]
    d = np.array([delta])
    np.testing.assert_allclose(bx.encode(ref, bx.decode(ref, d)), d, rtol=0, atol=1e-10)


def test_iou_basics():
    assert bx.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert bx.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert bx.iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0
    m = bx.iou_matrix([(0, 0, 2, 2), (1, 1, 3, 3)], [(1, 1, 3, 3)])
    np.testing.assert_allclose(m.ravel(), [1 / 7, 1.0], rtol=0, atol=1e-15)


def test_nms_examples():
    assert bx.nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.8, 0.9], 0.5) == [1]
    assert bx.nms([(0, 0, 4, 4), (5, 5, 9, 9)], [0.8, 0.9], 0.5) == [1, 0]
    assert bx.nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.5, 0.5], 0.5) == [0]


def _fake_output(probs, box):
    """DetectorOutput with one proposal row carrying the given class probabilities."""
    cfg = D.DetectorConfig(num_proposals=2)
    K, C = 2, cfg.num_classes
    logits = np.log(np.array([probs, [1e-9] * C + [1.0]]))
    props = np.array([[box, box]], dtype=float)
    return D.DetectorOutput(None, None, None, props, np.zeros((1, K)), T.const(logits),
                            T.const(np.zeros((K, 4 * C))), cfg)


def test_detections_threshold_and_background():
    out = _fake_output([0.7, 0.2, 0.05, 0.05], (8, 8, 24, 24))
    dets = D.detections_from_output(out, 0, 0.1, 0.5)
    assert [d.class_id for d in dets] == [0, 1]
    assert dets[0].score == pytest.approx(0.7) and dets[0].box == (8.0, 8.0, 24.0, 24.0)
    assert D.detections_from_output(out, 0, 1.0, 0.5) == []
    p = D.init_params(0, CFG)
    assert D.predict(p, np.zeros((64, 64, 3)), CFG, score_thresh=1.0) == []


def test_predict_scores_in_unit_range():
    p = D.init_params(2, CFG)
    for d in D.predict(p, generate_scene(1, SceneConfig()).image, CFG, score_thresh=0.01):
        assert 0.0 <= d.score <= 1.0 and 0 <= d.class_id < 3


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = D.init_params(9, CFG)
    path = D.save_params(p, tmp_path / "ck.json", {"iter": 3})
    q = D.load_params(path)
    assert all(p[k].tobytes() == q[k].tobytes() for k in p)
    assert D.load_checkpoint_meta(path) == {"iter": 3}
    with pytest.raises(ValueError):
        D.params_from_json({"format": "other"})


def test_config_validation():
    with pytest.raises(ValueError):
        D.DetectorConfig(height=60)
    with pytest.raises(ValueError):
        D.DetectorConfig(height=32, width=32, num_proposals=17)
