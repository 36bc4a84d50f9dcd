import numpy as np
import pytest

from nervescan import nn
from nervescan.detector import (DetectorConfig, best_window, boxes_from_probs, decide, probability_map,
                                read_detections, scan_frame, window_positions, window_probs,
                                write_detections)
from nervescan.errors import InvalidInputError
from nervescan.geometry import RoiBox


def constant_net(logit_nerve, side=64):
    """Ignores its input: logits (0, logit_nerve) for every patch."""
    conv = nn.Conv2D(1, 1, np.zeros((1, 1, 3, 3)))
    dense = nn.Dense(side * side, 2, np.zeros((side * side, 2)), np.array([0.0, logit_nerve]))
    return nn.Network([conv, nn.Flatten(), dense], (1, side, side))


def brightness_net():
    """Nerve logit grows with the mean intensity of the patch."""
    conv = nn.Conv2D(1, 1, np.zeros((1, 1, 3, 3)))
    conv.weights[0, 0, 1, 1] = 1.0
    w = np.zeros((64 * 64, 2))
    w[:, 1] = 20.0 / (64 * 64)
    return nn.Network([conv, nn.Flatten(), nn.Dense(64 * 64, 2, w, np.array([0.0, -10.0]))], (1, 64, 64))


def test_decide_examples():
    cfg = DetectorConfig(alpha=1.8)
    assert decide([0.95, 0.05], cfg) == 0
    assert decide([0.05, 0.95], cfg) == 1
    assert decide([0.85, 0.15], cfg) is None
    assert decide([0.90, 0.10], cfg) is None


def test_config_validation():
    for bad in (dict(alpha=2.0), dict(alpha=0.0), dict(stride=0), dict(stride=65), dict(num_classes=1)):
        with pytest.raises(InvalidInputError):
            DetectorConfig(**bad).validate()
    assert DetectorConfig().threshold == pytest.approx(0.9)


def test_window_counts():
    assert len(window_positions(600, 300, 64, 8)) == 68 * 30 == 2040
    assert window_positions(128, 128, 64, 64) == [(0, 0), (64, 0), (0, 64), (64, 64)]
    with pytest.raises(InvalidInputError):
        window_positions(63, 100, 64, 8)


def test_background_frame_gives_nothing():
    frame = np.full((128, 160), 100, dtype=np.uint8)
    assert scan_frame(constant_net(-20.0), frame) == []


def test_confident_net_fires_everywhere_in_raster_order():
    frame = np.zeros((96, 128), dtype=np.uint8)
    boxes = scan_frame(constant_net(20.0), frame, DetectorConfig(stride=16))
    assert [(b.x, b.y) for b in boxes] == window_positions(128, 96, 64, 16)
    assert all(b.prob > 0.9 and b.w == b.h == 64 and b.inside(128, 96) for b in boxes)


def test_stride_too_small_frame():
    with pytest.raises(InvalidInputError):
        scan_frame(constant_net(0.0), np.zeros((32, 200), dtype=np.uint8))


@pytest.mark.parametrize("shape,stride", [((300, 600), 8), ((97, 131), 8), ((64, 64), 8),
                                          ((120, 200), 16), ((100, 100), 12), ((90, 90), 5)])
def test_shared_scan_matches_per_patch(shape, stride):
    net = nn.build_network(seed=4)
    frame = np.random.default_rng(stride).integers(0, 256, shape).astype(np.uint8)
    cfg = DetectorConfig(stride=stride)
    pa, a = window_probs(net, frame, cfg, shared=False)
    pb, b = window_probs(net, frame, cfg, shared=True)
    assert pa == pb
    np.testing.assert_allclose(b, a, rtol=0, atol=1e-12)


def test_scan_independent_of_batch_size():
    net = nn.build_network(seed=2)
    frame = np.random.default_rng(0).integers(0, 256, (100, 140)).astype(np.uint8)
    _, a = window_probs(net, frame, DetectorConfig(batch_size=1))
    _, b = window_probs(net, frame, DetectorConfig(batch_size=64))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_raising_alpha_never_adds_boxes():
    rng = np.random.default_rng(3)
    frame = (rng.random((128, 192)) * 255).astype(np.uint8)
    frame[30:100, 40:120] = 230
    positions, probs = window_probs(brightness_net(), frame, DetectorConfig(stride=8))
    counts = [len(boxes_from_probs(positions, probs, DetectorConfig(alpha=a)))
              for a in np.linspace(1.0, 1.99, 25)]
    assert counts[0] > 0
    assert all(x >= y for x, y in zip(counts, counts[1:]))


def test_best_window_prefers_highest_then_raster():
    positions = [(0, 0), (8, 0), (16, 0)]
    probs = np.array([[0.02, 0.98], [0.01, 0.99], [0.01, 0.99]])
    best = best_window(positions, probs)
    assert (best.x, best.y) == (8, 0)
    assert best_window(positions, np.array([[0.5, 0.5]] * 3)) is None


def test_probability_map_averages_cover():
    positions = [(0, 0), (2, 0)]
    probs = np.array([[0.0, 1.0], [1.0, 0.0]])
    pm = probability_map(positions, probs, 6, 4, patch_size=4)
    np.testing.assert_allclose(pm[0], [1, 1, 0.5, 0.5, 0, 0])


def test_detections_file_roundtrip(tmp_path):
    dets = [[RoiBox(0, 8, 64, 64, 0.93)], [], [RoiBox(16, 24, 64, 64, 0.9999999999), RoiBox(24, 24, 64, 64, 1.0)]]
    path = tmp_path / "d.txt"
    write_detections(path, dets)
    assert path.read_text().splitlines()[0] == "0,0,8,64,64,0.93"
    back = read_detections(path)
    assert back == {0: dets[0], 2: dets[2]}


def test_read_detections_rejects_malformed(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("0,1,2,3\n")
    with pytest.raises(InvalidInputError, match=":1:"):
        read_detections(path)
    path.write_text("0,1,2,3,4,x\n")
    with pytest.raises(InvalidInputError):
        read_detections(path)
