import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

import dskd.inference as inference
from dskd.backbone import l2_normalize
from dskd.distill import anomaly_map
from dskd.inference import (
    AnomalyResult,
    CalibrationError,
    ScoreCalibration,
    anomaly_maps,
    fuse_maps,
    infer,
    save_heatmap,
    score_and_classify,
    smooth,
    write_results,
)
from dskd.model import DSKD


def gaussian_kernel_oracle(sigma, radius):
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
    return k / k.sum()


def test_fuse_zero():
    stack = [torch.zeros(1, 4, 4), torch.zeros(1, 2, 2), torch.zeros(1, 1, 1)]
    assert torch.count_nonzero(fuse_maps(stack, (16, 16))) == 0


def test_fuse_constant_levels():
    stack = [torch.full((1, 8, 8), 0.5), torch.zeros(1, 4, 4), torch.zeros(1, 2, 2)]
    out = fuse_maps(stack, (37, 53))
    assert out.shape == (1, 37, 53)
    assert torch.allclose(out, torch.full_like(out, 0.5))
    stack = [torch.full((2, 8, 8), 0.1), torch.full((2, 4, 4), 0.2), torch.full((2, 2, 2), 0.3)]
    assert torch.allclose(fuse_maps(stack, (32, 32)), torch.full((2, 32, 32), 0.6))


def test_fuse_empty():
    with pytest.raises(ValueError):
        fuse_maps([], (8, 8))


def test_smooth_constant():
    out = smooth(np.full((40, 50), 2.5))
    assert np.abs(out - 2.5).max() < 1e-6
    assert out.shape == (40, 50)


def test_smooth_impulse_matches_kernel():
    impulse = np.zeros((65, 65))
    impulse[32, 32] = 1.0
    out = smooth(impulse, sigma=4.0)
    kernel = gaussian_kernel_oracle(4.0, 16)
    expected = np.zeros((65, 65))
    expected[16:49, 16:49] = kernel
    assert np.abs(out - expected).max() < 1e-6


def test_smooth_preserves_mass_of_interior_signal():
    rng = np.random.default_rng(0)
    m = np.zeros((80, 80))
    m[30:50, 30:50] = rng.random((20, 20))
    assert abs(smooth(m).sum() - m.sum()) < 1e-4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (33, 41), elements=st.floats(0, 10)))
def test_smooth_mean_and_max(m):
    out = smooth(m)
    assert abs(out.mean() - m.mean()) < 1e-4
    assert out.max() <= m.max() + 1e-6


def test_smooth_batched_equals_per_map():
    rng = np.random.default_rng(1)
    maps = rng.random((3, 32, 32))
    joint = smooth(maps)
    for a, b in zip(joint, maps):
        assert np.allclose(a, smooth(b))


def test_smooth_rejects_bad_sigma():
    with pytest.raises(ValueError):
        smooth(np.zeros((4, 4)), sigma=0)


CAL = ScoreCalibration(1.0, 3.0)


@pytest.mark.parametrize("raw, norm, flag", [(1.0, 0.0, False), (3.0, 1.0, True), (2.0, 0.5, True), (0.0, 0.0, False), (9.0, 1.0, True)])
def test_score_and_classify(raw, norm, flag):
    amap = np.zeros((4, 4))
    amap[0, 0] = raw
    amap[1, 1] = min(raw, 0.0)
    r = score_and_classify(amap, CAL)
    assert r.raw_score == raw
    assert r.normalized_score == pytest.approx(norm)
    assert r.is_anomalous is flag


def test_degenerate_calibration():
    with pytest.raises(CalibrationError):
        score_and_classify(np.zeros((2, 2)), ScoreCalibration(1.0, 1.0))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 5)), arrays(np.float64, (6, 6), elements=st.floats(0, 5)))
def test_raw_score_monotone(b, extra):
    a = b + extra
    assert score_and_classify(a, CAL).raw_score >= score_and_classify(b, CAL).raw_score


@pytest.mark.parametrize("size", [128, 256])
def test_fused_map_matches_input_shape(teacher, size):
    model = DSKD(teacher, "DS", input_size=size).eval()
    maps = anomaly_maps(model, torch.randn(1, 3, size, size))
    assert maps.shape == (1, size, size)


def test_teacher_against_itself_is_exactly_zero(teacher):
    feats = l2_normalize(teacher(torch.randn(2, 3, 64, 64)))
    stack = anomaly_map(feats, feats, 0.1)
    fused = fuse_maps(stack, (64, 64))
    smoothed = smooth(fused.numpy())
    assert np.count_nonzero(smoothed) == 0
    assert score_and_classify(smoothed[0], ScoreCalibration(0.0, 1.0)).raw_score == 0.0


def test_infer_with_decoder_reproducing_teacher(teacher, monkeypatch):
    model = DSKD(teacher, "DS", input_size=64).eval()
    image = torch.randn(1, 3, 64, 64)
    target = teacher(image)
    monkeypatch.setattr(model.decoder, "forward", lambda emb: [t * 2.0 for t in target])
    r = infer(image, model, ScoreCalibration(0.0, 1.0))
    assert r.raw_score == 0.0
    assert np.count_nonzero(r.map) == 0
    assert r.is_anomalous is False


def test_infer_deterministic(teacher):
    model = DSKD(teacher, "DS", input_size=64).eval()
    image = torch.randn(3, 64, 64)
    a = infer(image, model, ScoreCalibration(0.0, 10.0), "x")
    b = infer(image, model, ScoreCalibration(0.0, 10.0), "x")
    assert np.array_equal(a.map, b.map)
    assert (a.raw_score, a.normalized_score, a.is_anomalous) == (b.raw_score, b.normalized_score, b.is_anomalous)
    assert a.map.shape == (64, 64)
    assert a.raw_score == a.map.max()


def test_infer_rejects_size_mismatch(teacher):
    model = DSKD(teacher, "DS", input_size=128).eval()
    with pytest.raises(ValueError):
        infer(torch.randn(1, 3, 64, 64), model, ScoreCalibration(0.0, 1.0))


def test_inference_uses_only_teacher_decoder_pair(teacher, monkeypatch):
    model = DSKD(teacher, "DS", input_size=64).eval()
    calls = []
    real = inference.anomaly_map
    real_forward = model.forward

    def tagged_forward(x, needed=None):
        feats = real_forward(x, needed)
        calls.append(("forward", tuple(sorted(feats))))
        spy.ids = {id(v): k for k, v in feats.items()}
        return feats

    def spy(a, b, lam):
        calls.append(("map", spy.ids[id(a)], spy.ids[id(b)]))
        return real(a, b, lam)

    monkeypatch.setattr(model, "forward", tagged_forward)
    monkeypatch.setattr(inference, "anomaly_map", spy)
    anomaly_maps(model, torch.randn(2, 3, 64, 64))
    assert ("map", "teacher", "decoder") in calls
    assert all(c[0] != "map" or c[1:] == ("teacher", "decoder") for c in calls)


def test_map_selection_uses_single_level(teacher):
    model = DSKD(teacher, "DS", input_size=64).eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        feats = model(x)
    stack = anomaly_map(feats["teacher"], feats["decoder"], model.lambda_l2)
    expected = smooth(fuse_maps([stack[1]], (64, 64)).numpy())
    assert np.allclose(anomaly_maps(model, x, maps=(2,)), expected)


def test_heatmap_export(tmp_path):
    amap = np.linspace(0, 3, 64).reshape(8, 8)
    save_heatmap(amap, tmp_path / "s_amap.png")
    img = np.asarray(Image.open(tmp_path / "s_amap.png"))
    assert img.dtype == np.uint8 and img.shape == (8, 8)
    assert img.min() == 0 and img.max() == 255
    base = np.full((8, 8, 3), 100, np.uint8)
    save_heatmap(amap, tmp_path / "o_amap.png", overlay=base)
    assert np.asarray(Image.open(tmp_path / "o_amap.png")).shape == (8, 8, 3)


def test_results_csv(tmp_path):
    r = AnomalyResult(np.zeros((2, 2)), 0.25, 0.5, True, "test/good/000")
    write_results(tmp_path / "scores.csv", [r], [0])
    rows = list(csv.reader(open(tmp_path / "scores.csv")))
    assert rows[0] == ["sample_id", "raw_score", "normalized_score", "is_anomalous", "label"]
    assert rows[1] == ["test/good/000", "0.250000", "0.500000", "1", "0"]
