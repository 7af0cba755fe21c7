import csv
import json
import math

import numpy as np
import pytest
import torch

from mftcnet.metrics import (
    MetricsReport,
    dice_score,
    evaluate_case,
    gaussian_weights,
    hd95,
    sliding_window_inference,
    sliding_window_logits,
    surface_distances,
    window_starts,
    write_reports_csv,
)
from mftcnet.volio import LabelVolume, Volume
from oracles import brute_hd95


def blob(shape, lo, hi, k=1):
    a = np.zeros(shape, int)
    a[tuple(slice(l, h) for l, h in zip(lo, hi))] = k
    return a


def test_dice_examples():
    a = blob((6, 6, 6), (1, 1, 1), (4, 4, 4))
    assert dice_score(a, a, 1) == 1.0
    assert dice_score(a, blob((6, 6, 6), (4, 4, 4), (6, 6, 6)), 1) == 0.0
    p = blob((4, 4, 4), (0, 0, 0), (2, 2, 2))
    g = blob((4, 4, 4), (1, 0, 0), (3, 2, 2))
    assert p.sum() == g.sum() == 8 and ((p == 1) & (g == 1)).sum() == 4
    assert dice_score(p, g, 1) == 0.5
    assert dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 1) == 1.0
    assert dice_score(p, np.zeros_like(p), 1) == 0.0
    with pytest.raises(ValueError):
        dice_score(p, np.zeros((3, 3, 3)), 1)


def test_dice_symmetric_and_permutation_invariant(rng):
    a, b = rng.integers(0, 3, (2, 6, 6, 6))
    assert dice_score(a, b, 2) == dice_score(b, a, 2)
    perm = rng.permutation(a.size)
    pa, pb = a.ravel()[perm].reshape(a.shape), b.ravel()[perm].reshape(b.shape)
    assert dice_score(pa, pb, 2) == dice_score(a, b, 2)


def test_hd95_examples():
    a = blob((8, 8, 8), (1, 1, 1), (5, 5, 5))
    assert hd95(a, a, 1) == 0.0
    p = np.zeros((10, 10, 10), int)
    g = np.zeros_like(p)
    p[2, 4, 4] = 1
    g[5, 4, 4] = 1
    assert hd95(p, g, 1) == 3.0
    assert hd95(p, np.zeros_like(p), 1) is None
    assert hd95(p, g, 1, spacing=(2.0, 1.0, 1.0)) == 6.0


@pytest.mark.parametrize("seed", range(5))
def test_hd95_brute_force(seed):
    r = np.random.default_rng(seed)
    p = (r.random((10, 10, 10)) < 0.3).astype(int)
    g = (r.random((10, 10, 10)) < 0.3).astype(int)
    assert hd95(p, g, 1) == pytest.approx(brute_hd95(p == 1, g == 1), abs=1e-9)
    assert hd95(p, g, 1) == hd95(g, p, 1)
    d = surface_distances(p, g, 1)
    assert 0 <= hd95(p, g, 1) <= d.max()


def test_evaluate_case_identity_and_exclusion():
    lab = blob((8, 8, 8), (1, 1, 1), (4, 4, 4), 1) + blob((8, 8, 8), (5, 5, 5), (7, 7, 7), 3)
    r = evaluate_case(lab, lab, num_classes=3)
    assert set(r.per_class) == {1, 3}
    assert r.mean_dice == 1.0 and r.mean_hd95 == 0.0


def test_evaluate_case_compositional():
    r = np.random.default_rng(0)
    g = blob((10, 10, 10), (1, 1, 1), (5, 6, 5), 1) + blob((10, 10, 10), (6, 5, 6), (9, 9, 9), 2)
    p = g.copy()
    p[r.random(p.shape) < 0.1] = 0
    rep = evaluate_case(LabelVolume(p, 2), LabelVolume(g, 2))
    for k in (1, 2):
        assert rep.per_class[k]["dice"] == dice_score(p, g, k)
        assert rep.per_class[k]["hd95"] == pytest.approx(brute_hd95(p == k, g == k), abs=1e-9)
    assert rep.mean_dice == pytest.approx(np.mean([dice_score(p, g, k) for k in (1, 2)]))


def test_missing_class_excluded_from_hd_mean():
    g = blob((6, 6, 6), (1, 1, 1), (3, 3, 3), 1) + blob((6, 6, 6), (4, 4, 4), (6, 6, 6), 2)
    p = np.where(g == 2, 0, g)
    rep = evaluate_case(p, g, 2)
    assert rep.per_class[2] == {"dice": 0.0, "hd95": None}
    assert rep.mean_dice == 0.5 and rep.mean_hd95 == 0.0


def test_report_json_and_csv(tmp_path):
    rep = MetricsReport({1: {"dice": 0.9, "hd95": 1.5}, 2: {"dice": 0.0, "hd95": None}}, 0.45, 1.5, "c0")
    d = json.loads(rep.to_json())
    assert set(d) == {"per_class", "mean_dice", "mean_hd95", "case_id"}
    back = MetricsReport.from_json(rep.to_json())
    assert back == rep
    write_reports_csv([rep, rep], tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 4 and rows[0]["name"] == "Spl" and rows[1]["hd95"] == ""


def test_window_starts_cover():
    assert window_starts(32, 32, 0.5) == [0]
    assert window_starts(48, 32, 0.5) == [0, 16]
    assert window_starts(50, 32, 0.5) == [0, 16, 18]


def test_single_patch_equals_forward():
    torch.manual_seed(0)
    from mftcnet.model import MFTCNet, ModelConfig

    model = MFTCNet(ModelConfig.desk(apertures=2, num_classes=3)).eval()
    x = np.random.default_rng(0).standard_normal((32, 32, 32)).astype(np.float32)
    with torch.no_grad():
        ref = model(torch.from_numpy(x)[None, None])[0].argmax(0).numpy()
    out = sliding_window_inference(Volume(x), model, num_classes=2)
    assert np.array_equal(out.labels, ref)


def test_constant_model():
    def predict(patch):
        logits = np.zeros((4,) + patch.shape)
        logits[2] = 5.0
        return logits

    out = sliding_window_inference(Volume(np.zeros((13, 9, 20))), predict, patch_size=8, num_classes=3)
    assert out.shape == (13, 9, 20) and (out.labels == 2).all()


def test_two_window_blend_hand_computation():
    image = np.broadcast_to(np.arange(6, dtype=np.float32)[:, None, None], (6, 4, 4)).copy()

    def predict(patch):
        start = float(patch[0, 0, 0])  # 0 or 2: identifies the window
        logits = np.zeros((2,) + patch.shape)
        logits[0] = 1.0 if start == 0 else 3.0
        return logits

    blended = sliding_window_logits(image, predict, (4, 4, 4), 0.5)
    g = [math.exp(-((i - 1.5) ** 2) / (2 * 0.5**2)) for i in range(4)]
    for x in range(6):
        w1 = g[x] if x < 4 else 0.0
        w2 = g[x - 2] if x >= 2 else 0.0
        expect = (w1 * 1.0 + w2 * 3.0) / (w1 + w2)
        assert blended[0, x, 1, 1] == pytest.approx(expect, abs=1e-12)


def test_gaussian_weights_peak():
    w = gaussian_weights((8, 8, 8))
    assert w.max() == 1.0 and w.shape == (8, 8, 8)
    assert np.allclose(w, w[::-1, ::-1, ::-1])


def test_inference_pads_small_volume():
    def predict(patch):
        return np.stack([np.zeros(patch.shape), patch.astype(np.float64)])

    img = np.ones((5, 8, 8), np.float32)
    out = sliding_window_inference(img, predict, patch_size=8, num_classes=1)
    assert out.shape == (5, 8, 8) and (out.labels == 1).all()
