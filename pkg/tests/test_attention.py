import numpy as np
import pytest
import torch

from aepm.attention import (
    gait_attention_series,
    knee_query_profile,
    write_profile_csv,
    write_series_csv,
)
from aepm.model import ModelConfig, init_parameters
from aepm.motion_data import MotionSequence, make_windows, mask_joint

TINY = ModelConfig(n=4, l=5, d=8, heads=2, M=2, N=3)


def _seq(T, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return MotionSequence(30.0, [f"j{i}" for i in range(n)], "euler-xyz", rng.normal(0, 20, (T, n, 3)))


def _window(seq, l, k, start=0):
    return mask_joint(make_windows(seq, l)[start], k)


def test_uniform_attention_profile():
    cfg = ModelConfig(n=2, l=3, d=4, heads=2, M=1, N=2)
    model = init_parameters(cfg, 0, torch.float64)
    with torch.no_grad():
        for blk in model.spatial:
            for lin in (blk.attn.q, blk.attn.k):
                lin.weight.zero_()
                lin.bias.zero_()
    prof = knee_query_profile(model, _window(_seq(5, n=2), 3, 1))
    np.testing.assert_allclose(prof.weights, [[0.5, 0.5]], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_profile_is_probability_vector(seed):
    model = init_parameters(TINY, seed, torch.float64)
    prof = knee_query_profile(model, _window(_seq(9, seed=seed), 5, 2))
    assert prof.weights.shape == (TINY.M, TINY.n)
    assert np.all(prof.weights >= 0)
    np.testing.assert_allclose(prof.weights.sum(axis=1), 1.0, atol=1e-5)


def test_averaging_oracle_and_convex_hull():
    model = init_parameters(TINY, 3, torch.float64)
    w = _window(_seq(9, seed=3), 5, 1)
    prof = knee_query_profile(model, w)
    with torch.no_grad():
        _, rec = model(torch.as_tensor(np.array(w.x_bar[None])), capture=True)
    for m in range(TINY.M):
        raw = rec.spatial[m].numpy()  # l x heads x n x n
        manual = np.zeros(TINY.n)
        for f in range(TINY.l):
            for h in range(TINY.heads):
                manual += raw[f, h, 1]
        manual /= TINY.l * TINY.heads
        np.testing.assert_allclose(prof.weights[m], manual, atol=1e-10)
        lo, hi = prof.per_head[m].min(axis=0), prof.per_head[m].max(axis=0)
        assert np.all(prof.weights[m] >= lo - 1e-12) and np.all(prof.weights[m] <= hi + 1e-12)


def test_profile_deterministic():
    model = init_parameters(TINY, 1, torch.float64)
    w = _window(_seq(9), 5, 0)
    np.testing.assert_array_equal(knee_query_profile(model, w).weights, knee_query_profile(model, w).weights)


def test_unmasked_window_rejected():
    model = init_parameters(TINY, 1, torch.float64)
    with pytest.raises(ValueError, match="not masked"):
        knee_query_profile(model, make_windows(_seq(9), 5)[0])


@pytest.mark.parametrize("T", [5, 6, 20])
def test_series_length_and_rows(T):
    model = init_parameters(TINY, 2, torch.float64)
    s = gait_attention_series(model, _seq(T), 2, batch_size=4)
    assert len(s) == T - TINY.l + 1
    assert s.weights.shape == (T - TINY.l + 1, TINY.n)
    np.testing.assert_allclose(s.weights.sum(axis=1), 1.0, atol=1e-5)
    assert s.truth_deg.shape == s.pred_deg.shape == (len(s),)


def test_series_frame_average_rows_normalized():
    model = init_parameters(TINY, 2, torch.float64)
    s = gait_attention_series(model, _seq(12), 2, frame_average=True)
    np.testing.assert_allclose(s.weights.sum(axis=1), 1.0, atol=1e-5)


def test_series_last_frame_matches_profile_capture():
    model = init_parameters(TINY, 4, torch.float64)
    seq = _seq(10, seed=4)
    s = gait_attention_series(model, seq, 3)
    w = _window(seq, 5, 3, start=2)
    with torch.no_grad():
        _, rec = model(torch.as_tensor(np.array(w.x_bar[None])), capture=True)
    expected = rec.spatial[0].numpy()[-1, :, 3].mean(axis=0)
    np.testing.assert_allclose(s.weights[2], expected, atol=1e-12)


def test_series_too_short():
    model = init_parameters(TINY, 0, torch.float64)
    with pytest.raises(ValueError, match="empty input"):
        gait_attention_series(model, _seq(4), 1)


def test_writers(tmp_path):
    model = init_parameters(TINY, 0, torch.float64)
    seq = _seq(8)
    write_profile_csv(knee_query_profile(model, _window(seq, 5, 2), seq.joint_names), tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "layer,joint_name,weight" and len(lines) == 1 + TINY.M * TINY.n
    assert lines[1].startswith("0,j0,")
    write_series_csv(gait_attention_series(model, seq, 2), tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "frame,truth_deg,pred_deg,w_joint0,w_joint1,w_joint2,w_joint3"
    assert len(lines) == 1 + 4 and lines[1].startswith("4,")
