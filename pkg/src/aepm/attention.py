"""Knee-query spatial attention: per-layer profiles and gait-cycle series."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .evaluation import KneeReadout
from .model import AEPM, AttentionRecord
from .motion_data import MotionSequence, PoseWindow, masked_windows, stack_windows


@dataclass
class SynergyProfile:
    """Head- and frame-averaged knee-query attention, one row per spatial layer."""

    weights: np.ndarray  # M x n
    joint_names: tuple[str, ...]
    per_head: np.ndarray  # M x heads x n, frame-averaged
    scores: np.ndarray  # M x n, pre-softmax scores averaged the same way


@dataclass
class GaitAttentionSeries:
    frames: np.ndarray  # F
    weights: np.ndarray  # F x n, first spatial layer
    truth_deg: np.ndarray
    pred_deg: np.ndarray
    joint_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.frames)

    def mass(self, joints: Sequence[int]) -> float:
        """Mean attention mass on ``joints`` across the series."""
        return float(self.weights[:, list(joints)].sum(axis=1).mean())


def _capture(model: AEPM, x_bar: np.ndarray) -> tuple[object, AttentionRecord]:
    p = next(model.parameters())
    was_training = model.training
    model.eval()
    with torch.no_grad():
        pred, record = model(torch.as_tensor(np.array(x_bar), dtype=p.dtype), capture=True)
    model.train(was_training)
    if record is None or not record.spatial:
        raise RuntimeError("attention capture unavailable")
    return pred, record


def _knee_rows(record: AttentionRecord, layer: int, k: int, b: int, l: int) -> np.ndarray:
    """Knee-query rows of one spatial layer: b x l x heads x n."""
    w = record.spatial[layer].double().numpy()  # (b*l) x heads x n x n
    return w.reshape(b, l, *w.shape[1:])[:, :, :, k, :]


def knee_query_profile(
    model: AEPM, window: PoseWindow, joint_names: Sequence[str] | None = None
) -> SynergyProfile:
    if window.masked_joint is None:
        raise ValueError("window is not masked")
    k = window.masked_joint
    l = model.config.l
    _, record = _capture(model, window.x_bar[None])
    weights, per_head, scores = [], [], []
    for m in range(len(record.spatial)):
        rows = _knee_rows(record, m, k, 1, l)[0]  # l x heads x n
        per_head.append(rows.mean(axis=0))
        weights.append(rows.mean(axis=1).mean(axis=0))
        raw = record.spatial_scores[m].double().numpy()[:, :, k, :]
        scores.append(raw.mean(axis=1).mean(axis=0))
    names = tuple(joint_names) if joint_names is not None else tuple(f"joint{j}" for j in range(model.config.n))
    return SynergyProfile(np.array(weights), names, np.array(per_head), np.array(scores))


def gait_attention_series(
    model: AEPM,
    seq: MotionSequence,
    k: int,
    readout: KneeReadout | None = None,
    frame_average: bool = False,
    batch_size: int = 256,
) -> GaitAttentionSeries:
    """First-layer knee-query attention for every stride-1 window of ``seq``.

    Each window contributes its last-frame token's row, averaged over heads
    (or the mean over all frame tokens when ``frame_average`` is set).
    """
    l = model.config.l
    if seq.n_frames < l:
        raise ValueError(f"empty input: sequence has {seq.n_frames} frames, window needs {l}")
    readout = readout or KneeReadout(seq.convention)
    x_bar, x = stack_windows(masked_windows(seq, l, k))
    rows, preds = [], []
    for s in range(0, len(x_bar), batch_size):
        chunk = x_bar[s : s + batch_size]
        pred, record = _capture(model, chunk)
        r = _knee_rows(record, 0, k, len(chunk), l).mean(axis=2)  # b x l x n
        rows.append(r.mean(axis=1) if frame_average else r[:, -1])
        preds.append(pred.x_hat[:, -1, k].double().numpy())
    return GaitAttentionSeries(
        frames=np.arange(l - 1, seq.n_frames),
        weights=np.concatenate(rows),
        truth_deg=readout.angle(x[:, -1, k]),
        pred_deg=readout.angle(np.concatenate(preds).mean(axis=1)),
        joint_names=seq.joint_names,
    )


def write_profile_csv(profile: SynergyProfile, path: str | Path) -> None:
    lines = ["layer,joint_name,weight"]
    for m, row in enumerate(profile.weights):
        for name, w in zip(profile.joint_names, row):
            lines.append(f"{m},{name},{w:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_series_csv(series: GaitAttentionSeries, path: str | Path) -> None:
    n = series.weights.shape[1]
    lines = [",".join(["frame", "truth_deg", "pred_deg"] + [f"w_joint{j}" for j in range(n)])]
    for i, f in enumerate(series.frames):
        vals = [series.truth_deg[i], series.pred_deg[i], *series.weights[i]]
        lines.append(str(int(f)) + "," + ",".join(format(v, ".9g") for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
