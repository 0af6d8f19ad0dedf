"""Sliding-window inference and knee-angle error metrics in degrees."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .model import AEPM
from .motion_data import CONVENTIONS, MotionSequence, masked_windows, stack_windows


@dataclass(frozen=True)
class KneeReadout:
    """How a 3-channel joint value becomes a scalar knee angle in degrees.

    ``euler-xyz`` reads ``flexion_channel`` directly (already degrees);
    ``exponential-map`` takes the axis-angle magnitude, converted from radians.
    ``per_channel`` switches exponential-map to the flexion channel in degrees.
    """

    convention: str = "euler-xyz"
    flexion_channel: int = 0
    per_channel: bool = False

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown angle convention {self.convention!r}")
        if not 0 <= self.flexion_channel < 3:
            raise ValueError("flexion_channel must be 0, 1 or 2")

    def angle(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.convention == "euler-xyz":
            return v[..., self.flexion_channel]
        if self.per_channel:
            return np.degrees(v[..., self.flexion_channel])
        return np.degrees(np.linalg.norm(v, axis=-1))

    def spread(self, sigma) -> np.ndarray:
        """Predicted std expressed in degrees."""
        sigma = np.asarray(sigma, dtype=np.float64)
        return sigma if self.convention == "euler-xyz" else np.degrees(sigma)


def knee_angle_deg(v, convention: str, flexion_channel: int = 0) -> float | np.ndarray:
    out = KneeReadout(convention, flexion_channel).angle(v)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class EvalTrace:
    """Last-frame predictions for every window of a sequence.

    ``samples``: F x N x 3, ``mu``: F x 3, ``sigma``: F, ``truth``: F x 3.
    """

    frames: np.ndarray
    samples: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    truth: np.ndarray
    readout: KneeReadout = KneeReadout()
    label: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    def truth_deg(self) -> np.ndarray:
        return self.readout.angle(self.truth)

    def sample_deg(self) -> np.ndarray:
        return self.readout.angle(self.samples)

    def mean_deg(self) -> np.ndarray:
        return self.readout.angle(self.samples.mean(axis=1))

    def sigma_deg(self) -> np.ndarray:
        return self.readout.spread(self.sigma)

    @classmethod
    def concat(cls, traces: Sequence["EvalTrace"], label: str = "") -> "EvalTrace":
        if not traces:
            raise ValueError("no traces to concatenate")
        return cls(
            frames=np.concatenate([t.frames for t in traces]),
            samples=np.concatenate([t.samples for t in traces]),
            mu=np.concatenate([t.mu for t in traces]),
            sigma=np.concatenate([t.sigma for t in traces]),
            truth=np.concatenate([t.truth for t in traces]),
            readout=traces[0].readout,
            label=label or traces[0].label,
        )


def predict_last_frame(model: AEPM, x_bar: np.ndarray, k: int, batch_size: int = 512):
    """Run windows through the model and keep joint ``k`` of the last frame."""
    p = next(model.parameters())
    samples, mus, sigmas = [], [], []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for s in range(0, len(x_bar), batch_size):
            xb = torch.as_tensor(np.array(x_bar[s : s + batch_size]), dtype=p.dtype)
            pred, _ = model(xb)
            samples.append(pred.x_hat[:, -1, k].double().numpy())
            mus.append(pred.mu[:, -1, k].double().numpy())
            sigmas.append(pred.sigma[:, -1, k, 0].double().numpy())
    model.train(was_training)
    return np.concatenate(samples), np.concatenate(mus), np.concatenate(sigmas)


def sliding_infer(
    model: AEPM, seq: MotionSequence, k: int, readout: KneeReadout | None = None
) -> EvalTrace:
    """Slide a window one frame at a time; record only each window's last frame."""
    l = model.config.l
    if seq.n_frames < l:
        raise ValueError(f"empty input: sequence has {seq.n_frames} frames, window needs {l}")
    windows = masked_windows(seq, l, k)
    x_bar, _ = stack_windows(windows)
    samples, mu, sigma = predict_last_frame(model, x_bar, k)
    frames = np.arange(l - 1, seq.n_frames)
    readout = readout or KneeReadout(seq.convention)
    return EvalTrace(frames, samples, mu, sigma, seq.frames[l - 1 :, k].copy(), readout, seq.scenario_label)


def _sq_errors_mean(trace: EvalTrace) -> np.ndarray:
    return (trace.mean_deg() - trace.truth_deg()) ** 2


def _sq_errors_best(trace: EvalTrace, per_frame: bool = True) -> np.ndarray:
    err = trace.sample_deg() - trace.truth_deg()[:, None]  # F x N
    if per_frame:
        return np.min(err**2, axis=1)
    # single sample index chosen for the whole trace
    best = np.argmin(np.mean(err**2, axis=0))
    return err[:, best] ** 2


def rmse_mean(trace: EvalTrace) -> float:
    if len(trace) == 0:
        raise ValueError("empty trace")
    return float(math.sqrt(np.mean(_sq_errors_mean(trace))))


def rmse_best(trace: EvalTrace, per_frame: bool = True) -> float:
    """Oracle best-of-N RMSE.

    ``per_frame`` picks the closest sample on every frame; otherwise one sample
    index is fixed for the whole trace.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    return float(math.sqrt(np.mean(_sq_errors_best(trace, per_frame))))


@dataclass(frozen=True)
class ScenarioReport:
    label: str
    mean_rmse: float
    best_rmse: float
    mean_std: float
    frames: int


REPORT_HEADER = ("scenario", "mean_rmse_deg", "best_rmse_deg", "mean_std_deg", "frames")


def _report(label: str, traces: Sequence[EvalTrace]) -> ScenarioReport:
    sq_mean = np.concatenate([_sq_errors_mean(t) for t in traces])
    sq_best = np.concatenate([_sq_errors_best(t) for t in traces])
    sig = np.concatenate([t.sigma_deg() for t in traces])
    return ScenarioReport(
        label,
        float(math.sqrt(sq_mean.mean())),
        float(math.sqrt(sq_best.mean())),
        float(sig.mean()),
        int(sq_mean.size),
    )


def scenario_report(
    model: AEPM,
    groups: Mapping[str, Sequence[MotionSequence]],
    k: int,
    readout: KneeReadout | None = None,
) -> tuple[list[ScenarioReport], dict[str, list[EvalTrace]]]:
    """Per-label reports plus a frame-weighted ``average`` row over all labels."""
    traces: dict[str, list[EvalTrace]] = {}
    for label, seqs in groups.items():
        if not seqs:
            raise ValueError(f"scenario {label!r} has no sequences")
        traces[label] = [sliding_infer(model, s, k, readout) for s in seqs]
    rows = [_report(label, ts) for label, ts in traces.items()]
    rows.append(_report("average", [t for ts in traces.values() for t in ts]))
    return rows, traces


def group_by_label(seqs: Sequence[MotionSequence]) -> dict[str, list[MotionSequence]]:
    groups: dict[str, list[MotionSequence]] = {}
    for s in seqs:
        groups.setdefault(s.scenario_label or "unlabeled", []).append(s)
    return groups


def write_report(rows: Sequence[ScenarioReport], path: str | Path) -> None:
    lines = ["\t".join(REPORT_HEADER)]
    for r in rows:
        lines.append(f"{r.label}\t{r.mean_rmse:.6f}\t{r.best_rmse:.6f}\t{r.mean_std:.6f}\t{r.frames}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trace(trace: EvalTrace, path: str | Path) -> None:
    N = trace.samples.shape[1]
    header = ["frame", "truth_deg", "mean_deg", "sigma_deg"] + [f"sample{i}_deg" for i in range(N)]
    truth, mean, sig, samp = trace.truth_deg(), trace.mean_deg(), trace.sigma_deg(), trace.sample_deg()
    lines = [",".join(header)]
    for i, f in enumerate(trace.frames):
        vals = [truth[i], mean[i], sig[i], *samp[i]]
        lines.append(str(int(f)) + "," + ",".join(format(v, ".6f") for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
