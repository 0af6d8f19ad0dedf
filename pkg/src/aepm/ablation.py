"""Joint-quantity ablation: retrain on joint subsets and compare metrics."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .evaluation import KneeReadout, scenario_report
from .model import AEPM, ModelConfig
from .motion_data import MotionSequence, masked_windows, select_joints
from .training import TrainConfig, train


@dataclass(frozen=True)
class AblationRow:
    subset: tuple[int, ...]
    joint_names: tuple[str, ...]
    mean_rmse: float
    best_rmse: float
    avg_std: float
    frames: int


ABLATION_HEADER = ("subset", "mean_rmse_deg", "best_rmse_deg", "avg_std_deg", "frames")


def _windows(seqs, l, k, stride):
    return [w for i, s in enumerate(seqs) for w in masked_windows(s, l, k, stride, seq_id=str(i))]


def ablation_run(
    model_config: ModelConfig,
    train_config: TrainConfig,
    subsets: Sequence[Sequence[int]],
    train_seqs: Sequence[MotionSequence],
    val_seqs: Sequence[MotionSequence],
    test_seqs: Sequence[MotionSequence],
    k: int,
    readout: KneeReadout | None = None,
    models: dict[tuple[int, ...], AEPM] | None = None,
    train_stride: int = 1,
    dtype=torch.float32,
) -> tuple[list[AblationRow], dict[tuple[int, ...], AEPM]]:
    """Train (or reuse from ``models``) one model per joint subset and evaluate it.

    ``k`` indexes the full joint set; inside each subset the knee is remapped
    to its position in that subset.  ``avg_std`` is the mean predicted sigma in
    degrees over all test frames.
    """
    subsets = [tuple(int(j) for j in s) for s in subsets]
    for s in subsets:
        if k not in s:
            raise ValueError(f"joint subset {list(s)} does not include the masked knee {k}")
    if not test_seqs:
        raise ValueError("no test sequences")
    models = dict(models or {})
    rows = []
    for s in subsets:
        ks = s.index(k)
        pick = lambda seqs: [select_joints(q, s) for q in seqs]
        tests = pick(test_seqs)
        model = models.get(s)
        if model is None:
            cfg = replace(model_config, n=len(s))
            state = train(
                cfg,
                train_config,
                _windows(pick(train_seqs), cfg.l, ks, train_stride),
                _windows(pick(val_seqs), cfg.l, ks, 1),
                readout,
                dtype=dtype,
            )
            model = state.best_model()
            models[s] = model
        elif model.config.n != len(s):
            raise ValueError(f"model for subset {list(s)} expects {model.config.n} joints")
        report, _ = scenario_report(model, {"all": tests}, ks, readout)
        avg = report[-1]
        rows.append(AblationRow(s, tests[0].joint_names, avg.mean_rmse, avg.best_rmse, avg.mean_std, avg.frames))
    return rows, models


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = ["\t".join(ABLATION_HEADER)]
    for r in rows:
        names = " ".join(r.joint_names)
        lines.append(f"{names}\t{r.mean_rmse:.6f}\t{r.best_rmse:.6f}\t{r.avg_std:.6f}\t{r.frames}")
    return "\n".join(lines) + "\n"
