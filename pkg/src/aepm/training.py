"""Two-stage training: mean-over-samples loss, then best-of-N loss."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .evaluation import KneeReadout, predict_last_frame
from .model import AEPM, ModelConfig, PredictionSet, init_parameters, no_decay_names
from .motion_data import PoseWindow, stack_windows

log = logging.getLogger(__name__)

STAGE1, STAGE2 = "S1", "S2"


# ----------------------------------------------------------------------------
# Losses


def _x_hat(pred) -> Tensor:
    return pred.x_hat if isinstance(pred, PredictionSet) else pred


def sample_residual_norms(pred, x: Tensor, squared: bool = False) -> Tensor:
    """Per batch element and sample, the L2 norm of the flattened residual: b x N."""
    x_hat = _x_hat(pred)
    if x_hat.dim() != 5 or x_hat.shape[:3] != x.shape[:3] or x_hat.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"shape mismatch: predictions {tuple(x_hat.shape)} vs ground truth {tuple(x.shape)}"
        )
    r = x.unsqueeze(-2) - x_hat  # b l n N 3
    r = r.permute(0, 3, 1, 2, 4).reshape(r.shape[0], r.shape[3], -1)
    sq = (r * r).sum(-1)
    if squared:
        return sq
    # sqrt has an infinite slope at 0; route the zero-residual case to a zero gradient
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def loss_stage1(pred, x: Tensor, squared: bool = False) -> Tensor:
    """Residual norm averaged over the N samples, then over the batch."""
    return sample_residual_norms(pred, x, squared).mean(dim=1).mean()


def loss_stage2(pred, x: Tensor, squared: bool = False) -> Tensor:
    """Residual norm of the closest sample (lowest index on ties), batch-averaged."""
    norms = sample_residual_norms(pred, x, squared)
    j = torch.argmin(norms.detach(), dim=1)  # torch returns the first minimal index
    return norms.gather(1, j[:, None]).squeeze(1).mean()


LOSSES = {STAGE1: loss_stage1, STAGE2: loss_stage2}


def stage_for_epoch(epoch: int, stage_shift: int) -> str:
    return STAGE1 if epoch < stage_shift else STAGE2


# ----------------------------------------------------------------------------
# Optimizer


class AdamW(torch.optim.Optimizer):
    """Adam with weight decay decoupled from the gradient-based update."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr < 0 or eps < 0 or weight_decay < 0:
            raise ValueError("lr, eps and weight_decay must be non-negative")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"invalid betas {betas}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, wd, eps = group["lr"], group["weight_decay"], group["eps"]
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                if wd:
                    p.mul_(1 - lr * wd)
                m_hat = m / (1 - beta1**t)
                v_hat = v / (1 - beta2**t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss


# ----------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.01
    max_epochs: int = 500
    stage_shift: int = 30  # 30 for Human3.6M-style runs, 3 for CMU-style runs
    patience: int = 20
    seed: int = 0
    squared_norm: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size and patience must be positive")
        if not 0 <= self.stage_shift < self.max_epochs:
            raise ValueError(
                f"stage_shift ({self.stage_shift}) must be below max_epochs ({self.max_epochs})"
            )
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")


@dataclass(frozen=True)
class LossReport:
    epoch: int
    stage: str
    train_loss: float
    val_rmse: float
    seconds: float

    def log_line(self) -> str:
        return f"{self.epoch}\t{self.stage}\t{self.train_loss:.6f}\t{self.val_rmse:.6f}\t{self.seconds:.3f}"


@dataclass
class TrainState:
    """Everything needed to continue a run where it stopped."""

    model: AEPM
    optimizer: AdamW
    next_epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    best_state: dict | None = None
    stale: int = 0
    reports: list[LossReport] = field(default_factory=list)
    stopped_early: bool = False

    def best_model(self) -> AEPM:
        model = copy.deepcopy(self.model)
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        return model


def make_optimizer(model: AEPM, cfg: TrainConfig) -> AdamW:
    skip = no_decay_names(model)
    decay = [p for n, p in model.named_parameters() if n not in skip]
    plain = [p for n, p in model.named_parameters() if n in skip]
    groups = [{"params": decay}, {"params": plain, "weight_decay": 0.0}]
    return AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def train_step(
    model: AEPM,
    optimizer: torch.optim.Optimizer,
    x_bar: Tensor,
    x: Tensor,
    stage: str,
    squared: bool = False,
    batch_id=None,
) -> float:
    """One gradient step on the stage loss; returns the pre-step loss."""
    if stage not in LOSSES:
        raise ValueError(f"unknown stage {stage!r}")
    optimizer.zero_grad(set_to_none=True)
    pred, _ = model(x_bar)
    loss = LOSSES[stage](pred, x, squared)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite {stage} loss on batch {batch_id}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def validation_rmse(model: AEPM, x_bar: np.ndarray, x: np.ndarray, k: int, readout: KneeReadout):
    """Last-frame knee RMSE (degrees) of the sample mean, and of mu for reference."""
    samples, mu, _ = predict_last_frame(model, x_bar, k)
    truth = readout.angle(x[:, -1, k])
    mean_err = readout.angle(samples.mean(axis=1)) - truth
    mu_err = readout.angle(mu) - truth
    return float(np.sqrt(np.mean(mean_err**2))), float(np.sqrt(np.mean(mu_err**2)))


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_windows: Sequence[PoseWindow],
    val_windows: Sequence[PoseWindow],
    readout: KneeReadout | None = None,
    init_seed: int | None = None,
    dtype=torch.float32,
    resume: TrainState | None = None,
    on_epoch: Callable[[TrainState, LossReport], None] | None = None,
) -> TrainState:
    """Run two-stage training with early stopping on validation mean RMSE.

    Windows must already be masked on a common joint.  Epochs before
    ``stage_shift`` optimize the stage-1 loss, later epochs the stage-2 loss.
    Best-checkpoint selection and the patience counter only cover stage-2
    epochs.  The returned state holds the final model and the best-validation
    weights.
    """
    cfg = train_config
    if not train_windows:
        raise ValueError("empty training dataset")
    if not val_windows:
        raise ValueError("empty validation dataset")
    ks = {w.masked_joint for w in list(train_windows) + list(val_windows)}
    if len(ks) != 1 or None in ks:
        raise ValueError(f"windows must all be masked on one joint, got {ks}")
    k = ks.pop()
    readout = readout or KneeReadout()

    tr_bar, tr_x = (torch.as_tensor(a, dtype=dtype) for a in stack_windows(train_windows))
    va_bar, va_x = stack_windows(val_windows)

    if resume is None:
        seed = cfg.seed if init_seed is None else init_seed
        model = init_parameters(model_config, seed, dtype)
        state = TrainState(model, make_optimizer(model, cfg))
    else:
        state = resume
    model = state.model
    model.train()

    n = len(tr_bar)
    for epoch in range(state.next_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        stage = stage_for_epoch(epoch, cfg.stage_shift)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, count = 0.0, 0
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.as_tensor(order[s : s + cfg.batch_size])
            loss = train_step(
                model, state.optimizer, tr_bar[idx], tr_x[idx], stage, cfg.squared_norm,
                batch_id=(epoch, bi),
            )
            total += loss * len(idx)
            count += len(idx)
        val, val_mu = validation_rmse(model, va_bar, va_x, k, readout)
        log.debug("epoch %d: val rmse %.4f (sample mean) vs %.4f (mu)", epoch, val, val_mu)
        report = LossReport(epoch, stage, total / count, val, time.perf_counter() - t0)
        state.reports.append(report)
        state.next_epoch = epoch + 1
        if stage == STAGE1:
            pass  # warm-up: the final predictor is the stage-2 one, so selection starts at the shift
        elif val < state.best_val:
            state.best_val, state.best_epoch, state.stale = val, epoch, 0
            state.best_state = {n_: t.detach().clone() for n_, t in model.state_dict().items()}
        else:
            state.stale += 1
        if on_epoch is not None:
            on_epoch(state, report)
        if state.stale >= cfg.patience:
            state.stopped_early = True
            break
    return state


# ----------------------------------------------------------------------------
# Gradient verification


def parameter_groups(model: nn.Module) -> dict[str, list[nn.Parameter]]:
    """Group parameters by their top-level submodule; positional embeddings together."""
    groups: dict[str, list[nn.Parameter]] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        if top in ("spatial_pos", "temporal_pos"):
            top = "positional"
        groups.setdefault(top, []).append(p)
    return groups


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    groups: dict[str, Iterable[nn.Parameter]],
    step: float = 1e-4,
    coords: int = 200,
    seed: int = 0,
    floor: float | None = None,
    stencil: int = 5,
) -> dict[str, float]:
    """Max relative error of autograd against central differences, per group.

    ``coords`` coordinates are drawn per group (all of them when the group is
    smaller).  ``stencil`` is 3 (two-point central difference) or 5 (fourth
    order central difference, same step).  Relative error is
    ``|a - f| / max(|a|, |f|, floor)``; the default floor is
    ``1e-6 * max(1, |loss|)``, above the round-off level of the difference
    quotient.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    params = [p for ps in groups.values() for p in ps]
    for p in params:
        p.grad = None
    base = loss_fn()
    base.backward()
    if floor is None:
        floor = 1e-6 * max(1.0, abs(base.item()))
    analytic = {id(p): p.grad.detach().clone() for p in params}
    rng = np.random.default_rng(seed)

    def at(view, i, orig, offset):
        view[i] = orig + offset
        return loss_fn().item()

    result = {}
    with torch.no_grad():
        for gname, ps in groups.items():
            ps = list(ps)
            sizes = [p.numel() for p in ps]
            total = sum(sizes)
            picks = rng.choice(total, size=min(coords, total), replace=False)
            bounds = np.cumsum([0] + sizes)
            worst = 0.0
            for flat in picks:
                pi = int(np.searchsorted(bounds, flat, side="right") - 1)
                p, i = ps[pi], int(flat - bounds[pi])
                view = p.view(-1)
                orig = view[i].item()
                h = step
                if stencil == 3:
                    fd = (at(view, i, orig, h) - at(view, i, orig, -h)) / (2 * h)
                else:
                    fd = (
                        -at(view, i, orig, 2 * h)
                        + 8 * at(view, i, orig, h)
                        - 8 * at(view, i, orig, -h)
                        + at(view, i, orig, -2 * h)
                    ) / (12 * h)
                view[i] = orig
                a = analytic[id(p)].view(-1)[i].item()
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
            result[gname] = worst
    for p in params:
        p.grad = None
    return result


def _tie_margin(norms: Tensor) -> float:
    """Smallest gap between the best and second-best sample norm, relative."""
    top2 = torch.topk(norms, 2, dim=1, largest=False).values
    return float(((top2[:, 1] - top2[:, 0]) / top2[:, 1]).min())


def _spread_ratio(samples: Tensor) -> float:
    """Smallest per-element sample std, relative to the rms raw sample size."""
    std = samples.std(dim=-2, unbiased=False)
    return float(std.min() / samples.pow(2).mean().sqrt())


def grad_check(
    config: ModelConfig | None = None,
    seed: int = 0,
    step: float = 1e-4,
    stage: str = STAGE1,
    coords: int = 200,
    batch: int = 1,
    stencil: int = 5,
    min_spread: float = 0.02,
    details: bool = False,
):
    """Compare autograd and finite-difference gradients of a tiny AEPM in float64.

    The reparameterization divides by the per-element sample std, which makes
    the loss arbitrarily curved wherever two raw samples nearly coincide.  The
    input is therefore re-drawn until every element's sample spread is at
    least ``min_spread`` of the rms raw sample size, and, for the stage-2
    loss, until the best sample leads the runner-up by a clear margin so the
    argmin cannot flip under the difference step.
    """
    config = config or ModelConfig(n=3, l=4, d=8, heads=2, M=1, N=2)
    model = init_parameters(config, seed, torch.float64)
    loss = LOSSES[stage]
    for attempt in range(1000):
        gen = torch.Generator().manual_seed(seed * 100003 + attempt)
        x = torch.randn(batch, config.l, config.n, 3, generator=gen, dtype=torch.float64)
        x_bar = x.clone()
        x_bar[:, :, config.n - 1] = 0.0
        with torch.no_grad():
            pred, _ = model(x_bar)
        if _spread_ratio(pred.samples) < min_spread:
            continue
        if stage == STAGE2 and _tie_margin(sample_residual_norms(pred, x)) < 1e-3:
            continue
        break
    else:
        raise RuntimeError("could not draw a well-conditioned input for the gradient check")

    per_group = finite_difference_check(
        lambda: loss(model(x_bar)[0], x), parameter_groups(model), step, coords, seed,
        stencil=stencil,
    )
    worst = max(per_group.values())
    return (worst, per_group) if details else worst
