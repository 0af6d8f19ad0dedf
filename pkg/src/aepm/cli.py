"""Command-line entry point: synth, train, eval, ablate and attn subcommands."""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .ablation import ablation_run, format_ablation
from .attention import gait_attention_series, knee_query_profile, write_profile_csv, write_series_csv
from .evaluation import KneeReadout, group_by_label, scenario_report, write_report, write_trace
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .motion_data import (
    MotionSequence,
    downsample,
    make_windows,
    mask_joint,
    masked_windows,
    parse_motion_csv,
    select_joints,
    subject_spec,
    synth_gait,
    write_motion_csv,
)
from .training import TrainConfig, TrainState, make_optimizer, train

SEED_TAGS = {"data": 0, "init": 1, "train": 2}


def sub_seed(seed: int, tag: str) -> int:
    """Independent named seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, SEED_TAGS[tag]]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# Run configuration

_POS_INT = {"type": "integer", "minimum": 1}
_GLOBS = {"type": "array", "items": {"type": "string"}, "minItems": 1}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "masked_joint"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **{k: _POS_INT for k in ("n", "l", "d", "M", "N", "heads")},
                "mlp_hidden": {"type": ["integer", "null"], "minimum": 1},
                "decoder_hidden": {"type": ["integer", "null"], "minimum": 1},
                "norm_first": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "minimum": 0},
                "batch_size": _POS_INT,
                "weight_decay": {"type": "number", "minimum": 0},
                "max_epochs": _POS_INT,
                "stage_shift": {"type": "integer", "minimum": 0},
                "patience": _POS_INT,
                "squared_norm": {"type": "boolean"},
                "betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "eps": {"type": "number", "minimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train", "val"],
            "properties": {
                "train": _GLOBS,
                "val": _GLOBS,
                "test": _GLOBS,
                "downsample": _POS_INT,
                "train_stride": _POS_INT,
            },
        },
        "masked_joint": {"type": "string", "minLength": 1},
        "joints": {"type": ["array", "null"], "items": {"type": "string"}, "minItems": 1},
        "flexion_channel": {"type": "integer", "minimum": 0, "maximum": 2},
        "per_channel": {"type": "boolean"},
        "out_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def load_run_config(path: str | Path, seed: int | None = None, out: str | None = None) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON: {e}") from None
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValueError(f"{path}: config {where}: {e.message}") from None
    cfg = dict(cfg)
    cfg.setdefault("model", {})
    cfg.setdefault("train", {})
    cfg.setdefault("joints", None)
    cfg.setdefault("flexion_channel", 0)
    cfg.setdefault("per_channel", False)
    cfg.setdefault("seed", 0)
    cfg.setdefault("out_dir", "aepm_out")
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out_dir"] = out
    if cfg["joints"] is not None and cfg["masked_joint"] not in cfg["joints"]:
        raise ValueError(f"masked joint {cfg['masked_joint']!r} is not in the joint subset")
    data = dict(cfg["data"])
    data.setdefault("downsample", 1)
    data.setdefault("train_stride", 1)
    base = path.parent
    for split in ("train", "val", "test"):
        if split in data:
            data[split] = [str(p) for p in expand_globs(data[split], base)]
    cfg["data"] = data
    return cfg


def expand_globs(patterns, base: Path | None = None) -> list[Path]:
    out = []
    for pat in patterns:
        p = Path(pat)
        if not p.is_absolute() and base is not None:
            p = base / p
        hits = sorted(glob.glob(str(p)))
        if not hits:
            raise ValueError(f"no files match {pat!r}")
        out.extend(Path(h) for h in hits)
    return out


def load_sequences(paths, factor: int = 1, joints=None) -> list[MotionSequence]:
    seqs = []
    for p in paths:
        s = parse_motion_csv(p)
        if factor > 1:
            s = downsample(s, factor)
        if joints is not None:
            s = select_joints(s, [s.joint_index(j) for j in joints])
        seqs.append(s)
    return seqs


def _readout(cfg: dict, convention: str) -> KneeReadout:
    return KneeReadout(convention, cfg.get("flexion_channel", 0), cfg.get("per_channel", False))


def _train_config(cfg: dict) -> TrainConfig:
    tc = dict(cfg["train"])
    if "betas" in tc:
        tc["betas"] = tuple(tc["betas"])
    return TrainConfig(seed=sub_seed(cfg["seed"], "train"), **tc)


def _model_config(cfg: dict, n: int) -> ModelConfig:
    mc = dict(cfg["model"])
    if mc.setdefault("n", n) != n:
        raise ValueError(f"model.n={mc['n']} but the data has {n} joints")
    return ModelConfig(**mc)


# ----------------------------------------------------------------------------
# Optimizer state in checkpoints

def _optimizer_arrays(state: TrainState) -> tuple[dict, dict]:
    names = {id(p): n for n, p in state.model.named_parameters()}
    arrays, steps = {}, {}
    for p, st in state.optimizer.state.items():
        if not st:
            continue
        n = names[id(p)]
        arrays[f"opt.exp_avg.{n}"] = st["exp_avg"]
        arrays[f"opt.exp_avg_sq.{n}"] = st["exp_avg_sq"]
        steps[n] = st["step"]
    return arrays, steps


def _restore_optimizer(state: TrainState, extra: dict, steps: dict) -> None:
    for n, p in state.model.named_parameters():
        if n in steps:
            state.optimizer.state[p] = {
                "step": int(steps[n]),
                "exp_avg": extra[f"opt.exp_avg.{n}"].to(p.dtype).clone(),
                "exp_avg_sq": extra[f"opt.exp_avg_sq.{n}"].to(p.dtype).clone(),
            }


# ----------------------------------------------------------------------------
# Commands

def cmd_synth(args) -> None:
    spec = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if not isinstance(spec, dict):
        raise ValueError("synth spec must be a JSON object")
    spec = dict(spec)
    subjects = spec.pop("subjects", None)
    trials = spec.pop("trials", None)
    label = spec.pop("label", None)
    if args.seed is not None:
        spec["seed"] = sub_seed(args.seed, "data")
    allowed = {"n_joints", "knee", "drivers", "subject", "trial", "noise_std", "duration",
               "frame_rate", "frequency", "seed", "coupling_seed"}
    unknown = set(spec) - allowed
    if unknown:
        raise ValueError(f"unknown synth spec fields {sorted(unknown)}")

    def one(**kw):
        s = synth_gait(subject_spec(**{**spec, **kw}))
        if label is not None:
            s = MotionSequence(s.frame_rate, s.joint_names, s.convention, s.frames, label)
        return s

    out = Path(args.out)
    if subjects is None and trials is None:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_motion_csv(one(), out)
        return
    subjects = subjects if subjects is not None else [spec.get("subject", 0)]
    trials = trials if trials is not None else 1
    out.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        for t in range(trials):
            kw = {"subject": s, "trial": t}
            if "seed" in spec:
                kw["seed"] = int(np.random.SeedSequence([spec["seed"], s, t]).generate_state(1)[0])
            write_motion_csv(one(**kw), out / f"subject{s}_trial{t}.csv")


def _masked_index(seqs, name):
    ks = {s.joint_index(name) for s in seqs}
    if len(ks) != 1:
        raise ValueError(f"masked joint {name!r} sits at different indices across files")
    return ks.pop()


def cmd_train(args) -> None:
    cfg = load_run_config(args.config, args.seed, args.out)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    d = cfg["data"]
    tr = load_sequences(d["train"], d["downsample"], cfg["joints"])
    va = load_sequences(d["val"], d["downsample"], cfg["joints"])
    names = tr[0].joint_names
    if any(s.joint_names != names for s in tr + va):
        raise ValueError("training and validation files disagree on joint names")
    k = _masked_index(tr, cfg["masked_joint"])
    mc = _model_config(cfg, len(names))
    tc = _train_config(cfg)
    readout = _readout(cfg, tr[0].convention)
    tr_w = [w for i, s in enumerate(tr) for w in masked_windows(s, mc.l, k, d["train_stride"], str(i))]
    va_w = [w for i, s in enumerate(va) for w in masked_windows(s, mc.l, k, 1, str(i))]
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    log_path = out / "train.log"
    resume = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.model.config != mc:
            raise ValueError("resume checkpoint was trained with a different model config")
        m = ck.meta
        resume = TrainState(ck.model, make_optimizer(ck.model, tc), next_epoch=m["epoch"] + 1,
                            best_val=m["best_val"], best_epoch=m["best_epoch"], stale=m["stale"])
        _restore_optimizer(resume, ck.extra, m["opt_steps"])
        best_path = Path(args.resume).with_name("best.ckpt")
        if best_path.exists():
            resume.best_state = load_checkpoint(best_path).model.state_dict()
        if resume.next_epoch >= tc.max_epochs:
            raise ValueError("checkpoint already reached max_epochs")
    else:
        log_path.write_text("", encoding="utf-8")

    meta_base = {
        "joint_names": list(names),
        "masked_joint": cfg["masked_joint"],
        "convention": tr[0].convention,
        "flexion_channel": cfg["flexion_channel"],
        "per_channel": cfg["per_channel"],
    }

    def on_epoch(state: TrainState, report) -> None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(report.log_line() + "\n")
        meta = {**meta_base, "epoch": report.epoch, "best_val": state.best_val,
                "best_epoch": state.best_epoch, "stale": state.stale}
        if state.best_epoch == report.epoch:
            save_checkpoint(out / "best.ckpt", state.model, meta)
        arrays, steps = _optimizer_arrays(state)
        save_checkpoint(out / "last.ckpt", state.model, {**meta, "opt_steps": steps}, arrays)

    state = train(mc, tc, tr_w, va_w, readout, init_seed=sub_seed(cfg["seed"], "init"),
                  resume=resume, on_epoch=on_epoch)
    print(f"best validation mean RMSE {state.best_val:.4f} deg at epoch {state.best_epoch}")


def _checkpoint_context(path):
    ck = load_checkpoint(path)
    m = ck.meta
    for key in ("joint_names", "masked_joint", "convention"):
        if key not in m:
            raise ValueError(f"{path}: checkpoint meta lacks {key!r}")
    readout = KneeReadout(m["convention"], m.get("flexion_channel", 0), m.get("per_channel", False))
    return ck.model, m, readout


def _conform(seqs, names):
    out = []
    for s in seqs:
        if s.joint_names != tuple(names):
            s = select_joints(s, [s.joint_index(j) for j in names])
        out.append(s)
    return out


def cmd_eval(args) -> None:
    model, meta, readout = _checkpoint_context(args.checkpoint)
    paths = expand_globs([args.data])
    seqs = _conform(load_sequences(paths, args.downsample), meta["joint_names"])
    k = list(meta["joint_names"]).index(meta["masked_joint"])
    groups = group_by_label(seqs)
    rows, traces = scenario_report(model, groups, k, readout)
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    write_report(rows, out / "report.tsv")
    stems = {}
    for p, s in zip(paths, seqs):
        stems.setdefault(s.scenario_label or "unlabeled", []).append(p.stem)
    for label, ts in traces.items():
        for stem, t in zip(stems[label], ts):
            write_trace(t, out / "traces" / f"{stem}.csv")
    print((out / "report.tsv").read_text(encoding="utf-8"), end="")


def parse_subsets(path: str | Path) -> list[list[str]]:
    subsets = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        names = [c.strip() for c in line.split(",")]
        if any(not c for c in names):
            raise ValueError(f"{path}: line {i}: empty joint name")
        if len(set(names)) != len(names):
            raise ValueError(f"{path}: line {i}: duplicate joint name")
        subsets.append(names)
    if not subsets:
        raise ValueError(f"{path}: no subsets listed")
    return subsets


def cmd_ablate(args) -> None:
    cfg = load_run_config(args.config, args.seed, args.out)
    d = cfg["data"]
    if "test" not in d:
        raise ValueError("ablation needs data.test")
    tr, va, te = (load_sequences(d[s], d["downsample"]) for s in ("train", "val", "test"))
    names = tr[0].joint_names
    subsets_named = parse_subsets(args.subsets)
    subsets = []
    for i, sub in enumerate(subsets_named, start=1):
        missing = [j for j in sub if j not in names]
        if missing:
            raise ValueError(f"{args.subsets}: subset {i}: unknown joints {missing}")
        subsets.append([names.index(j) for j in sub])
    k = _masked_index(tr, cfg["masked_joint"])
    mc = _model_config(cfg, len(names))
    models = {}
    if args.checkpoint:
        model, meta, _ = _checkpoint_context(args.checkpoint)
        models[tuple(names.index(j) for j in meta["joint_names"])] = model
    rows, _ = ablation_run(
        mc, _train_config(cfg), subsets, tr, va, te, k, _readout(cfg, tr[0].convention),
        models=models, train_stride=d["train_stride"],
    )
    text = format_ablation(rows)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_attn(args) -> None:
    model, meta, readout = _checkpoint_context(args.checkpoint)
    names = meta["joint_names"]
    seq = _conform([parse_motion_csv(args.sequence)], names)[0]
    k = list(names).index(meta["masked_joint"])
    l = model.config.l
    windows = make_windows(seq, l)
    if not 0 <= args.start < len(windows):
        raise ValueError(f"--start must be in [0, {len(windows) - 1}]")
    profile = knee_query_profile(model, mask_joint(windows[args.start], k), names)
    series = gait_attention_series(model, seq, k, readout, frame_average=args.frame_average)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_profile_csv(profile, out / "profile.csv")
    write_series_csv(series, out / "series.csv")


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aepm", description="Knee angle reconstruction from body motion.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False, default_out="aepm_out"):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--out", default=default_out)
        sp.add_argument("--seed", type=int, default=None)
        return sp

    s = common(sub.add_parser("synth", help="write synthetic gait CSVs"), default_out="synth.csv")
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("train", help="train a model from a run config"), config_required=True, default_out=None)
    s.add_argument("--resume", help="continue from a last.ckpt")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="glob of motion CSVs")
    s.add_argument("--downsample", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("ablate", help="joint-quantity ablation"), config_required=True, default_out=None)
    s.add_argument("--subsets", required=True, help="one comma-separated joint list per line")
    s.add_argument("--checkpoint", help="reuse this model for its own joint set")
    s.set_defaults(func=cmd_ablate)

    s = common(sub.add_parser("attn", help="export knee-query attention"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence", required=True)
    s.add_argument("--start", type=int, default=0, help="window start for the layer profile")
    s.add_argument("--frame-average", action="store_true", help="average series rows over frame tokens")
    s.set_defaults(func=cmd_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("AEPM_THREADS")
    try:
        if threads:
            torch.set_num_threads(int(threads))
        args.func(args)
    except Exception as e:  # every failure becomes one error line
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
