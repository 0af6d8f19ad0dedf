"""Joint-angle motion sequences: CSV interchange, resampling, windowing, masking
and a synthetic gait generator with a known linear knee coupling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

CONVENTIONS = ("exponential-map", "euler-xyz")


class MotionFormatError(ValueError):
    """Raised when a motion CSV does not follow the interchange format."""

    def __init__(self, line: int, message: str):
        super().__init__(f"row {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class MotionSequence:
    frame_rate: float
    joint_names: tuple[str, ...]
    convention: str
    frames: np.ndarray  # (T, n, 3)
    scenario_label: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if not (math.isfinite(self.frame_rate) and self.frame_rate > 0):
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown angle convention {self.convention!r}")
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValueError(f"frames must be T x n x 3, got shape {frames.shape}")
        if frames.shape[1] != len(self.joint_names):
            raise ValueError(
                f"{len(self.joint_names)} joint names for {frames.shape[1]} joints"
            )
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"joint {name!r} not in sequence") from None

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (
            self.frame_rate == other.frame_rate
            and self.joint_names == other.joint_names
            and self.convention == other.convention
            and self.scenario_label == other.scenario_label
            and np.array_equal(self.frames, other.frames)
        )

    __hash__ = None


@dataclass(frozen=True)
class PoseWindow:
    """An l-frame slice of a sequence. ``x_bar`` equals ``x`` until masked."""

    x: np.ndarray
    x_bar: np.ndarray
    masked_joint: int | None = None
    source: tuple[str, int] = ("", 0)

    @property
    def start(self) -> int:
        return self.source[1]


# ----------------------------------------------------------------------------
# CSV interchange


def _format_float(v: float) -> str:
    return repr(float(v))  # shortest string that parses back to the same double


def parse_motion_csv(path: str | Path, scenario_label: str | None = None) -> MotionSequence:
    """Read a motion CSV.

    Layout::

        rate,<fps>
        convention,<exponential-map|euler-xyz>
        joints,<name0>,<name1>,...
        <frame_index>,<j0_c0>,<j0_c1>,<j0_c2>,<j1_c0>,...

    An optional fourth header line ``label,<text>`` sets the scenario label.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 3:
        raise MotionFormatError(len(lines) + 1, "truncated header")

    head = lines[0].split(",")
    if len(head) != 2 or head[0] != "rate":
        raise MotionFormatError(1, "expected 'rate,<fps>'")
    try:
        rate = float(head[1])
    except ValueError:
        raise MotionFormatError(1, f"non-numeric frame rate {head[1]!r}") from None
    if not (math.isfinite(rate) and rate > 0):
        raise MotionFormatError(1, f"frame rate must be positive, got {head[1]!r}")

    conv = lines[1].split(",")
    if len(conv) != 2 or conv[0] != "convention":
        raise MotionFormatError(2, "expected 'convention,<tag>'")
    if conv[1] not in CONVENTIONS:
        raise MotionFormatError(2, f"unknown convention tag {conv[1]!r}")

    joints = lines[2].split(",")
    if joints[0] != "joints" or len(joints) < 2 or any(not j for j in joints[1:]):
        raise MotionFormatError(3, "expected 'joints,<name0>,...'")
    names = joints[1:]
    if len(set(names)) != len(names):
        raise MotionFormatError(3, "duplicate joint names")

    body_start = 3
    label = scenario_label if scenario_label is not None else ""
    if len(lines) > 3 and lines[3].startswith("label,"):
        if scenario_label is None:
            label = lines[3][len("label,"):]
        body_start = 4

    width = 1 + 3 * len(names)
    rows = []
    for lineno, line in enumerate(lines[body_start:], start=body_start + 1):
        cells = line.split(",")
        if len(cells) != width:
            raise MotionFormatError(lineno, f"expected {width} fields, got {len(cells)}")
        try:
            values = [float(c) for c in cells]
        except ValueError:
            bad = next(c for c in cells if not _is_float(c))
            raise MotionFormatError(lineno, f"non-numeric cell {bad!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise MotionFormatError(lineno, "non-finite value")
        rows.append(values[1:])
    if not rows:
        raise MotionFormatError(body_start + 1, "empty sequence")

    frames = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names), 3)
    return MotionSequence(rate, names, conv[1], frames, label)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_motion_csv(seq: MotionSequence, path: str | Path) -> None:
    out = [
        f"rate,{_format_float(seq.frame_rate)}",
        f"convention,{seq.convention}",
        "joints," + ",".join(seq.joint_names),
    ]
    if seq.scenario_label:
        out.append(f"label,{seq.scenario_label}")
    flat = seq.frames.reshape(seq.n_frames, -1)
    for t, row in enumerate(flat):
        out.append(str(t) + "," + ",".join(_format_float(v) for v in row))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# Sequence transforms


def downsample(seq: MotionSequence, factor: int) -> MotionSequence:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"downsample factor must be a positive integer, got {factor!r}")
    return replace(seq, frames=seq.frames[::factor], frame_rate=seq.frame_rate / factor)


def select_joints(seq: MotionSequence, indices: Sequence[int]) -> MotionSequence:
    indices = [int(i) for i in indices]
    if not indices:
        raise ValueError("joint selection is empty")
    if len(set(indices)) != len(indices):
        raise ValueError(f"duplicate joint index in {indices}")
    bad = [i for i in indices if not 0 <= i < seq.n_joints]
    if bad:
        raise ValueError(f"joint index out of range for {seq.n_joints} joints: {bad}")
    return replace(
        seq,
        frames=seq.frames[:, indices],
        joint_names=tuple(seq.joint_names[i] for i in indices),
    )


def make_windows(
    seq: MotionSequence, l: int, stride: int = 1, seq_id: str = ""
) -> list[PoseWindow]:
    if l < 1 or stride < 1:
        raise ValueError(f"window length and stride must be >= 1 (l={l}, stride={stride})")
    T = seq.n_frames
    if T < l:
        raise ValueError(f"empty input: sequence has {T} frames, window needs {l}")
    windows = []
    for s in range(0, T - l + 1, stride):
        x = seq.frames[s : s + l]
        windows.append(PoseWindow(x=x, x_bar=x, masked_joint=None, source=(seq_id, s)))
    return windows


def mask_joint(window: PoseWindow, k: int) -> PoseWindow:
    n = window.x.shape[1]
    if not 0 <= k < n:
        raise ValueError(f"masked joint {k} out of range for {n} joints")
    x_bar = np.array(window.x_bar, copy=True)
    x_bar[:, k, :] = 0.0
    x_bar.setflags(write=False)
    return replace(window, x_bar=x_bar, masked_joint=k)


def stack_windows(windows: Sequence[PoseWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into (x_bar, x) arrays of shape b x l x n x 3."""
    x_bar = np.stack([w.x_bar for w in windows])
    x = np.stack([w.x for w in windows])
    return x_bar, x


def masked_windows(seq: MotionSequence, l: int, k: int, stride: int = 1, seq_id: str = ""):
    return [mask_joint(w, k) for w in make_windows(seq, l, stride, seq_id)]


# ----------------------------------------------------------------------------
# Synthetic gait


@dataclass
class SynthGaitSpec:
    """Sinusoidal joints plus a knee that is a linear function of the others.

    ``coupling`` has shape (3, 3n) and maps the flattened frame (joint-major)
    onto the knee's three channels; the knee's own columns must be zero.
    Angles are in degrees (euler-xyz convention).
    """

    n_joints: int
    knee: int
    frequency: float
    amplitudes: np.ndarray  # (n, 3)
    phases: np.ndarray  # (n, 3)
    coupling: np.ndarray  # (3, 3n)
    noise_std: float = 2.0
    duration: int = 600
    frame_rate: float = 30.0
    seed: int = 0
    joint_names: tuple[str, ...] | None = None
    scenario_label: str = "walking"
    offsets: np.ndarray | None = field(default=None)  # (n, 3) constant posture

    def validate(self) -> None:
        n = self.n_joints
        if n < 2:
            raise ValueError("synthetic gait needs at least 2 joints")
        if not 0 <= self.knee < n:
            raise ValueError(f"knee index {self.knee} out of range")
        if self.duration < 1:
            raise ValueError("empty sequence")
        arrays = {
            "amplitudes": (self.amplitudes, (n, 3)),
            "phases": (self.phases, (n, 3)),
            "coupling": (self.coupling, (3, 3 * n)),
        }
        if self.offsets is not None:
            arrays["offsets"] = (self.offsets, (n, 3))
        for name, (arr, shape) in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        for name in ("frequency", "noise_std", "frame_rate"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} is not finite")
        if self.noise_std < 0 or self.frame_rate <= 0:
            raise ValueError("noise_std must be >= 0 and frame_rate > 0")
        own = np.asarray(self.coupling)[:, 3 * self.knee : 3 * self.knee + 3]
        if np.any(own != 0):
            raise ValueError("coupling columns for the knee's own channels must be zero")
        if self.joint_names is not None and len(self.joint_names) != n:
            raise ValueError("joint_names length must equal n_joints")

    def names(self) -> tuple[str, ...]:
        if self.joint_names is not None:
            return tuple(self.joint_names)
        return default_joint_names(self.n_joints, self.knee)


def default_joint_names(n: int, knee: int) -> tuple[str, ...]:
    names = ["root"] + [f"joint{j}" for j in range(1, n)]
    names[knee] = "r_knee"
    return tuple(names)


def synth_gait(spec: SynthGaitSpec) -> MotionSequence:
    spec.validate()
    n = spec.n_joints
    amp = np.asarray(spec.amplitudes, dtype=np.float64)
    phase = np.asarray(spec.phases, dtype=np.float64)
    t = np.arange(spec.duration, dtype=np.float64)
    arg = 2.0 * np.pi * spec.frequency * t / spec.frame_rate
    frames = amp[None] * np.sin(arg[:, None, None] + phase[None])
    if spec.offsets is not None:
        frames = frames + np.asarray(spec.offsets, dtype=np.float64)[None]
    frames[:, spec.knee, :] = 0.0
    knee = frames.reshape(spec.duration, 3 * n) @ np.asarray(spec.coupling, dtype=np.float64).T
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        knee = knee + rng.normal(0.0, spec.noise_std, size=knee.shape)
    frames[:, spec.knee, :] = knee
    return MotionSequence(spec.frame_rate, spec.names(), "euler-xyz", frames, spec.scenario_label)


def subject_spec(
    n_joints: int = 8,
    knee: int = 3,
    drivers: Sequence[int] = (1, 2),
    subject: int = 0,
    trial: int = 0,
    noise_std: float = 2.0,
    duration: int = 600,
    frame_rate: float = 30.0,
    frequency: float = 1.0,
    seed: int | None = None,
    coupling_seed: int = 1234,
) -> SynthGaitSpec:
    """Build the spec for one trial of one synthetic subject.

    Only the ``drivers`` joints feed the knee; their weights come from
    ``coupling_seed`` and are shared by every subject, with a strong weight
    from each driver's channel 0 onto the knee's channel 0 (flexion).
    Amplitudes, phases and gait speed are drawn per (subject, trial), so an
    unseen subject can only be predicted through the coupling.
    """
    drivers = [int(j) for j in drivers]
    if knee in drivers:
        raise ValueError("the knee cannot drive itself")
    crng = np.random.default_rng(coupling_seed)
    coupling = np.zeros((3, 3 * n_joints))
    for j in drivers:
        coupling[:, 3 * j : 3 * j + 3] = crng.uniform(-0.3, 0.3, size=(3, 3))
        coupling[0, 3 * j] = crng.choice([-1.0, 1.0]) * crng.uniform(0.6, 1.0)

    srng = np.random.default_rng([coupling_seed, subject, trial])
    amplitudes = srng.uniform(3.0, 12.0, size=(n_joints, 3))
    amplitudes[:, 0] = srng.uniform(10.0, 30.0, size=n_joints)
    phases = srng.uniform(0.0, 2 * np.pi, size=(n_joints, 3))
    freq = frequency * srng.uniform(0.7, 1.3)
    if seed is None:
        seed = int(np.random.default_rng([coupling_seed, subject, trial, 1]).integers(2**31))
    return SynthGaitSpec(
        n_joints=n_joints,
        knee=knee,
        frequency=freq,
        amplitudes=amplitudes,
        phases=phases,
        coupling=coupling,
        noise_std=noise_std,
        duration=duration,
        frame_rate=frame_rate,
        seed=seed,
    )
