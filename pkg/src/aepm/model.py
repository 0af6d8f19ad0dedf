"""Spatial-temporal transformer encoder with probabilistic decoders.

Tensor layout throughout is ``b x l x n x c`` (batch, frames, joints, channels).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

STD_FLOOR = 1e-8
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n: int = 16
    l: int = 25
    d: int = 32
    M: int = 4
    N: int = 10
    heads: int = 4
    mlp_hidden: int | None = None  # transformer block MLP width, default 2*d
    decoder_hidden: int | None = None  # decoder MLP width, default d
    norm_first: bool = False  # post-norm residual blocks by default

    def __post_init__(self):
        for name in ("n", "l", "d", "M", "N", "heads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.N < 2:
            raise ValueError("N must be >= 2 so the sample std is defined")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        for name in ("mlp_hidden", "decoder_hidden"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ValueError(f"{name} must be a positive integer or None")

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    @property
    def block_hidden(self) -> int:
        return self.mlp_hidden or 2 * self.d

    @property
    def dec_hidden(self) -> int:
        return self.decoder_hidden or self.d

    @classmethod
    def h36m(cls, **kw) -> "ModelConfig":
        return cls(**{"n": 16, "l": 25, "d": 32, "M": 4, "N": 10, **kw})

    @classmethod
    def cmu(cls, **kw) -> "ModelConfig":
        return cls(**{"n": 14, "l": 30, "d": 32, "M": 5, "N": 10, **kw})


class PredictionSet(NamedTuple):
    mu: Tensor  # b, l, n, 3
    sigma: Tensor  # b, l, n, 1
    samples: Tensor  # raw sampler output S: b, l, n, N, 3
    x_hat: Tensor  # b, l, n, N, 3


@dataclass
class AttentionRecord:
    """Post-softmax attention captured during one forward pass.

    ``spatial[m]`` has shape ``(b*l, heads, n, n)`` and ``temporal[m]`` has
    shape ``(b*n, heads, l, l)``; rows are queries.  ``*_scores`` hold the
    matching pre-softmax scaled scores.
    """

    spatial: list[Tensor] = field(default_factory=list)
    temporal: list[Tensor] = field(default_factory=list)
    spatial_scores: list[Tensor] = field(default_factory=list)
    temporal_scores: list[Tensor] = field(default_factory=list)
    batch: int = 0

    @property
    def has_temporal(self) -> bool:
        return bool(self.temporal)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention with output projection."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_k = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: Tensor, capture: bool = False):
        # x: B x tokens x d
        B, T, d = x.shape
        h, dk = self.heads, self.d_k
        q = self.q(x).view(B, T, h, dk).transpose(1, 2)
        k = self.k(x).view(B, T, h, dk).transpose(1, 2)
        v = self.v(x).view(B, T, h, dk).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dk)
        weights = torch.softmax(scores, dim=-1)
        z = (weights @ v).transpose(1, 2).reshape(B, T, d)
        out = self.out(z)
        if capture:
            return out, (weights.detach(), scores.detach())
        return out, None


class TransformerBlock(nn.Module):
    """Self-attention and MLP sub-blocks, each with residual and layer norm."""

    def __init__(self, d: int, heads: int, hidden: int, norm_first: bool = False):
        super().__init__()
        self.attn = SelfAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))
        self.norm_first = norm_first

    def forward(self, x: Tensor, capture: bool = False):
        if self.norm_first:
            a, w = self.attn(self.norm1(x), capture)
            x = x + a
            x = x + self.mlp(self.norm2(x))
        else:
            a, w = self.attn(x, capture)
            x = self.norm1(x + a)
            x = self.norm2(x + self.mlp(x))
        return x, w


def _check_finite(t: Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")


def spatial_block(F_: Tensor, block: TransformerBlock, capture: bool = False):
    """Attend across joints: ``b x l x n x d`` viewed as ``(b*l) x n x d``."""
    b, l, n, d = F_.shape
    y, w = block(F_.reshape(b * l, n, d), capture)
    return y.reshape(b, l, n, d), w


def temporal_block(F_: Tensor, block: TransformerBlock, capture: bool = False):
    """Attend across frames: ``b x l x n x d`` viewed as ``(b*n) x l x d``."""
    b, l, n, d = F_.shape
    t = F_.permute(0, 2, 1, 3).reshape(b * n, l, d)
    y, w = block(t, capture)
    return y.reshape(b, n, l, d).permute(0, 2, 1, 3), w


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, d_out)
    )


def reparameterize(mu: Tensor, sigma: Tensor, samples: Tensor) -> Tensor:
    """Rescale raw samples so their spread over the sample axis equals ``sigma``.

    mu: ``... x 3``, sigma: ``... x 1``, samples: ``... x N x 3``.  The std is
    the population std over N, per element, clamped below at ``STD_FLOOR``.
    """
    std = samples.std(dim=-2, unbiased=False, keepdim=True).clamp_min(STD_FLOOR)
    return mu.unsqueeze(-2) + (sigma.unsqueeze(-2) / std) * samples


class AEPM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.embed = nn.Linear(3, c.d)
        self.spatial_pos = nn.Parameter(torch.zeros(c.n, c.d))
        self.temporal_pos = nn.Parameter(torch.zeros(c.l, c.d))
        self.spatial = nn.ModuleList(
            TransformerBlock(c.d, c.heads, c.block_hidden, c.norm_first) for _ in range(c.M)
        )
        self.temporal = nn.ModuleList(
            TransformerBlock(c.d, c.heads, c.block_hidden, c.norm_first) for _ in range(c.M)
        )
        self.final_norm = nn.LayerNorm(c.d) if c.norm_first else nn.Identity()
        self.f_mu = _mlp(c.d, c.dec_hidden, 3)
        self.f_sigma = _mlp(c.d, c.dec_hidden, 1)
        self.f_s = _mlp(c.d, c.dec_hidden, c.N * 3)

    def _check_input(self, x_bar: Tensor) -> None:
        c = self.config
        if x_bar.dim() != 4:
            raise ValueError(f"expected b x l x n x 3 input, got {tuple(x_bar.shape)}")
        expected = {"l (frames)": c.l, "n (joints)": c.n, "channels": 3}
        got = dict(zip(expected, x_bar.shape[1:]))
        bad = [f"{k}={got[k]} (expected {v})" for k, v in expected.items() if got[k] != v]
        if bad:
            raise ValueError("input shape mismatch on axis " + ", ".join(bad))

    def embed_input(self, x_bar: Tensor) -> Tensor:
        self._check_input(x_bar)
        return self.embed(x_bar)

    def encode(self, x_bar: Tensor, capture: bool = False):
        feats = self.embed_input(x_bar)
        _check_finite(feats, "input embedding")
        record = AttentionRecord(batch=x_bar.shape[0]) if capture else None
        for m in range(self.config.M):
            if m == 0:
                feats = feats + self.spatial_pos
            feats, w = spatial_block(feats, self.spatial[m], capture)
            if capture:
                record.spatial.append(w[0])
                record.spatial_scores.append(w[1])
            if m == 0:
                feats = feats + self.temporal_pos[:, None, :]
            feats, w = temporal_block(feats, self.temporal[m], capture)
            if capture:
                record.temporal.append(w[0])
                record.temporal_scores.append(w[1])
        feats = self.final_norm(feats)
        _check_finite(feats, "encoder output")
        return feats, record

    def decode(self, c: Tensor) -> PredictionSet:
        b, l, n, _ = c.shape
        mu = self.f_mu(c)
        _check_finite(mu, "mean decoder")
        sigma = F.softplus(self.f_sigma(c)) + SIGMA_FLOOR
        _check_finite(sigma, "variance decoder")
        s = self.f_s(c).reshape(b, l, n, self.config.N, 3)
        _check_finite(s, "sampler decoder")
        x_hat = reparameterize(mu, sigma, s)
        _check_finite(x_hat, "reparameterized predictions")
        return PredictionSet(mu, sigma, s, x_hat)

    def forward(self, x_bar: Tensor, capture: bool = False):
        c, record = self.encode(x_bar, capture)
        return self.decode(c), record

    def predict(self, x_bar) -> PredictionSet:
        """Inference helper accepting numpy input; runs without autograd."""
        p = next(self.parameters())
        x = torch.as_tensor(np.array(x_bar), dtype=p.dtype)
        with torch.no_grad():
            pred, _ = self(x)
        return pred


def init_parameters(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> AEPM:
    """Build an AEPM with deterministic weights.

    Affine weights are N(0, 1/fan_in), biases and layer-norm offsets zero,
    layer-norm scales one, positional embeddings N(0, 0.02^2).
    """
    model = AEPM(config).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in ("spatial_pos", "temporal_pos"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) * 0.02)
            elif _is_norm_param(model, name):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("weight"):
                fan_in = p.shape[1]
                p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) / math.sqrt(fan_in))
            else:
                p.zero_()
    return model


def _is_norm_param(model: nn.Module, name: str) -> bool:
    owner = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
    return isinstance(owner, nn.LayerNorm)


def no_decay_names(model: AEPM) -> set[str]:
    """Parameters excluded from weight decay: norms, positional embeddings, biases."""
    out = set()
    for name, p in model.named_parameters():
        if name in ("spatial_pos", "temporal_pos") or _is_norm_param(model, name) or p.dim() < 2:
            out.add(name)
    return out


# ----------------------------------------------------------------------------
# Checkpoints
#
# Layout (little endian):
#   8 bytes  magic b"AEPMCKPT"
#   4 bytes  uint32 format version
#   8 bytes  uint64 header length H
#   H bytes  UTF-8 JSON header: {"config", "meta", "arrays": [{"name","shape","offset","count"}]}
#   payload  float32 arrays, row-major, concatenated in header order

CKPT_MAGIC = b"AEPMCKPT"
CKPT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: AEPM,
    meta: dict | None = None,
    extra: dict[str, Tensor] | None = None,
) -> None:
    """Write config, parameters and optional extra arrays (e.g. optimizer moments)."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name, t in model.state_dict().items():
        arrays.append((name, t.detach().cpu().numpy().astype("<f4")))
    for name, t in (extra or {}).items():
        arrays.append((name, np.asarray(t.detach().cpu().numpy() if isinstance(t, Tensor) else t).astype("<f4")))
    index, offset = [], 0
    for name, a in arrays:
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        offset += a.size * 4
    header = json.dumps(
        {"config": asdict(model.config), "meta": meta or {}, "arrays": index}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


@dataclass
class Checkpoint:
    model: AEPM
    meta: dict
    extra: dict[str, Tensor]


def load_checkpoint(path: str | Path, dtype=torch.float32) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an AEPM checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    payload = memoryview(data)[20 + hlen :]
    config = ModelConfig(**header["config"])
    model = AEPM(config).to(dtype)
    state = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        raw = np.frombuffer(payload[start : start + 4 * entry["count"]], dtype="<f4")
        state[entry["name"]] = torch.from_numpy(raw.reshape(entry["shape"]).copy())
    own = set(model.state_dict())
    model.load_state_dict({k: v.to(dtype) for k, v in state.items() if k in own})
    missing = own - set(state)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks arrays {sorted(missing)}")
    extra = {k: v for k, v in state.items() if k not in own}
    return Checkpoint(model, header.get("meta", {}), extra)
