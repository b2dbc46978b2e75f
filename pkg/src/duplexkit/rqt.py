"""Toy RQ-Transformer: a temporal transformer over steps and a depth transformer over streams.

The temporal model reads the sum of per-stream embeddings of the previous
row and emits a context vector ``z``. The first stream's logits come from a
dedicated linear map of ``z``; stream ``k > 1`` is predicted by the depth
transformer from ``z`` plus the embedding of stream ``k - 1`` of the same row.
With ``depthwise_params`` each depth position has its own projection,
attention and feed-forward weights.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError, NumericError
from .layout import INITIAL_ID

_CKPT_MAGIC = b"RQTC"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class RqtConfig:
    cardinalities: tuple[int, ...] = (32, 16, 16, 16)
    d_temporal: int = 64
    d_depth: int = 32
    temporal_layers: int = 2
    depth_layers: int = 2
    heads: int = 2
    ffn_mult: int = 2
    depthwise_params: bool = True
    rope_base: float = 10000.0
    out_init_scale: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(int(n) for n in self.cardinalities))
        if not self.cardinalities:
            raise InputError("need at least one stream")
        if min(self.cardinalities) < 2:
            raise InputError("cardinalities must be >= 2")
        if self.d_temporal % self.heads or self.d_depth % self.heads:
            raise InputError("model widths must be divisible by the head count")
        if (self.d_temporal // self.heads) % 2:
            raise InputError("temporal head dimension must be even for rotary encoding")
        if self.dtype not in ("float32", "float64"):
            raise InputError("dtype must be float32 or float64")

    @property
    def K(self) -> int:
        return len(self.cardinalities)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class LossWeights:
    """Per-stream weights for streams ``2..K``; PAD targets in stream 1 are scaled by ``pad_weight``."""

    alpha: tuple[float, ...]
    text_weight: float = 1.0
    pad_weight: float = 0.5
    pad_id: int | None = 1

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if any(a < 0 for a in self.alpha) or self.text_weight < 0 or self.pad_weight < 0:
            raise InputError("loss weights must be nonnegative")

    @classmethod
    def for_layout(
        cls,
        q_levels: int,
        speakers: int = 2,
        semantic: float = 100.0,
        acoustic: float = 1.0,
        **kwargs,
    ) -> "LossWeights":
        """Weights for a text-first grid: semantic stream per speaker heavy, acoustic light."""
        speaker = [semantic] + [acoustic] * (q_levels - 1)
        return cls(tuple(speaker * speakers), **kwargs)


# -- building blocks ---------------------------------------------------------

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rotary(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate feature pairs of ``x`` (..., T, hd) by position-dependent angles."""
    half = x.shape[-1] // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype) / half)
    angles = positions.to(x.dtype)[:, None] * freqs[None, :]
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _attend(q, k, v, causal_offset: int | None):
    """Plain masked attention; exact zeros on masked weights keep causality bit-exact."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if causal_offset is not None:
        tq, tk = scores.shape[-2], scores.shape[-1]
        qpos = torch.arange(tq)[:, None] + causal_offset
        mask = torch.arange(tk)[None, :] > qpos
        scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class TemporalBlock(nn.Module):
    def __init__(self, d: int, heads: int, hidden: int, rope_base: float):
        super().__init__()
        self.heads = heads
        self.rope_base = rope_base
        self.norm1 = RMSNorm(d)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.out = nn.Linear(d, d, bias=False)
        self.norm2 = RMSNorm(d)
        self.gate = nn.Linear(d, hidden, bias=False)
        self.up = nn.Linear(d, hidden, bias=False)
        self.down = nn.Linear(hidden, d, bias=False)

    def forward(self, x, positions, cache: dict | None = None):
        B, T, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(self.norm1(x)).split(D, dim=-1)
        q, k, v = (t.view(B, T, self.heads, hd).transpose(1, 2) for t in (q, k, v))
        q = rotary(q, positions, self.rope_base)
        k = rotary(k, positions, self.rope_base)
        offset = 0
        if cache is not None:
            if "k" in cache:
                offset = cache["k"].shape[-2]
                k = torch.cat([cache["k"], k], dim=-2)
                v = torch.cat([cache["v"], v], dim=-2)
            cache["k"], cache["v"] = k, v
        h = _attend(q, k, v, offset).transpose(1, 2).reshape(B, T, D)
        x = x + self.out(h)
        y = self.norm2(x)
        return x + self.down(F.silu(self.gate(y)) * self.up(y))


class DepthwiseLinear(nn.Module):
    """One weight matrix per depth position, or a single shared one."""

    def __init__(self, positions: int, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(positions, d_in, d_out))

    def forward(self, x):
        # x: (..., P, d_in)
        P = x.shape[-2]
        if self.weight.shape[0] == 1:
            w = self.weight.expand(P, -1, -1)
        else:
            w = self.weight[:P]  # streaming prefixes use the leading positions
        return torch.einsum("...pi,pio->...po", x, w)


class DepthBlock(nn.Module):
    def __init__(self, positions: int, d: int, heads: int, hidden: int):
        super().__init__()
        self.heads = heads
        self.norm1 = RMSNorm(d)
        self.qkv = DepthwiseLinear(positions, d, 3 * d)
        self.out = DepthwiseLinear(positions, d, d)
        self.norm2 = RMSNorm(d)
        self.gate_up = DepthwiseLinear(positions, d, 2 * hidden)
        self.down = DepthwiseLinear(positions, hidden, d)

    def forward(self, x):
        N, P, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(self.norm1(x)).split(D, dim=-1)
        q, k, v = (t.view(N, P, self.heads, hd).transpose(1, 2) for t in (q, k, v))
        h = _attend(q, k, v, 0).transpose(1, 2).reshape(N, P, D)
        x = x + self.out(h)
        gate, up = self.gate_up(self.norm2(x)).chunk(2, dim=-1)
        return x + self.down(F.silu(gate) * up)


class TemporalTransformer(nn.Module):
    def __init__(self, cfg: RqtConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_temporal
        # +1 row per table for the initial token id 0.
        self.emb = nn.ModuleList(nn.Embedding(n + 1, d) for n in cfg.cardinalities)
        self.layers = nn.ModuleList(
            TemporalBlock(d, cfg.heads, cfg.ffn_mult * d, cfg.rope_base) for _ in range(cfg.temporal_layers)
        )
        self.norm = RMSNorm(d)

    def embed(self, rows: torch.Tensor) -> torch.Tensor:
        return sum(emb(rows[..., k]) for k, emb in enumerate(self.emb))

    def forward(self, prev_rows: torch.Tensor, start: int = 0, caches: list | None = None):
        x = self.embed(prev_rows)
        positions = torch.arange(start, start + prev_rows.shape[1])
        for i, layer in enumerate(self.layers):
            x = layer(x, positions, None if caches is None else caches[i])
        return self.norm(x)


class RQTransformer(nn.Module):
    def __init__(self, cfg: RqtConfig):
        super().__init__()
        self.cfg = cfg
        K = cfg.K
        self.temporal = TemporalTransformer(cfg)
        self.text_head = nn.Linear(cfg.d_temporal, cfg.cardinalities[0], bias=False)
        P = max(K - 1, 0)
        shared = 1 if not cfg.depthwise_params else P
        if P:
            dd = cfg.d_depth
            self.depth_in = DepthwiseLinear(shared, cfg.d_temporal, dd)
            self.depth_emb = nn.ModuleList(nn.Embedding(cfg.cardinalities[k] + 1, dd) for k in range(K - 1))
            self.depth_layers = nn.ModuleList(
                DepthBlock(shared, dd, cfg.heads, cfg.ffn_mult * dd) for _ in range(cfg.depth_layers)
            )
            self.depth_norm = RMSNorm(dd)
            self.heads = nn.ModuleList(nn.Linear(dd, cfg.cardinalities[k], bias=False) for k in range(1, K))
        self._init_weights()
        self.to(cfg.torch_dtype)

    @torch.no_grad()
    def _init_weights(self):
        gen = torch.Generator().manual_seed(self.cfg.seed)
        heads = {id(self.text_head.weight)}
        if self.cfg.K > 1:
            heads |= {id(h.weight) for h in self.heads}
        for name, p in self.named_parameters():
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name.endswith("norm.weight"):
                continue
            if p.dim() == 2 and "emb" in name:
                std = 1.0
            elif p.dim() == 3:  # depthwise (P, in, out)
                std = 1.0 / math.sqrt(p.shape[1])
            else:  # nn.Linear (out, in)
                std = 1.0 / math.sqrt(p.shape[1])
            if id(p) in heads:
                std *= self.cfg.out_init_scale
            p.copy_(torch.randn(p.shape, generator=gen) * std)

    # -- offline -------------------------------------------------------------

    def context(self, grid: torch.Tensor) -> torch.Tensor:
        """z for every step of a (B, S, K) grid; the first step sees the initial row."""
        B, S, K = grid.shape
        prev = torch.cat([torch.full((B, 1, K), INITIAL_ID, dtype=grid.dtype), grid[:, :-1]], dim=1)
        return self.temporal(prev)

    def depth(self, z: torch.Tensor, row_prefix: torch.Tensor) -> list[torch.Tensor]:
        """Logits for streams 2..P+1 given z (..., d_t) and tokens V_1..V_P (..., P)."""
        P = row_prefix.shape[-1]
        lead = z.shape[:-1]
        z_in = z.reshape(-1, 1, z.shape[-1]).expand(-1, P, -1)
        h = self.depth_in(z_in)
        tokens = row_prefix.reshape(-1, P)
        h = h + torch.stack([self.depth_emb[p](tokens[:, p]) for p in range(P)], dim=1)
        for layer in self.depth_layers:
            h = layer(h)
        h = self.depth_norm(h)
        return [self.heads[p](h[:, p]).reshape(*lead, -1) for p in range(P)]

    def forward(self, grid: torch.Tensor) -> list[torch.Tensor]:
        """Teacher-forced logits per stream, each (B, S, N_k)."""
        if grid.dim() == 2:
            grid = grid[None]
        _check_tokens(grid, self.cfg.cardinalities)
        z = self.context(grid)
        logits = [self.text_head(z)]
        if self.cfg.K > 1:
            logits += self.depth(z, grid[..., : self.cfg.K - 1])
        return logits

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- streaming interface used by the inference engine ------------------

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return self.cfg.cardinalities

    def new_cache(self) -> dict:
        return {"step": 0, "layers": [{} for _ in self.temporal.layers]}

    @torch.no_grad()
    def temporal_step(self, cache: dict, prev_row) -> np.ndarray:
        row = torch.as_tensor(np.asarray(prev_row, dtype=np.int64)).view(1, 1, -1)
        _check_tokens(row, self.cfg.cardinalities)
        z = self.temporal(row, start=cache["step"], caches=cache["layers"])
        cache["step"] += 1
        return z[0, 0].double().numpy()

    @torch.no_grad()
    def step_logits(self, z: np.ndarray, partial_row) -> np.ndarray:
        partial = np.asarray(partial_row, dtype=np.int64)
        if partial.size > self.cfg.K - 1:
            raise InputError(f"partial row of length {partial.size} exceeds K-1={self.cfg.K - 1}")
        zt = torch.as_tensor(z, dtype=self.cfg.torch_dtype)
        if partial.size == 0:
            return self.text_head(zt).double().numpy()
        out = self.depth(zt[None], torch.as_tensor(partial)[None])
        return out[-1][0].double().numpy()

    @torch.no_grad()
    def forward_logits(self, grid) -> list[np.ndarray]:
        out = self.forward(torch.as_tensor(np.asarray(grid, dtype=np.int64)))
        return [o[0].double().numpy() for o in out]


class IndependentHeads(nn.Module):
    """Ablation: every stream predicted from z by its own linear head, no depth model."""

    def __init__(self, cfg: RqtConfig):
        super().__init__()
        self.cfg = cfg
        self.temporal = TemporalTransformer(cfg)
        self.heads = nn.ModuleList(nn.Linear(cfg.d_temporal, n, bias=False) for n in cfg.cardinalities)
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    continue
                std = 1.0 if "emb" in name else 1.0 / math.sqrt(p.shape[1])
                if name.startswith("heads"):
                    std *= cfg.out_init_scale
                p.copy_(torch.randn(p.shape, generator=gen) * std)
        self.to(cfg.torch_dtype)

    def forward(self, grid: torch.Tensor) -> list[torch.Tensor]:
        if grid.dim() == 2:
            grid = grid[None]
        B, S, K = grid.shape
        prev = torch.cat([torch.full((B, 1, K), INITIAL_ID, dtype=grid.dtype), grid[:, :-1]], dim=1)
        z = self.temporal(prev)
        return [h(z) for h in self.heads]


def _check_tokens(grid: torch.Tensor, cardinalities: Sequence[int]):
    if grid.shape[-1] != len(cardinalities):
        raise InputError(f"grid has {grid.shape[-1]} streams, model expects {len(cardinalities)}")
    if grid.numel() and (grid.min() < 0 or (grid > torch.as_tensor(cardinalities)).any()):
        raise InputError("token id outside 0..N_k")


# -- loss --------------------------------------------------------------------

def rqt_loss(grid: torch.Tensor, logits: Sequence[torch.Tensor], w: LossWeights) -> torch.Tensor:
    """Text CE plus the alpha-weighted mean of the audio CEs, averaged over steps.

    Targets equal to the initial token (delay padding) carry no loss.
    """
    if grid.dim() == 2:
        grid = grid[None]
    K = grid.shape[-1]
    if len(logits) != K:
        raise InputError(f"{len(logits)} logit tensors for {K} streams")
    if len(w.alpha) != K - 1:
        raise InputError(f"need {K - 1} alpha weights, got {len(w.alpha)}")
    for k, lg in enumerate(logits):
        if lg.shape[:-1] != grid.shape[:-1]:
            raise InputError(f"logits for stream {k} have shape {tuple(lg.shape)}, grid {tuple(grid.shape)}")

    def ce(k):
        target = grid[..., k]
        mask = target != INITIAL_ID
        safe = torch.where(mask, target - 1, torch.zeros_like(target))
        lg = logits[k]
        losses = F.cross_entropy(lg.reshape(-1, lg.shape[-1]), safe.reshape(-1), reduction="none")
        return losses.view(target.shape), mask.to(lg.dtype)

    ce1, m1 = ce(0)
    w1 = torch.full_like(ce1, w.text_weight)
    if w.pad_id is not None:
        w1 = torch.where(grid[..., 0] == w.pad_id, w1 * w.pad_weight, w1)
    total = w1 * m1 * ce1
    if K > 1:
        num = torch.zeros_like(ce1)
        den = torch.zeros_like(ce1)
        for k in range(1, K):
            cek, mk = ce(k)
            a = w.alpha[k - 1]
            num = num + a * mk * cek
            den = den + a * mk
        total = total + torch.where(den > 0, num / den.clamp_min(1e-30), torch.zeros_like(num))
    return total.mean()


# -- sampling ----------------------------------------------------------------

def sample_token(logits, temperature: float = 0.0, seed=None) -> int:
    """Argmax at temperature 0 (lowest index on ties), else a seeded categorical draw."""
    lg = np.asarray(logits, dtype=np.float64)
    if np.isnan(lg).any():
        raise NumericError("NaN in logits")
    if temperature < 0:
        raise InputError("temperature must be >= 0")
    if temperature == 0:
        return int(np.argmax(lg))
    x = lg / temperature
    finite = np.isfinite(x)
    if not finite.any():
        raise NumericError("no finite logits to sample from")
    x = np.where(finite, x - x[finite].max(), -np.inf)
    p = np.exp(x)
    cdf = np.cumsum(p)
    u = np.random.default_rng(seed).random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), lg.size - 1))


def sample_step(step_logits: Sequence, temperature: float = 0.0, seed: int = 0) -> list[int]:
    """Sample one token index per stream; stream k draws with seed ``[seed, k]``."""
    return [sample_token(lg, temperature, [seed, k]) for k, lg in enumerate(step_logits)]


def generate(model, steps: int, temperature: float = 0.0, seed: int = 0) -> np.ndarray:
    """Free-running (steps, K) grid; cell (s, k) draws with seed ``[seed, s, k]`` like the engine."""
    if steps < 0:
        raise InputError("steps must be >= 0")
    cache = model.new_cache()
    K = len(model.cardinalities)
    prev = [INITIAL_ID] * K
    rows = []
    for s in range(steps):
        z = model.temporal_step(cache, prev)
        row: list[int] = []
        for k in range(K):
            row.append(sample_token(model.step_logits(z, row), temperature, [seed, s, k]) + 1)
        rows.append(row)
        prev = row
    return np.asarray(rows, dtype=np.int64).reshape(steps, K)


# -- training scaffolding ----------------------------------------------------

def train(
    model: nn.Module,
    batches: Callable[[int], torch.Tensor],
    steps: int,
    weights: LossWeights,
    lr: float = 3e-3,
) -> list[float]:
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for step in range(steps):
        grid = batches(step)
        loss = rqt_loss(grid, model(grid), weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: RQTransformer) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> RQTransformer:
    if data[:4] != _CKPT_MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != _CKPT_VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        off = 12
        raw_cfg = json.loads(data[off : off + n])
        off += n
        raw_cfg["cardinalities"] = tuple(raw_cfg["cardinalities"])
        model = RQTransformer(RqtConfig(**raw_cfg))
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            state[name] = torch.as_tensor(arr.copy()).to(model.cfg.torch_dtype)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"corrupt checkpoint: {exc}") from exc
    model.load_state_dict(state)
    return model
