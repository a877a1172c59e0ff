"""Tiny differentiable sequence classifiers with selectable mixing mechanism.

Five kinds cover the order-sensitivity spectrum: full attention (permutation
equivariant), symmetric windowed attention with a global CLS, segment-level
recurrence with stop-gradient memory, a selective state-space scan, and the
four-direction sum of that scan. All math runs in float64 so finite
difference oracles are meaningful.

Sequence layout: CLS always sits at position 0; patch tokens are permuted
before CLS is prepended. Positional embeddings are indexed by sequence
position ("sequence" mode); the "source" diagnostic mode pins each token to
its source slot's embedding so mechanism order-sensitivity can be isolated
from position codes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import CHANNELS
from .grids import GridSpec, check_permutation, identity_permutation, invert, linearize

KINDS = (
    "full_attention",
    "windowed_attention",
    "segment_recurrence",
    "ssm_scan",
    "ssm_scan_4dir",
)
# causal left-to-right kinds classify from the last position; the rest from CLS
LAST_READOUT = {"segment_recurrence", "ssm_scan"}

_NEG = float("-inf")


def _fill(t: torch.Tensor, g: torch.Generator, std: float = 0.02) -> torch.Tensor:
    with torch.no_grad():
        t.copy_(torch.randn(t.shape, generator=g, dtype=torch.float64) * std)
    return t


def _linear(n_in: int, n_out: int, g: torch.Generator, std: float | None = None) -> nn.Linear:
    lin = nn.Linear(n_in, n_out, dtype=torch.float64)
    _fill(lin.weight, g, std if std is not None else 1.0 / math.sqrt(n_in))
    with torch.no_grad():
        lin.bias.zero_()
    return lin


class _MixLayer(nn.Module):
    """Shared skeleton: token mixing then a channel-mix MLP, both residual."""

    def __init__(self, d: int, g: torch.Generator):
        super().__init__()
        self.mlp_up = _linear(d, 2 * d, g)
        self.mlp_down = _linear(2 * d, d, g)

    def channel_mix(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.mlp_down(F.gelu(self.mlp_up(h)))


class _AttentionLayer(_MixLayer):
    def __init__(self, d: int, g: torch.Generator, bias_range: int = 0):
        super().__init__(d, g)
        scale = 1.0 / math.sqrt(d)
        self.wq = nn.Parameter(_fill(torch.empty(d, d, dtype=torch.float64), g, scale))
        self.wk = nn.Parameter(_fill(torch.empty(d, d, dtype=torch.float64), g, scale))
        self.wv = nn.Parameter(_fill(torch.empty(d, d, dtype=torch.float64), g, scale))
        if bias_range:
            # learned relative bias on (query index - key index), 0..bias_range-1
            self.rel_bias = nn.Parameter(torch.zeros(bias_range, dtype=torch.float64))
        self.d = d

    def attend(self, hq: torch.Tensor, hkv: torch.Tensor, extra=None) -> torch.Tensor:
        q = hq @ self.wq
        k = hkv @ self.wk
        v = hkv @ self.wv
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d)
        if extra is not None:
            logits = logits + extra
        return torch.softmax(logits, dim=-1) @ v

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        extra = torch.where(mask, 0.0, _NEG)
        h = h + self.attend(h, h, extra)
        return self.channel_mix(h)


class _SegmentLayer(_AttentionLayer):
    """Causal attention within fixed-length segments, each segment also

    attending a detached copy of the previous segment's layer input."""

    def __init__(self, d: int, g: torch.Generator, segment_len: int, memory_len: int):
        super().__init__(d, g, bias_range=segment_len + memory_len)
        self.segment_len = segment_len
        self.memory_len = memory_len

    def forward(self, h: torch.Tensor, mask=None) -> torch.Tensor:
        T = h.shape[-2]
        L = self.segment_len
        outs = []
        mem = h[..., 0:0, :]
        mem_start = 0
        for s0 in range(0, T, L):
            seg = h[..., s0 : s0 + L, :]
            kv = torch.cat([mem, seg], dim=-2)
            q_idx = torch.arange(s0, s0 + seg.shape[-2])
            k_idx = torch.arange(mem_start, s0 + seg.shape[-2])
            delta = q_idx[:, None] - k_idx[None, :]
            allowed = delta >= 0
            extra = torch.where(allowed, 0.0, _NEG) + self.rel_bias[
                delta.clamp(0, len(self.rel_bias) - 1)
            ]
            seg = seg + self.attend(seg, kv, extra)
            outs.append(seg)
            mem = h[..., max(0, s0 + L - self.memory_len) : s0 + L, :].detach()
            mem_start = max(0, s0 + L - self.memory_len)
        return self.channel_mix(torch.cat(outs, dim=-2))


class _ScanLayer(_MixLayer):
    """Selective state-space scan: diagonal state with input-dependent

    B, C and step size, run left to right along each traversal order."""

    def __init__(self, d: int, g: torch.Generator, state_dim: int, n_dirs: int):
        super().__init__(d, g)
        a0 = torch.arange(1, state_dim + 1, dtype=torch.float64).repeat(d, 1)
        self.a_log = nn.Parameter(torch.log(a0))
        self.d_skip = nn.Parameter(torch.ones(d, dtype=torch.float64))
        self.b_proj = _linear(d, state_dim, g)
        self.c_proj = _linear(d, state_dim, g)
        self.dt_proj = _linear(d, d, g)
        dt0 = torch.exp(
            torch.rand(d, generator=g, dtype=torch.float64)
            * (math.log(0.1) - math.log(0.001))
            + math.log(0.001)
        )
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt0 + torch.log(-torch.expm1(-dt0)))
        self.n_dirs = n_dirs

    def scan(self, h: torch.Tensor) -> torch.Tensor:
        """One directional pass over (..., T, d)."""
        A = -torch.exp(self.a_log)  # (d, s), strictly negative
        dt = F.softplus(self.dt_proj(h))  # (..., T, d)
        B = self.b_proj(h)  # (..., T, s)
        C = self.c_proj(h)  # (..., T, s)
        T = h.shape[-2]
        state = torch.zeros(h.shape[:-2] + A.shape, dtype=h.dtype)
        ys = []
        for t in range(T):
            x_t = h[..., t, :]
            dt_t = dt[..., t, :]
            decay = torch.exp(dt_t.unsqueeze(-1) * A)
            drive = dt_t.unsqueeze(-1) * B[..., t, :].unsqueeze(-2)
            state = decay * state + drive * x_t.unsqueeze(-1)
            y_t = (state * C[..., t, :].unsqueeze(-2)).sum(-1) + self.d_skip * x_t
            ys.append(y_t)
        return torch.stack(ys, dim=-2)

    def forward(self, h: torch.Tensor, traversals) -> torch.Tensor:
        mixed = torch.zeros_like(h)
        for order, back in traversals[: self.n_dirs]:
            y = self.scan(h[..., order, :])
            mixed = mixed + y[..., back, :]
        return self.channel_mix(h + mixed)


class ToyBackbone(nn.Module):
    def __init__(
        self,
        kind: str,
        grid: GridSpec,
        num_classes: int,
        d: int = 32,
        depth: int = 2,
        window: int = 3,
        segment_len: int | None = None,
        memory_len: int | None = None,
        state_dim: int = 4,
        channels: int = CHANNELS,
        seed: int = 0,
    ):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown backbone kind {kind!r}; expected one of {KINDS}")
        if window % 2 != 1:
            raise ValueError("window width must be odd")
        self.kind = kind
        self.grid = grid
        self.n = grid.n
        self.num_classes = num_classes
        self.d = d
        self.window = window
        self.segment_len = segment_len if segment_len is not None else max(1, self.n // 4)
        self.memory_len = memory_len if memory_len is not None else self.segment_len
        self.state_dim = state_dim
        self.channels = channels

        g = torch.Generator().manual_seed(seed)
        self.patch_proj = _linear(channels, d, g)
        self.cls = nn.Parameter(_fill(torch.empty(d, dtype=torch.float64), g))
        self.pos = nn.Parameter(_fill(torch.empty(self.n + 1, d, dtype=torch.float64), g))
        if kind == "segment_recurrence":
            layers = [
                _SegmentLayer(d, g, self.segment_len, self.memory_len)
                for _ in range(depth)
            ]
        elif kind in ("ssm_scan", "ssm_scan_4dir"):
            dirs = 4 if kind == "ssm_scan_4dir" else 1
            layers = [_ScanLayer(d, g, state_dim, dirs) for _ in range(depth)]
        else:
            layers = [_AttentionLayer(d, g) for _ in range(depth)]
        self.layers = nn.ModuleList(layers)
        self.head = _linear(d, num_classes, g)

        T = self.n + 1
        if kind == "windowed_attention":
            i = torch.arange(T)
            near = (i[:, None] - i[None, :]).abs() <= (window - 1) // 2
            mask = near | (i[:, None] == 0) | (i[None, :] == 0)
        elif kind == "full_attention":
            mask = torch.ones(T, T, dtype=torch.bool)
        else:
            mask = None
        self.register_buffer("mask", mask, persistent=False)
        self._traversals = _scan_traversals(grid) if mask is None else None

    # -- forward ------------------------------------------------------------

    def embed(
        self,
        features: torch.Tensor,
        perm: np.ndarray | None = None,
        pos_mode: str = "sequence",
    ) -> torch.Tensor:
        """Project, permute, prepend CLS, add positional embeddings."""
        if features.shape[-2] != self.n or features.shape[-1] != self.channels:
            raise ValueError(
                f"expected features (..., {self.n}, {self.channels}), got {tuple(features.shape)}"
            )
        perm = identity_permutation(self.n) if perm is None else check_permutation(perm)
        gather = torch.as_tensor(perm, dtype=torch.long)
        tok = self.patch_proj(features[..., gather, :])
        cls = self.cls.expand(tok.shape[:-2] + (1, self.d))
        h = torch.cat([cls, tok], dim=-2)
        if pos_mode == "sequence":
            h = h + self.pos
        elif pos_mode == "source":
            idx = torch.cat([torch.zeros(1, dtype=torch.long), 1 + gather])
            h = h + self.pos[idx]
        else:
            raise ValueError(f"unknown pos_mode {pos_mode!r}")
        return h

    def trunk(self, h: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            if self._traversals is not None:
                h = layer(h, self._traversals)
            else:
                h = layer(h, self.mask)
        return h

    def forward_logits(
        self,
        features: torch.Tensor,
        perm: np.ndarray | None = None,
        pos_mode: str = "sequence",
    ) -> torch.Tensor:
        h = self.trunk(self.embed(features, perm, pos_mode))
        read = h[..., -1, :] if self.kind in LAST_READOUT else h[..., 0, :]
        return self.head(read)

    def forward(self, features, perm=None, pos_mode: str = "sequence") -> np.ndarray:
        """Class probabilities, no grad; accepts numpy or torch features."""
        with torch.no_grad():
            logits = self.forward_logits(as_feature_tensor(features), perm, pos_mode)
            return torch.softmax(logits, dim=-1).numpy()

    def mean_ce(
        self,
        features: torch.Tensor,
        labels: torch.Tensor,
        perm: np.ndarray | None = None,
    ) -> torch.Tensor:
        logits = self.forward_logits(features, perm)
        return F.cross_entropy(logits, labels)

    def grad_mean_ce(self, features, labels, perm=None):
        """(loss value, {param name: gradient array}) for one batch."""
        loss = self.mean_ce(as_feature_tensor(features), torch.as_tensor(labels), perm)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite loss")
        names, params = zip(*self.named_parameters())
        grads = torch.autograd.grad(loss, params)
        return float(loss.detach()), {n: g.numpy().copy() for n, g in zip(names, grads)}

    def raw_attention(self, x: torch.Tensor) -> torch.Tensor:
        """Layer-0 attention operator alone: no CLS, positions, mask, or MLP."""
        layer = self.layers[0]
        if not isinstance(layer, _AttentionLayer):
            raise ValueError("raw_attention requires an attention kind")
        return layer.attend(x, x)

    # -- checkpoints ---------------------------------------------------------

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "height": self.grid.height,
            "width": self.grid.width,
            "num_classes": self.num_classes,
            "d": self.d,
            "depth": len(self.layers),
            "window": self.window,
            "segment_len": self.segment_len,
            "memory_len": self.memory_len,
            "state_dim": self.state_dim,
            "channels": self.channels,
        }

    def save(self, path) -> None:
        doc = {"config": self.config(), "params": {}}
        for name, p in self.named_parameters():
            doc["params"][name] = {
                "shape": list(p.shape),
                "data": [float(v) for v in p.detach().reshape(-1)],
            }
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "ToyBackbone":
        doc = json.loads(Path(path).read_text())
        c = doc["config"]
        model = cls(
            kind=c["kind"],
            grid=GridSpec(c["height"], c["width"]),
            num_classes=c["num_classes"],
            d=c["d"],
            depth=c["depth"],
            window=c["window"],
            segment_len=c["segment_len"],
            memory_len=c["memory_len"],
            state_dim=c["state_dim"],
            channels=c["channels"],
        )
        with torch.no_grad():
            for name, p in model.named_parameters():
                rec = doc["params"][name]
                if list(p.shape) != rec["shape"]:
                    raise ValueError(f"checkpoint shape mismatch for {name}")
                p.copy_(torch.tensor(rec["data"], dtype=torch.float64).reshape(p.shape))
        return model


def as_feature_tensor(features) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    return t


def _scan_traversals(grid: GridSpec) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Four sequence traversals for directional scans over a T = n+1 sequence.

    Patch positions 1..n are read as a row-major grid; the four orders are
    forward, backward, column-wise, and reverse column-wise. Each entry is
    (visit order, inverse) so outputs scatter back to sequence positions.
    """
    fwd = identity_permutation(grid.n + 1)
    down = np.concatenate([[0], 1 + linearize("column_major", grid)])
    orders = [fwd, fwd[::-1].copy(), down, down[::-1].copy()]
    return [
        (torch.as_tensor(o, dtype=torch.long), torch.as_tensor(invert(o), dtype=torch.long))
        for o in orders
    ]


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def attention_matrix_op(
    x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray
) -> np.ndarray:
    """Plain scaled dot-product attention in numpy float64."""
    x = np.asarray(x, dtype=np.float64)
    q, k, v = x @ wq, x @ wk, x @ wv
    return row_softmax(q @ k.T / math.sqrt(x.shape[-1])) @ v


def row_softmax(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    """Row-selection matrix P with (P @ x)[k] = x[perm[k]]."""
    perm = check_permutation(perm)
    return np.eye(len(perm))[perm]


def attention_coverage(model: ToyBackbone, threshold: float = 0.0, seed: int = 0) -> np.ndarray:
    """How many query positions can reach each sequence position.

    Attention kinds count mask (or recurrence reachability) entries; scan
    kinds count strictly-above-threshold gradient sensitivities of each
    output's squared norm with respect to each input embedding.
    """
    T = model.n + 1
    if model.kind in ("full_attention", "windowed_attention"):
        return model.mask.sum(dim=0).numpy().astype(np.int64)
    if model.kind == "segment_recurrence":
        L, m = model.segment_len, model.memory_len
        reach = np.zeros((T, T), dtype=bool)
        for i in range(T):
            s0 = (i // L) * L
            reach[i, max(0, s0 - m) : i + 1] = True
        return reach.sum(axis=0).astype(np.int64)
    # scan kinds: sensitivity of layer outputs to input embeddings
    g = torch.Generator().manual_seed(seed)
    e = torch.randn(T, model.d, generator=g, dtype=torch.float64, requires_grad=True)
    y = model.trunk(e)
    counts = np.zeros(T, dtype=np.int64)
    for t in range(T):
        (grad,) = torch.autograd.grad((y[t] ** 2).sum(), e, retain_graph=t < T - 1)
        counts += (grad.abs().max(dim=1).values > threshold).numpy()
    return counts


def positional_shift(
    perm: np.ndarray, region_slots: np.ndarray, base: np.ndarray | None = None
) -> float:
    """Mean signed move of a slot region versus a base order.

    Positive values mean the region was pulled earlier (front-loaded),
    negative pushed later (back-loaded).
    """
    perm = check_permutation(perm)
    base = identity_permutation(len(perm)) if base is None else check_permutation(base)
    region_slots = np.asarray(region_slots)
    if region_slots.size == 0:
        raise ValueError("empty region")
    learned_pos = invert(perm)[region_slots]
    base_pos = invert(base)[region_slots]
    return float(np.mean(base_pos - learned_pos))
