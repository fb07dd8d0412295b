"""Interaction-aware temporal convolution.

Sequences are laid out as (B, N, C, L): batch, region, channel, time.  The
channels are grouped by phenomenon (``C = M * c``), so a filter that spans
all input channels sums over phenomena as well as taps.  With
``interaction=False`` filters are masked block-diagonally and each
phenomenon only sees its own channels (a plain per-phenomenon TCN).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class ItcnConfig:
    blocks: int = 2
    kernel_size: int = 2
    dilations: tuple[int, ...] | None = None
    channels: tuple[int, ...] = (8, 8)  # per phenomenon, per block
    dropout: float = 0.1
    embed_dim: int = 16
    interaction: bool = True
    summary: str = "last"

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if len(self.channels) != self.blocks:
            raise ValueError(f"{self.blocks} blocks need {self.blocks} channel widths")
        if any(d < 1 for d in self.block_dilations()):
            raise ValueError("dilations must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.summary not in ("last", "mean"):
            raise ValueError(f"unknown temporal summary {self.summary!r}")

    def block_dilations(self) -> tuple[int, ...]:
        if self.dilations is not None:
            if len(self.dilations) != self.blocks:
                raise ValueError("one dilation per block required")
            return tuple(self.dilations)
        return tuple(2 ** b for b in range(self.blocks))

    @property
    def receptive_field(self) -> int:
        # two convolutions per block, both at the block's dilation
        return receptive_field(self.kernel_size, [d for d in self.block_dilations() for _ in range(2)])


def receptive_field(kernel_size: int, dilations) -> int:
    """Time steps seen by a stack of causal convolutions: 1 + (k-1) * sum(d)."""
    return 1 + (kernel_size - 1) * int(sum(dilations))


class DropoutStreams:
    """One RNG stream per sample, keyed by (seed, epoch, sample index)."""

    def __init__(self, seed: int, epoch: int, sample_ids):
        self.gens = [np.random.default_rng([seed, epoch, int(i)]) for i in sample_ids]

    def mask(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        return np.stack([g.random(shape) >= p for g in self.gens])


def dropout(x, p: float, streams: DropoutStreams | None) -> dc.Value:
    """Inverted dropout; identity when ``streams`` is None (eval mode) or p == 0."""
    x = dc.as_value(x)
    if streams is None or p == 0:
        return x
    keep = streams.mask(x.shape[1:], p)
    if keep.shape[0] != x.shape[0]:
        raise ValueError(f"{keep.shape[0]} dropout streams for batch of {x.shape[0]}")
    return x * (keep / (1.0 - p))


def group_mask(c_out: int, c_in: int, groups: int) -> np.ndarray:
    """(c_out, c_in) block-diagonal mask tying channel groups to phenomena."""
    go = np.arange(c_out) // (c_out // groups)
    gi = np.arange(c_in) // (c_in // groups)
    return (go[:, None] == gi[None, :]).astype(np.float64)


def dilated_causal_conv(x, weight, dilation: int, bias=None) -> dc.Value:
    """out[..., o, s] = sum_c sum_i weight[o, c, i] * x[..., c, s - dilation * i].

    Inputs before time 0 count as zero, so the output keeps length L and
    position s reads only times <= s.
    """
    x, weight = dc.as_value(x), dc.as_value(weight)
    if x.ndim != 4 or weight.ndim != 3 or weight.shape[1] != x.shape[2]:
        raise ValueError(f"conv: shape mismatch input {x.shape} vs filters {weight.shape}")
    k = weight.shape[2]
    taps = dc.stack([dc.shift_right(x, dilation * i) for i in range(k)], axis=2)  # (B, N, k, C, L)
    out = dc.einsum("oci,bnicl->bnol", weight, taps)
    if bias is not None:
        out = out + dc.reshape(bias, (-1, 1))
    return out


def _conv_filter(params: dict, name: str, mask: np.ndarray | None) -> dc.Value:
    v = params[f"{name}.v"]
    if mask is not None:
        v = v * mask[:, :, None]
    return dc.weight_norm(v, params[f"{name}.g"])


def init_params(cfg: ItcnConfig, M: int, rng: np.random.Generator) -> dict[str, dc.Value]:
    params = {}
    c_in = M
    k = cfg.kernel_size
    for b, width in enumerate(cfg.channels):
        c_out = M * width
        for j, (a, o) in enumerate(((c_in, c_out), (c_out, c_out)), start=1):
            bound = np.sqrt(6.0 / (a * k + o))
            v = rng.uniform(-bound, bound, size=(o, a, k))
            if not cfg.interaction:
                v = v * group_mask(o, a, M)[:, :, None]
            params[f"itcn.{b}.conv{j}.v"] = dc.Value(v, requires_grad=True)
            params[f"itcn.{b}.conv{j}.g"] = dc.Value(np.sqrt((v ** 2).sum(axis=(1, 2))), requires_grad=True)
            params[f"itcn.{b}.conv{j}.b"] = dc.Value(np.zeros(o), requires_grad=True)
        if c_in != c_out:
            bound = np.sqrt(6.0 / (c_in + c_out))
            params[f"itcn.{b}.res"] = dc.Value(rng.uniform(-bound, bound, size=(c_out, c_in)), requires_grad=True)
        c_in = c_out
    c = cfg.channels[-1]
    bound = np.sqrt(6.0 / (c + cfg.embed_dim))
    params["itcn.proj.w"] = dc.Value(rng.uniform(-bound, bound, size=(M, c, cfg.embed_dim)), requires_grad=True)
    params["itcn.proj.b"] = dc.Value(np.zeros((M, cfg.embed_dim)), requires_grad=True)
    return params


def itcn_block(H, params: dict, cfg: ItcnConfig, block: int, M: int,
               streams: DropoutStreams | None = None) -> dc.Value:
    """residual(H) + Dropout(ReLU(conv2(Dropout(ReLU(conv1(H))))))."""
    H = dc.as_value(H)
    d = cfg.block_dilations()[block]
    c_in = H.shape[2]
    c_out = M * cfg.channels[block]
    name = f"itcn.{block}"
    masks = (None, None) if cfg.interaction else (group_mask(c_out, c_in, M), group_mask(c_out, c_out, M))
    h = dilated_causal_conv(H, _conv_filter(params, f"{name}.conv1", masks[0]), d, params[f"{name}.conv1.b"])
    h = dropout(dc.relu(h), cfg.dropout, streams)
    h = dilated_causal_conv(h, _conv_filter(params, f"{name}.conv2", masks[1]), d, params[f"{name}.conv2.b"])
    h = dropout(dc.relu(h), cfg.dropout, streams)
    if c_in == c_out:
        res = H
    else:
        w = params[f"{name}.res"]
        if not cfg.interaction:
            w = w * group_mask(c_out, c_in, M)
        res = dc.einsum("oc,bncl->bnol", w, H)
    return res + h


def itcn_forward(X, params: dict, cfg: ItcnConfig, streams: DropoutStreams | None = None) -> dc.Value:
    """Temporal embedding E_t (B, N, M, e) from windows X (B, N, M, t)."""
    H = dc.as_value(X)
    if H.ndim != 4:
        raise ValueError(f"ITCN input must be (B, N, M, t), got {H.shape}")
    B, N, M, _ = H.shape
    for block in range(cfg.blocks):
        H = itcn_block(H, params, cfg, block, M, streams)
    if cfg.summary == "last":
        h = H[:, :, :, -1]
    else:
        h = dc.mean(H, axis=3)
    h = dc.reshape(h, (B, N, M, cfg.channels[-1]))
    return dc.einsum("bnmc,mce->bnme", h, params["itcn.proj.w"]) + params["itcn.proj.b"]


def fuse_embeddings(E_s, E_t) -> dc.Value:
    """Hadamard product of spatial and temporal embeddings."""
    E_s, E_t = dc.as_value(E_s), dc.as_value(E_t)
    if E_s.shape != E_t.shape:
        raise ValueError(f"fuse: shape mismatch {E_s.shape} vs {E_t.shape}")
    return E_s * E_t
