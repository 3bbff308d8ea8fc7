"""Difference adapter: per-decoder-layer sliding-window attention blocks.

Each block normalizes its input, runs multi-head attention restricted to a
symmetric local window (zero padding, padded keys masked out), and projects
back through a zero-initialized output layer, so a fresh stack leaves the
backbone's behavior untouched. Block k receives the backbone tap plus the
accumulated raw outputs of blocks 1..k-1, and the stream handed to the next
decoder layer is tap + alpha * block_output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .denoiser import Backbone, ParamGroup
from .errors import ContractError


@dataclass
class AdapterConfig:
    window: int = 5
    heads: int = 4
    model_dim: int = 64
    alpha: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ContractError("window must be an odd positive integer")
        if self.model_dim % self.heads != 0:
            raise ContractError("model_dim must be divisible by heads")
        if not np.isfinite(self.alpha):
            raise ContractError("alpha must be finite")

    def to_dict(self) -> dict:
        return {"window": self.window, "heads": self.heads,
                "model_dim": self.model_dim, "alpha": self.alpha}


def _window_mask(seq_len: int, window: int, dtype) -> np.ndarray:
    """(1, W, S, 1) additive mask: 0 where the window slot is a real key, -1e9 on padding."""
    pad = window // 2
    w = np.arange(window)[:, None]
    s = np.arange(seq_len)[None, :]
    key = s + w - pad
    valid = (key >= 0) & (key < seq_len)
    mask = np.where(valid, 0.0, -1e9).astype(dtype)
    return mask[None, :, :, None]


def sliding_window_attention(x: Tensor, window: int, heads: int, params: dict) -> Tensor:
    """Local attention over a centered window of width `window`; keeps sequence length.

    `x` is (B, S, D). The key/value sequence is zero-padded by window//2 on
    both ends and each position attends to its own W-slot neighborhood, with
    padded slots masked out of the softmax.
    """
    if window % 2 == 0 or window < 1:
        raise ContractError("window must be odd and >= 1")
    b, s, dim = x.shape
    if dim % heads != 0:
        raise ContractError("feature dim must be divisible by heads")
    e = dim // heads
    pad = window // 2

    q = x @ params["wq"] + params["bq"]
    k = x @ params["wk"] + params["bk"]
    v = x @ params["wv"] + params["bv"]
    kp = ad.pad(k, axis=1, before=pad, after=pad)
    vp = ad.pad(v, axis=1, before=pad, after=pad)
    # slot w of position p holds padded index p + w, i.e. real key p + w - pad
    k_win = ad.stack([kp[:, o:o + s, :] for o in range(window)], axis=1)  # (B, W, S, D)
    v_win = ad.stack([vp[:, o:o + s, :] for o in range(window)], axis=1)

    qh = q.reshape((b, 1, s, heads, e))
    kh = k_win.reshape((b, window, s, heads, e))
    vh = v_win.reshape((b, window, s, heads, e))
    scores = (qh * kh).sum(axis=-1) * (1.0 / np.sqrt(e))  # (B, W, S, heads)
    scores = scores + Tensor(_window_mask(s, window, x.dtype))
    att = ad.softmax(scores, axis=1)
    out = (att.reshape((b, window, s, heads, 1)) * vh).sum(axis=1)  # (B, S, heads, e)
    return out.reshape((b, s, dim)) @ params["wo"] + params["bo"]


class AdapterStack:
    """One adapter block per decoder layer (parameters phi)."""

    def __init__(self, cfg: AdapterConfig, n_blocks: int, seed: int = 0):
        if n_blocks < 1:
            raise ContractError("adapter needs at least one block")
        self.cfg = cfg
        self.alpha = cfg.alpha
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        dim = cfg.model_dim
        self.blocks = []
        for k in range(n_blocks):
            g = ParamGroup(self.params, f"adapter{k}")
            block = {"ln": g.norm("ln", dim)}
            for tag in ("q", "k", "v"):
                block[f"w{tag}"], block[f"b{tag}"] = g.linear(f"attn.{tag}", dim, dim, rng)
            block["wo"], block["bo"] = g.linear("attn.o", dim, dim, rng, zero=True)
            self.blocks.append(block)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def block_forward(self, k: int, x: Tensor) -> Tensor:
        blk = self.blocks[k]
        normed = ad.layer_norm(x, *blk["ln"])
        return sliding_window_attention(normed, self.cfg.window, self.cfg.heads, blk)


def adapter_forward(stack: AdapterStack, taps: list[Tensor]):
    """Run the stack over precomputed per-layer states.

    Block k sees taps[k] plus the sum of raw outputs of earlier blocks; the
    updated stream for layer k is taps[k] + alpha * output_k. Returns
    (block outputs, updated taps).
    """
    if len(taps) != len(stack.blocks):
        raise ContractError(f"expected {len(stack.blocks)} taps, got {len(taps)}")
    locals_, updated = [], []
    acc = None
    for k, tap in enumerate(taps):
        local_in = tap if acc is None else tap + acc
        local = stack.block_forward(k, local_in)
        locals_.append(local)
        acc = local if acc is None else acc + local
        updated.append(tap + stack.alpha * local)
    return locals_, updated


class ComposedModel:
    """Frozen backbone plus trainable adapter stack."""

    def __init__(self, backbone: Backbone, stack: AdapterStack):
        self.backbone = backbone
        self.stack = stack
        self.cfg = backbone.cfg

    def forward(self, x_t, t: int):
        return self.backbone.forward(x_t, t, adapter=self.stack)

    def predict_noise(self, x, t: int) -> np.ndarray:
        with ad.no_grad():
            eps_hat, _ = self.forward(x, t)
        return eps_hat.data

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.stack.parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    @property
    def params(self) -> dict[str, Parameter]:
        merged = dict(self.backbone.params)
        merged.update(self.stack.params)
        return merged


def attach(backbone: Backbone, stack: AdapterStack) -> ComposedModel:
    """Freeze the backbone and interleave the adapter after each decoder layer."""
    if stack.cfg.model_dim != backbone.cfg.model_dim:
        raise ContractError(
            f"adapter dim {stack.cfg.model_dim} != backbone dim {backbone.cfg.model_dim}")
    if len(stack.blocks) != backbone.cfg.dec_layers:
        raise ContractError(
            f"adapter has {len(stack.blocks)} blocks, backbone has {backbone.cfg.dec_layers} decoder layers")
    if stack.cfg.window > 2 * backbone.cfg.tau - 1:
        raise ContractError("adapter window exceeds 2*tau - 1")
    backbone.set_trainable(False)
    return ComposedModel(backbone, stack)
