"""Byte-token transformer: embedding, strided Conv1D reduction, positional
embeddings, windowed/full/bag attention with pair-merge downsampling, and a
masked mean-pool classifier head.

All functions are pure given (batch, params, cfg); params is a flat dict of
named Tensors so the trainer can apply per-name weight-decay rules and the
checkpoint format can serialize by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Batch
from .errors import ConfigError, SequenceTooShortError, ShapeError
from .tensor import Tensor

ATTENTION_KINDS = ("full", "window", "bag")

VOCAB_SIZE = 257  # 256 byte values + PAD


@dataclass
class ByteFormerConfig:
    """Architecture hyperparameters.

    conv_stride is always conv_kernel / 2. use_conv=False replaces the
    Conv1D with a windowed mean of the same kernel/stride ("-C");
    use_positional=False drops the positional table ("-NPE").
    """

    num_classes: int
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    mlp_ratio: int = 4
    conv_kernel: int = 32
    window_size: int = 128
    attention: str = "window"
    downsample_after: tuple = (0, 1, 3, 5, 7, 9)
    max_tokens: int = 16384
    use_positional: bool = True
    use_conv: bool = True
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        self.downsample_after = tuple(sorted(set(self.downsample_after)))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.conv_kernel % 2 != 0:
            raise ConfigError(f"conv_kernel must be even (stride is kernel/2), got {self.conv_kernel}")
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if any(i < 0 or i >= self.depth for i in self.downsample_after):
            raise ConfigError(f"downsample_after {self.downsample_after} outside [0, {self.depth})")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be positive")

    @property
    def conv_stride(self) -> int:
        return self.conv_kernel // 2

    @property
    def max_input_bytes(self) -> int:
        """Largest byte count whose reduced token count fits max_tokens."""
        return (self.max_tokens - 1) * self.conv_stride + self.conv_kernel

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "conv_kernel": self.conv_kernel,
            "window_size": self.window_size,
            "attention": self.attention,
            "downsample_after": list(self.downsample_after),
            "max_tokens": self.max_tokens,
            "use_positional": self.use_positional,
            "use_conv": self.use_conv,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["downsample_after"] = tuple(d.get("downsample_after", ()))
        return cls(**d)


@dataclass
class TokenState:
    """Token activations plus their validity mask (True = real content)."""

    tokens: Tensor       # [B, L, d]
    mask: np.ndarray     # bool [B, L]

    def __post_init__(self):
        if self.mask.shape != self.tokens.data.shape[:2]:
            raise ShapeError(f"mask shape {self.mask.shape} does not match "
                             f"tokens {self.tokens.data.shape}")


def token_count(nbytes: int, kernel: int) -> int:
    """Reduced sequence length: floor((S - k) / (k/2)) + 1."""
    stride = kernel // 2
    if nbytes < kernel:
        raise SequenceTooShortError(nbytes, kernel)
    return (nbytes - kernel) // stride + 1


def downsampled_length(length: int, n_downsamples: int) -> int:
    """Iterated ceil(L/2) over the configured downsampling layers."""
    for _ in range(n_downsamples):
        length = (length + 1) // 2
    return length


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ByteFormerConfig, seed=0, dtype=np.float32) -> dict:
    """Initialize all learned tensors; normal(0, 0.02) weights, zero biases."""
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    params = {}

    def weight(name, shape):
        params[name] = Tensor(rng.normal(0.0, 0.02, shape).astype(dtype),
                              requires_grad=True, name=name)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)

    weight("token_embed", (cfg.vocab_size, d))
    if cfg.use_positional:
        weight("pos_embed", (cfg.max_tokens, d))
    if cfg.use_conv:
        weight("reduce.kernel", (cfg.conv_kernel, d, d))
        zeros("reduce.bias", (d,))
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        ones(f"{p}.ln1.gamma", (d,))
        zeros(f"{p}.ln1.beta", (d,))
        weight(f"{p}.attn.qkv_w", (d, 3 * d))
        zeros(f"{p}.attn.qkv_b", (3 * d,))
        weight(f"{p}.attn.proj_w", (d, d))
        zeros(f"{p}.attn.proj_b", (d,))
        if cfg.attention == "bag":
            weight(f"{p}.attn.inter_qkv_w", (d, 3 * d))
            zeros(f"{p}.attn.inter_qkv_b", (3 * d,))
            weight(f"{p}.attn.inter_proj_w", (d, d))
            zeros(f"{p}.attn.inter_proj_b", (d,))
        ones(f"{p}.ln2.gamma", (d,))
        zeros(f"{p}.ln2.beta", (d,))
        weight(f"{p}.mlp.fc1_w", (d, cfg.mlp_ratio * d))
        zeros(f"{p}.mlp.fc1_b", (cfg.mlp_ratio * d,))
        weight(f"{p}.mlp.fc2_w", (cfg.mlp_ratio * d, d))
        zeros(f"{p}.mlp.fc2_b", (d,))
    for i in cfg.downsample_after:
        weight(f"downsample.{i}.weight", (2 * d, d))
        zeros(f"downsample.{i}.bias", (d,))
    weight("head.weight", (d, cfg.num_classes))
    zeros("head.bias", (cfg.num_classes,))
    return params


def decay_mask(params: dict) -> dict:
    """True where AdamW weight decay applies: matrices that are not
    embedding tables (norm gains/biases and all 1-d tensors are excluded).
    """
    return {name: (p.data.ndim >= 2 and name not in ("token_embed", "pos_embed"))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def embed_bytes(batch: Batch, table: Tensor) -> TokenState:
    """Gather byte/PAD embeddings; the mask comes from the batch lengths."""
    if batch.tokens.max() >= table.data.shape[0]:
        raise IndexError(f"token id {batch.tokens.max()} exceeds embedding "
                         f"table rows {table.data.shape[0]}")
    tokens = T.embedding_gather(table, batch.tokens)
    mask = np.arange(batch.tokens.shape[1])[None, :] < batch.lengths[:, None]
    return TokenState(tokens, mask)


def reduce_sequence(state: TokenState, params: dict, cfg: ByteFormerConfig) -> TokenState:
    """Shrink the sequence with a strided Conv1D (or windowed mean, "-C").

    A reduced token is valid only when its receptive field lies fully
    inside the sample's valid prefix, which keeps the per-sample token
    count at floor((len-k)/(k/2))+1 regardless of batch padding.
    """
    k, s = cfg.conv_kernel, cfg.conv_stride
    L = state.tokens.data.shape[1]
    if L < k:
        raise SequenceTooShortError(L, k)
    if cfg.use_conv:
        out = T.conv1d(state.tokens, params["reduce.kernel"], params["reduce.bias"], s)
    else:
        out = T.windowed_mean(state.tokens, k, s)
    win = np.lib.stride_tricks.sliding_window_view(state.mask, k, axis=1)[:, ::s]
    mask = win.all(axis=-1)
    if not mask.any(axis=1).all():
        shortest = int(state.mask.sum(axis=1).min())
        raise SequenceTooShortError(shortest, k)
    return TokenState(out, mask)


def add_positional(state: TokenState, pos_table: Tensor | None, cfg: ByteFormerConfig) -> TokenState:
    """Add the first L positional rows; identity under "-NPE"."""
    L = state.tokens.data.shape[1]
    if L > cfg.max_tokens:
        raise ConfigError(f"sequence of {L} tokens exceeds max_tokens {cfg.max_tokens}; "
                          f"raise max_tokens or shorten inputs")
    if not cfg.use_positional:
        return state
    pos = T.slice_axis(pos_table, 0, 0, L)
    return TokenState(T.add(state.tokens, pos), state.mask)


def _neg_inf_bias(valid: np.ndarray, dtype) -> np.ndarray:
    """0 where valid, -inf where masked."""
    bias = np.zeros(valid.shape, dtype=dtype)
    bias[~valid] = -np.inf
    return bias


def _mha(x: Tensor, bias, heads: int, p: dict, prefix: str) -> Tensor:
    """Multi-head self-attention over the second-to-last axis.

    x: [..., T, d]; bias: constant ndarray broadcastable to the
    [..., heads, T, T] attention logits, or None.
    """
    shape = x.data.shape
    lead, Tn, d = shape[:-2], shape[-2], shape[-1]
    dh = d // heads
    nl = len(lead)

    qkv = T.linear(x, p[f"{prefix}qkv_w"], p[f"{prefix}qkv_b"])
    qkv = T.reshape(qkv, (*lead, Tn, 3, heads, dh))
    qkv = T.transpose(qkv, (*range(nl), nl + 1, nl + 2, nl, nl + 3))  # [..., 3, H, T, dh]
    q = T.index_axis(qkv, nl, 0)
    k = T.index_axis(qkv, nl, 1)
    v = T.index_axis(qkv, nl, 2)

    att = T.mul_const(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    if bias is not None:
        att = T.add_const(att, bias)
    att = T.softmax(att, axis=-1)
    out = T.matmul(att, v)                      # [..., H, T, dh]
    out = T.swapaxes(out, -3, -2)               # [..., T, H, dh]
    out = T.reshape(out, (*lead, Tn, d))
    return T.linear(out, p[f"{prefix}proj_w"], p[f"{prefix}proj_b"])


def _attend_full(x: Tensor, mask: np.ndarray, heads: int, p: dict) -> Tensor:
    bias = _neg_inf_bias(mask[:, None, None, :], x.data.dtype)
    return _mha(x, bias, heads, p, "attn.")


def _window_pad(x: Tensor, mask: np.ndarray, w: int):
    """Zero-pad tokens and mask up to a multiple of the window size."""
    L = x.data.shape[1]
    Lp = ((L + w - 1) // w) * w
    if Lp != L:
        x = T.pad_axis(x, 1, 0, Lp - L)
        mask = np.pad(mask, ((0, 0), (0, Lp - L)))
    return x, mask, Lp


def _shift_segments(Lp: int, w: int, shift: int) -> np.ndarray:
    """Swin-style segment labels in rolled coordinates; attention may not
    cross segments inside the wrap-around window.
    """
    labels = np.zeros(Lp, dtype=np.int8)
    labels[Lp - w:Lp - shift] = 1
    labels[Lp - shift:] = 2
    return labels


def _attend_window(x: Tensor, mask: np.ndarray, block_index: int, cfg, p: dict) -> Tensor:
    """Shifted-window attention: even blocks use aligned windows, odd blocks
    cyclically shift by w/2 and mask attention across the wrapped boundary.
    """
    B, L, d = x.data.shape
    w = cfg.window_size
    x, m, Lp = _window_pad(x, mask, w)
    n_win = Lp // w
    shift = w // 2 if (block_index % 2 == 1 and Lp > w) else 0

    if shift:
        x = T.roll_axis(x, -shift, 1)
        m = np.roll(m, -shift, axis=1)

    xw = T.reshape(x, (B, n_win, w, d))
    bias = _neg_inf_bias(m.reshape(B, n_win, 1, 1, w), x.data.dtype)
    if shift:
        labels = _shift_segments(Lp, w, shift).reshape(n_win, w)
        seg = np.where(labels[:, :, None] == labels[:, None, :], 0.0, -np.inf)
        bias = bias + seg[None, :, None, :, :].astype(x.data.dtype)

    out = _mha(xw, bias, cfg.heads, p, "attn.")
    out = T.reshape(out, (B, Lp, d))
    if shift:
        out = T.roll_axis(out, shift, 1)
    if Lp != L:
        out = T.slice_axis(out, 1, 0, L)
    return out


def _attend_bag(x: Tensor, mask: np.ndarray, cfg, p: dict) -> Tensor:
    """Two-stage bag attention: self-attention inside each bag of w tokens,
    then attention across per-bag mean tokens, broadcast-added back.
    """
    B, L, d = x.data.shape
    w = cfg.window_size
    x, m, Lp = _window_pad(x, mask, w)
    n_bags = Lp // w

    xb = T.reshape(x, (B, n_bags, w, d))
    bias = _neg_inf_bias(m.reshape(B, n_bags, 1, 1, w), x.data.dtype)
    y = _mha(xb, bias, cfg.heads, p, "attn.")   # [B, n_bags, w, d]

    mb = m.reshape(B, n_bags, w)
    counts = mb.sum(axis=-1)
    inv = np.zeros_like(counts, dtype=x.data.dtype)
    np.divide(1.0, counts, out=inv, where=counts > 0)
    summed = T.sum_over_axis(T.mul_const(y, mb[..., None].astype(x.data.dtype)), 2)
    means = T.mul_const(summed, inv[..., None])  # [B, n_bags, d]

    bag_bias = _neg_inf_bias((counts > 0)[:, None, None, :], x.data.dtype)
    z = _mha(means, bag_bias, cfg.heads, p, "attn.inter_")
    y = T.add(y, T.reshape(z, (B, n_bags, 1, d)))

    out = T.reshape(y, (B, Lp, d))
    if Lp != L:
        out = T.slice_axis(out, 1, 0, L)
    return out


def attention_block(state: TokenState, block_params: dict, block_index: int,
                    cfg: ByteFormerConfig) -> TokenState:
    """Pre-norm transformer block: LN-attention-residual, LN-MLP-residual.

    PAD tokens receive -inf attention logits as keys in every variant.
    """
    x = state.tokens
    h = T.layer_norm(x, block_params["ln1.gamma"], block_params["ln1.beta"])
    if cfg.attention == "full":
        a = _attend_full(h, state.mask, cfg.heads, block_params)
    elif cfg.attention == "window":
        a = _attend_window(h, state.mask, block_index, cfg, block_params)
    else:
        a = _attend_bag(h, state.mask, cfg, block_params)
    x = T.add(x, a)

    h = T.layer_norm(x, block_params["ln2.gamma"], block_params["ln2.beta"])
    h = T.linear(h, block_params["mlp.fc1_w"], block_params["mlp.fc1_b"])
    h = T.gelu(h)
    h = T.linear(h, block_params["mlp.fc2_w"], block_params["mlp.fc2_b"])
    x = T.add(x, h)
    return TokenState(x, state.mask)


def downsample(state: TokenState, weight: Tensor, bias: Tensor) -> TokenState:
    """Halve the sequence: concatenate adjacent pairs (2d) and project to d.

    Masked positions are zeroed before merging so pad content never leaks
    into a valid merged token; the merged mask is the OR of each pair.
    """
    x, mask = state.tokens, state.mask
    B, L, d = x.data.shape
    if L < 2:
        raise ShapeError(f"downsample needs a sequence of >= 2 tokens, got {L}")
    x = T.mul_const(x, mask[..., None].astype(x.data.dtype))
    if L % 2 == 1:
        x = T.pad_axis(x, 1, 0, 1)
        mask = np.pad(mask, ((0, 0), (0, 1)))
    pairs = T.concat_pairs(x)
    out = T.linear(pairs, weight, bias)
    new_mask = mask.reshape(B, -1, 2).any(axis=-1)
    return TokenState(out, new_mask)


def _block_params(params: dict, i: int) -> dict:
    prefix = f"blocks.{i}."
    return {name[len(prefix):]: p for name, p in params.items() if name.startswith(prefix)}


def forward(batch: Batch, params: dict, cfg: ByteFormerConfig) -> Tensor:
    """Full network: returns logits [B, num_classes]."""
    state = embed_bytes(batch, params["token_embed"])
    state = reduce_sequence(state, params, cfg)
    state = add_positional(state, params.get("pos_embed"), cfg)
    for i in range(cfg.depth):
        state = attention_block(state, _block_params(params, i), i, cfg)
        if i in cfg.downsample_after:
            state = downsample(state, params[f"downsample.{i}.weight"],
                               params[f"downsample.{i}.bias"])

    x, mask = state.tokens, state.mask
    maskf = mask[..., None].astype(x.data.dtype)
    counts = mask.sum(axis=1).astype(x.data.dtype)
    pooled = T.sum_over_axis(T.mul_const(x, maskf), 1)
    pooled = T.mul_const(pooled, (1.0 / counts)[:, None])
    return T.linear(pooled, params["head.weight"], params["head.bias"])
