"""Byte-ordering transforms for probing locality sensitivity.

Every transform permutes positions only, so the byte multiset is conserved.
All kinds are deterministic except random_shuffle, which is redrawn from
the supplied rng on every call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import ByteSequence
from .errors import ConfigError

ORDER_KINDS = ("baseline", "random_shuffle", "stride", "window_shuffle", "cyclic", "reverse")


@dataclass
class OrderTransform:
    """A byte-reordering policy.

    window_shuffle draws one permutation of window positions at
    construction and reuses it for every sample and epoch.
    """

    kind: str = "baseline"
    window: int = 1024
    stride: int = 1024
    fixed_perm: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ORDER_KINDS:
            raise ConfigError(f"unknown byte-order kind {self.kind!r}; expected one of {ORDER_KINDS}")
        if self.window < 1 or self.stride < 1:
            raise ConfigError("window and stride must be >= 1")
        if self.kind == "window_shuffle":
            if self.fixed_perm is None:
                raise ConfigError("window_shuffle needs a fixed_perm (use make_transform)")
            self.fixed_perm = np.asarray(self.fixed_perm, dtype=np.int64)
            if sorted(self.fixed_perm.tolist()) != list(range(self.window)):
                raise ConfigError("fixed_perm is not a permutation of the window positions")


def make_transform(kind: str, window: int = 1024, stride: int = 1024, seed: int = 0) -> OrderTransform:
    """Build a transform; window_shuffle's permutation is drawn here once."""
    perm = None
    if kind == "window_shuffle":
        perm = np.random.default_rng(seed).permutation(window)
    return OrderTransform(kind, window, stride, perm)


def apply_order(seq: ByteSequence, t: OrderTransform, rng=None) -> ByteSequence:
    """Reorder the bytes of seq according to the transform kind."""
    data = seq.data
    n = data.size
    if n == 0:
        raise ConfigError("cannot reorder an empty sequence")

    if t.kind == "baseline":
        out = data.copy()
    elif t.kind == "reverse":
        out = data[::-1].copy()
    elif t.kind == "cyclic":
        half = n // 2
        out = np.concatenate([data[half:], data[:half]])
    elif t.kind == "stride":
        # Column-major read of a stride x ceil(n/stride) grid, skipping
        # cells past the end: [0, s, 2s, ..., 1, 1+s, ...].
        idx = np.concatenate([np.arange(r, n, t.stride) for r in range(min(t.stride, n))])
        out = data[idx]
    elif t.kind == "window_shuffle":
        out = np.empty_like(data)
        for start in range(0, n, t.window):
            block = data[start:start + t.window]
            if block.size == t.window:
                out[start:start + t.window] = block[t.fixed_perm]
            else:
                partial = t.fixed_perm[t.fixed_perm < block.size]
                out[start:start + block.size] = block[partial]
    else:  # random_shuffle
        if rng is None:
            raise ConfigError("random_shuffle needs an rng")
        out = data[rng.permutation(n)]
    return ByteSequence(out, seq.encoding_tag)
