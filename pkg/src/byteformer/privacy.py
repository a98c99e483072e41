"""Input obfuscation and the privacy-preserving camera simulator.

A random bijection on byte values remaps every input; the model inverts it
exactly by reindexing its token-embedding table, with no retraining. The
camera simulator keeps a random fraction of pixel channels in raster order
and discards their coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import ByteSequence, ImageTensor, encode_fhwc
from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass
class PermutationMap:
    """A bijection on {0..255} with its inverse and originating seed."""

    forward: np.ndarray
    inverse: np.ndarray
    seed: int

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.uint8)
        self.inverse = np.asarray(self.inverse, dtype=np.uint8)
        if sorted(self.forward.tolist()) != list(range(256)):
            raise DataError("forward table is not a bijection on 0..255")
        if not np.array_equal(self.inverse[self.forward], np.arange(256)):
            raise DataError("inverse does not invert forward")

    def serialize(self) -> bytes:
        """256 forward-table bytes followed by the little-endian u64 seed."""
        return self.forward.tobytes() + struct.pack("<Q", self.seed)

    @classmethod
    def deserialize(cls, blob: bytes) -> "PermutationMap":
        if len(blob) != 264:
            raise DataError(f"permutation blob must be 264 bytes, got {len(blob)}")
        forward = np.frombuffer(blob[:256], dtype=np.uint8)
        (seed,) = struct.unpack("<Q", blob[256:])
        inverse = np.empty(256, dtype=np.uint8)
        inverse[forward] = np.arange(256)
        return cls(forward, inverse, seed)


def gen_permutation(seed: int) -> PermutationMap:
    """Seeded Fisher-Yates shuffle of the byte values; deterministic per seed."""
    rng = np.random.default_rng(seed)
    forward = rng.permutation(256).astype(np.uint8)
    inverse = np.empty(256, dtype=np.uint8)
    inverse[forward] = np.arange(256)
    return PermutationMap(forward, inverse, int(seed))


def identity_permutation() -> PermutationMap:
    ident = np.arange(256, dtype=np.uint8)
    return PermutationMap(ident, ident.copy(), 0)


def obfuscate(seq: ByteSequence, phi: PermutationMap, noise_a: int = 0, rng=None) -> ByteSequence:
    """Per byte: add uniform noise from U{-a..a} (inclusive), wrap modulo 256,
    then remap through phi. a=0 is a pure relabeling.
    """
    if noise_a < 0:
        raise ConfigError(f"noise bound must be >= 0, got {noise_a}")
    data = seq.data.astype(np.int16)
    if noise_a > 0:
        if rng is None:
            raise ConfigError("noisy obfuscation needs an rng")
        data = data + rng.integers(-noise_a, noise_a + 1, size=data.shape, dtype=np.int16)
    data = np.mod(data, 256).astype(np.uint8)
    return ByteSequence(phi.forward[data], seq.encoding_tag)


def reindex_embedding(table: Tensor, phi: PermutationMap) -> Tensor:
    """Reassign embedding rows so gather(out, phi(x)) == gather(table, x).

    Row 256 (PAD) is untouched. out[phi[i]] = table[i].
    """
    data = table.data.copy()
    data[phi.forward.astype(np.int64)] = table.data[:256]
    out = Tensor(data, requires_grad=table.requires_grad, name=table.name)
    return out


@dataclass
class CameraSpec:
    """Fraction of pixel channels the sensor keeps, and its seeding policy."""

    keep_fraction: float
    seed_policy: str = "per_sample"

    def __post_init__(self):
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ConfigError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.seed_policy not in ("per_sample", "fixed"):
            raise ConfigError(f"seed policy must be per_sample or fixed, got {self.seed_policy!r}")


def camera_capture(img: ImageTensor, spec: CameraSpec, rng) -> ByteSequence:
    """Keep round(f*H*W*3) pixel channels chosen uniformly without
    replacement, emitted in original fHWC raster order; positions discarded.
    """
    flat = encode_fhwc(img).data
    n = flat.size
    keep = int(np.rint(spec.keep_fraction * n))
    if keep <= 0:
        raise DataError(f"keep_fraction {spec.keep_fraction} keeps 0 of {n} channels")
    if keep >= n:
        return ByteSequence(flat, "RAW")
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return ByteSequence(flat[idx], "RAW")
