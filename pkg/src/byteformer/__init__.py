"""Byte-level transformer classification toolkit.

Classifies files directly from their bytes: minimal bit-exact codecs
(fHWC/fCHW/TIFF/PNG/WAV), a windowed-attention transformer over byte
tokens, permutation-based input obfuscation with exact embedding-reindex
equivalence, a privacy-preserving camera simulator, byte-ordering probes,
and a small CPU training/evaluation harness.
"""

from .codec import AudioClip, ByteSequence, ImageTensor
from .model import ByteFormerConfig
from .privacy import CameraSpec, PermutationMap
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "ByteFormerConfig",
    "ByteSequence",
    "CameraSpec",
    "GradTape",
    "ImageTensor",
    "PermutationMap",
    "Tensor",
    "__version__",
]
