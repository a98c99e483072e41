"""Dataset assembly: manifests, on-the-fly encoding, synthetic tasks, batching.

Padding uses token id 256 (one past the byte range), extending the model
vocabulary to 257 rows. The eval path is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec
from .codec import AudioClip, ByteSequence, ImageTensor
from .errors import ConfigError, DataError

PAD_ID = 256


@dataclass
class Manifest:
    """Relative sample paths with class indices."""

    entries: list  # [(relative path, class index)]
    class_count: int


@dataclass
class Batch:
    """Right-padded token batch; tokens[i, j] == PAD_ID exactly for j >= lengths[i]."""

    tokens: np.ndarray   # int32 [B, L_max], values in [0, 256]
    lengths: np.ndarray  # int32 [B]
    labels: np.ndarray   # int64 [B]

    @property
    def size(self):
        return int(self.tokens.shape[0])


def load_manifest(root, manifest_path, class_count=None) -> Manifest:
    """Parse a CSV manifest of `relative/path,label` lines (no header)."""
    root = Path(root)
    path = Path(manifest_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc

    entries = []
    seen = set()
    max_label = -1
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.rsplit(",", 1)
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'path,label', got {line!r}")
        rel, label_str = parts[0].strip(), parts[1].strip()
        try:
            label = int(label_str)
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {label_str!r} is not an integer") from None
        if label < 0:
            raise DataError(f"{path}:{lineno}: negative label {label}")
        if class_count is not None and label >= class_count:
            raise DataError(f"{path}:{lineno}: label {label} >= class_count {class_count}")
        if rel in seen:
            raise DataError(f"{path}:{lineno}: duplicate path {rel!r}")
        if not (root / rel).exists():
            raise DataError(f"{path}:{lineno}: missing file {root / rel}")
        seen.add(rel)
        max_label = max(max_label, label)
        entries.append((rel, label))
    if not entries:
        raise DataError(f"{path}: no samples")
    return Manifest(entries, class_count if class_count is not None else max_label + 1)


def load_sample(path):
    """Decode a file into an ImageTensor or AudioClip via its magic number."""
    seq = codec.ingest_file(path)
    try:
        return codec.decode_bytes(seq)
    except DataError as exc:
        raise DataError(f"cannot decode sample {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# augmentation / cropping
# ---------------------------------------------------------------------------

def nearest_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return pixels[ys][:, xs]


def center_crop(img: ImageTensor, size: int) -> ImageTensor:
    """Resize the shorter side to `size`, then crop the center square."""
    h, w = img.height, img.width
    if h < w:
        nh, nw = size, max(size, round(w * size / h))
    else:
        nh, nw = max(size, round(h * size / w)), size
    px = nearest_resize(img.pixels, nh, nw)
    top = (nh - size) // 2
    left = (nw - size) // 2
    return ImageTensor(px[top:top + size, left:left + size])


def random_resized_crop(img: ImageTensor, size: int, rng, scale=(0.2, 1.0), ratio=(0.75, 4.0 / 3.0)) -> ImageTensor:
    """Random area/aspect crop resized to size x size, plus horizontal flip."""
    h, w = img.height, img.width
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img.pixels[top:top + ch, left:left + cw]
            break
    else:
        crop = center_crop(img, min(h, w)).pixels
    out = nearest_resize(crop, size, size)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return ImageTensor(np.ascontiguousarray(out))


def fix_audio_length(clip: AudioClip, n: int, rng=None) -> AudioClip:
    """Trim or zero-pad to exactly n samples (random offset when rng given)."""
    s = clip.samples
    if s.size > n:
        start = int(rng.integers(0, s.size - n + 1)) if rng is not None else (s.size - n) // 2
        s = s[start:start + n]
    elif s.size < n:
        s = np.concatenate([s, np.zeros(n - s.size)])
    return AudioClip(s, clip.sample_rate)


# ---------------------------------------------------------------------------
# encoding pipeline
# ---------------------------------------------------------------------------

IMAGE_ENCODINGS = ("fhwc", "fchw", "tiff", "png")
AUDIO_ENCODINGS = ("wav_u8", "wav_i16", "wav_i32", "wav_f32")


def encode_sample(sample, encoding: str, png_filter: int = 0) -> ByteSequence:
    """Encode a decoded sample into the requested file encoding."""
    enc = encoding.lower()
    if isinstance(sample, ImageTensor):
        if enc == "fhwc":
            return codec.encode_fhwc(sample)
        if enc == "fchw":
            return codec.encode_fchw(sample)
        if enc == "tiff":
            return codec.encode_tiff(sample)
        if enc == "png":
            return codec.encode_png(sample, png_filter)
        raise ConfigError(f"encoding {encoding!r} does not apply to images")
    if isinstance(sample, AudioClip):
        if enc in AUDIO_ENCODINGS:
            return codec.encode_wav(sample, enc.split("_", 1)[1].upper())
        raise ConfigError(f"encoding {encoding!r} does not apply to audio")
    raise DataError(f"cannot encode sample of type {type(sample).__name__}")


def sample_to_bytes(sample, encoding: str, train: bool, rng=None,
                    target_size: int = 224, target_samples: int = 16000,
                    png_filter: int = 0) -> ByteSequence:
    """Augment-then-encode (train) or fixed-size crop-then-encode (eval).

    Training needs an rng; evaluation is deterministic across calls.
    """
    if isinstance(sample, ImageTensor):
        if train:
            if rng is None:
                raise ConfigError("training-mode encoding needs an rng")
            sample = random_resized_crop(sample, target_size, rng)
        else:
            sample = center_crop(sample, target_size)
    elif isinstance(sample, AudioClip):
        sample = fix_audio_length(sample, target_samples, rng if train else None)
    else:
        raise DataError(f"cannot encode sample of type {type(sample).__name__}")
    return encode_sample(sample, encoding, png_filter)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTask:
    """Generator selector for desk-scale stand-in datasets.

    locality: the class is a 64-byte motif planted at a random offset in
    noise; all motifs share one byte multiset, so only byte ORDER carries
    the label. histogram: the class is a global byte-frequency profile,
    invariant under any byte shuffle by construction.
    """

    kind: str = "locality"
    classes: int = 4
    length: int = 4096
    motif_len: int = 64

    def __post_init__(self):
        if self.kind not in ("locality", "histogram"):
            raise ConfigError(f"unknown synthetic task kind {self.kind!r}")
        if self.kind == "locality" and self.motif_len > self.length:
            raise ConfigError("motif_len cannot exceed sequence length")


@dataclass
class SyntheticDataset:
    sequences: list         # list of uint8 arrays
    labels: np.ndarray      # int64 [n]
    class_count: int
    kind: str
    motifs: np.ndarray | None = None  # [classes, motif_len] for locality

    def __len__(self):
        return len(self.sequences)


def make_synthetic(task: SyntheticTask, n: int, rng) -> SyntheticDataset:
    """Generate n labeled byte sequences with balanced classes."""
    labels = np.arange(n, dtype=np.int64) % task.classes
    rng.shuffle(labels)
    sequences = []

    if task.kind == "locality":
        base = rng.integers(0, 256, task.motif_len, dtype=np.uint8)
        motifs = np.stack([rng.permutation(base) for _ in range(task.classes)])
        for label in labels:
            seq = rng.integers(0, 256, task.length, dtype=np.uint8)
            off = int(rng.integers(0, task.length - task.motif_len + 1))
            seq[off:off + task.motif_len] = motifs[label]
            sequences.append(seq)
        return SyntheticDataset(sequences, labels, task.classes, task.kind, motifs)

    profiles = rng.dirichlet(np.ones(256), size=task.classes)
    for label in labels:
        seq = rng.choice(256, size=task.length, p=profiles[label]).astype(np.uint8)
        sequences.append(seq)
    return SyntheticDataset(sequences, labels, task.classes, task.kind)


def nearest_motif_predict(sequences, motifs: np.ndarray) -> np.ndarray:
    """Brute-force oracle: class of the motif with the best window match."""
    motif_len = motifs.shape[1]
    preds = np.empty(len(sequences), dtype=np.int64)
    for i, seq in enumerate(sequences):
        windows = np.lib.stride_tricks.sliding_window_view(seq, motif_len)
        scores = [(windows == m).sum(axis=1).max() for m in motifs]
        preds[i] = int(np.argmax(scores))
    return preds


def make_synthetic_images(classes: int, n: int, size: int, rng, noise: float = 40.0):
    """Color-profile image classes: robust to pixel-channel masking.

    Returns (list of ImageTensor, labels).
    """
    labels = np.arange(n, dtype=np.int64) % classes
    rng.shuffle(labels)
    centers = rng.integers(30, 226, size=(classes, 3))
    images = []
    for label in labels:
        px = centers[label] + rng.normal(0.0, noise, size=(size, size, 3))
        images.append(ImageTensor(px.clip(0, 255).astype(np.uint8)))
    return images, labels


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def collate(sequences, labels, max_input_bytes=None) -> Batch:
    """Right-pad byte sequences to the batch maximum with PAD_ID."""
    if len(sequences) == 0:
        raise DataError("cannot collate an empty batch")
    arrays = [s.data if isinstance(s, ByteSequence) else np.asarray(s, dtype=np.uint8)
              for s in sequences]
    lengths = np.array([a.size for a in arrays], dtype=np.int32)
    if max_input_bytes is not None and lengths.max() > max_input_bytes:
        raise DataError(f"sequence of {lengths.max()} bytes exceeds the configured "
                        f"maximum of {max_input_bytes}")
    L = int(lengths.max())
    tokens = np.full((len(arrays), L), PAD_ID, dtype=np.int32)
    for i, a in enumerate(arrays):
        tokens[i, :a.size] = a
    return Batch(tokens, lengths, np.asarray(labels, dtype=np.int64))
