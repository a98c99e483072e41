"""Minimal bit-exact file encoders and their parsers.

Images: headerless fHWC/fCHW dumps, baseline uncompressed TIFF, and PNG
whose zlib stream uses only stored (uncompressed) deflate blocks. Audio:
RIFF/WAVE at four bit depths. JPEG and MP3 are ingested as opaque bytes
only. Every encoder is deterministic: identical input, identical bytes.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, EncodeError

ENCODING_TAGS = (
    "fHWC", "fCHW", "TIFF", "PNG", "JPEG",
    "WAV_U8", "WAV_I16", "WAV_I32", "WAV_F32", "MP3", "RAW",
)

WAV_DEPTHS = ("U8", "I16", "I32", "F32")

PNG_SIGNATURE = bytes([137, 80, 78, 71, 13, 10, 26, 10])

TIFF_HEADER_LEN = 128  # 8 header + 114 IFD (9 tags) + 6 external BitsPerSample


@dataclass
class ByteSequence:
    """A file's bytes plus the encoding they came from; the model input."""

    data: np.ndarray
    encoding_tag: str = "RAW"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.encoding_tag not in ENCODING_TAGS:
            raise DataError(f"unknown encoding tag {self.encoding_tag!r}")

    def __len__(self):
        return int(self.data.size)

    def tobytes(self) -> bytes:
        return self.data.tobytes()


@dataclass
class ImageTensor:
    """uint8 RGB image in HWC raster order."""

    pixels: np.ndarray  # [H, W, 3]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"expected [H, W, 3] uint8 pixels, got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise DataError("image dimensions must be positive")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return 3


@dataclass
class AudioClip:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")


# ---------------------------------------------------------------------------
# headerless image dumps
# ---------------------------------------------------------------------------

def encode_fhwc(img: ImageTensor) -> ByteSequence:
    """Flatten pixels in height, width, channel order; no header."""
    return ByteSequence(img.pixels.reshape(-1), "fHWC")


def encode_fchw(img: ImageTensor) -> ByteSequence:
    """Flatten pixels in channel, height, width (planar) order; no header."""
    return ByteSequence(img.pixels.transpose(2, 0, 1).reshape(-1), "fCHW")


def decode_fhwc(data, height: int, width: int) -> ImageTensor:
    arr = np.asarray(data, dtype=np.uint8).reshape(-1)
    if arr.size != height * width * 3:
        raise DataError(f"fHWC payload of {arr.size} bytes does not match {height}x{width}x3")
    return ImageTensor(arr.reshape(height, width, 3))


def decode_fchw(data, height: int, width: int) -> ImageTensor:
    arr = np.asarray(data, dtype=np.uint8).reshape(-1)
    if arr.size != height * width * 3:
        raise DataError(f"fCHW payload of {arr.size} bytes does not match {height}x{width}x3")
    return ImageTensor(arr.reshape(3, height, width).transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# TIFF (little-endian, single uncompressed strip)
# ---------------------------------------------------------------------------

_TIFF_SHORT = 3
_TIFF_LONG = 4


def encode_tiff(img: ImageTensor) -> ByteSequence:
    """Baseline RGB TIFF: "II" byte order, one IFD, one uncompressed strip.

    Header layout is fixed, so same-shape images get same-length streams:
    8-byte header, 9-tag IFD, external BitsPerSample triple, pixel data.
    """
    h, w = img.height, img.width
    nbytes = h * w * 3
    if w > 0xFFFFFFFF or h > 0xFFFFFFFF or nbytes > 0xFFFFFFFF:
        raise EncodeError(f"image {w}x{h} exceeds 32-bit TIFF tag capacity")

    ifd_offset = 8
    n_tags = 9
    bits_offset = ifd_offset + 2 + n_tags * 12 + 4
    data_offset = bits_offset + 6
    assert data_offset == TIFF_HEADER_LEN

    tags = [
        (256, _TIFF_LONG, 1, w),             # ImageWidth
        (257, _TIFF_LONG, 1, h),             # ImageLength
        (258, _TIFF_SHORT, 3, bits_offset),  # BitsPerSample -> external (8,8,8)
        (259, _TIFF_SHORT, 1, 1),            # Compression: none
        (262, _TIFF_SHORT, 1, 2),            # PhotometricInterpretation: RGB
        (273, _TIFF_LONG, 1, data_offset),   # StripOffsets
        (277, _TIFF_SHORT, 1, 3),            # SamplesPerPixel
        (278, _TIFF_LONG, 1, h),             # RowsPerStrip
        (279, _TIFF_LONG, 1, nbytes),        # StripByteCounts
    ]

    out = bytearray()
    out += struct.pack("<2sHI", b"II", 42, ifd_offset)
    out += struct.pack("<H", n_tags)
    for tag, typ, count, value in tags:
        out += struct.pack("<HHII", tag, typ, count, value)
    out += struct.pack("<I", 0)  # no next IFD
    out += struct.pack("<HHH", 8, 8, 8)
    out += img.pixels.tobytes()
    return ByteSequence(np.frombuffer(bytes(out), dtype=np.uint8), "TIFF")


def decode_tiff(data) -> ImageTensor:
    """Parse the single-strip RGB TIFFs this module writes (II or MM order)."""
    buf = bytes(np.asarray(data, dtype=np.uint8).tobytes())
    if len(buf) < 8:
        raise DataError("TIFF stream too short")
    order = buf[:2]
    if order == b"II":
        e = "<"
    elif order == b"MM":
        e = ">"
    else:
        raise DataError(f"not a TIFF stream (byte order mark {order!r})")
    magic, ifd_offset = struct.unpack(e + "HI", buf[2:8])
    if magic != 42:
        raise DataError(f"bad TIFF magic {magic}")

    (n_tags,) = struct.unpack(e + "H", buf[ifd_offset:ifd_offset + 2])
    entries = {}
    for i in range(n_tags):
        off = ifd_offset + 2 + i * 12
        tag, typ, count = struct.unpack(e + "HHI", buf[off:off + 8])
        entries[tag] = (typ, count, buf[off + 8:off + 12])

    def values(tag):
        typ, count, raw = entries[tag]
        size, code = {_TIFF_SHORT: (2, "H"), _TIFF_LONG: (4, "I")}[typ]
        if size * count <= 4:
            return struct.unpack(e + code * count, raw[:size * count])
        (ptr,) = struct.unpack(e + "I", raw)
        return struct.unpack(e + code * count, buf[ptr:ptr + size * count])

    for required in (256, 257, 273, 279):
        if required not in entries:
            raise DataError(f"TIFF missing required tag {required}")
    w = values(256)[0]
    h = values(257)[0]
    if 259 in entries and values(259)[0] != 1:
        raise DataError("only uncompressed TIFF strips are supported")
    if 258 in entries and tuple(values(258)) != (8, 8, 8):
        raise DataError("only 8-bit RGB TIFF is supported")
    if 277 in entries and values(277)[0] != 3:
        raise DataError("only 3-sample RGB TIFF is supported")

    offsets = values(273)
    counts = values(279)
    payload = b"".join(buf[o:o + c] for o, c in zip(offsets, counts))
    if len(payload) != h * w * 3:
        raise DataError(f"TIFF strip bytes {len(payload)} do not match {w}x{h}x3")
    return ImageTensor(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3))


# ---------------------------------------------------------------------------
# PNG (stored deflate blocks only, one IDAT)
# ---------------------------------------------------------------------------

def png_filter_row(row: np.ndarray, prior: np.ndarray, filter_type: int, bpp: int = 3) -> np.ndarray:
    """Apply a PNG row filter (0 None, 1 Sub, 2 Up); arithmetic modulo 256."""
    row = np.asarray(row, dtype=np.uint8)
    if filter_type == 0:
        return row.copy()
    if filter_type == 1:
        left = np.zeros_like(row)
        left[bpp:] = row[:-bpp]
        return (row.astype(np.int16) - left).astype(np.uint8)
    if filter_type == 2:
        return (row.astype(np.int16) - np.asarray(prior, dtype=np.int16)).astype(np.uint8)
    raise EncodeError(f"unsupported PNG filter type {filter_type}")


def png_unfilter_row(filtered: np.ndarray, prior: np.ndarray, filter_type: int, bpp: int = 3) -> np.ndarray:
    """Invert png_filter_row."""
    filtered = np.asarray(filtered, dtype=np.uint8)
    if filter_type == 0:
        return filtered.copy()
    if filter_type == 2:
        return (filtered.astype(np.int16) + np.asarray(prior, dtype=np.int16)).astype(np.uint8)
    if filter_type == 1:
        out = filtered.astype(np.int16)
        for x in range(bpp, out.size):
            out[x] = (out[x] + out[x - bpp]) & 0xFF
        return out.astype(np.uint8)
    raise DataError(f"unsupported PNG filter type {filter_type}")


def _png_chunk(chunk_type: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(chunk_type + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + chunk_type + payload + struct.pack(">I", crc)


def _deflate_stored(raw: bytes) -> bytes:
    """zlib container whose deflate payload is stored (uncompressed) blocks."""
    out = bytearray(b"\x78\x01")
    n = len(raw)
    pos = 0
    while True:
        chunk = raw[pos:pos + 0xFFFF]
        pos += len(chunk)
        final = pos >= n
        out += struct.pack("<BHH", 1 if final else 0, len(chunk), len(chunk) ^ 0xFFFF)
        out += chunk
        if final:
            break
    out += struct.pack(">I", zlib.adler32(raw) & 0xFFFFFFFF)
    return bytes(out)


def _inflate_stored(stream: bytes) -> bytes:
    """Parse the stored-block zlib stream _deflate_stored emits."""
    if len(stream) < 6:
        raise DataError("zlib stream too short")
    cmf, flg = stream[0], stream[1]
    if cmf & 0x0F != 8 or ((cmf << 8) | flg) % 31 != 0:
        raise DataError("bad zlib header")
    out = bytearray()
    pos = 2
    while True:
        header, ln, nlen = struct.unpack("<BHH", stream[pos:pos + 5])
        if header & 0x06:
            raise DataError("compressed deflate block found; expected stored blocks only")
        if ln ^ 0xFFFF != nlen:
            raise DataError("stored block LEN/NLEN mismatch")
        pos += 5
        out += stream[pos:pos + ln]
        pos += ln
        if header & 0x01:
            break
    (adler,) = struct.unpack(">I", stream[pos:pos + 4])
    if adler != zlib.adler32(bytes(out)) & 0xFFFFFFFF:
        raise DataError("zlib adler32 mismatch")
    return bytes(out)


def encode_png(img: ImageTensor, filter_type: int = 0) -> ByteSequence:
    """8-bit RGB PNG with one filter byte per row and no compression.

    The IDAT zlib stream consists purely of stored deflate blocks, so row
    data appears verbatim (modulo the chosen filter arithmetic).
    """
    if filter_type not in (0, 1, 2):
        raise EncodeError(f"unsupported PNG filter type {filter_type}")
    h, w = img.height, img.width
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)

    rows = img.pixels.reshape(h, w * 3)
    raw = bytearray()
    prior = np.zeros(w * 3, dtype=np.uint8)
    for y in range(h):
        raw.append(filter_type)
        raw += png_filter_row(rows[y], prior, filter_type).tobytes()
        prior = rows[y]

    out = PNG_SIGNATURE
    out += _png_chunk(b"IHDR", ihdr)
    out += _png_chunk(b"IDAT", _deflate_stored(bytes(raw)))
    out += _png_chunk(b"IEND", b"")
    return ByteSequence(np.frombuffer(out, dtype=np.uint8), "PNG")


def decode_png(data) -> ImageTensor:
    """Parse the PNGs this module writes (8-bit RGB, filters 0/1/2)."""
    buf = bytes(np.asarray(data, dtype=np.uint8).tobytes())
    if buf[:8] != PNG_SIGNATURE:
        raise DataError("not a PNG stream")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos < len(buf):
        (length,) = struct.unpack(">I", buf[pos:pos + 4])
        ctype = buf[pos + 4:pos + 8]
        payload = buf[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", buf[pos + 8 + length:pos + 12 + length])
        if crc != zlib.crc32(ctype + payload) & 0xFFFFFFFF:
            raise DataError(f"PNG chunk {ctype!r} CRC mismatch")
        if ctype == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif ctype == b"IDAT":
            idat += payload
        elif ctype == b"IEND":
            break
        pos += 12 + length
    if ihdr is None:
        raise DataError("PNG missing IHDR")
    w, h, depth, color, comp, filt, interlace = ihdr
    if (depth, color, comp, filt, interlace) != (8, 2, 0, 0, 0):
        raise DataError(f"unsupported PNG configuration {ihdr}")

    raw = _inflate_stored(bytes(idat))
    stride = 1 + w * 3
    if len(raw) != h * stride:
        raise DataError(f"PNG scanline payload {len(raw)} does not match {w}x{h}")
    pixels = np.empty((h, w * 3), dtype=np.uint8)
    prior = np.zeros(w * 3, dtype=np.uint8)
    for y in range(h):
        row = raw[y * stride:(y + 1) * stride]
        pixels[y] = png_unfilter_row(np.frombuffer(row[1:], dtype=np.uint8), prior, row[0])
        prior = pixels[y]
    return ImageTensor(pixels.reshape(h, w, 3))


# ---------------------------------------------------------------------------
# WAV (RIFF/WAVE, mono)
# ---------------------------------------------------------------------------

def _wav_quantize(samples: np.ndarray, depth: str) -> bytes:
    if depth == "U8":
        return np.rint(samples * 127.5 + 127.5).clip(0, 255).astype(np.uint8).tobytes()
    if depth == "I16":
        return np.rint(samples * 32767.0).clip(-32768, 32767).astype("<i2").tobytes()
    if depth == "I32":
        q = np.rint(samples * 2147483647.0).clip(-2147483648, 2147483647)
        return q.astype("<i4").tobytes()
    if depth == "F32":
        return samples.astype("<f4").tobytes()
    raise EncodeError(f"unsupported WAV depth {depth!r}")


def encode_wav(clip: AudioClip, depth: str = "I16") -> ByteSequence:
    """RIFF/WAVE writer: PCM (format 1) for U8/I16/I32, IEEE float (format 3)
    with a fact chunk for F32. Headers are 44 bytes for PCM, 58 for float.
    """
    depth = depth.upper()
    if depth not in WAV_DEPTHS:
        raise EncodeError(f"unsupported WAV depth {depth!r}; expected one of {WAV_DEPTHS}")
    samples = clip.samples
    if samples.size and (samples.min() < -1.0 or samples.max() > 1.0):
        warnings.warn("WAV samples outside [-1, 1] are clamped", stacklevel=2)
        samples = samples.clip(-1.0, 1.0)

    width = {"U8": 1, "I16": 2, "I32": 4, "F32": 4}[depth]
    fmt_code = 3 if depth == "F32" else 1
    payload = _wav_quantize(samples, depth)
    rate = clip.sample_rate

    out = bytearray()
    if fmt_code == 1:
        fmt = struct.pack("<HHIIHH", 1, 1, rate, rate * width, width, width * 8)
        chunks = [(b"fmt ", fmt), (b"data", payload)]
    else:
        fmt = struct.pack("<HHIIHHH", 3, 1, rate, rate * width, width, width * 8, 0)
        fact = struct.pack("<I", samples.size)
        chunks = [(b"fmt ", fmt), (b"fact", fact), (b"data", payload)]
    body = b"".join(struct.pack("<4sI", name, len(data)) + data for name, data in chunks)
    out += struct.pack("<4sI4s", b"RIFF", 4 + len(body), b"WAVE")
    out += body
    return ByteSequence(np.frombuffer(bytes(out), dtype=np.uint8), f"WAV_{depth}")


def decode_wav(data) -> AudioClip:
    """Parse RIFF/WAVE back to float samples; inverts encode_wav exactly on
    values representable at the stored depth.
    """
    buf = bytes(np.asarray(data, dtype=np.uint8).tobytes())
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise DataError("not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(buf):
        name, length = struct.unpack("<4sI", buf[pos:pos + 8])
        body = buf[pos + 8:pos + 8 + length]
        if name == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif name == b"data":
            payload = body
        pos += 8 + length + (length & 1)
    if fmt is None or payload is None:
        raise DataError("WAV stream missing fmt or data chunk")
    code, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise DataError(f"only mono WAV is supported, got {channels} channels")
    if code == 1 and bits == 8:
        samples = (np.frombuffer(payload, dtype=np.uint8).astype(np.float64) - 127.5) / 127.5
    elif code == 1 and bits == 16:
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32767.0
    elif code == 1 and bits == 32:
        samples = np.frombuffer(payload, dtype="<i4").astype(np.float64) / 2147483647.0
    elif code == 3 and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise DataError(f"unsupported WAV format code={code} bits={bits}")
    return AudioClip(samples, rate)


def wav_depth_tag(data) -> str:
    """Sniff the bit depth of a WAV stream, returning its encoding tag."""
    buf = bytes(np.asarray(data, dtype=np.uint8).tobytes())
    pos = 12
    while pos + 8 <= len(buf):
        name, length = struct.unpack("<4sI", buf[pos:pos + 8])
        if name == b"fmt ":
            code, _, _, _, _, bits = struct.unpack("<HHIIHH", buf[pos + 8:pos + 24])
            if code == 3 and bits == 32:
                return "WAV_F32"
            if code == 1:
                return {8: "WAV_U8", 16: "WAV_I16", 32: "WAV_I32"}.get(bits, "RAW")
            return "RAW"
        pos += 8 + length + (length & 1)
    return "RAW"


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def sniff_encoding(data) -> str:
    """Infer an encoding tag from magic numbers; RAW when nothing matches."""
    buf = bytes(np.asarray(data, dtype=np.uint8).tobytes()[:16])
    full = np.asarray(data, dtype=np.uint8)
    if buf.startswith(PNG_SIGNATURE):
        return "PNG"
    if buf[:4] in (b"II*\x00", b"MM\x00*"):
        return "TIFF"
    if buf[:3] == b"\xff\xd8\xff":
        return "JPEG"
    if buf[:4] == b"RIFF" and buf[8:12] == b"WAVE":
        return wav_depth_tag(full)
    if buf[:3] == b"ID3" or (len(buf) >= 2 and buf[0] == 0xFF and (buf[1] & 0xE0) == 0xE0):
        return "MP3"
    return "RAW"


def ingest_file(path) -> ByteSequence:
    """Read a file as raw bytes, tagging by magic number."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {p}: {exc}") from exc
    if not raw:
        raise DataError(f"empty input: {p}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return ByteSequence(arr, sniff_encoding(arr))


def decode_bytes(seq: ByteSequence):
    """Decode a tagged byte stream into an ImageTensor or AudioClip."""
    if seq.encoding_tag == "TIFF":
        return decode_tiff(seq.data)
    if seq.encoding_tag == "PNG":
        return decode_png(seq.data)
    if seq.encoding_tag.startswith("WAV"):
        return decode_wav(seq.data)
    raise DataError(f"cannot decode encoding {seq.encoding_tag!r} into a sample")
