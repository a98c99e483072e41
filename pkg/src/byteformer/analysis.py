"""Embedding-similarity analysis: absolute cosine matrices for the 256 byte
embeddings and the first 256 positional embeddings, written as CSV and
8-bit grayscale PGM so figures can be produced downstream without plotting
dependencies.
"""

from __future__ import annotations

import warnings

import numpy as np


def abs_cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """|x . y| / (|x| |y|) for every pair of rows; zero-norm rows give 0."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    zero = norms == 0.0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm embedding rows emitted as 0", stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    unit = v / safe[:, None]
    m = np.abs(unit @ unit.T)
    m[zero, :] = 0.0
    m[:, zero] = 0.0
    return m


def write_csv(matrix: np.ndarray, path):
    np.savetxt(path, matrix, delimiter=",", fmt="%.6f")


def write_pgm(matrix: np.ndarray, path):
    """Binary P5 PGM; matrix values in [0, 1] scaled to 0..255."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    gray = np.rint(m * 255.0).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back the P5 files write_pgm produces (used by tests)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        dims = f.readline().split()
        maxval = int(f.readline())
        if magic != b"P5" or maxval != 255:
            raise ValueError(f"{path}: not an 8-bit P5 PGM")
        w, h = int(dims[0]), int(dims[1])
        return np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)


def embedding_matrices(tensors: dict) -> dict:
    """Token and positional cosine matrices from checkpoint tensors.

    Token rows 0..255 only (PAD excluded); positional rows capped at 256.
    """
    out = {"token": abs_cosine_matrix(tensors["token_embed"][:256])}
    if "pos_embed" in tensors:
        n = min(256, tensors["pos_embed"].shape[0])
        out["pos"] = abs_cosine_matrix(tensors["pos_embed"][:n])
    return out


def write_embedding_analysis(tensors: dict, out_prefix) -> list:
    """Write CSV+PGM pairs for each matrix; returns the created paths."""
    paths = []
    for name, matrix in embedding_matrices(tensors).items():
        csv_path = f"{out_prefix}_{name}_cos.csv"
        pgm_path = f"{out_prefix}_{name}_cos.pgm"
        write_csv(matrix, csv_path)
        write_pgm(matrix, pgm_path)
        paths += [csv_path, pgm_path]
    return paths
