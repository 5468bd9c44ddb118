"""Toy residual vector quantizer.

Stands in for a neural audio tokenizer: successive codebooks are fit by
k-means on the residual left by the previous books, frames encode to one code
per book by greedy nearest neighbor, and decoding sums the chosen codewords.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecMismatch, InsufficientData, InvalidInput

DEFAULT_N_Q = 8
DEFAULT_K = 1024
DEFAULT_D_FEAT = 32

_MAGIC = b"RVQC"


@dataclass(frozen=True)
class Codebooks:
    books: tuple[np.ndarray, ...]  # each (K, d_feat)

    @property
    def n_q(self) -> int:
        return len(self.books)

    @property
    def k(self) -> int:
        return self.books[0].shape[0]

    @property
    def d_feat(self) -> int:
        return self.books[0].shape[1]

    def content_hash(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        for book in self.books:
            h.update(np.ascontiguousarray(book, dtype=np.float32).tobytes())
        return h.digest()


def _kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """Plain Lloyd k-means with deterministic sample-based init."""
    idx = rng.permutation(x.shape[0])[:k]
    centers = x[idx].copy()
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(0)
    return centers


def fit(features: np.ndarray, n_q: int = DEFAULT_N_Q, k: int = DEFAULT_K,
        iters: int = 8, seed: int = 0) -> Codebooks:
    """Fit n_q codebooks stage by stage on the running residuals.

    Books after the first get their smallest-norm centroid snapped to zero so
    that adding a book can never increase any frame's reconstruction error.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise InvalidInput("features must be a T x d matrix")
    if features.shape[0] < k:
        raise InsufficientData(f"need at least {k} frames to fit K={k}, got {features.shape[0]}")
    rng = np.random.default_rng(seed)
    residual = features.copy()
    books = []
    for q in range(n_q):
        centers = _kmeans(residual, k, iters, rng)
        if q > 0:
            norms = (centers ** 2).sum(1)
            centers[norms.argmin()] = 0.0
        books.append(centers)
        d2 = ((residual[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        residual = residual - centers[d2.argmin(1)]
    return Codebooks(tuple(books))


def encode_frame(frame: np.ndarray, cb: Codebooks) -> list[int]:
    """Greedy per-book nearest neighbor on the running residual; ties go low."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (cb.d_feat,):
        raise InvalidInput(f"frame has shape {frame.shape}, codebooks expect ({cb.d_feat},)")
    residual = frame.copy()
    codes = []
    for book in cb.books:
        d2 = ((book - residual) ** 2).sum(1)
        j = int(d2.argmin())
        codes.append(j)
        residual = residual - book[j]
    return codes


def decode_frame(codes, cb: Codebooks) -> np.ndarray:
    out = np.zeros(cb.d_feat)
    if len(codes) > cb.n_q:
        raise InvalidInput(f"got {len(codes)} codes for {cb.n_q} books")
    for q, c in enumerate(codes):
        c = int(c)
        if not (0 <= c < cb.k):
            raise InvalidInput(f"code {c} out of range [0, {cb.k})")
        out += cb.books[q][c]
    return out


def encode(features: np.ndarray, cb: Codebooks) -> np.ndarray:
    """Encode a T x d_feat matrix to T x n_q uint16 codes."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != cb.d_feat:
        raise InvalidInput("feature dimension mismatch")
    residual = features.copy()
    codes = np.empty((features.shape[0], cb.n_q), dtype=np.uint16)
    for q, book in enumerate(cb.books):
        d2 = ((residual[:, None, :] - book[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(1)
        codes[:, q] = assign
        residual = residual - book[assign]
    return codes


def decode(codes: np.ndarray, cb: Codebooks) -> np.ndarray:
    """Decode T x n codes (n <= n_q) back to T x d_feat features."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] > cb.n_q:
        raise InvalidInput("codes must be T x n with n <= n_q")
    if codes.size and (codes.min() < 0 or codes.max() >= cb.k):
        raise InvalidInput("code index out of range")
    out = np.zeros((codes.shape[0], cb.d_feat))
    for q in range(codes.shape[1]):
        out += cb.books[q][codes[:, q].astype(int)]
    return out


def truncate(codes: np.ndarray, k: int = 3) -> np.ndarray:
    """Keep the first k codes per frame (the coarsest books)."""
    codes = np.asarray(codes)
    if not (1 <= k <= codes.shape[1]):
        raise InvalidInput(f"truncation depth {k} out of range [1, {codes.shape[1]}]")
    return codes[:, :k]


def save_codebooks(cb: Codebooks, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", cb.n_q, cb.k, cb.d_feat))
        f.write(cb.content_hash())
        for book in cb.books:
            f.write(np.ascontiguousarray(book, dtype=np.float32).tobytes())


def load_codebooks(path) -> Codebooks:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise InvalidInput("not a codebook file")
    n_q, k, d_feat = struct.unpack("<III", data[4:16])
    stored_hash = data[16:32]
    body = np.frombuffer(data[32:], dtype=np.float32)
    books = tuple(
        body[q * k * d_feat:(q + 1) * k * d_feat].reshape(k, d_feat).astype(np.float64)
        for q in range(n_q)
    )
    cb = Codebooks(books)
    if cb.content_hash() != stored_hash:
        raise CodecMismatch("codebook file hash does not match its contents")
    return cb
