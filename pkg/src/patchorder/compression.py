"""Compressibility-based ordering prior.

Patches are quantized to K discrete codes, each candidate scan order's code
stream is serialized and compressed with one fixed LZMA configuration, and
the least compressible ordering (highest compressed/raw ratio) becomes the
prior. Only relative ratios across orderings matter, so the container
overhead is identical for all of them by construction.
"""

from __future__ import annotations

import lzma
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import GridDataset
from .grids import SCAN_ORDERS, GridSpec, linearize

COMPRESSOR_ID = "lzma/xz/preset6"
TOKENIZATIONS = ("unigram", "bigram")
DEFAULT_K = 16
DEFAULT_SAMPLE = 512


def compress_bytes(data: bytes) -> bytes:
    return lzma.compress(data, format=lzma.FORMAT_XZ, preset=6)


def compression_ratio(data: bytes) -> float:
    """compressed size / raw size; may exceed 1 on incompressible input."""
    if not data:
        raise ValueError("cannot compress an empty stream")
    return len(compress_bytes(data)) / len(data)


@dataclass(frozen=True)
class PatchQuantizer:
    """Uniform scalar quantizer of per-patch channel means, calibrated on a

    dataset's observed min-max range."""

    K: int
    lo: float
    hi: float

    @classmethod
    def fit(cls, dataset: GridDataset, K: int = DEFAULT_K) -> "PatchQuantizer":
        if K < 2:
            raise ValueError("codebook size must be at least 2")
        means = dataset.features.mean(axis=2, dtype=np.float64)
        lo, hi = float(means.min()), float(means.max())
        if lo == hi:
            warnings.warn("degenerate feature range; all codes will be 0")
        return cls(K=K, lo=lo, hi=hi)

    def quantize(self, features: np.ndarray) -> np.ndarray:
        """Codes in [0, K) for one example's (n, channels) feature array."""
        means = np.asarray(features, dtype=np.float64).mean(axis=1)
        if self.hi == self.lo:
            return np.zeros(len(means), dtype=np.int64)
        bins = np.floor((means - self.lo) / (self.hi - self.lo) * self.K)
        return np.clip(bins, 0, self.K - 1).astype(np.int64)


def symbol_width(alphabet_size: int) -> int:
    """Smallest of 1/2/4/8 bytes covering the alphabet."""
    for width in (1, 2, 4, 8):
        if alphabet_size <= 1 << (8 * width):
            return width
    raise ValueError(f"alphabet of {alphabet_size} symbols exceeds 8-byte encoding")


def encode_symbols(symbols: np.ndarray, alphabet_size: int) -> bytes:
    symbols = np.asarray(symbols, dtype=np.uint64)
    if len(symbols) and int(symbols.max()) >= alphabet_size:
        raise ValueError("symbol outside declared alphabet")
    width = symbol_width(alphabet_size)
    dtype = {1: "<u1", 2: "<u2", 4: "<u4", 8: "<u8"}[width]
    return symbols.astype(dtype).tobytes()


def tokenize_symbols(codes: np.ndarray, mode: str, K: int) -> tuple[np.ndarray, int]:
    """Symbol values and base alphabet size for one code stream."""
    codes = np.asarray(codes, dtype=np.int64)
    if len(codes) and (codes.min() < 0 or codes.max() >= K):
        raise ValueError("code outside [0, K)")
    if mode == "unigram":
        return codes.astype(np.uint64), K
    if mode == "bigram":
        if len(codes) < 2:
            warnings.warn("bigram tokenization of a stream shorter than 2 is empty")
            return np.empty(0, dtype=np.uint64), K * K
        pairs = codes[:-1] * K + codes[1:]
        return pairs.astype(np.uint64), K * K
    raise ValueError(f"unknown tokenization {mode!r}; expected one of {TOKENIZATIONS}")


def tokenize(codes: np.ndarray, mode: str, K: int) -> bytes:
    """One example's serialized token stream (no separator)."""
    symbols, alphabet = tokenize_symbols(codes, mode, K)
    return encode_symbols(symbols, alphabet)


def ordered_stream(
    code_rows: np.ndarray, perm: np.ndarray, mode: str, K: int
) -> bytes:
    """Concatenated token stream of many examples under one ordering.

    Each example's codes are gathered by perm, tokenized, and terminated by
    a reserved separator symbol one past the base alphabet.
    """
    alphabet = K if mode == "unigram" else K * K
    sep = np.asarray([alphabet], dtype=np.uint64)
    chunks = []
    for codes in code_rows:
        symbols, _ = tokenize_symbols(np.asarray(codes)[perm], mode, K)
        chunks.append(np.concatenate([symbols, sep]))
    all_symbols = np.concatenate(chunks) if chunks else sep[:0]
    return encode_symbols(all_symbols, alphabet + 1)


@dataclass(frozen=True)
class ReportRow:
    order: str
    tokenization: str
    raw_bytes: int
    compressed_bytes: int
    ratio: float
    reduction_pct: float


@dataclass
class CompressionReport:
    rows: list[ReportRow]
    K: int
    compressor_id: str
    sample_size: int
    prior_order: str

    def ratio(self, order: str, tokenization: str = "unigram") -> float:
        for row in self.rows:
            if row.order == order and row.tokenization == tokenization:
                return row.ratio
        raise KeyError(f"no report row for ({order}, {tokenization})")

    def to_csv(self) -> str:
        lines = [
            "order,tokenization,raw_bytes,compressed_bytes,ratio,reduction_pct,K,compressor_id,sample_size"
        ]
        for r in self.rows:
            lines.append(
                f"{r.order},{r.tokenization},{r.raw_bytes},{r.compressed_bytes},"
                f"{r.ratio!r},{r.reduction_pct!r},{self.K},{self.compressor_id},{self.sample_size}"
            )
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def rank_orderings(
    dataset: GridDataset,
    orders: tuple[str, ...] = SCAN_ORDERS,
    K: int = DEFAULT_K,
    tokenizations: tuple[str, ...] = TOKENIZATIONS,
    sample_size: int = DEFAULT_SAMPLE,
) -> tuple[CompressionReport, np.ndarray]:
    """Compress the sample under each ordering and pick the prior.

    The prior is the LEAST compressible ordering by unigram ratio (ties go
    to the earlier entry of `orders`), returned as its permutation.
    """
    if not orders:
        raise ValueError("no orderings to rank")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    driver = "unigram" if "unigram" in tokenizations else tokenizations[0]
    count = min(sample_size, len(dataset))
    quantizer = PatchQuantizer.fit(dataset, K)
    code_rows = np.stack(
        [quantizer.quantize(dataset.features[i]) for i in range(count)]
    )
    grid = dataset.grid
    rows = []
    best_order, best_ratio = None, -np.inf
    for order in orders:
        perm = linearize(order, grid)
        for mode in tokenizations:
            stream = ordered_stream(code_rows, perm, mode, K)
            raw, compressed = len(stream), len(compress_bytes(stream))
            ratio = compressed / raw
            rows.append(
                ReportRow(
                    order=order,
                    tokenization=mode,
                    raw_bytes=raw,
                    compressed_bytes=compressed,
                    ratio=ratio,
                    reduction_pct=100.0 * (1.0 - ratio),
                )
            )
            if mode == driver and ratio > best_ratio:
                best_order, best_ratio = order, ratio
    report = CompressionReport(
        rows=rows,
        K=K,
        compressor_id=COMPRESSOR_ID,
        sample_size=count,
        prior_order=best_order,
    )
    return report, linearize(best_order, grid)
