"""Semantic enhancement of overlapping-modality embeddings.

Two steps run here.  Consistency: each text embedding queries a frozen
memory bank of cross-modal embeddings and receives their softmax-weighted
average, so the text inherits a plausible counterpart in the other
modality.  Completion: zero-mean Gaussian noise is added and the row is
pushed back onto the unit sphere, turning each point into a small
neighborhood and compensating for information lost during encoding.

The aggregation output is deliberately left unnormalized (it lives in the
convex hull of the bank); renormalization happens inside add_noise, after
the noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmcr.errors import DimMismatchError, ZeroRowError
from cmcr.rng import PortableRng
from cmcr.store import EmbeddingMatrix, require_normalized

DEFAULT_TAU1 = 0.01
DEFAULT_SIGMA2 = 0.004
DEFAULT_CHUNK = 4096


@dataclass(frozen=True)
class EnhancementConfig:
    tau1: float = DEFAULT_TAU1
    sigma2: float = DEFAULT_SIGMA2
    seed: int = 0
    chunk: int = DEFAULT_CHUNK
    # Optional approximation for very large banks; None = exact full softmax.
    top_k: int | None = None

    def __post_init__(self):
        if not self.tau1 > 0:
            raise ValueError(f"tau1 must be > 0, got {self.tau1}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1 when set")


class MemoryBank:
    """Frozen normalized matrix used as the aggregation basis."""

    def __init__(self, matrix: EmbeddingMatrix, label: str = "memory"):
        require_normalized(matrix, f"memory bank '{label}'")
        self.matrix = matrix
        self.label = label

    @property
    def rows(self) -> int:
        return self.matrix.rows

    @property
    def dim(self) -> int:
        return self.matrix.dim


def softmax_weights(query, bank: MemoryBank, tau1: float) -> np.ndarray:
    """Softmax over cosine(query, bank rows)/tau1; instrumentation helper.

    Materializes all bank similarities at once, so prefer aggregate /
    precompute_consistent for real workloads.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != bank.dim:
        raise DimMismatchError(f"query dim {q.shape[0]} vs bank {bank.dim}")
    logits = bank.matrix.data.astype(np.float64) @ q / tau1
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def aggregate(query, bank: MemoryBank, tau1: float) -> np.ndarray:
    """Softmax-weighted average of bank rows for one query row.

    Output lies in the convex hull of the bank (norm <= 1) and is NOT
    renormalized here.
    """
    w = softmax_weights(query, bank, tau1)
    return w @ bank.matrix.data.astype(np.float64)


def _chunked_softmax_aggregate(q: np.ndarray, bank_data: np.ndarray,
                               tau1: float, chunk: int) -> np.ndarray:
    """Streaming softmax aggregation, O(chunk) bank rows resident at once."""
    n, d = q.shape
    run_max = np.full(n, -np.inf)
    denom = np.zeros(n)
    acc = np.zeros((n, d))
    for start in range(0, bank_data.shape[0], chunk):
        block = bank_data[start:start + chunk].astype(np.float64)
        logits = q @ block.T / tau1
        new_max = np.maximum(run_max, logits.max(axis=1))
        rescale = np.exp(run_max - new_max)
        denom *= rescale
        acc *= rescale[:, None]
        w = np.exp(logits - new_max[:, None])
        denom += w.sum(axis=1)
        acc += w @ block
        run_max = new_max
    return acc / denom[:, None]


def _topk_aggregate(q: np.ndarray, bank_data: np.ndarray, tau1: float,
                    chunk: int, k: int) -> np.ndarray:
    """Softmax restricted to each query's k most similar bank rows."""
    n = q.shape[0]
    k = min(k, bank_data.shape[0])
    best_sim = np.full((n, k), -np.inf)
    best_idx = np.zeros((n, k), dtype=np.int64)
    for start in range(0, bank_data.shape[0], chunk):
        block = bank_data[start:start + chunk].astype(np.float64)
        sims = q @ block.T
        cand_sim = np.concatenate([best_sim, sims], axis=1)
        cand_idx = np.concatenate(
            [best_idx,
             np.broadcast_to(np.arange(start, start + block.shape[0]),
                             (n, block.shape[0]))], axis=1)
        order = np.argsort(-cand_sim, axis=1, kind="stable")[:, :k]
        best_sim = np.take_along_axis(cand_sim, order, axis=1)
        best_idx = np.take_along_axis(cand_idx, order, axis=1)
    logits = best_sim / tau1
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    picked = bank_data.astype(np.float64)[best_idx]  # n x k x d
    return np.einsum("nk,nkd->nd", w, picked)


def precompute_consistent(texts: EmbeddingMatrix, bank: MemoryBank,
                          cfg: EnhancementConfig) -> EmbeddingMatrix:
    """Aggregate every text row against the bank; returns an unnormalized matrix.

    Chunked over bank rows so peak memory stays bounded by cfg.chunk.
    """
    require_normalized(texts, "texts")
    if texts.dim != bank.dim:
        raise DimMismatchError(f"texts dim {texts.dim} vs bank {bank.dim}")
    q = texts.data.astype(np.float64)
    if cfg.top_k is not None:
        out = _topk_aggregate(q, bank.matrix.data, cfg.tau1, cfg.chunk,
                              cfg.top_k)
    else:
        out = _chunked_softmax_aggregate(q, bank.matrix.data, cfg.tau1,
                                         cfg.chunk)
    return EmbeddingMatrix(out.astype(np.float32), ids=texts.ids,
                           normalized=False)


def nearest_consistent(texts: EmbeddingMatrix, bank: MemoryBank,
                       chunk: int = DEFAULT_CHUNK) -> EmbeddingMatrix:
    """Hard variant: each text gets its single most similar bank row."""
    require_normalized(texts, "texts")
    if texts.dim != bank.dim:
        raise DimMismatchError(f"texts dim {texts.dim} vs bank {bank.dim}")
    q = texts.data.astype(np.float64)
    n = q.shape[0]
    best_val = np.full(n, -np.inf)
    best_idx = np.zeros(n, dtype=np.int64)
    data = bank.matrix.data
    for start in range(0, data.shape[0], chunk):
        block = data[start:start + chunk].astype(np.float64)
        sims = q @ block.T
        local = sims.argmax(axis=1)
        vals = sims[np.arange(n), local]
        better = vals > best_val  # strict: earlier (lower) index wins ties
        best_val[better] = vals[better]
        best_idx[better] = local[better] + start
    return EmbeddingMatrix(data[best_idx], ids=texts.ids,
                           normalized=bank.matrix.normalized)


def random_consistent(texts: EmbeddingMatrix, bank: MemoryBank,
                      rng: PortableRng) -> EmbeddingMatrix:
    """Control variant: each text gets a uniformly random bank row."""
    require_normalized(texts, "texts")
    if texts.dim != bank.dim:
        raise DimMismatchError(f"texts dim {texts.dim} vs bank {bank.dim}")
    idx = rng.integers(0, bank.rows, size=texts.rows)
    return EmbeddingMatrix(bank.matrix.data[np.asarray(idx)], ids=texts.ids,
                           normalized=bank.matrix.normalized)


def add_noise(batch: np.ndarray, sigma2: float, rng: PortableRng,
              renormalize: bool = True) -> np.ndarray:
    """Add N(0, sigma2) noise per coordinate, then L2-renormalize rows.

    Operates on float64 arrays (the training hot path).  Noise is drawn
    fresh on every call; the rng state advances deterministically.  With
    renormalize=False the noisy rows are returned as-is.
    """
    x = np.asarray(batch, dtype=np.float64)
    noise = rng.normal(np.sqrt(sigma2), size=x.shape)
    out = x + noise
    if not renormalize:
        return out
    norms = np.linalg.norm(out, axis=1)
    zero = norms == 0.0
    if np.any(zero):
        raise ZeroRowError(
            f"row {int(np.argmax(zero))} is exactly zero after noise")
    return out / norms[:, None]
