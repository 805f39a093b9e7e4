"""Objective terms for connecting the two projected spaces.

Inter-space alignment is a symmetric InfoNCE applied twice: once between
the two projected text groups (which are true pairs) and once between the
memory-aggregated cross-modal groups (pseudo pairs).  Intra-space
alignment is attraction only: the mean distance between each projected
text row and its cross-modal partner, with the repulsive part dropped so
it can close the modality gap without fighting the contrastive terms.

Every function returns the loss value together with exact gradients with
respect to its matrix inputs.  Log-sum-exp uses row-max subtraction;
temperatures around 1/100 overflow the naive exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmcr.errors import ShapeMismatchError

DEFAULT_TAU = 0.01
DEFAULT_INTRA_WEIGHT = 0.1


@dataclass(frozen=True)
class LossConfig:
    tau2: float = DEFAULT_TAU
    tau3: float = DEFAULT_TAU
    intra_weight: float = DEFAULT_INTRA_WEIGHT  # "lambda" in config files
    intra_squared: bool = False

    def __post_init__(self):
        if not (self.tau2 > 0 and self.tau3 > 0):
            raise ValueError("temperatures must be > 0")
        if self.intra_weight < 0:
            raise ValueError("intra_weight must be >= 0")


@dataclass
class BatchEmbeddings:
    """One training batch after projection, all B x d_out with unit rows.

    text1/text2 are the projected overlapping-modality embeddings from the
    two source spaces; cross1/cross2 are the projected memory-aggregated
    cross-modal embeddings (row i of all four describes the same item).
    """
    text1: np.ndarray
    cross1: np.ndarray
    text2: np.ndarray
    cross2: np.ndarray

    def __post_init__(self):
        shape = self.text1.shape
        for name in ("cross1", "text2", "cross2"):
            if getattr(self, name).shape != shape:
                raise ShapeMismatchError(
                    f"{name} shape {getattr(self, name).shape} vs {shape}")

    @property
    def batch(self) -> int:
        return self.text1.shape[0]


@dataclass
class LossGrads:
    text1: np.ndarray
    cross1: np.ndarray
    text2: np.ndarray
    cross2: np.ndarray

    @staticmethod
    def zeros_like(b: BatchEmbeddings) -> "LossGrads":
        return LossGrads(*(np.zeros_like(getattr(b, n))
                           for n in ("text1", "cross1", "text2", "cross2")))

    def add_scaled(self, other: "LossGrads", scale: float = 1.0) -> None:
        self.text1 += scale * other.text1
        self.cross1 += scale * other.cross1
        self.text2 += scale * other.text2
        self.cross2 += scale * other.cross2


def info_nce(x: np.ndarray, z: np.ndarray, tau: float):
    """Symmetric two-direction InfoNCE over a batch of positive pairs.

    Returns (value, grad_x, grad_z).  The i-th rows of x and z are the
    positive pair; all other rows are negatives in both directions.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ShapeMismatchError(f"shapes differ: {x.shape} vs {z.shape}")
    n = x.shape[0]
    s = x @ z.T / tau

    row_max = s.max(axis=1, keepdims=True)
    row_exp = np.exp(s - row_max)
    row_softmax = row_exp / row_exp.sum(axis=1, keepdims=True)
    row_logden = row_max[:, 0] + np.log(row_exp.sum(axis=1))

    col_max = s.max(axis=0, keepdims=True)
    col_exp = np.exp(s - col_max)
    col_softmax = col_exp / col_exp.sum(axis=0, keepdims=True)
    col_logden = col_max[0, :] + np.log(col_exp.sum(axis=0))

    diag = np.diag(s)
    value = -((diag - row_logden).sum() + (diag - col_logden).sum()) / (2 * n)

    ds = (row_softmax + col_softmax - 2.0 * np.eye(n)) / (2 * n)
    grad_x = ds @ z / tau
    grad_z = ds.T @ x / tau
    return value, grad_x, grad_z


def l_ttc(b: BatchEmbeddings, tau2: float):
    """Contrastive alignment of the two projected text groups."""
    value, gx, gz = info_nce(b.text1, b.text2, tau2)
    grads = LossGrads.zeros_like(b)
    grads.text1 += gx
    grads.text2 += gz
    return value, grads


def l_avc(b: BatchEmbeddings, tau3: float):
    """Contrastive alignment of the two cross-modal groups."""
    value, gx, gz = info_nce(b.cross1, b.cross2, tau3)
    grads = LossGrads.zeros_like(b)
    grads.cross1 += gx
    grads.cross2 += gz
    return value, grads


def l_inter(b: BatchEmbeddings, cfg: LossConfig):
    v1, g1 = l_ttc(b, cfg.tau2)
    v2, g2 = l_avc(b, cfg.tau3)
    g1.add_scaled(g2)
    return v1 + v2, g1


def _pair_distance(x, z, squared: bool):
    """Mean distance between paired rows, and its gradients.

    Unsquared norms use the zero subgradient at coincident pairs, the only
    bounded choice there.
    """
    diff = x - z
    n = x.shape[0]
    if squared:
        value = (diff * diff).sum() / n
        gx = 2.0 * diff / n
    else:
        dist = np.linalg.norm(diff, axis=1)
        value = dist.sum() / n
        safe = np.where(dist > 0.0, dist, 1.0)
        gx = np.where((dist > 0.0)[:, None], diff / safe[:, None], 0.0) / n
    return value, gx, -gx


def l_intra(b: BatchEmbeddings, cfg: LossConfig,
            include_space1: bool = True, include_space2: bool = True):
    """Attraction-only alignment of text rows to their cross-modal partners.

    Value is (1/2)(1/B) sum of per-pair distances over the included
    spaces.  The 1/2 prefactor stays even when one space is switched off,
    so ablations change the summand, not the scale.
    """
    grads = LossGrads.zeros_like(b)
    total = 0.0
    if include_space1:
        v, gx, gz = _pair_distance(b.text1, b.cross1, cfg.intra_squared)
        total += v
        grads.text1 += 0.5 * gx
        grads.cross1 += 0.5 * gz
    if include_space2:
        v, gx, gz = _pair_distance(b.text2, b.cross2, cfg.intra_squared)
        total += v
        grads.text2 += 0.5 * gx
        grads.cross2 += 0.5 * gz
    return 0.5 * total, grads


@dataclass
class TotalLoss:
    value: float
    ttc: float
    avc: float
    intra: float
    grads: LossGrads


def total_loss(b: BatchEmbeddings, cfg: LossConfig,
               use_ttc: bool = True, use_avc: bool = True,
               use_intra1: bool = True, use_intra2: bool = True
               ) -> TotalLoss:
    """Inter-space contrastive terms plus weighted intra-space attraction.

    The use_* switches zero out individual terms for ablation runs; all
    on reproduces the full objective.
    """
    grads = LossGrads.zeros_like(b)
    ttc = avc = intra = 0.0
    if use_ttc:
        ttc, g = l_ttc(b, cfg.tau2)
        grads.add_scaled(g)
    if use_avc:
        avc, g = l_avc(b, cfg.tau3)
        grads.add_scaled(g)
    if (use_intra1 or use_intra2) and cfg.intra_weight != 0.0:
        intra, g = l_intra(b, cfg, include_space1=use_intra1,
                           include_space2=use_intra2)
        grads.add_scaled(g, cfg.intra_weight)
    elif use_intra1 or use_intra2:
        intra, _ = l_intra(b, cfg, include_space1=use_intra1,
                           include_space2=use_intra2)
    value = ttc + avc + cfg.intra_weight * intra
    return TotalLoss(value=value, ttc=ttc, avc=avc, intra=intra, grads=grads)
