"""Zero-shot evaluation: retrieval, classification, counterfactual metrics.

Retrieval assumes exactly one relevant gallery item per query, so average
precision per query collapses to the reciprocal rank of that item and mAP
equals mean reciprocal rank.  All rankings break ties by lower index,
never randomly, so every number here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmcr.errors import (
    DimMismatchError,
    EmptyCandidatesError,
    EmptyInputError,
    GtOutOfRangeError,
    LabelOutOfRangeError,
    NonFiniteValueError,
    ShapeMismatchError,
)

_CHUNK = 512  # query rows scored per block, bounds the similarity matrix


def _as_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m), dtype=np.float64)


@dataclass
class RetrievalReport:
    map_pct: float
    r1_pct: float
    r5_pct: float
    queries: int
    gallery: int

    def to_dict(self) -> dict:
        return {"mAP": self.map_pct, "R@1": self.r1_pct, "R@5": self.r5_pct,
                "queries": self.queries, "gallery": self.gallery}


def _ranks(queries: np.ndarray, gallery: np.ndarray,
           gt: np.ndarray) -> np.ndarray:
    """Rank of each query's relevant gallery row, ties to the lower index."""
    n = queries.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    for start in range(0, n, _CHUNK):
        q = queries[start:start + _CHUNK]
        idx = gt[start:start + _CHUNK]
        sims = q @ gallery.T
        rel = sims[np.arange(q.shape[0]), idx]
        better = (sims > rel[:, None]).sum(axis=1)
        tied_before = ((sims == rel[:, None])
                       & (np.arange(gallery.shape[0])[None, :]
                          < idx[:, None])).sum(axis=1)
        ranks[start:start + _CHUNK] = 1 + better + tied_before
    return ranks


def retrieval(queries, gallery, gt) -> RetrievalReport:
    """Single-relevant-item retrieval metrics, as percentages.

    gt[i] is the gallery row relevant to query i.  AP per query is
    1/rank; mAP is their mean times 100; R@K the fraction ranked in the
    top K times 100.
    """
    q = _as_array(queries)
    g = _as_array(gallery)
    if q.shape[1] != g.shape[1]:
        raise DimMismatchError(f"query dim {q.shape[1]} vs gallery "
                               f"{g.shape[1]}")
    if q.shape[0] == 0:
        raise EmptyInputError("no queries")
    gt = np.asarray(gt, dtype=np.int64)
    if gt.shape != (q.shape[0],):
        raise ShapeMismatchError(
            f"gt shape {gt.shape} for {q.shape[0]} queries")
    if gt.min() < 0 or gt.max() >= g.shape[0]:
        bad = int(np.argmax((gt < 0) | (gt >= g.shape[0])))
        raise GtOutOfRangeError(
            f"gt[{bad}] = {int(gt[bad])} outside gallery of {g.shape[0]}")
    ranks = _ranks(q, g, gt)
    return RetrievalReport(
        map_pct=float((1.0 / ranks).mean() * 100.0),
        r1_pct=float((ranks <= 1).mean() * 100.0),
        r5_pct=float((ranks <= 5).mean() * 100.0),
        queries=q.shape[0],
        gallery=g.shape[0],
    )


def modality_gap(x, y) -> float:
    """L2 distance between the two row means; a cone-separation statistic."""
    ax, ay = _as_array(x), _as_array(y)
    if ax.shape[1] != ay.shape[1]:
        raise DimMismatchError(f"dims differ: {ax.shape[1]} vs {ay.shape[1]}")
    return float(np.linalg.norm(ax.mean(axis=0) - ay.mean(axis=0)))


def bidirectional_report(space1, space2) -> dict:
    """Identity-ground-truth retrieval both ways plus gap statistics.

    Row i of both matrices must describe the same item (the held-out
    pairing of the synthetic world, or any aligned eval set).
    """
    a = _as_array(space1)
    b = _as_array(space2)
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatchError(
            f"paired eval rows differ: {a.shape[0]} vs {b.shape[0]}")
    identity = np.arange(a.shape[0])
    fwd = retrieval(b, a, identity)   # space2 queries into space1 gallery
    bwd = retrieval(a, b, identity)
    diag_cos = float((a * b).sum(axis=1).mean())
    return {
        "a2i": fwd.to_dict(),
        "i2a": bwd.to_dict(),
        "mean_map": (fwd.map_pct + bwd.map_pct) / 2.0,
        "modality_gap": modality_gap(a, b),
        "mean_pair_cosine": diag_cos,
    }


def zero_shot_classify(samples, class_protos, labels) -> dict:
    """Top-1/3/5 accuracy of nearest-prototype classification, percent."""
    x = _as_array(samples)
    protos = _as_array(class_protos)
    if x.shape[1] != protos.shape[1]:
        raise DimMismatchError(
            f"sample dim {x.shape[1]} vs prototype {protos.shape[1]}")
    if x.shape[0] == 0:
        raise EmptyInputError("no samples")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeMismatchError("labels must map samples to prototypes")
    if labels.min() < 0 or labels.max() >= protos.shape[0]:
        bad = int(np.argmax((labels < 0) | (labels >= protos.shape[0])))
        raise LabelOutOfRangeError(
            f"labels[{bad}] = {int(labels[bad])} outside "
            f"{protos.shape[0]} classes")
    ranks = _ranks(x, protos, labels)
    out = {}
    for k in (1, 3, 5):
        out[f"top{k}"] = float((ranks <= k).mean() * 100.0)
    return out


@dataclass(frozen=True)
class DetectionRecord:
    has_gt: bool
    iou: float
    confidence: float


@dataclass(frozen=True)
class CounterfactualConfig:
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")


def counterfactual_metrics(records, cfg: CounterfactualConfig =
                           CounterfactualConfig()) -> tuple[float, float]:
    """(AP, MaxF1) for localization predictions that may face absent targets.

    A record is a true positive at threshold delta when it has a target,
    overlaps it beyond gamma, and is confident beyond delta.  Confident
    predictions that miss (bad overlap or no target at all) are false
    positives; unconfident ones facing a real target are false negatives.
    MaxF1 sweeps delta over every observed confidence plus one below the
    minimum (F1 is piecewise constant in between, so the sweep is exact).
    AP is all-points average precision over the confidence-ranked list.
    """
    records = list(records)
    if not records:
        raise EmptyInputError("need at least one record")
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    if not np.all(np.isfinite(conf)):
        raise NonFiniteValueError("non-finite confidence")
    has_gt = np.array([bool(r.has_gt) for r in records])
    iou = np.array([r.iou for r in records], dtype=np.float64)
    positive = has_gt & (iou > cfg.gamma)

    max_f1 = 0.0
    thresholds = np.concatenate([[conf.min() - 1.0], np.unique(conf)])
    for delta in thresholds:
        sel = conf > delta
        tp = int((positive & sel).sum())
        fp = int((~positive & sel).sum())
        fn = int((has_gt & ~sel).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall:
            max_f1 = max(max_f1, 2 * precision * recall
                         / (precision + recall))

    n_pos = int(positive.sum())
    if n_pos == 0:
        return 0.0, max_f1
    order = np.lexsort((np.arange(len(records)), -conf))
    hits = positive[order]
    csum = np.cumsum(hits)
    prec_at = csum / np.arange(1, len(records) + 1)
    ap = float(prec_at[hits].sum() / n_pos)
    return ap, max_f1


def pick_best_candidate(query, candidates) -> tuple[int, float]:
    """Most similar candidate row; lowest index wins ties."""
    q = np.asarray(getattr(query, "data", query), dtype=np.float64).reshape(-1)
    c = _as_array(candidates)
    if c.shape[0] == 0:
        raise EmptyCandidatesError("no candidates")
    if q.shape[0] != c.shape[1]:
        raise DimMismatchError(f"query dim {q.shape[0]} vs candidates "
                               f"{c.shape[1]}")
    sims = c @ q
    idx = int(np.argmax(sims))  # argmax returns the first maximum
    return idx, float(sims[idx])
