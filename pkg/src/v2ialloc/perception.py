"""Confidence-map feature selection, fusion and detection scoring.

The neural backbone is replaced by a probabilistic stand-in: each agent's
confidence on an occupied cell equals its sensing quality there, and on
a free cell equals its clutter level.  The RSU fuses whatever it has
received with a noisy-OR, so adding evidence can only raise confidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scenario import Scenario

BCE_CLAMP = 1e-6


class LedgerError(RuntimeError):
    """A commit would retransmit an already-sent cell."""


def local_confidence(quality: np.ndarray, occupancy: np.ndarray, clutter: np.ndarray) -> np.ndarray:
    o = np.asarray(occupancy, dtype=float)
    return quality * o + clutter * (1.0 - o)


def gain_map(remaining: np.ndarray, rsu_conf: np.ndarray) -> np.ndarray:
    return remaining * (1.0 - rsu_conf)


def feature_value(gain: np.ndarray) -> float:
    return float(np.sum(gain))


def select_top(gain: np.ndarray, budget: float) -> np.ndarray:
    """Boolean mask of the ``floor(budget)`` highest strictly-positive gains.

    Ties go to the earlier cell in row-major order.
    """
    gain = np.asarray(gain, dtype=float)
    k = int(np.floor(budget)) if budget > 0 else 0
    mask = np.zeros(gain.shape, dtype=bool)
    if k <= 0:
        return mask
    flat = gain.ravel()
    positive = np.flatnonzero(flat > 0)
    if positive.size <= k:
        mask.ravel()[positive] = True
        return mask
    # stable sort on -gain keeps row-major order among equal values
    vals = flat[positive]
    if positive.size > 4 * k:
        # cut candidates down first; keep every cell tied with the k-th value
        kth = np.partition(vals, positive.size - k)[positive.size - k]
        keep = vals >= kth
        positive, vals = positive[keep], vals[keep]
    order = np.argsort(-vals, kind="stable")[:k]
    mask.ravel()[positive[order]] = True
    return mask


@dataclass
class ConfidenceLedger:
    """Per-period bookkeeping of what each CAV has sent and what the RSU knows.

    Arrays indexed by CAV use 0-based link indices (CAV ``m`` is agent ``m+1``).
    """

    base_conf: np.ndarray  # (M, H, W)
    rsu_local: np.ndarray  # (H, W)
    remaining_conf: np.ndarray = field(init=False)
    cum_mask: np.ndarray = field(init=False)
    rsu_conf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.base_conf = np.asarray(self.base_conf, dtype=float)
        self.rsu_local = np.asarray(self.rsu_local, dtype=float)
        self.remaining_conf = self.base_conf.copy()
        self.cum_mask = np.zeros(self.base_conf.shape, dtype=bool)
        self.rsu_conf = self.rsu_local.copy()

    @property
    def n_cavs(self) -> int:
        return self.base_conf.shape[0]

    @property
    def received(self) -> np.ndarray:
        # features are never dropped, so coverage equals the cumulative mask
        return self.cum_mask

    @property
    def request(self) -> np.ndarray:
        return 1.0 - self.rsu_conf

    def gains(self) -> np.ndarray:
        """(M, H, W) perception gain of every CAV against the current request."""
        return gain_map(self.remaining_conf, self.rsu_conf[None])

    def feature_values(self) -> np.ndarray:
        return self.gains().sum(axis=(1, 2))

    def positive_remaining(self) -> np.ndarray:
        return (self.remaining_conf > 0).sum(axis=(1, 2))


def initial_ledger(scenario: Scenario) -> ConfidenceLedger:
    occ = scenario.occupancy
    conf = np.stack([
        local_confidence(scenario.quality[a], occ, scenario.clutter[a])
        for a in range(scenario.n_cavs + 1)
    ])
    return ConfidenceLedger(base_conf=conf[1:], rsu_local=conf[0])


def commit_transmission(ledger: ConfidenceLedger, cav: int, mask: np.ndarray) -> ConfidenceLedger:
    mask = np.asarray(mask, dtype=bool)
    if (mask & ledger.cum_mask[cav]).any():
        raise LedgerError(f"CAV {cav} would retransmit already-sent cells")
    ledger.cum_mask[cav] |= mask
    ledger.remaining_conf[cav][mask] = 0.0
    return ledger


def fuse_confidence(ledger: ConfidenceLedger, scenario: Scenario | None = None) -> np.ndarray:
    """Noisy-OR of the RSU's local map and every received CAV cell.

    Also refreshes ``ledger.rsu_conf`` (and therefore the request map).
    ``scenario`` is accepted for interface symmetry; the ledger already
    carries the local maps.
    """
    # 1 - (1 - a) * prod(1 - c) written as a + (1 - a) * (1 - prod) so that
    # nothing received reproduces the local map bit for bit
    cav_miss = np.ones_like(ledger.rsu_local)
    for m in range(ledger.n_cavs):
        cav_miss = cav_miss * np.where(ledger.cum_mask[m], 1.0 - ledger.base_conf[m], 1.0)
    fused = ledger.rsu_local + (1.0 - ledger.rsu_local) * (1.0 - cav_miss)
    ledger.rsu_conf = fused
    return fused


# -- detection surrogate ---------------------------------------------------

@dataclass
class DetectionLoss:
    det: float
    cls: float
    loc: float
    dir: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.det, self.cls, self.loc, self.dir)


@dataclass
class DetectionReport:
    fused_conf: np.ndarray
    loss: DetectionLoss
    ap: dict
    per_object_scores: list


def object_scores(fused: np.ndarray, scenario: Scenario) -> np.ndarray:
    n = len(scenario.objects)
    if n == 0:
        return np.zeros(0)
    ids = scenario.object_id
    sel = ids >= 0
    sums = np.bincount(ids[sel], weights=fused[sel], minlength=n)
    counts = np.bincount(ids[sel], minlength=n)
    return sums / counts


def detection_loss(fused: np.ndarray, scenario: Scenario,
                   weights=(1.0, 1.0, 1.0)) -> DetectionLoss:
    """Classification, localization and orientation surrogates and their weighted sum."""
    w_cls, w_loc, w_dir = weights
    y = scenario.occupancy.astype(float)
    p = np.clip(fused, BCE_CLAMP, 1.0 - BCE_CLAMP)
    l_cls = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    scores = object_scores(fused, scenario)
    if scores.size:
        miss = 1.0 - scores
        l_loc = float(np.mean(miss * scenario.config.cell_size))
        # orientation error of (1 - s) * pi/4 normalised by pi/4
        l_dir = float(np.mean(miss * (np.pi / 4) / (np.pi / 4)))
    else:
        l_loc = l_dir = 0.0
    det = w_cls * l_cls + w_loc * l_loc + w_dir * l_dir
    return DetectionLoss(det=float(det), cls=l_cls, loc=l_loc, dir=l_dir)


_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


def pseudo_detections(fused: np.ndarray, conf_thresh: float):
    """Label 4-connected components above threshold; returns (labels, n, scores)."""
    labels, n = ndimage.label(fused >= conf_thresh, structure=_FOUR_CONN)
    if n == 0:
        return labels, 0, np.zeros(0)
    sums = np.bincount(labels.ravel(), weights=fused.ravel(), minlength=n + 1)[1:]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, n, sums / sizes


def pr_average_precision(tp_flags, n_gt: int) -> float:
    """All-point interpolated AP from TP/FP flags sorted by descending score."""
    tp_flags = np.asarray(tp_flags, dtype=float)
    if n_gt == 0:
        return 1.0 if tp_flags.size == 0 else 0.0
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(fused: np.ndarray, scenario: Scenario, conf_thresh: float = 0.5,
                      iou_thresholds=(0.5, 0.7)) -> dict:
    """Grid-IoU average precision of thresholded components against object footprints."""
    n_gt = len(scenario.objects)
    labels, n_det, scores = pseudo_detections(fused, conf_thresh)
    out = {}
    if n_det == 0:
        for thr in iou_thresholds:
            out[thr] = pr_average_precision([], n_gt)
        return out
    # overlap[d, g] = cells shared by detection d and object g
    ids = scenario.object_id
    det_sizes = np.bincount(labels.ravel(), minlength=n_det + 1)[1:]
    gt_sizes = np.bincount(ids[ids >= 0], minlength=n_gt) if n_gt else np.zeros(0, int)
    both = (labels > 0) & (ids >= 0)
    overlap = np.zeros((n_det, n_gt))
    if n_gt and both.any():
        np.add.at(overlap, (labels[both] - 1, ids[both]), 1.0)
    union = det_sizes[:, None] + gt_sizes[None, :] - overlap
    iou = np.divide(overlap, union, out=np.zeros_like(overlap), where=union > 0)
    order = np.argsort(-scores, kind="stable")
    for thr in iou_thresholds:
        matched = np.zeros(n_gt, dtype=bool)
        flags = []
        for d in order:
            cand = np.where(~matched & (iou[d] >= thr), iou[d], -1.0)
            g = int(np.argmax(cand)) if n_gt else -1
            if g >= 0 and cand[g] >= thr:
                matched[g] = True
                flags.append(1.0)
            else:
                flags.append(0.0)
        out[thr] = pr_average_precision(flags, n_gt)
    return out


def detection_report(fused: np.ndarray, scenario: Scenario, weights=(1.0, 1.0, 1.0),
                     conf_thresh: float = 0.5) -> DetectionReport:
    return DetectionReport(
        fused_conf=fused,
        loss=detection_loss(fused, scenario, weights),
        ap=average_precision(fused, scenario, conf_thresh),
        per_object_scores=object_scores(fused, scenario).tolist(),
    )
