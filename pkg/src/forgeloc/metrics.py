"""Evaluation: frame-level AUC/EER/accuracy and proposal-level AP/AR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .localize import ForgeryProposal
from .validation import as_binary_vector, as_score_vector


# ---------------------------------------------------------------------------
# Frame-level metrics

def roc_auc(scores, labels) -> float:
    """Rank-based AUC (probability a positive outscores a negative).

    Ties contribute 1/2 via midrank averaging.  Needs both classes present.
    """
    scores = as_score_vector(scores)
    labels = as_binary_vector(labels)
    if scores.size != labels.size:
        raise ValueError("scores and labels length mismatch")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # midranks: for a tie group occupying ranks a..b (1-based), every member
    # gets (a + b) / 2
    _, inv, counts = np.unique(sorted_scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    midranks_by_group = cum - (counts - 1) / 2.0
    ranks_sorted = midranks_by_group[inv]
    ranks = np.empty_like(ranks_sorted)
    ranks[order] = ranks_sorted

    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and the threshold achieving it.

    Sweeps thresholds over the observed scores (decision rule: fake iff
    score >= threshold).  FPR - FNR is non-increasing in the threshold, so
    the sign change is bracketed and both the rate and the threshold are
    linearly interpolated inside the bracket.
    """
    scores = as_score_vector(scores)
    labels = as_binary_vector(labels)
    if scores.size != labels.size:
        raise ValueError("scores and labels length mismatch")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("EER needs at least one positive and one negative")

    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    # candidate thresholds: every observed score, plus one above the max so
    # the sweep reaches (FPR=0, FNR=1)
    cand = np.unique(scores)
    cand = np.append(cand, cand[-1] + 1.0)

    # predictions are fake iff score >= threshold
    fpr = (n_neg - np.searchsorted(neg, cand, side="left")) / n_neg
    fnr = np.searchsorted(pos, cand, side="left") / n_pos
    diff = fpr - fnr  # starts >= 0, ends at -1, non-increasing

    exact = np.flatnonzero(np.isclose(diff, 0.0, atol=1e-12))
    if exact.size:
        i = int(exact[0])
        return float(fpr[i]), float(cand[i])

    sign = np.flatnonzero((diff[:-1] > 0) & (diff[1:] < 0))
    if not sign.size:
        # degenerate: diff never positive, EER is at the first candidate
        return float((fpr[0] + fnr[0]) / 2.0), float(cand[0])
    i = int(sign[0])
    alpha = diff[i] / (diff[i] - diff[i + 1])
    rate = fpr[i] + alpha * (fpr[i + 1] - fpr[i])
    rate_other = fnr[i] + alpha * (fnr[i + 1] - fnr[i])
    threshold = cand[i] + alpha * (cand[i + 1] - cand[i])
    return float((rate + rate_other) / 2.0), float(threshold)


def frame_acc(scores, labels, threshold: float = 0.5) -> float:
    """Accuracy of thresholded frame scores (fake iff score >= threshold)."""
    scores = as_score_vector(scores)
    labels = as_binary_vector(labels)
    if scores.size != labels.size:
        raise ValueError("scores and labels length mismatch")
    preds = (scores >= threshold).astype(np.int64)
    return float((preds == labels).mean())


# ---------------------------------------------------------------------------
# Proposal-level metrics

def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two intervals in seconds."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    if inter == 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def _match_proposals(flat_props, gt_by_utt, tau):
    """Greedy matching for one IoU threshold.

    flat_props must be sorted by descending confidence.  Each proposal
    claims the unmatched ground-truth segment (same utterance) with the
    highest IoU, if that IoU >= tau.  Returns a TP/FP flag per proposal.
    """
    used: dict[str, np.ndarray] = {
        utt: np.zeros(len(segs), dtype=bool) for utt, segs in gt_by_utt.items()
    }
    tp = np.zeros(len(flat_props), dtype=bool)
    for n, (utt_id, prop) in enumerate(flat_props):
        segs = gt_by_utt.get(utt_id, [])
        best_iou = 0.0
        best_j = -1
        for j, seg in enumerate(segs):
            if used[utt_id][j]:
                continue
            iou = temporal_iou((prop.start_s, prop.end_s), seg)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= tau:
            tp[n] = True
            used[utt_id][best_j] = True
    return tp


def _flatten_sorted(proposals_by_utt):
    flat = [(utt, p) for utt, props in proposals_by_utt.items() for p in props]
    flat.sort(key=lambda item: (-item[1].confidence, item[1].start_s, item[0]))
    return flat


def ap_at_iou(proposals_by_utt: dict[str, list[ForgeryProposal]],
              gt_by_utt: dict[str, list[tuple[float, float]]],
              tau: float) -> float:
    """Average precision at one IoU threshold, pooled over the dataset.

    Proposals from all utterances are ranked together by confidence and
    matched greedily; AP is the area under the interpolated (envelope)
    precision-recall curve.
    """
    n_gt = sum(len(v) for v in gt_by_utt.values())
    flat = _flatten_sorted(proposals_by_utt)
    if n_gt == 0:
        return 0.0 if flat else 1.0
    if not flat:
        return 0.0

    tp = _match_proposals(flat, gt_by_utt, tau).astype(np.float64)
    fp = 1.0 - tp
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)

    # all-point interpolation: precision envelope from the right
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    recall_ext = np.concatenate([[0.0], recall])
    return float(np.sum((recall_ext[1:] - recall_ext[:-1]) * prec_env))


DEFAULT_AP_IOUS = tuple(np.round(np.arange(0.1, 0.95, 0.1), 2))  # 0.1 .. 0.9


def mean_ap(proposals_by_utt, gt_by_utt,
            ious=DEFAULT_AP_IOUS) -> tuple[float, dict[float, float]]:
    """AP averaged over IoU thresholds; also returns the per-threshold APs."""
    per_iou = {float(tau): ap_at_iou(proposals_by_utt, gt_by_utt, float(tau))
               for tau in ious}
    return float(np.mean(list(per_iou.values()))), per_iou


AR_IOU_GRID = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))


def ar_at_an(proposals_by_utt, gt_by_utt, an: int,
             iou_grid=AR_IOU_GRID) -> float:
    """Average recall keeping each utterance's top `an` proposals.

    Kept proposals are matched greedily at every IoU in the grid; recall is
    matched GTs over total GTs, averaged over the grid.  With no ground
    truth at all the recall is vacuously 1.
    """
    if int(an) < 1:
        raise ValueError("an must be >= 1")
    n_gt = sum(len(v) for v in gt_by_utt.values())
    if n_gt == 0:
        return 1.0
    kept = {
        utt: sorted(props, key=lambda p: (-p.confidence, p.start_s))[: int(an)]
        for utt, props in proposals_by_utt.items()
    }
    flat = _flatten_sorted(kept)
    if not flat:
        return 0.0
    recalls = []
    for tau in iou_grid:
        tp = _match_proposals(flat, gt_by_utt, float(tau))
        recalls.append(tp.sum() / n_gt)
    return float(np.mean(recalls))


DEFAULT_AR_ANS = (2, 5, 10, 20)


# ---------------------------------------------------------------------------
# Report

@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    auc: float
    acc: float
    map: float
    ap_per_iou: dict[float, float] = field(default_factory=dict)
    ar_per_an: dict[int, float] = field(default_factory=dict)
    n_utterances: int = 0
    n_frames: int = 0
    n_gt_segments: int = 0
    n_proposals: int = 0

    def to_json(self) -> str:
        doc = {
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "auc": self.auc,
            "acc": self.acc,
            "map": self.map,
            "ap_per_iou": {f"{k:g}": v for k, v in self.ap_per_iou.items()},
            "ar_per_an": {str(k): v for k, v in self.ar_per_an.items()},
            "counts": {
                "n_utterances": self.n_utterances,
                "n_frames": self.n_frames,
                "n_gt_segments": self.n_gt_segments,
                "n_proposals": self.n_proposals,
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        rows = [("metric", "value")]
        rows += [("eer", self.eer), ("eer_threshold", self.eer_threshold),
                 ("auc", self.auc), ("acc", self.acc), ("map", self.map)]
        rows += [(f"ap@{k:g}", v) for k, v in sorted(self.ap_per_iou.items())]
        rows += [(f"ar@{k}", v) for k, v in sorted(self.ar_per_an.items())]
        return "\n".join(f"{name},{value}" for name, value in rows) + "\n"


def build_report(frame_scores: dict[str, np.ndarray],
                 frame_labels: dict[str, np.ndarray],
                 proposals_by_utt: dict[str, list[ForgeryProposal]],
                 gt_by_utt: dict[str, list[tuple[float, float]]],
                 *,
                 ap_ious=DEFAULT_AP_IOUS,
                 ar_ans=DEFAULT_AR_ANS,
                 acc_threshold: float = 0.5) -> EvalReport:
    """Assemble the full evaluation from per-utterance scores and proposals.

    Frame metrics pool every frame in the split; proposal metrics pool every
    proposal.  The id sets of scores and labels must match exactly.
    """
    if set(frame_scores) != set(frame_labels):
        missing = set(frame_scores) ^ set(frame_labels)
        raise ValueError(f"score/label id mismatch: {sorted(missing)[:5]}")
    ids = sorted(frame_scores)
    all_scores = np.concatenate([np.asarray(frame_scores[i], dtype=np.float64) for i in ids])
    all_labels = np.concatenate([np.asarray(frame_labels[i], dtype=np.int64) for i in ids])

    eer_value, eer_thr = eer(all_scores, all_labels)
    mean_ap_value, per_iou = mean_ap(proposals_by_utt, gt_by_utt, ap_ious)
    return EvalReport(
        eer=eer_value,
        eer_threshold=eer_thr,
        auc=roc_auc(all_scores, all_labels),
        acc=frame_acc(all_scores, all_labels, acc_threshold),
        map=mean_ap_value,
        ap_per_iou=per_iou,
        ar_per_an={an: ar_at_an(proposals_by_utt, gt_by_utt, an) for an in ar_ans},
        n_utterances=len(ids),
        n_frames=int(all_labels.size),
        n_gt_segments=sum(len(v) for v in gt_by_utt.values()),
        n_proposals=sum(len(v) for v in proposals_by_utt.values()),
    )
