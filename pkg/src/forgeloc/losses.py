"""Training objectives: top-K MIL, co-learning KL, semantic contrastive.

Each loss returns (value, gradients) with gradients taken w.r.t. the model
outputs it consumes, so the trainer can chain them through model_backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ForwardTrace, OutputGrads, softmax
from .validation import make_rng

_EPS = 1e-12


@dataclass
class LossConfig:
    top_k: int = 50
    lambda_kl: float = 0.1
    lambda_scl: float = 0.01
    n_pairs: int = 64
    stage: int = 1
    # "as_written": exp(-KL_tp) + exp(-KL_pt), bounded in (0, 2]
    # "aligning":   KL_tp + KL_pt, minimized when the two streams agree
    kl_mode: str = "as_written"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.kl_mode not in ("as_written", "aligning"):
            raise ValueError(f"kl_mode must be 'as_written' or 'aligning', got {self.kl_mode!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


# ---------------------------------------------------------------------------
# MIL head loss

def topk_pool(scores: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Mean of the min(k, T) largest scores; ties broken toward lower index.

    Returns (pooled value, indices of the selected frames).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a non-empty vector")
    k_eff = min(int(k), scores.size)
    order = np.argsort(-scores, kind="stable")
    idx = order[:k_eff]
    return float(scores[idx].mean()), idx


def p2sgrad_mse(prob_fake: float, label: int) -> tuple[float, float]:
    """MSE between the 2-class posterior (1-p, p) and the one-hot target.

    With binary classes this collapses to (p - y)^2; returns (loss, dloss/dp).
    """
    p = float(prob_fake)
    y = float(label)
    return (p - y) ** 2, 2.0 * (p - y)


def mil_loss(s_t: np.ndarray, s_p: np.ndarray, label: int,
             top_k: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Weak-label loss on both heads: softmax, pool top-K fake scores, P2sGrad.

    Returns (loss, dL/dS_t, dL/dS_p).
    """
    total = 0.0
    grads = []
    for logits in (s_t, s_p):
        probs = softmax(logits, axis=1)
        fake = probs[:, 1]
        pooled, idx = topk_pool(fake, top_k)
        loss, dpooled = p2sgrad_mse(pooled, label)
        total += loss

        d_fake = np.zeros_like(fake)
        d_fake[idx] = dpooled / idx.size
        # fake prob is sigma of the logit margin; d p / d s1 = p(1-p), d p / d s0 = -p(1-p)
        pq = fake * (1.0 - fake)
        d_logits = np.zeros_like(logits)
        d_logits[:, 1] = d_fake * pq
        d_logits[:, 0] = -d_fake * pq
        grads.append(d_logits)
    return total, grads[0], grads[1]


# ---------------------------------------------------------------------------
# Co-learning KL loss

def _rowwise_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sum(p * (np.log(p + _EPS) - np.log(q + _EPS)), axis=1)


def kl_colearning_loss(f_t: np.ndarray, f_p: np.ndarray,
                       mode: str = "as_written") -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric per-frame KL between the two feature streams.

    Each frame's feature vector is softmax-normalized across channels to a
    distribution; KL is averaged over frames in both directions.

    mode "as_written": loss = exp(-KL_tp) + exp(-KL_pt), in (0, 2].  Driving
    this down pushes the streams apart.  mode "aligning": loss = KL_tp + KL_pt,
    driving the streams together.

    Returns (loss, dL/dF_t, dL/dF_p).
    """
    t_frames = f_t.shape[0]
    p = softmax(f_t, axis=1)  # rows of P from the frame stream
    q = softmax(f_p, axis=1)  # rows of Q from the prompt stream

    kl_rows_tp = _rowwise_kl(p, q)
    kl_rows_pt = _rowwise_kl(q, p)
    kl_tp = float(kl_rows_tp.mean())
    kl_pt = float(kl_rows_pt.mean())

    # d KL(p||q) / d logits_p = p * ((log p - log q) - KL_row)
    # d KL(p||q) / d logits_q = q - p
    lp = np.log(p + _EPS)
    lq = np.log(q + _EPS)
    d_tp_wrt_ft = p * ((lp - lq) - kl_rows_tp[:, None])
    d_tp_wrt_fp = q - p
    d_pt_wrt_fp = q * ((lq - lp) - kl_rows_pt[:, None])
    d_pt_wrt_ft = p - q

    if mode == "as_written":
        loss = float(np.exp(-kl_tp) + np.exp(-kl_pt))
        c_tp = -np.exp(-kl_tp)
        c_pt = -np.exp(-kl_pt)
    elif mode == "aligning":
        loss = kl_tp + kl_pt
        c_tp = 1.0
        c_pt = 1.0
    else:
        raise ValueError(f"unknown kl mode {mode!r}")

    d_f_t = (c_tp * d_tp_wrt_ft + c_pt * d_pt_wrt_ft) / t_frames
    d_f_p = (c_tp * d_tp_wrt_fp + c_pt * d_pt_wrt_fp) / t_frames
    return loss, d_f_t, d_f_p


# ---------------------------------------------------------------------------
# Semantic contrastive loss (stage 2)

@dataclass
class FramePair:
    i: int
    j: int
    similar: bool


def sample_pairs(frame_labels: np.ndarray, n_pairs: int,
                 rng) -> tuple[list[FramePair], bool]:
    """Sample frame index pairs from per-frame pseudo labels.

    Half the pairs are dissimilar (one frame from each class) when both
    classes are present.  Returns (pairs, single_class) where single_class
    flags that only one label value exists so no dissimilar pair is possible.
    """
    rng = make_rng(rng)
    labels = np.asarray(frame_labels).astype(np.int64)
    if labels.ndim != 1 or labels.size < 2:
        raise ValueError("need at least two frames to sample pairs")
    idx0 = np.flatnonzero(labels == 0)
    idx1 = np.flatnonzero(labels == 1)
    single_class = len(idx0) == 0 or len(idx1) == 0

    pairs: list[FramePair] = []
    n_dissim = 0 if single_class else n_pairs // 2
    for _ in range(n_dissim):
        a = int(idx0[rng.integers(len(idx0))])
        b = int(idx1[rng.integers(len(idx1))])
        pairs.append(FramePair(a, b, similar=False))

    sim_classes = [idx for idx in (idx0, idx1) if len(idx) >= 2]
    if sim_classes:
        while len(pairs) < n_pairs:
            idx = sim_classes[int(rng.integers(len(sim_classes)))]
            a, b = rng.choice(len(idx), size=2, replace=False)
            pairs.append(FramePair(int(idx[a]), int(idx[b]), similar=True))
    return pairs, single_class


def semantic_contrastive_loss(feats: np.ndarray,
                              pairs: list[FramePair]) -> tuple[float, np.ndarray]:
    """Cosine-similarity contrastive loss over frame pairs.

    Similar pairs pay (1 - sim)^2, dissimilar pairs pay max(0, sim)^2.
    Returns (mean loss over pairs, dL/dfeats).
    """
    grad = np.zeros_like(feats)
    if not pairs:
        return 0.0, grad
    total = 0.0
    for pair in pairs:
        u = feats[pair.i]
        v = feats[pair.j]
        nu = np.linalg.norm(u)
        nv = np.linalg.norm(v)
        if nu < _EPS or nv < _EPS:
            continue  # zero vector: define sim = 0 with zero gradient
        sim = float(u @ v / (nu * nv))
        if pair.similar:
            total += (1.0 - sim) ** 2
            dsim = -2.0 * (1.0 - sim)
        else:
            if sim <= 0.0:
                continue
            total += sim ** 2
            dsim = 2.0 * sim
        d_u = v / (nu * nv) - sim * u / (nu * nu)
        d_v = u / (nu * nv) - sim * v / (nv * nv)
        grad[pair.i] += dsim * d_u / len(pairs)
        grad[pair.j] += dsim * d_v / len(pairs)
    return total / len(pairs), grad


# ---------------------------------------------------------------------------
# Stage objectives

def stage_loss(trace: ForwardTrace, label: int, cfg: LossConfig, *,
               pseudo_labels: np.ndarray | None = None,
               pairs: list[FramePair] | None = None,
               rng=None) -> tuple[float, dict, OutputGrads]:
    """Combined objective for one utterance.

    Stage 1: MIL + lambda_kl * KL.  Stage 2 adds lambda_scl * SCL on the
    attended frame features, with pairs drawn from per-frame pseudo labels
    (pass `pairs` directly, or `pseudo_labels` plus `rng` to sample here).

    Returns (total, {"mil","kl","scl"}, gradients w.r.t. model outputs).
    """
    l_mil, d_s_t, d_s_p = mil_loss(trace.s_t, trace.s_p, label, cfg.top_k)
    l_kl, d_f_t, d_f_p = kl_colearning_loss(trace.f_t, trace.f_p, cfg.kl_mode)

    total = l_mil + cfg.lambda_kl * l_kl
    parts = {"mil": l_mil, "kl": l_kl, "scl": 0.0}
    d_f_t = cfg.lambda_kl * d_f_t
    d_f_p = cfg.lambda_kl * d_f_p

    if cfg.stage == 2:
        if pairs is None:
            if pseudo_labels is None:
                raise ValueError("stage 2 needs pseudo_labels (or pre-sampled pairs)")
            if rng is None:
                raise ValueError("stage 2 needs an rng to sample pairs")
            pairs, _ = sample_pairs(pseudo_labels, cfg.n_pairs, rng)
        l_scl, d_scl = semantic_contrastive_loss(trace.f_t, pairs)
        total += cfg.lambda_scl * l_scl
        parts["scl"] = l_scl
        d_f_t = d_f_t + cfg.lambda_scl * d_scl

    grads = OutputGrads(d_s_t=d_s_t, d_s_p=d_s_p, d_f_t=d_f_t, d_f_p=d_f_p)
    return total, parts, grads
