"""Turning frame scores into timestamped forgery proposals and back."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelParams, model_forward, softmax
from .validation import as_probability_vector, check_fps


@dataclass
class ForgeryActivation:
    """Per-frame fused fake probabilities for one utterance."""

    probs: np.ndarray  # (T,), values in [0, 1]
    fps: int = 50

    def __post_init__(self):
        self.probs = as_probability_vector(self.probs, name="probs")
        self.fps = check_fps(self.fps)


@dataclass
class ForgeryProposal:
    confidence: float
    start_s: float
    end_s: float

    def as_list(self) -> list[float]:
        return [self.confidence, self.start_s, self.end_s]


def fuse_frame_scores(s_t: np.ndarray, s_p: np.ndarray, fps: int,
                      fuse_weight: float = 0.9) -> ForgeryActivation:
    """Blend the two heads' fake posteriors: w * head_t + (1 - w) * head_p."""
    if not 0.0 <= fuse_weight <= 1.0:
        raise ValueError(f"fuse_weight must be in [0, 1], got {fuse_weight}")
    p_t = softmax(np.asarray(s_t, dtype=np.float64), axis=1)[:, 1]
    p_p = softmax(np.asarray(s_p, dtype=np.float64), axis=1)[:, 1]
    return ForgeryActivation(fuse_weight * p_t + (1.0 - fuse_weight) * p_p, fps)


def generate_proposals(activation: ForgeryActivation, theta: float = 0.5, *,
                       merge_gap_s: float = 0.0,
                       min_duration_s: float = 0.0) -> list[ForgeryProposal]:
    """Threshold the activation and emit one proposal per maximal frame run.

    A frame t belongs to a run when probs[t] >= theta.  A run of frames
    [first, last] maps to the half-open interval [first/fps, (last+1)/fps);
    its confidence is the mean activation over the run.  Optional post
    filters merge runs separated by short gaps and drop short proposals;
    both default to off.
    """
    probs = activation.probs
    fps = activation.fps
    above = probs >= theta

    runs: list[tuple[int, int]] = []  # [lo, hi) frame ranges
    t = 0
    n = probs.size
    while t < n:
        if above[t]:
            lo = t
            while t < n and above[t]:
                t += 1
            runs.append((lo, t))
        else:
            t += 1

    if merge_gap_s > 0.0 and runs:
        gap_frames = int(round(merge_gap_s * fps))
        merged = [runs[0]]
        for lo, hi in runs[1:]:
            if lo - merged[-1][1] <= gap_frames:
                merged[-1] = (merged[-1][0], hi)
            else:
                merged.append((lo, hi))
        runs = merged

    proposals = []
    for lo, hi in runs:
        if (hi - lo) / fps < min_duration_s:
            continue
        proposals.append(
            ForgeryProposal(
                confidence=float(probs[lo:hi].mean()),
                start_s=lo / fps,
                end_s=hi / fps,
            )
        )
    return proposals


def proposals_to_pseudo_labels(proposals: list[ForgeryProposal], n_frames: int,
                               fps: int) -> np.ndarray:
    """Rasterize proposals back to per-frame 0/1 labels (exact round trip)."""
    labels = np.zeros(int(n_frames), dtype=np.int64)
    for prop in proposals:
        lo = max(0, int(round(prop.start_s * fps)))
        hi = min(int(n_frames), int(round(prop.end_s * fps)))
        if hi > lo:
            labels[lo:hi] = 1
    return labels


def activation_from_params(params: ModelParams, feats: np.ndarray, fps: int,
                           fuse_weight: float = 0.9) -> ForgeryActivation:
    """Run the model on one utterance and fuse its head scores."""
    trace = model_forward(params, feats)
    return fuse_frame_scores(trace.s_t, trace.s_p, fps, fuse_weight)


# ---------------------------------------------------------------------------
# Proposal files: one JSON object per line, {"id": ..., "proposals": [[c,s,e],...]}

def save_proposals_jsonl(path, proposals_by_id: dict[str, list[ForgeryProposal]]) -> None:
    lines = []
    for utt_id in sorted(proposals_by_id):
        props = [p.as_list() for p in proposals_by_id[utt_id]]
        lines.append(json.dumps({"id": utt_id, "proposals": props}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_proposals_jsonl(path) -> dict[str, list[ForgeryProposal]]:
    out: dict[str, list[ForgeryProposal]] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        doc = json.loads(line)
        if "id" not in doc or "proposals" not in doc:
            raise ValueError(f"{path}:{ln}: each line needs 'id' and 'proposals'")
        if doc["id"] in out:
            raise ValueError(f"{path}:{ln}: duplicate id {doc['id']!r}")
        props = []
        for item in doc["proposals"]:
            if len(item) != 3:
                raise ValueError(f"{path}:{ln}: proposals must be [confidence, start, end]")
            props.append(ForgeryProposal(float(item[0]), float(item[1]), float(item[2])))
        out[doc["id"]] = props
    return out
