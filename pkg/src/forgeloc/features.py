"""Frame-feature sequences: file format, manifests, synthetic data.

A feature file stores one utterance:

    magic   8 bytes  b"LOCOFT01"
    T       u32 LE   number of frames
    D       u32 LE   feature dimension
    fps     u32 LE   frames per second
    label   u8       utterance-level label (0 real, 1 fake)
    n_seg   u32 LE   number of annotated forged segments
    n_seg * (f64 LE start_s, f64 LE end_s)
    T * D   f32 LE   features, row-major (frame-major)
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import (
    as_float_matrix,
    check_fps,
    check_segments,
    check_utterance_label,
    make_rng,
)

MAGIC = b"LOCOFT01"
_HEADER = struct.Struct("<IIIBI")  # T, D, fps, label, n_segments


@dataclass
class FeatureSequence:
    """One utterance: frame features plus weak and (optionally) strong labels."""

    id: str
    feats: np.ndarray  # (T, D) float32
    utterance_label: int
    gt_segments: list[tuple[float, float]] = field(default_factory=list)
    fps: int = 50

    def __post_init__(self):
        self.feats = np.ascontiguousarray(
            as_float_matrix(self.feats, name="feats", dtype=np.float32)
        )
        self.utterance_label = check_utterance_label(self.utterance_label)
        self.fps = check_fps(self.fps)
        self.gt_segments = check_segments(self.gt_segments, self.duration_s)
        if self.utterance_label == 0 and self.gt_segments:
            raise ValueError("a real (label 0) utterance cannot carry forged segments")
        # label 1 with zero segments is allowed: ground truth withheld (e.g. test-time input)

    @property
    def n_frames(self) -> int:
        return self.feats.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]

    @property
    def duration_s(self) -> float:
        return self.feats.shape[0] / self.fps


def write_features(seq: FeatureSequence, path) -> None:
    """Serialize one sequence to its binary file. Writes are byte-deterministic."""
    path = Path(path)
    feats = seq.feats
    blob = bytearray()
    blob += MAGIC
    blob += _HEADER.pack(seq.n_frames, seq.feat_dim, seq.fps, seq.utterance_label,
                         len(seq.gt_segments))
    for start, end in seq.gt_segments:
        blob += struct.pack("<dd", start, end)
    blob += feats.astype("<f4", copy=False).tobytes(order="C")
    path.write_bytes(bytes(blob))


def read_feature_header(path) -> dict:
    """Read only the fixed-size header of a feature file."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        n_frames, feat_dim, fps, label, n_segments = _HEADER.unpack(raw)
    return {
        "n_frames": n_frames,
        "feat_dim": feat_dim,
        "fps": fps,
        "utterance_label": label,
        "n_segments": n_segments,
    }


def load_features(path, *, id: str | None = None) -> FeatureSequence:
    """Load and validate one sequence from its binary file."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    off = 8
    if len(data) < off + _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    n_frames, feat_dim, fps, label, n_segments = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    seg_bytes = 16 * n_segments
    feat_bytes = 4 * n_frames * feat_dim
    expected = off + seg_bytes + feat_bytes
    if len(data) != expected:
        raise ValueError(f"{path}: size mismatch, expected {expected} bytes, got {len(data)}")
    segments = []
    for _ in range(n_segments):
        start, end = struct.unpack_from("<dd", data, off)
        off += 16
        segments.append((start, end))
    feats = np.frombuffer(data, dtype="<f4", count=n_frames * feat_dim, offset=off)
    feats = feats.reshape(n_frames, feat_dim).copy()
    return FeatureSequence(
        id=id if id is not None else path.stem,
        feats=feats,
        utterance_label=label,
        gt_segments=segments,
        fps=fps,
    )


def segments_to_frame_labels(segments, n_frames: int, fps: int) -> np.ndarray:
    """Rasterize second-resolution segments to per-frame 0/1 labels.

    Frame t covers [t/fps, (t+1)/fps); a segment (s, e) marks frames
    [round(s*fps), round(e*fps)) so that proposals emitted from frame runs
    rasterize back to the exact same frame set.
    """
    n_frames = int(n_frames)
    fps = check_fps(fps)
    labels = np.zeros(n_frames, dtype=np.int64)
    for start, end in segments:
        lo = int(round(start * fps))
        hi = int(round(end * fps))
        lo = max(lo, 0)
        hi = min(hi, n_frames)
        if hi > lo:
            labels[lo:hi] = 1
    return labels


# ---------------------------------------------------------------------------
# Manifests

@dataclass
class ManifestEntry:
    id: str
    path: str  # relative to the manifest's directory
    utterance_label: int
    n_frames: int
    feat_dim: int
    fps: int
    gt_segments: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class DatasetManifest:
    """An ordered list of utterances belonging to one split."""

    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None  # directory the entry paths are relative to

    def __len__(self) -> int:
        return len(self.entries)

    def load_sequence(self, entry: ManifestEntry) -> FeatureSequence:
        if self.root is None:
            raise ValueError("manifest has no root directory; load it from disk first")
        seq = load_features(self.root / entry.path, id=entry.id)
        if (seq.n_frames, seq.feat_dim, seq.fps) != (entry.n_frames, entry.feat_dim, entry.fps):
            raise ValueError(f"{entry.id}: feature file disagrees with manifest")
        return seq

    def load_all(self) -> list[FeatureSequence]:
        return [self.load_sequence(e) for e in self.entries]

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "split": self.split,
            "entries": [
                {
                    "id": e.id,
                    "path": e.path,
                    "utterance_label": e.utterance_label,
                    "n_frames": e.n_frames,
                    "feat_dim": e.feat_dim,
                    "fps": e.fps,
                    "gt_segments": [[s, t] for s, t in e.gt_segments],
                }
                for e in self.entries
            ],
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = [
        ManifestEntry(
            id=e["id"],
            path=e["path"],
            utterance_label=check_utterance_label(e["utterance_label"]),
            n_frames=int(e["n_frames"]),
            feat_dim=int(e["feat_dim"]),
            fps=check_fps(e["fps"]),
            gt_segments=[(float(s), float(t)) for s, t in e.get("gt_segments", [])],
        )
        for e in doc["entries"]
    ]
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate utterance ids")
    return DatasetManifest(split=doc["split"], entries=entries, root=path.parent)


# ---------------------------------------------------------------------------
# Synthetic data

@dataclass
class SynthConfig:
    """Controls the synthetic frame-feature generator.

    Every utterance is a per-utterance Gaussian offset (channel/speaker
    effect), a slow random-walk drift, and white frame noise.  Fake
    utterances additionally shift the features inside forged segments along
    a fixed direction by `class_shift`, with a linear ramp of
    `boundary_blur` frames at each segment edge so onsets are not trivially
    sharp.  The offset is large relative to the white noise, so frames are
    only weakly separable in isolation but cleanly separable relative to
    their own utterance.
    """

    n_utterances: int = 100
    t_range: tuple[int, int] = (200, 500)
    feat_dim: int = 32
    fps: int = 50
    forgery_prob: float = 0.5
    n_segments_range: tuple[int, int] = (1, 2)
    segment_len_range: tuple[int, int] = (50, 150)  # frames
    min_gap: int = 20  # frames between forged segments
    class_shift: float = 1.55
    boundary_blur: int = 5
    base_offset_scale: float = 1.0  # stddev of the per-utterance offset
    noise_scale: float = 0.35       # stddev of per-frame white noise
    drift_scale: float = 0.01       # random-walk step stddev
    seed: int = 0


def _place_segments(rng, n_frames, cfg: SynthConfig) -> list[tuple[int, int]]:
    """Sample disjoint forged segments as frame ranges [lo, hi)."""
    lo_n, hi_n = cfg.n_segments_range
    want = int(rng.integers(lo_n, hi_n + 1))
    placed: list[tuple[int, int]] = []
    for _ in range(200):
        if len(placed) == want:
            break
        length = int(rng.integers(cfg.segment_len_range[0], cfg.segment_len_range[1] + 1))
        if length >= n_frames:
            length = max(1, n_frames - 2)
        start = int(rng.integers(0, n_frames - length + 1))
        cand = (start, start + length)
        ok = all(
            cand[1] + cfg.min_gap <= lo or hi + cfg.min_gap <= cand[0]
            for lo, hi in placed
        )
        if ok:
            placed.append(cand)
    if not placed:
        # degenerate t_range; force one short segment
        placed = [(0, max(1, n_frames // 4))]
    placed.sort()
    return placed


def make_synthetic_sequence(rng, cfg: SynthConfig, *, id: str) -> FeatureSequence:
    """Draw one synthetic utterance from the generator defined by *cfg*."""
    n_frames = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
    d = cfg.feat_dim

    # shared structure: per-utterance offset, slow drift, white noise
    base = rng.normal(0.0, cfg.base_offset_scale, size=(1, d))
    drift = np.cumsum(rng.normal(0.0, 1.0, size=(n_frames, d)), axis=0) * cfg.drift_scale
    noise = rng.normal(0.0, cfg.noise_scale, size=(n_frames, d))
    feats = base + drift + noise

    label = int(rng.random() < cfg.forgery_prob)
    segments: list[tuple[float, float]] = []
    if label == 1:
        shift_dir = _class_direction(cfg)
        for lo, hi in _place_segments(rng, n_frames, cfg):
            length = hi - lo
            ramp = np.minimum(
                1.0,
                np.minimum(
                    (np.arange(length) + 1) / (cfg.boundary_blur + 1),
                    (length - np.arange(length)) / (cfg.boundary_blur + 1),
                ),
            )
            feats[lo:hi] += cfg.class_shift * ramp[:, None] * shift_dir
            segments.append((lo / cfg.fps, hi / cfg.fps))

    return FeatureSequence(
        id=id,
        feats=feats.astype(np.float32),
        utterance_label=label,
        gt_segments=segments,
        fps=cfg.fps,
    )


def _class_direction(cfg: SynthConfig) -> np.ndarray:
    """Fixed unit vector along which forged frames are displaced.

    Derived from the config seed only, so every utterance in a dataset (and
    in its train/val/test splits) shares the same forgery signature.
    """
    rng = make_rng(cfg.seed + 7_777_777)
    v = rng.normal(size=cfg.feat_dim)
    return v / np.linalg.norm(v)


def synth_dataset(cfg: SynthConfig, out_dir, *, split: str = "train") -> DatasetManifest:
    """Generate a synthetic split on disk and return its manifest.

    The RNG is seeded from (cfg.seed, split) so different splits of the same
    config are disjoint draws from the same distribution, and regeneration is
    byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_seq = np.random.SeedSequence([cfg.seed, _split_tag(split)])
    rng = np.random.Generator(np.random.PCG64(seed_seq))

    entries = []
    for i in range(cfg.n_utterances):
        seq = make_synthetic_sequence(rng, cfg, id=f"{split}-{i:05d}")
        fname = f"{seq.id}.feat"
        write_features(seq, out_dir / fname)
        entries.append(
            ManifestEntry(
                id=seq.id,
                path=fname,
                utterance_label=seq.utterance_label,
                n_frames=seq.n_frames,
                feat_dim=seq.feat_dim,
                fps=seq.fps,
                gt_segments=list(seq.gt_segments),
            )
        )
    manifest = DatasetManifest(split=split, entries=entries, root=out_dir)
    manifest.save(out_dir / f"{split}.json")
    return manifest


def _split_tag(split: str) -> int:
    """Stable small integer derived from the split name (not Python hash())."""
    tag = 0
    for ch in split:
        tag = (tag * 131 + ord(ch)) % (2**31 - 1)
    return tag


def config_to_json(cfg: SynthConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True)


def config_from_json(text: str) -> SynthConfig:
    doc = json.loads(text)
    cfg = SynthConfig(**{k: v for k, v in doc.items()})
    cfg.t_range = tuple(cfg.t_range)
    cfg.n_segments_range = tuple(cfg.n_segments_range)
    cfg.segment_len_range = tuple(cfg.segment_len_range)
    return cfg
