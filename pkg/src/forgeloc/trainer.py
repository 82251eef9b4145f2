"""Two-stage weakly-supervised training with a hand-rolled Adam optimizer.

Stage 1 trains from utterance labels alone (MIL + co-learning KL).  Stage 2
resumes from a stage-1 model and adds a frame-pair contrastive term whose
pairs come from pseudo labels regenerated at the start of every epoch from
the previous epoch's model.

The trainer reads exactly four attributes off each training sequence:
``id``, ``feats``, ``utterance_label`` and ``fps``.  Segment annotations on
training data are never touched; validation sequences may expose theirs for
model selection.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import DatasetManifest, segments_to_frame_labels
from .localize import (
    activation_from_params,
    generate_proposals,
    proposals_to_pseudo_labels,
)
from .losses import LossConfig, sample_pairs, stage_loss
from .metrics import mean_ap, roc_auc
from .model import (
    ModelConfig,
    ModelParams,
    init_params,
    model_backward,
    model_forward,
    pack_params,
    save_checkpoint,
    unpack_params,
)


@dataclass
class TrainConfig:
    stage1_steps: int = 20000
    stage2_epochs: int = 15
    batch_size: int = 2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden_dim: int = 64
    n_blocks: int = 2
    n_context_tokens: int = 4
    attention_axis: str = "time"
    top_k: int = 50
    lambda_kl: float = 0.1
    lambda_scl: float = 0.01
    kl_mode: str = "as_written"
    n_pairs: int = 64
    fuse_weight: float = 0.9
    pseudo_theta: float = 0.5
    eval_every: int = 500     # stage-1 validation cadence in steps (0: final only)
    checkpoint_every: int = 0  # periodic checkpoint cadence in steps (0: off)

    def loss_config(self, stage: int) -> LossConfig:
        return LossConfig(
            top_k=self.top_k,
            lambda_kl=self.lambda_kl,
            lambda_scl=self.lambda_scl,
            n_pairs=self.n_pairs,
            stage=stage,
            kl_mode=self.kl_mode,
        )

    def model_config(self, d_in: int) -> ModelConfig:
        return ModelConfig(
            d_in=d_in,
            d_hidden=self.hidden_dim,
            n_blocks=self.n_blocks,
            n_context=self.n_context_tokens,
            attention_axis=self.attention_axis,
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        doc = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(values: np.ndarray, grads: np.ndarray, state: AdamState,
              learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias correction. Returns new (values, state)."""
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise ValueError(f"non-finite gradient: {bad} of {grads.size} entries")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_values = values - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return new_values, AdamState(m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# Helpers

@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float, float, float, float]]  # step, loss, mil, kl, scl
    best_step: int = -1          # step (stage 1) or epoch (stage 2) selected
    best_val_metric: float = float("nan")
    final_params: ModelParams | None = None


HISTORY_COLUMNS = ("step", "loss", "L_MIL", "L_KL", "L_SCL")


def history_to_csv(history) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for step, loss, mil, kl, scl in history:
        lines.append(f"{step},{loss:.10g},{mil:.10g},{kl:.10g},{scl:.10g}")
    return "\n".join(lines) + "\n"


def _as_sequences(data):
    if isinstance(data, DatasetManifest):
        return data.load_all()
    return list(data)


def _check_train_split(seqs) -> None:
    if not seqs:
        raise ValueError("training split is empty")
    labels = {int(s.utterance_label) for s in seqs}
    if labels != {0, 1}:
        raise ValueError("training needs both real and fake utterances")
    dims = {s.feats.shape[1] for s in seqs}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions in training data: {sorted(dims)}")


def evaluate_frame_auc(params: ModelParams, seqs, fuse_weight: float) -> float:
    """Pooled frame AUC of the fused activation against rasterized segments."""
    scores, labels = [], []
    for seq in seqs:
        act = activation_from_params(params, seq.feats, seq.fps, fuse_weight)
        scores.append(act.probs)
        labels.append(segments_to_frame_labels(seq.gt_segments, seq.feats.shape[0], seq.fps))
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


def evaluate_map(params: ModelParams, seqs, fuse_weight: float,
                 theta: float) -> float:
    """Dataset mAP of thresholded proposals against segment annotations."""
    props = {}
    gt = {}
    for seq in seqs:
        act = activation_from_params(params, seq.feats, seq.fps, fuse_weight)
        props[seq.id] = generate_proposals(act, theta)
        gt[seq.id] = list(seq.gt_segments)
    value, _ = mean_ap(props, gt)
    return value


def make_pseudo_labels(params: ModelParams, seq, fuse_weight: float,
                       theta: float) -> np.ndarray:
    """Default pseudo-labeler: fused activation -> proposals -> frame labels."""
    act = activation_from_params(params, seq.feats, seq.fps, fuse_weight)
    props = generate_proposals(act, theta)
    return proposals_to_pseudo_labels(props, seq.feats.shape[0], seq.fps)


class _BatchStream:
    """Endless stream of full batches over seeded shuffled passes."""

    def __init__(self, n: int, batch_size: int, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.buffer: list[int] = []

    def next_batch(self) -> list[int]:
        while len(self.buffer) < self.batch_size:
            self.buffer.extend(self.rng.permutation(self.n).tolist())
        batch, self.buffer = self.buffer[: self.batch_size], self.buffer[self.batch_size:]
        return batch


def _batch_update(flat, config, seqs, batch, loss_cfg, adam, cfg,
                  pairs_by_seq=None, pseudo_by_seq=None):
    """Average the loss and gradient over one batch, then apply Adam."""
    params = unpack_params(flat, config)
    total = np.zeros(4)  # loss, mil, kl, scl
    grad = np.zeros_like(flat)
    for idx in batch:
        seq = seqs[idx]
        trace = model_forward(params, seq.feats)
        kwargs = {}
        if loss_cfg.stage == 2:
            kwargs["pairs"] = pairs_by_seq[idx] if pairs_by_seq is not None else None
            if kwargs["pairs"] is None:
                kwargs["pseudo_labels"] = pseudo_by_seq[idx]
        loss, parts, out_grads = stage_loss(trace, int(seq.utterance_label), loss_cfg, **kwargs)
        total += (loss, parts["mil"], parts["kl"], parts["scl"])
        grad += model_backward(trace, params, out_grads)
    total /= len(batch)
    grad /= len(batch)
    if not np.isfinite(total[0]):
        raise ValueError(f"non-finite training loss {total[0]}")
    new_flat, adam = adam_step(flat, grad, adam, cfg.learning_rate,
                               cfg.beta1, cfg.beta2, cfg.eps)
    return new_flat, adam, total


# ---------------------------------------------------------------------------
# Stage 1

def train_stage1(train_data, cfg: TrainConfig, val_data=None,
                 out_dir=None) -> TrainResult:
    """Weak-label training from scratch.

    Logs one history row per step with the batch-mean loss measured before
    that step's update (so step 0 reports the initial parameters).  When
    validation data is given, the returned params are the checkpoint with
    the best validation frame AUC; otherwise the final step's.
    """
    seqs = _as_sequences(train_data)
    _check_train_split(seqs)
    val_seqs = _as_sequences(val_data) if val_data is not None else None

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    config = cfg.model_config(seqs[0].feats.shape[1])
    flat = pack_params(init_params(config, np.random.Generator(np.random.PCG64(init_ss))))
    adam = AdamState.zeros(flat.size)
    stream = _BatchStream(len(seqs), cfg.batch_size, np.random.Generator(np.random.PCG64(shuffle_ss)))
    loss_cfg = cfg.loss_config(stage=1)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    best_flat = flat.copy()
    best_step = -1
    best_auc = -np.inf

    def maybe_eval(step, flat_now):
        nonlocal best_flat, best_step, best_auc
        if val_seqs is None:
            return
        auc = evaluate_frame_auc(unpack_params(flat_now, config), val_seqs, cfg.fuse_weight)
        if auc > best_auc:
            best_auc = auc
            best_step = step
            best_flat = flat_now.copy()

    for step in range(cfg.stage1_steps):
        batch = stream.next_batch()
        flat_new, adam, totals = _batch_update(flat, config, seqs, batch, loss_cfg, adam, cfg)
        history.append((step, totals[0], totals[1], totals[2], totals[3]))
        flat = flat_new
        done = step + 1
        if cfg.eval_every and done % cfg.eval_every == 0:
            maybe_eval(done, flat)
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"stage1_step{done:07d}.ckpt",
                            unpack_params(flat, config), seed=cfg.seed, stage=1)

    if cfg.stage1_steps and (not cfg.eval_every or cfg.stage1_steps % cfg.eval_every):
        maybe_eval(cfg.stage1_steps, flat)

    selected = best_flat if (val_seqs is not None and best_step >= 0) else flat
    params = unpack_params(selected, config)
    result = TrainResult(
        params=params,
        history=history,
        best_step=best_step,
        best_val_metric=best_auc if val_seqs is not None else float("nan"),
        final_params=unpack_params(flat, config),
    )
    if out_dir is not None:
        save_checkpoint(out_dir / "stage1.ckpt", params, seed=cfg.seed, stage=1)
        (out_dir / "stage1_loss.csv").write_text(history_to_csv(history))
    return result


# ---------------------------------------------------------------------------
# Stage 2

def train_stage2(base_params: ModelParams, train_data, cfg: TrainConfig,
                 val_data=None, out_dir=None, *,
                 pseudo_label_fn=None, after_epoch=None) -> TrainResult:
    """Pseudo-label refinement on top of a stage-1 model.

    At the start of every epoch, per-frame pseudo labels for the whole
    training split are regenerated from the current parameters, so epoch e
    trains against the model left by epoch e-1 (epoch 1 against the stage-1
    model).  Contrastive frame pairs are drawn from those labels.  When
    validation data is given, the epoch with the best validation mAP is
    returned (earlier epoch wins ties); otherwise the last epoch.

    `pseudo_label_fn(params, seq) -> frame labels` overrides the default
    labeler; `after_epoch(epoch, params, pseudo_by_id)` is a test hook.
    """
    seqs = _as_sequences(train_data)
    _check_train_split(seqs)
    val_seqs = _as_sequences(val_data) if val_data is not None else None

    config = base_params.config
    for seq in seqs:
        if seq.feats.shape[1] != config.d_in:
            raise ValueError("training data feature dim does not match the base model")

    ss = np.random.SeedSequence([cfg.seed, 2])
    shuffle_ss, pair_ss = ss.spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    pair_rng = np.random.Generator(np.random.PCG64(pair_ss))

    flat = pack_params(base_params)
    adam = AdamState.zeros(flat.size)
    loss_cfg = cfg.loss_config(stage=2)
    labeler = pseudo_label_fn or (
        lambda p, s: make_pseudo_labels(p, s, cfg.fuse_weight, cfg.pseudo_theta)
    )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    step = 0
    best_flat = flat.copy()
    best_epoch = -1
    best_map = -np.inf

    for epoch in range(1, cfg.stage2_epochs + 1):
        params_now = unpack_params(flat, config)
        pseudo_by_seq = [np.asarray(labeler(params_now, seq)) for seq in seqs]
        for labels, seq in zip(pseudo_by_seq, seqs):
            if labels.shape != (seq.feats.shape[0],):
                raise ValueError("pseudo labels must be one value per frame")

        pairs_by_seq = [
            sample_pairs(labels, cfg.n_pairs, pair_rng)[0] for labels in pseudo_by_seq
        ]

        order = shuffle_rng.permutation(len(seqs))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo: lo + cfg.batch_size].tolist()
            flat_new, adam, totals = _batch_update(
                flat, config, seqs, batch, loss_cfg, adam, cfg,
                pairs_by_seq=pairs_by_seq,
            )
            history.append((step, totals[0], totals[1], totals[2], totals[3]))
            flat = flat_new
            step += 1

        params_now = unpack_params(flat, config)
        if val_seqs is not None:
            val_map = evaluate_map(params_now, val_seqs, cfg.fuse_weight, cfg.pseudo_theta)
            if val_map > best_map:
                best_map = val_map
                best_epoch = epoch
                best_flat = flat.copy()
        if after_epoch is not None:
            after_epoch(epoch, params_now,
                        {seq.id: lab for seq, lab in zip(seqs, pseudo_by_seq)})
        if out_dir is not None and cfg.checkpoint_every:
            save_checkpoint(out_dir / f"stage2_epoch{epoch:03d}.ckpt", params_now,
                            seed=cfg.seed, stage=2)

    selected = best_flat if (val_seqs is not None and best_epoch >= 0) else flat
    params = unpack_params(selected, config)
    result = TrainResult(
        params=params,
        history=history,
        best_step=best_epoch,
        best_val_metric=best_map if val_seqs is not None else float("nan"),
        final_params=unpack_params(flat, config),
    )
    if out_dir is not None:
        save_checkpoint(out_dir / "stage2.ckpt", params, seed=cfg.seed, stage=2)
        (out_dir / "stage2_loss.csv").write_text(history_to_csv(history))
    return result
