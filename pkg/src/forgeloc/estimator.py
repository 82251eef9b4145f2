"""Scikit-learn style front door for the whole pipeline.

`ForgeryLocalizer` wraps two-stage training behind fit/predict/transform so
the model composes with sklearn tooling (clone, get_params, pipelines).  The
lower-level functions stay importable for users who need the loops directly.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .features import FeatureSequence
from .localize import activation_from_params, generate_proposals
from .losses import topk_pool
from .model import model_forward
from .trainer import TrainConfig, train_stage1, train_stage2


class ForgeryLocalizer(BaseEstimator):
    """Weakly-supervised temporal forgery localizer.

    Trains from utterance-level 0/1 labels only and predicts, per utterance,
    a list of (confidence, start_s, end_s) forgery proposals.

    Parameters mirror :class:`forgeloc.trainer.TrainConfig`; `run_stage2`
    switches the pseudo-label refinement stage on or off.
    """

    def __init__(self, stage1_steps=2000, stage2_epochs=5, run_stage2=True,
                 batch_size=2, learning_rate=1e-3, seed=0, hidden_dim=64,
                 n_blocks=2, n_context_tokens=4, attention_axis="time",
                 top_k=50, lambda_kl=0.1, lambda_scl=0.01, kl_mode="as_written",
                 n_pairs=64, fuse_weight=0.9, theta=0.5, eval_every=0,
                 fps=50):
        self.stage1_steps = stage1_steps
        self.stage2_epochs = stage2_epochs
        self.run_stage2 = run_stage2
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.n_context_tokens = n_context_tokens
        self.attention_axis = attention_axis
        self.top_k = top_k
        self.lambda_kl = lambda_kl
        self.lambda_scl = lambda_scl
        self.kl_mode = kl_mode
        self.n_pairs = n_pairs
        self.fuse_weight = fuse_weight
        self.theta = theta
        self.eval_every = eval_every
        self.fps = fps

    # -- plumbing ----------------------------------------------------------

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_steps=self.stage1_steps,
            stage2_epochs=self.stage2_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            hidden_dim=self.hidden_dim,
            n_blocks=self.n_blocks,
            n_context_tokens=self.n_context_tokens,
            attention_axis=self.attention_axis,
            top_k=self.top_k,
            lambda_kl=self.lambda_kl,
            lambda_scl=self.lambda_scl,
            kl_mode=self.kl_mode,
            n_pairs=self.n_pairs,
            fuse_weight=self.fuse_weight,
            pseudo_theta=self.theta,
            eval_every=self.eval_every,
        )

    def _to_sequences(self, X, y=None) -> list[FeatureSequence]:
        if all(isinstance(x, FeatureSequence) for x in X):
            return list(X)
        if y is None:
            raise ValueError("y (utterance labels) is required when X is raw arrays")
        if len(X) != len(y):
            raise ValueError("X and y length mismatch")
        return [
            FeatureSequence(id=f"utt-{i:05d}", feats=np.asarray(x, dtype=np.float32),
                            utterance_label=int(lab), fps=self.fps)
            for i, (x, lab) in enumerate(zip(X, y))
        ]

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None, validation_data=None):
        """Train on a list of FeatureSequence (y ignored) or raw (T, D) arrays with y."""
        seqs = self._to_sequences(X, y)
        cfg = self._train_config()
        val = list(validation_data) if validation_data is not None else None

        result = train_stage1(seqs, cfg, val_data=val)
        self.history_ = list(result.history)
        if self.run_stage2 and self.stage2_epochs > 0:
            result = train_stage2(result.params, seqs, cfg, val_data=val)
            self.history_ += [(len(self.history_) + s, *row) for s, *row in result.history]
        self.params_ = result.params
        self.n_features_in_ = seqs[0].feats.shape[1]
        return self

    def predict(self, X):
        """Per utterance: list of (confidence, start_s, end_s) proposals."""
        check_is_fitted(self, "params_")
        out = []
        for seq in self._inference_sequences(X):
            act = activation_from_params(self.params_, seq.feats, seq.fps, self.fuse_weight)
            out.append([p.as_list() for p in generate_proposals(act, self.theta)])
        return out

    def predict_frame_scores(self, X) -> list[np.ndarray]:
        """Per utterance: the fused per-frame fake probability vector."""
        check_is_fitted(self, "params_")
        return [
            activation_from_params(self.params_, seq.feats, seq.fps, self.fuse_weight).probs
            for seq in self._inference_sequences(X)
        ]

    def transform(self, X) -> list[np.ndarray]:
        """Per utterance: attended frame embeddings (T, hidden_dim)."""
        check_is_fitted(self, "params_")
        return [
            model_forward(self.params_, seq.feats).f_t
            for seq in self._inference_sequences(X)
        ]

    def score(self, X, y=None) -> float:
        """Utterance-level accuracy: top-K pooled activation >= 0.5 means fake."""
        check_is_fitted(self, "params_")
        seqs = self._inference_sequences(X)
        if y is None:
            labels = [seq.utterance_label for seq in seqs]
        else:
            labels = [int(v) for v in y]
        if len(labels) != len(seqs):
            raise ValueError("X and y length mismatch")
        hits = 0
        for seq, lab in zip(seqs, labels):
            act = activation_from_params(self.params_, seq.feats, seq.fps, self.fuse_weight)
            pooled, _ = topk_pool(act.probs, self.top_k)
            hits += int((pooled >= 0.5) == bool(lab))
        return hits / len(seqs)

    def _inference_sequences(self, X) -> list[FeatureSequence]:
        if all(isinstance(x, FeatureSequence) for x in X):
            return list(X)
        # raw arrays at inference time carry no labels; wrap with label 0
        return [
            FeatureSequence(id=f"utt-{i:05d}", feats=np.asarray(x, dtype=np.float32),
                            utterance_label=0, fps=self.fps)
            for i, x in enumerate(X)
        ]
