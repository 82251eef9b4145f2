"""Frame-level forgery model: adapter, prompt mixing, twin classifier heads.

All math is float64 numpy with hand-written reverse-mode gradients; there is
no autodiff anywhere.  The forward pass caches every intermediate needed by
the backward pass in a `ForwardTrace`.

Architecture, per utterance of shape (T, d_in):

  residual MLP blocks     X -> gelu(X W1 + b1) W2 + b2 + skip(X)   (d_in -> H)
  temporal attention      F_t = F_rb * softmax_over_time(F_rb)     per channel
  prompt embedding        mean of learnable context tokens + fake-class token
  prompt fusion           F_p = FFN(F_t * prompt) + prompt          broadcast over T
  twin heads              S_t = F_t Wt + bt,  S_p = F_p Wp + bp     (T, 2) logits
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .validation import as_float_matrix, make_rng

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Parameters

@dataclass
class ModelConfig:
    d_in: int
    d_hidden: int = 64
    n_blocks: int = 2
    n_context: int = 4
    attention_axis: str = "time"  # or "frame": softmax across channels per frame

    def __post_init__(self):
        if self.attention_axis not in ("time", "frame"):
            raise ValueError(f"attention_axis must be 'time' or 'frame', got {self.attention_axis!r}")
        for name in ("d_in", "d_hidden", "n_blocks", "n_context"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class ResidualBlockParams:
    w1: np.ndarray  # (d_in_blk, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    w2: np.ndarray  # (d_hidden, d_out_blk)
    b2: np.ndarray  # (d_out_blk,)
    proj: np.ndarray | None = None  # (d_in_blk, d_out_blk) when dims differ


@dataclass
class LinearParams:
    w: np.ndarray  # (d_hidden, 2)
    b: np.ndarray  # (2,)


@dataclass
class ModelParams:
    config: ModelConfig
    blocks: list[ResidualBlockParams]
    clf_t: LinearParams
    clf_p: LinearParams
    context_tokens: np.ndarray  # (n_context, d_hidden)
    class_tokens: np.ndarray    # (2, d_hidden): row 0 real, row 1 fake
    ffn_w1: np.ndarray  # (d_hidden, d_hidden)
    ffn_b1: np.ndarray  # (d_hidden,)
    ffn_w2: np.ndarray  # (d_hidden, d_hidden)
    ffn_b2: np.ndarray  # (d_hidden,)


def init_params(config: ModelConfig, seed=0) -> ModelParams:
    """Initialize parameters: fan-in scaled weights, zero biases, small tokens."""
    rng = make_rng(seed)
    h = config.d_hidden

    blocks = []
    d_prev = config.d_in
    for k in range(config.n_blocks):
        w1 = rng.normal(0.0, d_prev ** -0.5, size=(d_prev, h))
        b1 = np.zeros(h)
        w2 = rng.normal(0.0, h ** -0.5, size=(h, h))
        b2 = np.zeros(h)
        proj = None
        if d_prev != h:
            proj = rng.normal(0.0, d_prev ** -0.5, size=(d_prev, h))
        blocks.append(ResidualBlockParams(w1, b1, w2, b2, proj))
        d_prev = h

    clf_t = LinearParams(rng.normal(0.0, 0.01, size=(h, 2)), np.zeros(2))
    clf_p = LinearParams(rng.normal(0.0, 0.01, size=(h, 2)), np.zeros(2))
    context = rng.normal(0.0, 0.02, size=(config.n_context, h))
    class_tokens = rng.normal(0.0, 0.02, size=(2, h))
    ffn_w1 = rng.normal(0.0, h ** -0.5, size=(h, h))
    ffn_w2 = rng.normal(0.0, h ** -0.5, size=(h, h))
    return ModelParams(
        config=config,
        blocks=blocks,
        clf_t=clf_t,
        clf_p=clf_p,
        context_tokens=context,
        class_tokens=class_tokens,
        ffn_w1=ffn_w1,
        ffn_b1=np.zeros(h),
        ffn_w2=ffn_w2,
        ffn_b2=np.zeros(h),
    )


def _param_arrays(params: ModelParams) -> list[np.ndarray]:
    """Canonical flattening order. pack/unpack and Adam all share it."""
    arrs: list[np.ndarray] = []
    for blk in params.blocks:
        arrs += [blk.w1, blk.b1, blk.w2, blk.b2]
        if blk.proj is not None:
            arrs.append(blk.proj)
    arrs += [params.clf_t.w, params.clf_t.b, params.clf_p.w, params.clf_p.b]
    arrs += [params.context_tokens, params.class_tokens]
    arrs += [params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2]
    return arrs


def pack_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _param_arrays(params)])


def _layout(config: ModelConfig) -> list[tuple[int, ...]]:
    """Array shapes in pack order for the given config."""
    key = (config.d_in, config.d_hidden, config.n_blocks, config.n_context)
    cached = _layout_cache.get(key)
    if cached is not None:
        return cached
    h = config.d_hidden
    shapes: list[tuple[int, ...]] = []
    d_prev = config.d_in
    for _ in range(config.n_blocks):
        shapes += [(d_prev, h), (h,), (h, h), (h,)]
        if d_prev != h:
            shapes.append((d_prev, h))
        d_prev = h
    shapes += [(h, 2), (2,), (h, 2), (2,)]
    shapes += [(config.n_context, h), (2, h)]
    shapes += [(h, h), (h,), (h, h), (h,)]
    _layout_cache[key] = shapes
    return shapes


_layout_cache: dict[tuple, list[tuple[int, ...]]] = {}


def n_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in _layout(config))


def unpack_params(flat: np.ndarray, config: ModelConfig) -> ModelParams:
    """Inverse of :func:`pack_params` for the given config.

    The returned arrays are views of `flat`; treat them as read-only.
    """
    flat = np.asarray(flat, dtype=np.float64)
    shapes = _layout(config)
    total = sum(int(np.prod(s)) for s in shapes)
    if flat.size != total:
        raise ValueError(f"flat parameter vector has {flat.size} values, expected {total}")
    out_arrays = []
    off = 0
    for shape in shapes:
        n = int(np.prod(shape))
        out_arrays.append(flat[off:off + n].reshape(shape))
        off += n

    it = iter(out_arrays)
    blocks = []
    d_prev = config.d_in
    for _ in range(config.n_blocks):
        w1, b1, w2, b2 = next(it), next(it), next(it), next(it)
        proj = next(it) if d_prev != config.d_hidden else None
        blocks.append(ResidualBlockParams(w1, b1, w2, b2, proj))
        d_prev = config.d_hidden
    clf_t = LinearParams(next(it), next(it))
    clf_p = LinearParams(next(it), next(it))
    context = next(it)
    class_tokens = next(it)
    ffn_w1, ffn_b1, ffn_w2, ffn_b2 = next(it), next(it), next(it), next(it)
    return ModelParams(config, blocks, clf_t, clf_p, context, class_tokens,
                       ffn_w1, ffn_b1, ffn_w2, ffn_b2)


# ---------------------------------------------------------------------------
# Forward

@dataclass
class ForwardTrace:
    """Every intermediate the backward pass needs, for one utterance."""

    x: np.ndarray                      # (T, d_in) input
    block_inputs: list[np.ndarray]     # per block: X_k
    block_hidden_pre: list[np.ndarray]  # per block: X_k W1 + b1
    f_rb: np.ndarray                   # (T, H) residual stack output
    attention: np.ndarray              # (T, H) softmax weights
    f_t: np.ndarray                    # (T, H) attended frame features
    prompt: np.ndarray                 # (H,) pooled prompt embedding
    z: np.ndarray                      # (T, H) F_t * prompt
    ffn_hidden_pre: np.ndarray         # (T, H) Z Wf1 + bf1
    f_p: np.ndarray                    # (T, H) prompt-fused features
    s_t: np.ndarray                    # (T, 2) logits, frame head
    s_p: np.ndarray                    # (T, 2) logits, prompt head


@dataclass
class OutputGrads:
    """Upstream gradients flowing into the model outputs."""

    d_s_t: np.ndarray | None = None
    d_s_p: np.ndarray | None = None
    d_f_t: np.ndarray | None = None
    d_f_p: np.ndarray | None = None


def residual_block_forward(x: np.ndarray, blk: ResidualBlockParams):
    h_pre = x @ blk.w1 + blk.b1
    a = gelu(h_pre)
    out = a @ blk.w2 + blk.b2
    skip = x @ blk.proj if blk.proj is not None else x
    return out + skip, h_pre


def prompt_embedding(params: ModelParams, class_index: int = 1) -> np.ndarray:
    """Mean-pool the context tokens with one class token."""
    tokens = np.vstack([params.context_tokens, params.class_tokens[class_index]])
    return tokens.mean(axis=0)


def model_forward(params: ModelParams, x) -> ForwardTrace:
    cfg = params.config
    x = as_float_matrix(x, name="features")
    if x.shape[1] != cfg.d_in:
        raise ValueError(f"expected {cfg.d_in} features per frame, got {x.shape[1]}")

    block_inputs = []
    block_hidden_pre = []
    cur = x
    for blk in params.blocks:
        block_inputs.append(cur)
        cur, h_pre = residual_block_forward(cur, blk)
        block_hidden_pre.append(h_pre)
    f_rb = cur

    axis = 0 if cfg.attention_axis == "time" else 1
    attention = softmax(f_rb, axis=axis)
    f_t = f_rb * attention

    prompt = prompt_embedding(params, class_index=1)
    z = f_t * prompt
    ffn_hidden_pre = z @ params.ffn_w1 + params.ffn_b1
    f_p = gelu(ffn_hidden_pre) @ params.ffn_w2 + params.ffn_b2 + prompt

    s_t = f_t @ params.clf_t.w + params.clf_t.b
    s_p = f_p @ params.clf_p.w + params.clf_p.b
    return ForwardTrace(
        x=x,
        block_inputs=block_inputs,
        block_hidden_pre=block_hidden_pre,
        f_rb=f_rb,
        attention=attention,
        f_t=f_t,
        prompt=prompt,
        z=z,
        ffn_hidden_pre=ffn_hidden_pre,
        f_p=f_p,
        s_t=s_t,
        s_p=s_p,
    )


# ---------------------------------------------------------------------------
# Backward

def _attention_backward(d_f_t: np.ndarray, f_rb: np.ndarray, attention: np.ndarray,
                        axis: int) -> np.ndarray:
    # F_t = u * a with a = softmax(u) along `axis`
    # dL/du = g*a + h - a * sum(h)   where h = g*u*a, summed along `axis`
    g = d_f_t
    h = g * f_rb * attention
    return g * attention + h - attention * np.sum(h, axis=axis, keepdims=True)


def model_backward(trace: ForwardTrace, params: ModelParams, grads: OutputGrads) -> np.ndarray:
    """Accumulate d(loss)/d(params) as a flat vector in pack order."""
    cfg = params.config
    t_frames, h = trace.f_t.shape

    def zeros_like(a):
        return np.zeros_like(a)

    g_blocks = [
        ResidualBlockParams(
            zeros_like(b.w1), zeros_like(b.b1), zeros_like(b.w2), zeros_like(b.b2),
            zeros_like(b.proj) if b.proj is not None else None,
        )
        for b in params.blocks
    ]
    g_clf_t = LinearParams(zeros_like(params.clf_t.w), zeros_like(params.clf_t.b))
    g_clf_p = LinearParams(zeros_like(params.clf_p.w), zeros_like(params.clf_p.b))
    g_context = zeros_like(params.context_tokens)
    g_class = zeros_like(params.class_tokens)
    g_ffn_w1 = zeros_like(params.ffn_w1)
    g_ffn_b1 = zeros_like(params.ffn_b1)
    g_ffn_w2 = zeros_like(params.ffn_w2)
    g_ffn_b2 = zeros_like(params.ffn_b2)

    d_f_t = np.zeros((t_frames, h))
    d_f_p = np.zeros((t_frames, h))
    if grads.d_f_t is not None:
        d_f_t += grads.d_f_t
    if grads.d_f_p is not None:
        d_f_p += grads.d_f_p

    # classifier heads
    if grads.d_s_t is not None:
        g_clf_t.w += trace.f_t.T @ grads.d_s_t
        g_clf_t.b += grads.d_s_t.sum(axis=0)
        d_f_t += grads.d_s_t @ params.clf_t.w.T
    if grads.d_s_p is not None:
        g_clf_p.w += trace.f_p.T @ grads.d_s_p
        g_clf_p.b += grads.d_s_p.sum(axis=0)
        d_f_p += grads.d_s_p @ params.clf_p.w.T

    # prompt-fusion FFN: F_p = gelu(Z Wf1 + bf1) Wf2 + bf2 + prompt
    d_prompt = d_f_p.sum(axis=0)  # skip connection (prompt broadcast over T)
    a_ffn = gelu(trace.ffn_hidden_pre)
    g_ffn_w2 += a_ffn.T @ d_f_p
    g_ffn_b2 += d_f_p.sum(axis=0)
    d_a_ffn = d_f_p @ params.ffn_w2.T
    d_h_ffn = d_a_ffn * gelu_grad(trace.ffn_hidden_pre)
    g_ffn_w1 += trace.z.T @ d_h_ffn
    g_ffn_b1 += d_h_ffn.sum(axis=0)
    d_z = d_h_ffn @ params.ffn_w1.T

    # Z = F_t * prompt
    d_f_t += d_z * trace.prompt
    d_prompt += (d_z * trace.f_t).sum(axis=0)

    # prompt = mean(context tokens + fake class token)
    n_tok = cfg.n_context + 1
    g_context += d_prompt / n_tok
    g_class[1] += d_prompt / n_tok

    # temporal attention
    axis = 0 if cfg.attention_axis == "time" else 1
    d_f_rb = _attention_backward(d_f_t, trace.f_rb, trace.attention, axis)

    # residual blocks, last to first
    d_cur = d_f_rb
    for k in range(len(params.blocks) - 1, -1, -1):
        blk = params.blocks[k]
        gblk = g_blocks[k]
        x_k = trace.block_inputs[k]
        h_pre = trace.block_hidden_pre[k]
        a = gelu(h_pre)

        gblk.w2 += a.T @ d_cur
        gblk.b2 += d_cur.sum(axis=0)
        d_a = d_cur @ blk.w2.T
        d_h = d_a * gelu_grad(h_pre)
        gblk.w1 += x_k.T @ d_h
        gblk.b1 += d_h.sum(axis=0)
        d_prev = d_h @ blk.w1.T
        if blk.proj is not None:
            gblk.proj += x_k.T @ d_cur
            d_prev += d_cur @ blk.proj.T
        else:
            d_prev += d_cur
        d_cur = d_prev

    g = ModelParams(cfg, g_blocks, g_clf_t, g_clf_p, g_context, g_class,
                    g_ffn_w1, g_ffn_b1, g_ffn_w2, g_ffn_b2)
    return pack_params(g)


# ---------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"LOCOCK01"


def save_checkpoint(path, params: ModelParams, *, seed: int = 0, stage: int = 1,
                    extra: dict | None = None) -> None:
    """Write params to disk: magic, u32 header length, JSON header, f64 payload."""
    flat = pack_params(params)
    header = {
        "d_in": params.config.d_in,
        "d_hidden": params.config.d_hidden,
        "n_blocks": params.config.n_blocks,
        "n_context": params.config.n_context,
        "attention_axis": params.config.attention_axis,
        "n_params": int(flat.size),
        "seed": int(seed),
        "stage": int(stage),
    }
    if extra:
        header.update(extra)
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = CKPT_MAGIC + struct.pack("<I", len(head_bytes)) + head_bytes
    blob += flat.astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:8]!r}")
    (head_len,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + head_len].decode("utf-8"))
    config = ModelConfig(
        d_in=header["d_in"],
        d_hidden=header["d_hidden"],
        n_blocks=header["n_blocks"],
        n_context=header["n_context"],
        attention_axis=header["attention_axis"],
    )
    flat = np.frombuffer(data, dtype="<f8", offset=12 + head_len)
    if flat.size != header["n_params"]:
        raise ValueError(
            f"{path}: payload has {flat.size} params, header says {header['n_params']}"
        )
    return unpack_params(flat, config), header
