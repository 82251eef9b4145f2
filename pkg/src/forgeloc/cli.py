"""Command-line interface.

Subcommands: synth, train, localize, eval, dump-embeddings.
Exit codes: 0 success, 1 runtime failure (bad files, bad data), 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .features import (
    DatasetManifest,
    SynthConfig,
    load_manifest,
    segments_to_frame_labels,
    synth_dataset,
)
from .localize import (
    ForgeryActivation,
    activation_from_params,
    generate_proposals,
    load_proposals_jsonl,
    save_proposals_jsonl,
)
from .metrics import build_report, mean_ap
from .model import load_checkpoint, model_forward
from .trainer import TrainConfig, train_stage1, train_stage2


def _map_parallel(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# synth

def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic dataset split")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="train")
    defaults = SynthConfig()
    p.add_argument("--n", "--n-utterances", dest="n_utterances", type=int,
                   default=defaults.n_utterances)
    p.add_argument("--t-min", type=int, default=defaults.t_range[0])
    p.add_argument("--t-max", type=int, default=defaults.t_range[1])
    p.add_argument("--feat-dim", type=int, default=defaults.feat_dim)
    p.add_argument("--fps", type=int, default=defaults.fps)
    p.add_argument("--forgery-prob", type=float, default=defaults.forgery_prob)
    p.add_argument("--class-shift", type=float, default=defaults.class_shift)
    p.add_argument("--boundary-blur", type=int, default=defaults.boundary_blur)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.set_defaults(func=_cmd_synth)


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_utterances=args.n_utterances,
        t_range=(args.t_min, args.t_max),
        feat_dim=args.feat_dim,
        fps=args.fps,
        forgery_prob=args.forgery_prob,
        class_shift=args.class_shift,
        boundary_blur=args.boundary_blur,
        seed=args.seed,
    )
    manifest = synth_dataset(cfg, args.out, split=args.split)
    print(f"wrote {len(manifest)} utterances to {args.out} "
          f"(manifest {Path(args.out) / (args.split + '.json')})")
    return 0


# ---------------------------------------------------------------------------
# train

def _add_train(sub):
    p = sub.add_parser("train", help="train stage 1 or stage 2")
    p.add_argument("--train", required=True, help="training manifest JSON")
    p.add_argument("--val", help="validation manifest JSON (enables model selection)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--base-ckpt", help="stage-1 checkpoint to resume from (stage 2)")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    # explicit overrides; None means "not given"
    p.add_argument("--steps", type=int, default=None, help="stage-1 update steps")
    p.add_argument("--epochs", type=int, default=None, help="stage-2 epochs")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kl-mode", choices=("as_written", "aligning"), default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--theta", type=float, default=None, help="pseudo-label threshold")
    p.add_argument("--eval-every", type=int, default=None)
    p.set_defaults(func=_cmd_train)


def _train_config_from_args(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_json(Path(args.config).read_text())
    else:
        cfg = TrainConfig()
    overrides = {
        "stage1_steps": args.steps,
        "stage2_epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "seed": args.seed,
        "kl_mode": args.kl_mode,
        "hidden_dim": args.hidden_dim,
        "pseudo_theta": args.theta,
        "eval_every": args.eval_every,
    }
    updates = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **updates)


def _cmd_train(args, parser=None) -> int:
    if args.stage == 2 and not args.base_ckpt:
        parser.error("--stage 2 requires --base-ckpt")
    cfg = _train_config_from_args(args)
    train_manifest = load_manifest(args.train)
    val_manifest = load_manifest(args.val) if args.val else None

    if args.stage == 1:
        result = train_stage1(train_manifest, cfg, val_data=val_manifest, out_dir=args.out)
        tag = "stage1"
    else:
        base_params, _ = load_checkpoint(args.base_ckpt)
        result = train_stage2(base_params, train_manifest, cfg,
                              val_data=val_manifest, out_dir=args.out)
        tag = "stage2"
    print(f"{tag}: {len(result.history)} steps, checkpoint {Path(args.out) / (tag + '.ckpt')}")
    if val_manifest is not None and result.best_step >= 0:
        kind = "step" if args.stage == 1 else "epoch"
        print(f"{tag}: selected {kind} {result.best_step} "
              f"(val metric {result.best_val_metric:.4f})")
    return 0


# ---------------------------------------------------------------------------
# localize

def _add_localize(sub):
    p = sub.add_parser("localize", help="emit proposals and frame scores for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-proposals", required=True, help="output JSONL path")
    p.add_argument("--out-scores", help="optional per-frame score CSV (id,frame,score)")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--fuse-weight", type=float, default=0.9)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_localize)


def _activations_for_manifest(params, manifest: DatasetManifest, fuse_weight: float,
                              threads: int):
    def run(entry):
        seq = manifest.load_sequence(entry)
        return seq.id, activation_from_params(params, seq.feats, seq.fps, fuse_weight)

    return dict(_map_parallel(run, manifest.entries, threads))


def _cmd_localize(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    acts = _activations_for_manifest(params, manifest, args.fuse_weight, args.threads)
    props = {utt_id: generate_proposals(act, args.theta) for utt_id, act in acts.items()}
    save_proposals_jsonl(args.out_proposals, props)
    print(f"wrote proposals for {len(props)} utterances to {args.out_proposals}")
    if args.out_scores:
        _write_scores_csv(args.out_scores, acts)
        print(f"wrote frame scores to {args.out_scores}")
    return 0


def _write_scores_csv(path, activations: dict[str, ForgeryActivation]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["id", "frame", "score"])
    for utt_id in sorted(activations):
        for t, v in enumerate(activations[utt_id].probs):
            writer.writerow([utt_id, t, f"{v:.10g}"])
    Path(path).write_text(buf.getvalue())


def _read_scores_csv(path) -> dict[str, np.ndarray]:
    rows: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "frame", "score"]:
            raise ValueError(f"{path}: expected header id,frame,score")
        for rec in reader:
            if not rec:
                continue
            rows.setdefault(rec[0], []).append((int(rec[1]), float(rec[2])))
    out = {}
    for utt_id, pairs in rows.items():
        pairs.sort()
        frames = [f for f, _ in pairs]
        if frames != list(range(len(frames))):
            raise ValueError(f"{path}: frames for {utt_id!r} are not contiguous from 0")
        out[utt_id] = np.array([v for _, v in pairs])
    return out


# ---------------------------------------------------------------------------
# eval

def _add_eval(sub):
    p = sub.add_parser("eval", help="score proposals and frame scores against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--proposals", required=True, help="proposals JSONL from `localize`")
    p.add_argument("--scores", required=True, help="frame score CSV from `localize`")
    p.add_argument("--out", help="write the report as JSON here (default: stdout)")
    p.add_argument("--csv", help="also write the report as CSV here")
    p.add_argument("--sweep-theta", help="comma-separated thresholds to re-propose at")
    p.add_argument("--sweep-out", help="CSV for the sweep (columns theta,map)")
    p.set_defaults(func=_cmd_eval)


def _check_ids(kind: str, got, expected) -> None:
    missing = sorted(set(expected) - set(got))
    if missing:
        raise ValueError(f"{kind} is missing ids: {missing[:10]}")


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    proposals = load_proposals_jsonl(args.proposals)
    scores = _read_scores_csv(args.scores)

    ids = [e.id for e in manifest.entries]
    _check_ids("proposals file", proposals, ids)
    _check_ids("scores file", scores, ids)

    labels = {}
    gt = {}
    fps_by_id = {}
    for e in manifest.entries:
        if scores[e.id].size != e.n_frames:
            raise ValueError(f"{e.id}: scores cover {scores[e.id].size} frames, "
                             f"manifest says {e.n_frames}")
        labels[e.id] = segments_to_frame_labels(e.gt_segments, e.n_frames, e.fps)
        gt[e.id] = list(e.gt_segments)
        fps_by_id[e.id] = e.fps

    report = build_report(
        {i: scores[i] for i in ids},
        labels,
        {i: proposals[i] for i in ids},
        gt,
    )
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        print(f"wrote report to {args.out}")
    else:
        print(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())

    if args.sweep_theta:
        thetas = [float(v) for v in args.sweep_theta.split(",") if v.strip()]
        rows = ["theta,map"]
        for theta in thetas:
            props = {
                i: generate_proposals(ForgeryActivation(scores[i], fps_by_id[i]), theta)
                for i in ids
            }
            value, _ = mean_ap(props, gt)
            rows.append(f"{theta:g},{value:.10g}")
        text = "\n".join(rows) + "\n"
        if args.sweep_out:
            Path(args.sweep_out).write_text(text)
            print(f"wrote threshold sweep to {args.sweep_out}")
        else:
            print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# dump-embeddings

def _add_dump(sub):
    p = sub.add_parser("dump-embeddings",
                       help="dump attended frame embeddings with true and pseudo labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--fuse-weight", type=float, default=0.9)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_dump)


def _cmd_dump(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)

    def run(entry):
        seq = manifest.load_sequence(entry)
        trace = model_forward(params, seq.feats)
        act = activation_from_params(params, seq.feats, seq.fps, args.fuse_weight)
        pseudo = (act.probs >= args.theta).astype(int)
        true = segments_to_frame_labels(seq.gt_segments, seq.n_frames, seq.fps)
        return seq.id, trace.f_t, true, pseudo

    results = _map_parallel(run, manifest.entries, args.threads)
    h = params.config.d_hidden
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["id", "frame", "true_label", "pseudo_label"] + [f"f{i}" for i in range(h)])
    for utt_id, f_t, true, pseudo in results:
        for t in range(f_t.shape[0]):
            writer.writerow([utt_id, t, int(true[t]), int(pseudo[t])]
                            + [f"{v:.6g}" for v in f_t[t]])
    Path(args.out).write_text(buf.getvalue())
    print(f"wrote embeddings for {len(results)} utterances to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgeloc",
        description="Weakly-supervised temporal forgery localization",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_train(sub)
    _add_localize(sub)
    _add_eval(sub)
    _add_dump(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.func is _cmd_train:
            return args.func(args, parser)
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
