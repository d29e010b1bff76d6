"""Command-line entry point: data generation, training, evaluation, inference, GRPO, plots."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import config as config_mod
from .backbone import BackboneConfig, VLAModel
from .evaluate import (
    controllability,
    fan_out,
    frame_report,
    late_frame_accuracy,
    predict_frames,
    resolve_intents,
    run_streams,
    stitched_ground_truth,
    stream_sequence_ade,
)
from .grpo import GrpoTrainer, moving_average
from .layout import MODES
from .metrics import ade
from .scenario import IntentVocabulary, generate_dataset, read_jsonl, write_jsonl
from .se2 import AlignmentError, stitch_chain
from .svg import GT_COLOR, PALETTE, write_svg
from .train import TEMPORAL, DataContext, SFTTrainer, StreamTrainer

log = logging.getLogger("deskvla")


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stamp(run_dir: Path, cfg, extra: dict | None = None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, run_dir / "config.resolved.json")
    _json(run_dir / "version.json", {"package": "deskvla", "version": __version__, **(extra or {})})


def _vocab(cfg) -> IntentVocabulary:
    return IntentVocabulary.named(cfg.data.vocabulary)


def _datasets(cfg, run_dir: Path):
    vocab = _vocab(cfg)
    data = run_dir / "data"
    train_p, eval_p = data / "train.jsonl", data / "eval.jsonl"
    if train_p.exists() and eval_p.exists():
        return list(read_jsonl(train_p)), list(read_jsonl(eval_p))
    kin = cfg.data.kinematics
    train = generate_dataset(cfg.data.train_scenarios, cfg.seed * 2 + 1, kin, vocab)
    test = generate_dataset(cfg.data.eval_scenarios, cfg.seed * 2 + 2, kin, vocab)
    return train, test


def _streams(cfg, split: str):
    vocab = _vocab(cfg)
    sc = cfg.stream
    n, frames, seed = (
        (sc.train_streams, sc.train_frames, cfg.seed * 2 + 11) if split == "train"
        else (sc.eval_streams, sc.eval_frames, cfg.seed * 2 + 12)
    )
    return generate_dataset(n, seed, replace(sc.kinematics, n_frames=frames), vocab)


def _save_model(model: VLAModel, run_dir: Path, name: str, meta: dict) -> None:
    checkpoint.save(run_dir / f"{name}.bin", model.state_dict())
    _json(run_dir / f"{name}.meta.json", {"backbone": model.cfg.to_dict(), **meta})


def _load_model(run_dir: Path, name: str = "model") -> tuple[VLAModel, dict]:
    meta_p = run_dir / f"{name}.meta.json"
    if not meta_p.exists():
        raise UsageError(f"no checkpoint {name!r} in {run_dir}; run `train` first")
    meta = json.loads(meta_p.read_text())
    model = VLAModel(BackboneConfig.from_dict(meta["backbone"]))
    model.load_state_dict(checkpoint.load(run_dir / f"{name}.bin"))
    return model, meta


def _backbone(cfg, args, base: BackboneConfig) -> BackboneConfig:
    over = {"n_intents": len(_vocab(cfg))}
    if getattr(args, "backbone", None):
        over["backbone"] = args.backbone
    if getattr(args, "grouping", None):
        over["grouping"] = args.grouping
    return replace(base, **over)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    run_dir = Path(args.run_dir or cfg.run_dir)
    train, test = _datasets(cfg, Path("/nonexistent") if args.fresh else run_dir)
    data = run_dir / "data"
    data.mkdir(parents=True, exist_ok=True)
    write_jsonl(data / "train.jsonl", train)
    write_jsonl(data / "eval.jsonl", test)
    _stamp(run_dir, cfg)
    print(f"wrote {len(train)} train / {len(test)} eval scenarios to {data}")
    return 0


def cmd_train(args, cfg) -> int:
    run_dir = Path(args.run_dir or cfg.run_dir)
    _stamp(run_dir, cfg)
    ctx = DataContext.for_vocab(_vocab(cfg))
    t0 = time.perf_counter()
    if args.temporal is None:
        bcfg = _backbone(cfg, args, cfg.backbone)
        train, _ = _datasets(cfg, run_dir)
        model = VLAModel(bcfg, seed=cfg.seed)
        frames = [f for s in train for f in s.frames]
        tcfg = replace(cfg.train, seed=cfg.seed)
        SFTTrainer(model, frames, ctx, tcfg, cfg.guidance, log_path=run_dir / "train_log.csv").run()
        name, meta = "model", {"temporal": None}
    else:
        bcfg = _backbone(cfg, args, cfg.stream.backbone)
        streams = _streams(cfg, "train")
        model = VLAModel(bcfg, seed=cfg.seed)
        steps = cfg.stream.iterations * -(-cfg.stream.train_frames // cfg.train.window)
        tcfg = replace(cfg.train, seed=cfg.seed, temporal=args.temporal, steps=steps, topics=cfg.stream.topics,
                       batch_size=cfg.stream.batch_size, warmup=min(cfg.train.warmup, steps // 5))
        log_path = run_dir / f"train_log-{args.temporal}.csv"
        StreamTrainer(model, streams, ctx, tcfg, cfg.guidance, log_path=log_path).run(cfg.stream.iterations)
        name, meta = f"model-{args.temporal}", {"temporal": args.temporal}
    _save_model(model, run_dir, name, meta)
    _json(run_dir / f"timing-{name}.json", {"train_seconds": time.perf_counter() - t0})
    print(f"saved {run_dir / name}.bin")
    return 0


def cmd_eval(args, cfg) -> int:
    run_dir = Path(args.run_dir or cfg.run_dir)
    model, _ = _load_model(run_dir)
    ctx = DataContext.for_vocab(_vocab(cfg))
    _, test = _datasets(cfg, run_dir)
    frames = [f for s in test for f in s.frames]
    steps = cfg.flow.steps
    intents = resolve_intents(model, ctx, frames, args.intent_source)
    scale = cfg.guidance.scale
    preds = predict_frames(model, ctx, frames, "action_only", intents, scale, steps, cfg.seed)
    report = frame_report(preds, frames, ctx.vocab.names, intents, cfg.metrics)
    report["intent_source"] = args.intent_source
    report["flow_steps"] = steps
    fine = predict_frames(model, ctx, frames, "action_only", intents, scale, cfg.flow.compare_steps, cfg.seed)
    report["ade_5s_by_steps"] = {
        str(steps): float(np.mean([ade(p, f.gt_future, 5.0) for p, f in zip(preds, frames)])),
        str(cfg.flow.compare_steps): float(np.mean([ade(p, f.gt_future, 5.0) for p, f in zip(fine, frames)])),
    }
    if set(ctx.vocab.names) >= {"left", "right"}:
        c = controllability(model, ctx, frames, scale, steps, cfg.seed)
        report["controllability_flip_rate"] = c["flip_rate"]
    _json(run_dir / "metrics.json", report)
    print(json.dumps({k: report[k] for k in ("rfs_mean", "ade", "trust_region_rate")}, indent=2))
    return 0


def cmd_stream(args, cfg) -> int:
    run_dir = Path(args.run_dir or cfg.run_dir)
    ctx = DataContext.for_vocab(_vocab(cfg))
    streams = _streams(cfg, "eval")
    kin = cfg.stream.kinematics
    report = {}
    for temporal in args.temporal or TEMPORAL:
        try:
            model, _ = _load_model(run_dir, f"model-{temporal}")
        except UsageError:
            continue
        use_memory = temporal == "stream+memory"
        stride = cfg.stream.chunk_stride if temporal == "chunk" else 1
        trace = run_streams(model, ctx, streams, use_memory, cfg.guidance.scale, cfg.flow.steps, cfg.seed, stride)
        seq = stream_sequence_ade(trace, streams, stride)
        report[temporal] = {
            "sequence_ade": {f"{h:g}s": v for h, v in seq.items()},
            "late_frame_intent_accuracy": late_frame_accuracy(trace, streams, kin.episode_frames, kin.cue_frames),
            "stride": stride,
        }
        with open(run_dir / f"stream_trace-{temporal}.jsonl", "w") as fh:
            for k, (pred, intent, n) in enumerate(zip(trace.predictions, trace.intents, trace.channel_len)):
                rec = {"frame": k, "intent": [ctx.vocab.names[i] for i in intent], "channel_length": n,
                       "waypoints": None if pred is None else np.round(pred[0, :, :2], 6).tolist()}
                fh.write(json.dumps(rec) + "\n")
    if not report:
        raise UsageError(f"no streaming checkpoints in {run_dir}; run `train --temporal ...` first")
    _json(run_dir / "stream_report.json", report)
    print(json.dumps(report, indent=2))
    return 0


def cmd_infer(args, cfg) -> int:
    run_dir = Path(args.run_dir or cfg.run_dir)
    model, meta = _load_model(run_dir)
    ctx = DataContext.for_vocab(_vocab(cfg))
    if args.intent is not None and args.intent not in ctx.vocab.names:
        raise UsageError(f"--intent {args.intent!r} is not in the vocabulary {list(ctx.vocab.names)}")
    _, test = _datasets(cfg, run_dir)
    if not (0 <= args.scenario < len(test)) or not (0 <= args.frame < len(test[args.scenario].frames)):
        raise UsageError("--scenario/--frame index out of range")
    frame = test[args.scenario].frames[args.frame]
    batch = ctx.batch([frame])
    intents = None if args.intent is None else np.array([ctx.vocab.index(args.intent)])
    scale = args.cfg_scale if intents is not None else None
    res = model.sample(batch, args.mode, intents, scale, args.steps or cfg.flow.steps, seed=args.seed)
    out = Path(args.out or run_dir / "infer")
    out.mkdir(parents=True, exist_ok=True)
    traj = ctx.codec.decode(res.x)[0]
    _trajectory_csv(out / "trajectory.csv", traj)
    for k, snap in enumerate(res.snapshots):
        _trajectory_csv(out / f"snapshot_{k + 1:02d}.csv", ctx.codec.decode(snap)[0])
    print(f"wrote {out / 'trajectory.csv'} and {len(res.snapshots)} snapshots")
    return 0


def _trajectory_csv(path: Path, traj: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["waypoint", "x", "y", "vx", "vy", "ax", "ay"])
        for i, row in enumerate(traj):
            w.writerow([i + 1] + [repr(float(v)) for v in row])


def cmd_grpo(args, cfg) -> int:
    run_dir = Path(args.run_dir or cfg.run_dir)
    model, meta = _load_model(run_dir)
    reference = model.clone()
    ctx = DataContext.for_vocab(_vocab(cfg))
    scen = generate_dataset(cfg.grpo_scenarios, cfg.seed * 2 + 21, cfg.data.kinematics, ctx.vocab)
    frames = [s.frames[-1] for s in scen]
    gcfg = replace(cfg.grpo, seed=cfg.seed, iterations=args.iterations or cfg.grpo.iterations)
    hist = GrpoTrainer(model, reference, ctx, frames, gcfg, cfg.metrics, log_path=run_dir / "grpo_log.csv").run()
    ma = moving_average([h.mean_reward for h in hist])
    _save_model(model, run_dir, "model-grpo", {**meta, "grpo": True})
    report = {
        "iterations": len(hist),
        "first_reward": hist[0].mean_reward,
        "last_reward": hist[-1].mean_reward,
        "moving_average_non_decreasing": bool(np.all(np.diff(ma) >= 0)),
        "final_trust_region_rate": hist[-1].trust_region_rate,
    }
    _json(run_dir / "grpo_report.json", report)
    print(json.dumps(report, indent=2))
    return 0


def cmd_plot(args, cfg) -> int:
    run_dir = Path(args.run_dir or cfg.run_dir)
    model, _ = _load_model(run_dir)
    ctx = DataContext.for_vocab(_vocab(cfg))
    _, test = _datasets(cfg, run_dir)
    frame = test[args.scenario].frames[args.frame]
    plots = run_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    fan = fan_out(model, ctx, frame, cfg.guidance.scale, cfg.flow.steps, cfg.seed)
    for k, name in enumerate(ctx.vocab.names):
        write_svg(plots / f"intent_{name}.svg",
                  [("ground truth", frame.gt_future, GT_COLOR), (name, fan[k], PALETTE[k % len(PALETTE)])],
                  f"intent-conditioned plan: {name}")
    res = model.sample(ctx.batch([frame]), "action_only", np.array([frame.intent]), cfg.guidance.scale,
                       cfg.flow.steps, seed=cfg.seed)
    for k, snap in enumerate(res.snapshots):
        write_svg(plots / f"denoise_step_{k + 1:02d}.svg",
                  [("ground truth", frame.gt_future, GT_COLOR), (f"t={res.times[k]:.2f}", ctx.codec.decode(snap)[0],
                                                                  PALETTE[0])],
                  f"denoising step {k + 1}/{len(res.snapshots)}")
    stream = _streams(cfg, "eval")[0]
    pts, _ = stitched_ground_truth(stream)
    write_svg(plots / "stitched_chain.svg", [("stitched GT", pts, GT_COLOR)], "stitched clip chain")
    print(f"wrote plots to {plots}")
    return 0


def cmd_stitch(args, cfg) -> int:
    clips, overlaps = [], []
    with open(args.input) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                clips.append(np.asarray(rec["points"], dtype=float))
                overlaps.append(int(rec.get("overlap_next", 0)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise UsageError(f"{args.input}:{lineno}: bad clip record ({exc})") from None
    try:
        res = stitch_chain(clips, overlaps[:-1])
    except AlignmentError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "global.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "clip", "x", "y"])
        for i, (c, p) in enumerate(zip(res.clip_index, res.points)):
            w.writerow([i, int(c), repr(float(p[0])), repr(float(p[1]))])
    _json(out / "residuals.json", res.residual_report())
    write_svg(out / "chain.svg", [("stitched", res.points, PALETTE[0])], "stitched chain")
    print(f"stitched {len(clips)} clips into {len(res.points)} points")
    return 0


def cmd_all(args, cfg) -> int:
    for sub in (["gen-data"], ["train"], ["eval"], ["plot"], ["train", "--temporal", "chunk"],
                ["train", "--temporal", "stream"], ["train", "--temporal", "stream+memory"], ["stream"], ["grpo"]):
        rc = main(["--config", args.config_path] + sub + (["--run-dir", args.run_dir] if args.run_dir else []))
        if rc:
            return rc
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskvla", description=__doc__)
    p.add_argument("--config", default=None, help="run config JSON (default: bundled desk config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--run-dir", default=None)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate train/eval scenario JSONL")
    sp.add_argument("--fresh", action="store_true", help="regenerate even if files exist")
    sp = add("train", cmd_train, "supervised training")
    sp.add_argument("--temporal", choices=TEMPORAL, default=None,
                    help="streaming regime on the history-dependent family (default: framewise SFT)")
    sp.add_argument("--backbone", choices=("dense", "mot"), default=None)
    sp.add_argument("--grouping", choices=("context-action", "context-proprio-action"), default=None)
    sp = add("eval", cmd_eval, "framewise metric report")
    sp.add_argument("--intent-source", choices=("gt", "trajectory", "ntp", "none"), default="gt")
    sp = add("stream", cmd_stream, "long-horizon streaming trace and sequence ADE")
    sp.add_argument("--temporal", choices=TEMPORAL, action="append")
    sp = add("infer", cmd_infer, "single-frame inference with denoising snapshots")
    sp.add_argument("--mode", choices=sorted(MODES), default="action_only")
    sp.add_argument("--intent", default=None)
    sp.add_argument("--cfg-scale", type=float, default=1.5)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scenario", type=int, default=0)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp = add("grpo", cmd_grpo, "GRPO post-training from the SFT checkpoint")
    sp.add_argument("--iterations", type=int, default=None)
    sp = add("plot", cmd_plot, "SVG plots: intent fan-out, denoising steps, stitched chain")
    sp.add_argument("--scenario", type=int, default=0)
    sp.add_argument("--frame", type=int, default=0)
    sp = add("stitch", cmd_stitch, "stitch a multi-clip JSONL into one global trajectory")
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    add("all", cmd_all, "run the whole desk pipeline")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.config_path = args.config or str(config_mod.bundled())
    try:
        cfg = config_mod.load(args.config_path)
        return args.fn(args, cfg)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"deskvla: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
