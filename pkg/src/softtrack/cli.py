"""Operator surface: dataset generation, prior computation, training,
tracking, pseudo-box generation, evaluation, cost reporting, diagnostics.

Config precedence is defaults < --config JSON < explicit flags. Every
randomized subcommand demands an explicit --seed. Exit codes: 0 success,
1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import figures
from .backbone import DESK_ARCH, init_backbone, load_checkpoint
from .contrastive import ContrastiveConfig
from .data import (
    SyntheticSpec,
    cache_top_maps,
    generate_dataset,
    load_manifest,
    load_top,
    load_training_data,
    load_video_frames,
    points_from_boxes,
)
from .imaging import Image, load_image, save_image
from .top_prior import TopConfig
from .tracker import (
    SchemaConfig,
    TrackerConfig,
    evaluate_on_videos,
    point_vs_box_speedup,
    pseudo_box_from_top,
    pseudo_boxes_schema,
    save_trajectory,
    schema_cost,
    track_video,
)
from .trainer import ABLATION_MODES, TrainConfig, fit


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract wants 1
        raise ValidationError(message)


def dump_top_visual(top: np.ndarray, path: str | Path) -> None:
    """Min-max scale a prior map to 0-255 and write it as a P5 file."""
    lo, hi = float(top.min()), float(top.max())
    if hi > lo:
        scaled = np.rint((top - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full_like(top, 127.0)
    save_image(Image(scaled.astype(np.uint8)), path)


_SUBPARSERS: dict[str, argparse.ArgumentParser] = {}


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    """Overlay file values onto parser defaults, keeping explicit flags on top."""
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a flat JSON object")
    sub = _SUBPARSERS[args.command]
    known = vars(args)
    explicit = {token.split("=")[0] for token in argv if token.startswith("--")}
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if attr not in known:
            raise ValidationError(f"unknown config key {key!r}")
        flag = "--" + attr.replace("_", "-")
        if flag in explicit:
            continue  # command-line flags win over the file
        if known[attr] == sub.get_default(attr):
            setattr(args, attr, value)


def _require_seed(args) -> int:
    if args.seed is None:
        raise ValidationError("this subcommand is randomized: pass an explicit --seed")
    return int(args.seed)


def _require(args, *names: str) -> None:
    """Post-merge presence check, so values may come from the config file."""
    for name in names:
        if getattr(args, name, None) is None:
            raise ValidationError(f"--{name.replace('_', '-')} is required (flag or config)")


def _top_config(args, seed: int) -> TopConfig:
    return TopConfig(
        n_random=args.n_random,
        n_edge=args.n_edge,
        nms_keep=args.nms_keep,
        clip_eta=args.clip_eta,
        rng_seed=seed,
    )


def _add_top_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-random", type=int, default=5000)
    p.add_argument("--n-edge", type=int, default=1000)
    p.add_argument("--nms-keep", type=int, default=64)
    p.add_argument("--clip-eta", type=float, default=0.10)


def _register(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
    _SUBPARSERS[p.prog.split()[-1]] = p
    return p


def build_parser() -> _Parser:
    parser = _Parser(prog="softtrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)

    p = _register(sub.add_parser("gen-data", help="render a synthetic dataset with annotations"))
    common(p)
    p.add_argument("--out", default=None)
    p.add_argument("--videos", type=int, default=64)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--noise-px", type=float, default=0.0, help="annotation shift radius")
    p.add_argument("--distractors", type=int, default=2)
    p.add_argument("--clutter", type=float, default=0.6)
    p.add_argument("--occluder-prob", type=float, default=0.15)

    p = _register(sub.add_parser("top", help="compute and cache objectness prior maps"))
    common(p)
    p.add_argument("--data", default=None, help="manifest.json path")
    p.add_argument("--cache", default=None)
    p.add_argument("--dump", default=None, help="also write P5 heat maps here")
    p.add_argument("--figures", default=None, help="also render PNG overlays here")
    _add_top_flags(p)

    p = _register(sub.add_parser("train", help="train the embedding"))
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--videos-per-batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--ablation", choices=ABLATION_MODES, default="full")
    p.add_argument("--exact-paper-loss", action="store_true",
                   help="single-query loss instead of the symmetrized default")
    p.add_argument("--resume", action="store_true")
    _add_top_flags(p)

    p = _register(sub.add_parser("track", help="track one video with a trained checkpoint"))
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--video", type=int, default=None)
    p.add_argument("--out", default=None, help="JSON-lines trajectory path")

    p = _register(sub.add_parser("pseudo", help="generate pseudo bounding boxes"))
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--mode", choices=("schema", "top"), default="schema")
    p.add_argument("--ckpt", default=None, help="required for schema mode")
    p.add_argument("--T", type=int, default=10, help="sparse-box interval")
    p.add_argument("--video", type=int, default=None, help="restrict to one video id")
    p.add_argument("--cache", default=None, help="prior cache (top mode)")
    p.add_argument("--alpha", type=float, default=0.5, help="prior mass threshold (top mode)")
    _add_top_flags(p)

    p = _register(sub.add_parser("eval", help="track every video from its first box and report metrics"))
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None, help="default: randomly initialized backbone")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--figures", default=None, help="render a precision curve here")

    p = _register(sub.add_parser("cost", help="annotation-cost arithmetic for the labeling schema"))
    p.add_argument("--T", type=int, action="append", default=None,
                   help="snippet length; repeatable")
    p.add_argument("--config", type=str, default=None)

    p = _register(sub.add_parser("grad-check", help="finite-difference oracle over every operator"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=str, default=None)

    p = _register(sub.add_parser("ablate", help="train the four sample-generation configurations"))
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--eval-data", default=None, help="held-out manifest (default: train data)")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--videos-per-batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    _add_top_flags(p)

    return parser


def _cmd_gen_data(args) -> int:
    _require(args, "out")
    seed = _require_seed(args)
    spec = SyntheticSpec(
        n_videos=args.videos,
        frames_per_video=args.frames,
        frame_size=args.size,
        distractors=args.distractors,
        clutter=args.clutter,
        occluder_prob=args.occluder_prob,
        seed=seed,
    )
    manifest = generate_dataset(spec, args.out)
    manifest = points_from_boxes(manifest, args.noise_px, np.random.default_rng([seed, 1]))
    from .data import save_manifest

    save_manifest(manifest, Path(args.out) / "manifest.json")
    print(f"wrote {manifest.frame_count()} frames across {len(manifest.videos)} videos to {args.out}")
    return 0


def _cmd_top(args) -> int:
    _require(args, "data", "cache")
    seed = _require_seed(args)
    manifest = load_manifest(args.data)
    cfg = _top_config(args, seed)
    stats = cache_top_maps(manifest, cfg, args.cache, jobs=args.jobs)
    print(f"prior maps: {stats.computed} computed, {stats.reused} reused")
    if args.dump or args.figures:
        for v in manifest.videos:
            for fid, frame in enumerate(v.frames):
                key = f"v{v.video_id:03d}_f{fid:03d}"
                top = load_top(Path(args.cache) / f"{key}.top")
                if args.dump:
                    Path(args.dump).mkdir(parents=True, exist_ok=True)
                    dump_top_visual(top, Path(args.dump) / f"{key}.pgm")
                if args.figures:
                    Path(args.figures).mkdir(parents=True, exist_ok=True)
                    img = load_image(Path(manifest.root) / frame.path)
                    figures.save_top_heatmap(img.pixels, top, Path(args.figures) / f"{key}.png")
    return 0


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        n_videos=args.videos_per_batch,
        steps=args.steps,
        learning_rate=args.lr,
        seed=seed,
        ablation=getattr(args, "ablation", "full"),
        symmetrize=not getattr(args, "exact_paper_loss", False),
    )


def _cmd_train(args) -> int:
    _require(args, "data", "cache", "out")
    seed = _require_seed(args)
    manifest = load_manifest(args.data)
    data = load_training_data(manifest, args.cache, _top_config(args, seed), jobs=args.jobs)
    cfg = _train_config(args, seed)
    result = fit(data, cfg, args.out, resume=args.resume)
    figures.save_loss_curve(result.metrics, Path(args.out) / "loss.png")
    print(f"final loss {result.final_loss:.4f} after {cfg.steps} steps -> {result.checkpoint}")
    return 0


def _load_params(ckpt: str | None, seed: int = 0):
    if ckpt:
        return load_checkpoint(ckpt, DESK_ARCH)
    return init_backbone(DESK_ARCH, seed=seed, dtype=np.float32)


def _cmd_track(args) -> int:
    _require(args, "data", "ckpt", "video", "out")
    manifest = load_manifest(args.data)
    data = load_video_frames(manifest)
    matches = [v for v in data.videos if v.video_id == args.video]
    if not matches:
        raise ValidationError(f"video id {args.video} not in manifest")
    video = matches[0]
    params = _load_params(args.ckpt)
    traj = track_video(params, video.frames, video.boxes[0])
    save_trajectory(traj, args.out)
    print(f"tracked video {args.video} ({len(traj)} frames) -> {args.out}")
    return 0


def _cmd_pseudo(args) -> int:
    _require(args, "data", "out")
    manifest = load_manifest(args.data)
    out_path = Path(args.out)
    if args.mode == "schema":
        if not args.ckpt:
            raise ValidationError("schema mode needs --ckpt")
        params = _load_params(args.ckpt)
        data = load_video_frames(manifest)
        schema = SchemaConfig(T=args.T)
        with open(out_path, "w") as fp:
            for video in data.videos:
                if args.video is not None and video.video_id != args.video:
                    continue
                sparse = {
                    f: video.boxes[f] for f in range(0, len(video.frames), schema.T)
                }
                boxes = pseudo_boxes_schema(
                    video.frames, video.points, sparse, params, schema
                )
                for b in boxes:
                    fp.write(
                        json.dumps(
                            {
                                "video": video.video_id,
                                "frame": b.frame,
                                "cx": b.cx,
                                "cy": b.cy,
                                "w": b.w,
                                "h": b.h,
                                "corrected": b.corrected,
                            }
                        )
                        + "\n"
                    )
    else:
        if not args.cache:
            raise ValidationError("top mode needs --cache with computed prior maps")
        with open(out_path, "w") as fp:
            for v in manifest.videos:
                if args.video is not None and v.video_id != args.video:
                    continue
                for fid, frame in enumerate(v.frames):
                    top = load_top(Path(args.cache) / f"v{v.video_id:03d}_f{fid:03d}.top")
                    img_size = load_image(Path(manifest.root) / frame.path)
                    box = pseudo_box_from_top(top, args.alpha, (img_size.width, img_size.height))
                    fp.write(
                        json.dumps(
                            {"video": v.video_id, "frame": fid, "cx": box[0], "cy": box[1],
                             "w": box[2], "h": box[3]}
                        )
                        + "\n"
                    )
    print(f"pseudo boxes -> {out_path}")
    return 0


def _cmd_eval(args) -> int:
    _require(args, "data", "out")
    manifest = load_manifest(args.data)
    data = load_video_frames(manifest)
    params = _load_params(args.ckpt, seed=args.seed or 0)
    metrics, errors = evaluate_on_videos(params, data.videos)
    Path(args.out).write_text(json.dumps(metrics, indent=1, sort_keys=True))
    if args.figures:
        Path(args.figures).mkdir(parents=True, exist_ok=True)
        figures.save_precision_curve(errors, Path(args.figures) / "precision_curve.png")
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def _cmd_cost(args) -> int:
    ts = args.T if args.T else [10]
    print("T,cost_s")
    for t in ts:
        print(f"{t},{schema_cost(SchemaConfig(T=t)):.2f}")
    print(f"point-vs-box speedup: {point_vs_box_speedup():.1f}x")
    return 0


def _cmd_grad_check(args) -> int:
    from .autodiff import standard_grad_check_suite

    reports = standard_grad_check_suite(seed=args.seed)
    worst = max(reports, key=lambda r: r.max_rel_err)
    for r in reports:
        print(r)
    print(f"worst: {worst}")
    return 0 if worst.max_rel_err < 1e-4 else 2


def _cmd_ablate(args) -> int:
    _require(args, "data", "cache", "out")
    seed = _require_seed(args)
    manifest = load_manifest(args.data)
    data = load_training_data(manifest, args.cache, _top_config(args, seed), jobs=args.jobs)
    eval_manifest = load_manifest(args.eval_data) if args.eval_data else manifest
    eval_videos = load_video_frames(eval_manifest).videos
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    enabled = {
        "gst_only": (1, 0, 0, 0),
        "sns": (1, 1, 0, 0),
        "sns_mixup": (1, 1, 1, 0),
        "full": (1, 1, 1, 1),
    }
    rows = []
    for mode in ABLATION_MODES:
        cfg = TrainConfig(
            n_videos=args.videos_per_batch,
            steps=args.steps,
            learning_rate=args.lr,
            seed=seed,
            ablation=mode,
        )
        result = fit(data, cfg, out_dir / mode)
        params = load_checkpoint(result.checkpoint, DESK_ARCH)
        metrics, _ = evaluate_on_videos(params, eval_videos)
        g, s, m, l = enabled[mode]
        rows.append(
            {
                "mode": mode,
                "gst": g,
                "sns": s,
                "mixup": m,
                "lst": l,
                "final_loss": f"{result.final_loss:.4f}",
                "precision@10": f"{metrics['precision@10']:.4f}",
                "precision@20": f"{metrics['precision@20']:.4f}",
                "success_auc": f"{metrics['success_auc']:.4f}",
            }
        )
        print(f"{mode}: precision@10={metrics['precision@10']:.3f}")

    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    figures.save_ablation_chart(rows, out_dir / "ablation.png")
    print(f"comparison -> {csv_path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "top": _cmd_top,
    "train": _cmd_train,
    "track": _cmd_track,
    "pseudo": _cmd_pseudo,
    "eval": _cmd_eval,
    "cost": _cmd_cost,
    "grad-check": _cmd_grad_check,
    "ablate": _cmd_ablate,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            print("softtrack: a subcommand is required", file=sys.stderr)
            return 1
        _apply_config_file(args, argv)
        return _COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"softtrack: invalid invocation: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures map to a distinct exit code
        print(f"softtrack: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
