"""Command-line entry points: segment, eval, synth, viz."""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .flow_io import (FlowVolume, flow_to_hsv, read_flo, resample_volume,
                      volume_max_magnitude, write_flo, FlowIOError)
from .evaluation import (boundary_f, bootstrap_iou, davis_aggregate, jaccard,
                         hungarian_sequence_match, linear_assignment_score,
                         select_foreground_subset)
from .segmenter import (SegmenterConfig, background_label, hard_labels, segment)
from .synthgen import generate, parse_scene_spec, write_scene_spec

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_BAD_CONFIG = 3

# fixed label palette so colors stay stable across frames and videos
_PALETTE = [
    (0, 0, 0), (230, 60, 50), (60, 120, 230), (250, 160, 30),
    (60, 180, 90), (170, 80, 200), (240, 220, 60), (100, 220, 220),
    (240, 130, 180), (140, 90, 40), (180, 180, 180), (20, 80, 30),
]


def _palette_bytes():
    flat = []
    for i in range(256):
        flat.extend(_PALETTE[i % len(_PALETTE)] if i < len(_PALETTE) else (0, 0, 0))
    return bytes(flat)


def write_label_png(labels: np.ndarray, path: Path) -> None:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(_palette_bytes())
    img.save(path)


def read_label_png(path: Path) -> np.ndarray:
    return np.array(Image.open(path).convert("P"), dtype=np.int64)


def _load_volume(directory: Path) -> FlowVolume:
    paths = sorted(directory.glob("*.flo"))
    if len(paths) < 2:
        raise FlowIOError(f"{directory}: need at least two .flo files")
    return FlowVolume([read_flo(p) for p in paths])


def _upsample_labels(labels: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    # nearest-neighbor: labels are categorical
    h, w = labels.shape
    ys = np.clip(np.round(np.linspace(0, h - 1, new_h)).astype(int), 0, h - 1) \
        if new_h > 1 else np.array([(h - 1) // 2])
    xs = np.clip(np.round(np.linspace(0, w - 1, new_w)).astype(int), 0, w - 1) \
        if new_w > 1 else np.array([(w - 1) // 2])
    return labels[np.ix_(ys, xs)]


def _video_dirs(root: Path):
    """The input is a video dir of .flo files, or a dir of such dirs."""
    if any(root.glob("*.flo")):
        return [root]
    subs = sorted(d for d in root.iterdir() if d.is_dir() and any(d.glob("*.flo")))
    return subs


def _build_config(args) -> SegmenterConfig:
    return SegmenterConfig(
        num_segments=args.k, nu=args.nu, degree=args.degree, gamma=args.gamma,
        eta=args.eta, outer_iters=args.iters, seed=args.seed, init=args.init,
        loss_variant=args.loss_variant, model_family=args.model_family)


def _write_manifest(path: Path, args, config: SegmenterConfig) -> None:
    with open(path, "w") as fh:
        fh.write(f"tool_version={__version__}\n")
        for key, value in sorted(vars(args).items()):
            if key == "func":
                continue
            fh.write(f"arg.{key}={value}\n")
        for key, value in sorted(asdict(config).items()):
            fh.write(f"config.{key}={value}\n")


def _segment_one(video_dir: Path, out_dir: Path, args, config: SegmenterConfig) -> None:
    volume = _load_volume(video_dir)
    orig_w, orig_h = volume.width, volume.height
    working = resample_volume(volume, args.width, args.height)
    result = segment(working, config)
    labels = hard_labels(result.soft)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in range(labels.shape[0]):
        up = _upsample_labels(labels[t], orig_w, orig_h)
        write_label_png(up, out_dir / f"{t:05d}.png")
    with open(out_dir / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "L_r", "L_c", "total"])
        for i, b in enumerate(result.trace):
            writer.writerow([i, repr(b.reconstruction), repr(b.consistency),
                             repr(b.total)])
    _write_manifest(out_dir / "manifest.txt", args, config)


def cmd_segment(args) -> int:
    try:
        config = _build_config(args)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    root = Path(args.input)
    out_root = Path(args.output)
    if not root.is_dir():
        print(f"input directory not found: {root}", file=sys.stderr)
        return EXIT_BAD_INPUT
    videos = _video_dirs(root)
    if not videos:
        print(f"no .flo files under {root}", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        if len(videos) == 1 and videos[0] == root:
            _segment_one(root, out_root, args, config)
        else:
            with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
                futures = [pool.submit(_segment_one, v, out_root / v.name, args, config)
                           for v in videos]
                for f in futures:
                    f.result()
    except FlowIOError as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return EXIT_OK


def _label_sequences(pred_dir: Path, gt_dir: Path):
    preds = sorted(pred_dir.glob("*.png"))
    if not preds:
        raise ValueError(f"no predictions in {pred_dir}")
    pred_frames, gt_frames = [], []
    for p in preds:
        pred_frames.append(read_label_png(p))
        gpath = gt_dir / p.name
        gt_frames.append(read_label_png(gpath) if gpath.exists() else None)
    if all(g is None for g in gt_frames):
        raise ValueError(f"no ground truth for {pred_dir.name} in {gt_dir}")
    return pred_frames, gt_frames


def _eval_video(pred_dir: Path, gt_dir: Path, mode: str):
    pred_frames, gt_frames = _label_sequences(pred_dir, gt_dir)
    if mode in ("binary", "binary-select"):
        if mode == "binary":
            stack = np.stack(pred_frames)
            bg = background_label(stack)
            binary = [p != bg for p in pred_frames]
        else:
            _, binary = select_foreground_subset(pred_frames, gt_frames)
        js, fs = [], []
        for b, g in zip(binary, gt_frames):
            if g is None:
                continue
            js.append(jaccard(b, g > 0))
            fs.append(boundary_f(b, g > 0))
        jrep = davis_aggregate(js, "J")
        frep = davis_aggregate(fs, "F")
        return {"J(M)": jrep.mean, "J(O)": jrep.recall, "J(D)": jrep.decay,
                "F(M)": frep.mean, "F(O)": frep.recall, "F(D)": frep.decay}
    if mode == "multi-hungarian":
        _, rep = hungarian_sequence_match(pred_frames, gt_frames)
        return {"J&F": rep["J&F"], "J": rep["J"], "F": rep["F"]}
    if mode == "biou":
        return {"bIoU": bootstrap_iou(pred_frames, gt_frames)}
    if mode == "linear":
        return {"linear": linear_assignment_score(pred_frames, gt_frames)}
    raise ValueError(f"unknown mode {mode!r}")


def cmd_eval(args) -> int:
    pred_root = Path(args.pred)
    gt_root = Path(args.gt)
    if not pred_root.is_dir() or not gt_root.is_dir():
        print("prediction and ground-truth directories must exist", file=sys.stderr)
        return EXIT_BAD_INPUT
    if any(pred_root.glob("*.png")):
        videos = [(pred_root.name, pred_root, gt_root)]
    else:
        videos = [(d.name, d, gt_root / d.name)
                  for d in sorted(pred_root.iterdir()) if d.is_dir()]
    rows = []
    try:
        for name, pdir, gdir in videos:
            rows.append((name, _eval_video(pdir, gdir, args.mode)))
    except ValueError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if not rows:
        print("nothing to evaluate", file=sys.stderr)
        return EXIT_BAD_INPUT
    columns = list(rows[0][1].keys())
    out = Path(args.output) if args.output else None
    lines = [["video"] + columns]
    for name, scores in rows:
        lines.append([name] + [f"{scores[c]:.6f}" for c in columns])
    means = [float(np.mean([r[1][c] for r in rows])) for c in columns]
    lines.append(["mean"] + [f"{m:.6f}" for m in means])
    text = "\n".join(",".join(map(str, line)) for line in lines) + "\n"
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = parse_scene_spec(Path(args.spec).read_text())
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot parse scene spec: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    gen = generate(spec)
    out = Path(args.output)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(gen.volume.frames):
        write_flo(frame, out / "flow" / f"{t:05d}.flo")
        write_label_png(gen.gt[t], out / "gt" / f"{t:05d}.png")
    (out / "scene.txt").write_text(write_scene_spec(spec))
    return EXIT_OK


def cmd_viz(args) -> int:
    src = Path(args.input)
    out = Path(args.output)
    if not src.is_dir():
        print(f"input directory not found: {src}", file=sys.stderr)
        return EXIT_BAD_INPUT
    flo_paths = sorted(src.glob("*.flo"))
    png_paths = sorted(src.glob("*.png"))
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    try:
        if flo_paths:
            fields = [read_flo(p) for p in flo_paths]
            vmax = None
            if args.normalization == "per-volume-max" and len(fields) >= 2:
                vmax = volume_max_magnitude(FlowVolume(fields))
            for p, f in zip(flo_paths, fields):
                rgb = flow_to_hsv(f, args.normalization, vmax)
                frames.append(rgb)
                Image.fromarray(rgb).save(out / (p.stem + ".png"))
        elif png_paths:
            for p in png_paths:
                labels = read_label_png(p)
                rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
                for l in np.unique(labels):
                    rgb[labels == l] = _PALETTE[int(l) % len(_PALETTE)]
                frames.append(rgb)
                Image.fromarray(rgb).save(out / p.name)
        else:
            print(f"no .flo or .png files in {src}", file=sys.stderr)
            return EXIT_BAD_INPUT
    except FlowIOError as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if args.montage and frames:
        Image.fromarray(np.concatenate(frames, axis=1)).save(out / "montage.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowseg",
                                     description="Motion segmentation of optical-flow volumes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="segment a directory of .flo files")
    seg.add_argument("input", help="video dir of .flo files, or dir of video dirs")
    seg.add_argument("output", help="output directory")
    seg.add_argument("--k", type=int, default=2, help="number of segments")
    seg.add_argument("--nu", type=int, default=3)
    seg.add_argument("--degree", type=int, default=3)
    seg.add_argument("--gamma", type=float, default=1.0)
    seg.add_argument("--eta", type=float, default=0.01)
    seg.add_argument("--iters", type=int, default=40)
    seg.add_argument("--seed", type=int, default=0)
    seg.add_argument("--init", choices=["random", "kmeans"], default="kmeans")
    seg.add_argument("--loss-variant", dest="loss_variant", default="main",
                     choices=["main", "alternate", "no_consistency"])
    seg.add_argument("--model-family", dest="model_family", default="spline",
                     choices=["spline", "polytime"])
    seg.add_argument("--width", type=int, default=224, help="working width")
    seg.add_argument("--height", type=int, default=128, help="working height")
    seg.add_argument("--jobs", type=int, default=1)
    seg.add_argument("--deterministic", action="store_true", default=True)
    seg.set_defaults(func=cmd_segment)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("pred", help="prediction dir (PNG labels, or dir of video dirs)")
    ev.add_argument("gt", help="ground-truth dir with matching layout")
    ev.add_argument("--mode", default="binary",
                    choices=["binary", "binary-select", "multi-hungarian",
                             "biou", "linear"])
    ev.add_argument("--output", default=None, help="CSV output path")
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="generate a synthetic labeled flow volume")
    sy.add_argument("spec", help="scene spec file (key=value)")
    sy.add_argument("output", help="output directory")
    sy.set_defaults(func=cmd_synth)

    vz = sub.add_parser("viz", help="render flows or label maps as PNGs")
    vz.add_argument("input", help="dir of .flo files or of label PNGs")
    vz.add_argument("output", help="output directory")
    vz.add_argument("--normalization", default="per-frame",
                    choices=["per-frame", "per-volume-max"])
    vz.add_argument("--montage", action="store_true")
    vz.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
