"""Command-line entry points for the refinement pipeline.

Verbs: synth, train-codec, train-coarse, train-refine, infer, evaluate,
analyze-freq, report. Output root defaults to $SEGREFINE_OUT (or ./out);
--seed controls every random stream of the invoked stage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("segrefine")


def _out_root(args) -> Path:
    root = Path(args.out or os.environ.get("SEGREFINE_OUT", "out"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def cmd_synth(args) -> int:
    from segrefine.synth import SceneSpec, generate_corpus, save_split

    if args.spec:
        spec_kw = json.loads(Path(args.spec).read_text())
        spec_kw["seed"] = args.seed
        spec = SceneSpec(**spec_kw)
    else:
        spec = SceneSpec(
            width=args.size, height=args.size, num_classes=args.num_classes, seed=args.seed
        )
    out = _out_root(args)
    per_split = {"train": args.count, "val": max(1, args.count // 8), "test": max(1, args.count // 4)}
    offset = 0
    for split, n in per_split.items():
        samples = generate_corpus(dataclasses.replace(spec, seed=spec.seed + offset), n)
        save_split(samples, out, split)
        offset += n
        print(f"wrote {n} samples to {out / split}")
    return 0


def cmd_train_codec(args) -> int:
    from segrefine.codec import round_trip_accuracy, save_codec, train_codec
    from segrefine.synth import load_dataset

    samples = load_dataset(Path(args.data), "train", args.num_classes)
    if not samples:
        print("no training samples found", file=sys.stderr)
        return 1
    labels = [s.label for s in samples]
    codec, losses = train_codec(
        labels, steps=args.steps, seed=args.seed, num_classes=args.num_classes
    )
    acc = float(np.mean([round_trip_accuracy(codec, y) for y in labels]))
    out = _out_root(args) / "codec.pt"
    save_codec(codec, out)
    print(f"codec saved to {out}; final loss {losses[-1]:.4f}, round-trip accuracy {acc:.4f}")
    return 0


def cmd_train_coarse(args) -> int:
    from segrefine.coarse import save_coarse, train_coarse
    from segrefine.synth import load_dataset

    train = load_dataset(Path(args.data), "train", args.num_classes)
    val = load_dataset(Path(args.data), "val", args.num_classes)
    model, hist = train_coarse(
        train, val, steps=args.steps, num_classes=args.num_classes, seed=args.seed
    )
    out = _out_root(args) / "coarse.pt"
    save_coarse(model, out)
    last = hist.val_miou[-1] if hist.val_miou else float("nan")
    print(f"coarse model saved to {out}; final val mIoU {last:.4f}")
    return 0


def cmd_train_refine(args) -> int:
    from segrefine.coarse import load_coarse
    from segrefine.pipeline import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_json(args.config)
    if args.out:
        cfg.out_dir = str(_out_root(args))
    cfg.seed = args.seed if args.seed is not None else cfg.seed
    coarse_model = None
    if cfg.align_targets == "coarse":
        if not cfg.coarse_ckpt or not Path(cfg.coarse_ckpt).exists():
            print(
                "align_targets='coarse' needs coarse_ckpt in the config "
                "(or set align_targets to 'none'/'files')",
                file=sys.stderr,
            )
            return 1
        coarse_model = load_coarse(cfg.coarse_ckpt)
    result = run_experiment(cfg, coarse_model=coarse_model)
    print(f"refiner trained; outputs under {result['workdir']}")
    print("refined:", result["report_refined"].wfm, "mIoU", f"{result['report_refined'].miou:.4f}")
    print("rough:  ", result["report_rough"].wfm, "mIoU", f"{result['report_rough'].miou:.4f}")
    return 0


def cmd_infer(args) -> int:
    from PIL import Image

    from segrefine.pipeline import export_masks, infer_refine, load_refiner

    refiner = load_refiner(args.checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    rough = np.asarray(Image.open(args.rough).convert("L"), dtype=np.int64)
    traj = Path(args.dump_trajectory) if args.dump_trajectory else None
    label = infer_refine(refiner, image.transpose(2, 0, 1), rough, seed=args.seed, trajectory_dir=traj)
    out = _out_root(args)
    export_masks(out, [(Path(args.image).stem + "_refined", label)])
    print(f"refined mask written under {out}")
    return 0


def cmd_evaluate(args) -> int:
    from segrefine.pipeline import format_report, run_eval

    out = _out_root(args) / "report.json"
    report = run_eval(
        Path(args.pred),
        Path(args.gt),
        args.num_classes,
        tolerances=tuple(args.tolerance),
        ignore_class=args.ignore_class,
        out_path=out,
    )
    print(format_report(report))
    print(f"report written to {out}")
    return 0


def cmd_analyze_freq(args) -> int:
    from segrefine.diffusion import load_trajectory
    from segrefine.frequency import stage_decompose
    from segrefine.pipeline import decode_latent_to_label, load_refiner

    refiner = load_refiner(args.checkpoint)
    snapshots = load_trajectory(Path(args.trajectory))
    decomp = stage_decompose(
        snapshots, lambda z: decode_latent_to_label(refiner, z), cut=args.cut
    )
    out = _out_root(args)
    rows = ["freq,initial_power,final_power"]
    init, fin = decomp.initial, decomp.final
    n = min(len(init.freqs), len(fin.freqs)) if init and fin else 0
    for i in range(n):
        rows.append(f"{init.freqs[i]:.6f},{init.mean_power[i]:.8g},{fin.mean_power[i]:.8g}")
    (out / "stage_spectra.csv").write_text("\n".join(rows) + "\n")
    print(
        f"low-band change: initial {decomp.mean_low_band_change('initial'):.5g}, "
        f"final {decomp.mean_low_band_change('final'):.5g}"
    )
    if decomp.empty_stages:
        print(f"note: empty stage(s): {decomp.empty_stages}")
    print(f"spectra written to {out / 'stage_spectra.csv'}")
    return 0


def cmd_report(args) -> int:
    from segrefine.metrics import MetricsReport
    from segrefine.pipeline import format_report

    for path in args.reports:
        report = MetricsReport.load(path)
        print(f"== {path}")
        print(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segrefine", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="seed for all random streams")
    p.add_argument("--out", type=str, default=None, help="output root (default $SEGREFINE_OUT)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", type=str, default=None, help="JSON file of SceneSpec fields")
    s.add_argument("--count", type=int, default=64, help="train-split sample count")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--num-classes", type=int, default=3)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train-codec", help="train the label embedding codec")
    s.add_argument("--data", type=str, required=True)
    s.add_argument("--num-classes", type=int, required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.set_defaults(fn=cmd_train_codec)

    s = sub.add_parser("train-coarse", help="train the stage-one segmenter")
    s.add_argument("--data", type=str, required=True)
    s.add_argument("--num-classes", type=int, required=True)
    s.add_argument("--steps", type=int, default=5000)
    s.set_defaults(fn=cmd_train_coarse)

    s = sub.add_parser("train-refine", help="train the diffusion refiner from a config file")
    s.add_argument("--config", type=str, required=True)
    s.set_defaults(fn=cmd_train_refine, seed=None)

    s = sub.add_parser("infer", help="refine one coarse mask")
    s.add_argument("--checkpoint", type=str, required=True)
    s.add_argument("--image", type=str, required=True)
    s.add_argument("--rough", type=str, required=True)
    s.add_argument("--dump-trajectory", type=str, default=None)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("evaluate", help="score prediction masks against ground truth")
    s.add_argument("--pred", type=str, required=True)
    s.add_argument("--gt", type=str, required=True)
    s.add_argument("--num-classes", type=int, required=True)
    s.add_argument("--tolerance", type=int, nargs="+", default=[1, 3, 5])
    s.add_argument("--ignore-class", type=int, default=None)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("analyze-freq", help="stage-decompose a dumped denoising trajectory")
    s.add_argument("--trajectory", type=str, required=True)
    s.add_argument("--checkpoint", type=str, required=True, help="refiner checkpoint for decoding")
    s.add_argument("--cut", type=int, default=500)
    s.set_defaults(fn=cmd_analyze_freq)

    s = sub.add_parser("report", help="render MetricsReport JSON files as tables")
    s.add_argument("reports", nargs="+")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
