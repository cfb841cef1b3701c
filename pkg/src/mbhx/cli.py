"""Command-line front end: ``mbhx {synth,train,extract,compare-extraction,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 usage/configuration error, 2 I/O or file-format
error, 3 numeric failure (including failed gradient checks).
``MBHX_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import fileio, gradcheck, synth, training
from .autodiff import Tensor
from .compositing import ImageBuffer, extract_hand, extract_naive, recompose_onto
from .errors import ConfigError, ContractViolation, FormatError, NumericError, RejectedSample
from .network import forward, model_config

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_synth(args) -> int:
    extent = synth.parse_extent(args.extent)
    manifest = synth.generate_dataset(args.seed, args.count, args.split, args.out, extent,
                                      exact=args.exact, background_dir=args.backgrounds)
    entry = synth.split_entry(manifest, args.split)
    print(f"wrote {entry['count']} {args.split} samples ({extent[0]}x{extent[1]}) to {args.out}")
    return EXIT_OK


def _train_config(args) -> training.TrainConfig:
    return training.TrainConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                                epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                                checkpoint_every=args.checkpoint_every)


def cmd_train(args) -> int:
    manifest = training.load_manifest(args.data)
    cfg = model_config(args.model, args.base_channels, tuple(manifest["extent"]))
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    result = training.train(cfg, _train_config(args), args.data, out_path=args.out,
                            val_split=args.val_split, log_path=log_path)
    last = result.history[-1]
    print(f"model {args.model}: {len(result.history)} epochs, final L_o={last['L_o']:.6f}, "
          f"val alpha SAD={last['val_alpha_SAD']:.3f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    weights, _ = training.load_model(args.ckpt)
    image = fileio.read_image(args.input)
    if image.channels != 3:
        raise ConfigError(f"{args.input}: expected an RGB image")
    h, w = image.extent
    if h % 16 or w % 16:
        raise ConfigError(f"{args.input} is {h}x{w}; pad or crop it to multiples of 16 before extracting")
    dtype = next(iter(weights)).dtype
    batch = Tensor(image.data.transpose(2, 0, 1)[None].astype(dtype))
    pred_a, pred_f = forward(weights, weights.config, batch)
    alpha = ImageBuffer(pred_a.data[0].transpose(1, 2, 0).astype(np.float64))
    fg = ImageBuffer(pred_f.data[0].transpose(1, 2, 0).astype(np.float64))
    outputs = {"alpha": alpha, "fg": fg, "hand": extract_hand(alpha, fg)}
    if args.new_bg:
        bg = fileio.read_image(args.new_bg)
        outputs["recomposed"] = recompose_onto(alpha, fg, bg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, buf in outputs.items():
        fileio.write_image(out_dir / f"{name}.png", buf)
        if args.exact:
            fileio.write_tensor(out_dir / f"{name}.tsr", buf.data)
    print(f"wrote {', '.join(outputs)} to {out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sample = synth.read_sample(args.sample)
    alpha, fg, image = (ImageBuffer(sample[k]) for k in ("alpha", "fg", "image"))
    hand = extract_hand(alpha, fg)
    naive = extract_naive(alpha, image)
    leak = np.abs(naive.data - hand.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, buf in (("hand_alpha_f", hand), ("naive_alpha_i", naive), ("leak", ImageBuffer(leak))):
        fileio.write_image(out_dir / f"{name}.png", buf)
        if args.exact:
            fileio.write_tensor(out_dir / f"{name}.tsr", buf.data)
    a = alpha.data[..., 0]
    partial = (a > 0) & (a < 1)
    stats = {"partial_pixels": int(partial.sum()), "max_leak": float(leak.max()),
             "mean_leak_partial": float(leak[partial].mean()) if partial.any() else 0.0,
             "max_leak_opaque_or_clear": float(leak[~partial].max(initial=0.0))}
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    row = training.evaluate(args.ckpt, args.data, args.split)
    report = training.MetricsReport([row], split=args.split)
    print(report.render_text())
    if args.json:
        Path(args.json).write_text(report.to_json())
    else:
        print(report.to_json(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    report = training.run_ablation(_train_config(args), args.data, out_dir=args.ckpt_dir,
                                   base_channels=args.base_channels, jobs=args.jobs)
    text = report.render_text()
    print(text)
    out = Path(args.out)
    out.write_text(report.to_json())
    out.with_suffix(".txt").write_text(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def _add_train_flags(p: argparse.ArgumentParser, default_epochs: int = 80) -> None:
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--lr", type=float, default=3.5e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=4e-5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--checkpoint-every", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mbhx", description="Motion-blurred hand extraction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset split")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", choices=synth.SPLITS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extent", default="64x64", help="HxW, both multiples of 16")
    p.add_argument("--exact", action="store_true", help="also write lossless .tsr tensors")
    p.add_argument("--backgrounds", help="directory of background images")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one of the four ablation models")
    p.add_argument("--data", required=True)
    p.add_argument("--model", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    p.add_argument("--val-split", default="val")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="predict alpha and foreground for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--new-bg", help="background image to recompose the hand onto")
    p.add_argument("--exact", action="store_true", help="also write lossless .tsr tensors")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("compare-extraction", help="contrast alpha*F with alpha*I on a ground-truth sample")
    p.add_argument("--sample", required=True, help="sample directory written by synth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--exact", action="store_true", help="also write lossless .tsr tensors")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="SAD/MSE of a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=synth.SPLITS, default="test")
    p.add_argument("--json", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate Models 1-4")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path (text table goes next to it)")
    p.add_argument("--ckpt-dir", help="keep per-model checkpoints and logs here")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes (max 4)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    value = os.environ.get("MBHX_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, ContractViolation, RejectedSample) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
