"""Command-line surface: gen-data, train, infer, eval, compare.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import clipio
from . import config as config_mod
from . import data as data_mod
from . import diffusion, train
from .codec import CodecConfigError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="seqdit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=data_mod.DEFAULT_N_TRAIN)
    g.add_argument("--test", type=int, default=data_mod.DEFAULT_N_TEST)
    g.add_argument("--frames", type=int, default=data_mod.DEFAULT_CLIP_LEN)
    g.add_argument("--size", type=int, default=data_mod.DEFAULT_SIZE)
    g.add_argument("--identities", type=int,
                   default=data_mod.DEFAULT_N_IDENTITIES)
    g.add_argument("--seed", type=int, default=42)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)

    i = sub.add_parser("infer", help="generate a clip from a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", required=True)
    i.add_argument("--ref", required=True, help="reference clip container")
    i.add_argument("--skeleton", required=True,
                   help="skeleton clip container or OpenPose keypoint JSON")
    i.add_argument("--out", required=True)
    i.add_argument("--steps", type=int, default=None)
    i.add_argument("--seed", type=int, default=42)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="train and score all six strategies")
    c.add_argument("--config-base", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--verbose", action="store_true")
    return p


def _cmd_gen_data(args) -> int:
    records = data_mod.gen_dataset(
        n_train=args.clips, n_test=args.test, clip_len=args.frames,
        h=args.size, w=args.size, master_seed=args.seed,
        n_identities=args.identities)
    meta = {"n_train": args.clips, "n_test": args.test,
            "clip_len": args.frames, "height": args.size, "width": args.size,
            "master_seed": args.seed, "n_identities": args.identities,
            "format": "vclip v1 (32-byte header + float32 LE)"}
    path = data_mod.write_dataset(records, args.out, meta)
    print(f"wrote {len(records)} clips; manifest: {path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = config_mod.load(args.config)
    out = train.train_run(cfg, args.out, resume=args.resume)
    print(f"done: {len(out['losses'])} steps, final loss "
          f"{out['losses'][-1]:.4f}, config {out['config_hash']}")
    return EXIT_OK


def _load_model_from(args, cfg):
    model = train.build_model(cfg)
    chash = config_mod.config_hash(cfg)
    loaded, _, _ = ckpt.load(args.checkpoint, chash)
    # prefer the averaged (ema.*) weights when the checkpoint carries them
    weights = {k: v for k, v in loaded.items() if not k.startswith("ema.")}
    for k, v in loaded.items():
        if k.startswith("ema."):
            weights[k[len("ema."):]] = v
    ckpt.restore_into(model.params, weights)
    return model


def _cmd_infer(args) -> int:
    cfg = config_mod.load(args.config)
    model = _load_model_from(args, cfg)
    ref = clipio.load_clip(args.ref)[:, 0]
    if args.skeleton.endswith(".json"):
        track = data_mod.load_keypoints(args.skeleton)
        h, w = ref.shape[1:]
        skel = np.stack([data_mod.render_skeleton_frame(track, f, h, w)
                         for f in range(track.n_frames)])
    else:
        skel = clipio.load_clip(args.skeleton).transpose(1, 0, 2, 3)
    if skel.shape[0] == 0:
        raise train.DataError("zero-length skeleton input")
    arrs = {"ref": ref, "skel": skel, "char": None}
    video = train.generate_for_clip(model, cfg, arrs, 0,
                                    steps=args.steps, seed=args.seed)
    clipio.save_clip(args.out, video)
    sheet = clipio.contact_sheet(ref, skel, video.transpose(1, 0, 2, 3))
    clipio.write_png(os.path.splitext(args.out)[0] + "_sheet.png", sheet)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = config_mod.load(args.config)
    model = _load_model_from(args, cfg)
    report = train.evaluate(model, cfg, args.corpus, args.split)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    tmp = args.out + ".tmp"
    with open(tmp, "w") as f:
        f.write(report.to_csv())
    os.replace(tmp, args.out)
    print(f"mean ssim {report.mean_ssim:.4f} psnr {report.mean_psnr:.4f} "
          f"fvd_proxy {report.fvd_proxy:.4f}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    base = config_mod.load(args.config_base)
    out = train.compare_run(base, args.out, quiet=not args.verbose)
    for label, r in out["results"].items():
        print(f"{label}: ssim {r['ssim']:.4f} psnr {r['psnr']:.4f} "
              f"fvd_proxy {r['fvd_proxy']:.4f}")
    if out["failures"]:
        for label, msg in out["failures"].items():
            print(f"FAILED {label}: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except diffusion.NumericalAbort as e:
        print(f"numerical abort: {e}; recent losses: {e.loss_history}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (train.DataError, data_mod.KeypointFormatError,
            clipio.ClipFormatError, ckpt.CheckpointError, CodecConfigError,
            FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
