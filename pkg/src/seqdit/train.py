"""Training, evaluation, and strategy-comparison drivers.

Everything here is a pure function of (config, corpus, seed): per-step RNG
streams are keyed by (seed, step) and the per-epoch clip order by
(seed, epoch), so interrupted runs resume exactly and all conditioning modes
consume the identical data order.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from . import data as data_mod
from . import diffusion, metrics, svgplot
from .codec import CodecConfig
from .model import DiT
from .optim import AdamWState, EMAState, lr_at
from .sequence import build_sequence
from .tensor import Tensor

PROBE_CLIPS = 4  # fixed per-epoch evaluation subset during compare


class DataError(RuntimeError):
    pass


def build_codec(cfg: config_mod.RunConfig) -> CodecConfig:
    return CodecConfig(spatial_patch=cfg.data.patch,
                       temporal_stride=cfg.data.temporal_stride, channels=3)


def build_model(cfg: config_mod.RunConfig) -> DiT:
    codec_cfg = build_codec(cfg)
    return DiT(cfg.dit_config(), codec_cfg.latent_channels, seed=cfg.seed,
               lora=cfg.lora_config())


def _clip_sequence(arrs: dict, mode: str):
    targets = arrs["char"] if mode == "train" else None
    return build_sequence(arrs["ref"], arrs["skel"], targets, mode)


def _load_split(corpus_dir: str, split: str | None = None) -> list[dict]:
    try:
        _, clips = data_mod.load_dataset(corpus_dir)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    if split is not None:
        clips = [c for c in clips if c["split"] == split]
    if not clips:
        raise DataError(f"no clips for split {split!r} in {corpus_dir}")
    return clips


def _clip_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 555, epoch]).permutation(n)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1000, step])


def _eval_seed(seed: int, clip_idx: int) -> int:
    return int(np.random.default_rng([seed, 999, clip_idx]).integers(2 ** 31))


def train_run(cfg: config_mod.RunConfig, out_dir: str,
              resume: str | None = None, quiet: bool = False) -> dict:
    """Full training run; writes per-epoch checkpoints and a loss CSV.

    Returns {"model": DiT, "losses": list, "batch_order_hash": str, ...}.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    chash = config_mod.config_hash(cfg)
    clips = _load_split(cfg.data.corpus, "train")
    arrays = [data_mod.load_clip_arrays(cfg.data.corpus, c["clip_id"])
              for c in clips]
    n = len(arrays)
    total_steps = (cfg.optimizer.max_steps if cfg.optimizer.max_steps > 0
                   else cfg.optimizer.epochs * n)
    model = build_model(cfg)
    codec_cfg = build_codec(cfg)
    schedule = diffusion.make_schedule(cfg.diffusion.schedule_steps,
                                       cfg.diffusion.beta_min,
                                       cfg.diffusion.beta_max)
    trainable = model.trainable_params(cfg.tuning)
    opt = AdamWState(lr=cfg.optimizer.lr,
                     weight_decay=cfg.optimizer.weight_decay)

    if cfg.tuning == "lora":
        base = {k: v for k, v in model.params.items()
                if not k.startswith("lora.")}
        base_path = os.path.join(out_dir, "base.ckpt")
        if not os.path.exists(base_path):
            ckpt.save(base_path, base, chash)

    start_step = 0
    ema_loaded: dict | None = None
    if resume is not None:
        loaded, file_hash, opt_loaded = ckpt.load(resume, chash)
        ema_loaded = {k[len("ema."):]: v for k, v in loaded.items()
                      if k.startswith("ema.")}
        ckpt.restore_into(model.params, {k: v for k, v in loaded.items()
                                         if not k.startswith("ema.")})
        if opt_loaded is None:
            raise ckpt.CheckpointError(f"{resume} has no optimizer state")
        opt = opt_loaded
        start_step = opt.step

    ema = None
    if cfg.optimizer.ema_decay > 0.0:
        ema = EMAState.from_params(trainable, cfg.optimizer.ema_decay)
        if ema_loaded:
            ema.shadow = {k: v.astype(np.float32) for k, v in
                          ema_loaded.items()}

    losses = []
    order_hasher = hashlib.sha256()
    loss_rows = ["step,epoch,t,loss"]
    # replay the consumed data order so the hash matches an unbroken run
    for step in range(start_step):
        epoch = step // n
        idx = int(_clip_order(cfg.seed, epoch, n)[step % n])
        order_hasher.update(idx.to_bytes(4, "little"))

    def save_epoch(epoch: int, final: bool):
        name = "final" if final else f"epoch_{epoch:03d}"
        if cfg.tuning == "lora":
            blocks = {k: v for k, v in model.params.items()
                      if k.startswith("lora.")}
            path = os.path.join(out_dir, f"lora_{name}.ckpt")
        else:
            blocks = dict(model.params)
            path = os.path.join(out_dir, f"model_{name}.ckpt")
        if ema is not None:
            blocks = dict(blocks)
            for k, arr in ema.shadow.items():
                blocks["ema." + k] = Tensor(arr)
        ckpt.save(path, blocks, chash, opt)

    for step in range(start_step, total_steps):
        epoch = step // n
        idx = int(_clip_order(cfg.seed, epoch, n)[step % n])
        order_hasher.update(idx.to_bytes(4, "little"))
        seq = _clip_sequence(arrays[idx], "train")
        rng = _step_rng(cfg.seed, step)
        opt.lr = lr_at(step, total_steps, cfg.optimizer.lr,
                       cfg.optimizer.warmup_steps, cfg.optimizer.lr_schedule)
        try:
            loss, t = diffusion.train_step(
                model, seq, codec_cfg, schedule, cfg.diffusion.loss_region,
                opt, trainable, rng, grad_clip=cfg.optimizer.grad_clip)
        except diffusion.NumericalAbort as e:
            e.loss_history = losses[-20:]
            _flush_csv(out_dir, loss_rows)
            raise
        if ema is not None:
            ema.update(trainable)
        losses.append(loss)
        loss_rows.append(f"{step},{epoch},{t},{loss:.8f}")
        if not quiet and (step + 1) % 100 == 0:
            print(f"step {step + 1}/{total_steps} loss {loss:.4f}", flush=True)
        if (step + 1) % n == 0:
            save_epoch(epoch, final=False)
    save_epoch(total_steps // max(n, 1), final=True)
    _flush_csv(out_dir, loss_rows)
    if ema is not None:
        # checkpoints keep the raw weights; the returned model carries the
        # averaged weights used for evaluation
        for k, arr in ema.shadow.items():
            model.params[k].data = arr.astype(model.params[k].data.dtype)
    return {"model": model, "losses": losses, "config_hash": chash,
            "batch_order_hash": order_hasher.hexdigest(),
            "schedule": schedule, "codec": codec_cfg}


def _flush_csv(out_dir: str, rows: list[str]):
    path = os.path.join(out_dir, "loss_log.csv")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(rows) + "\n")
    os.replace(tmp, path)


def generate_for_clip(model: DiT, cfg: config_mod.RunConfig, arrs: dict,
                      clip_idx: int, steps: int | None = None,
                      seed: int | None = None) -> np.ndarray:
    codec_cfg = build_codec(cfg)
    schedule = diffusion.make_schedule(cfg.diffusion.schedule_steps,
                                       cfg.diffusion.beta_min,
                                       cfg.diffusion.beta_max)
    sampler = diffusion.SamplerConfig(steps or cfg.diffusion.inference_steps)
    seq = _clip_sequence(arrs, "infer")
    if seed is None:
        seed = _eval_seed(cfg.seed, clip_idx)
    return diffusion.sample(model, seq, codec_cfg, schedule, sampler, seed)


def evaluate(model: DiT, cfg: config_mod.RunConfig, corpus_dir: str,
             split: str = "test", clip_ids: list | None = None
             ) -> metrics.MetricReport:
    """Generate every clip of the split and score it against ground truth."""
    clips = _load_split(corpus_dir, split)
    if clip_ids is not None:
        clips = [c for c in clips if c["clip_id"] in set(clip_ids)]
        if not clips:
            raise DataError("clip id filter matched nothing")
    report = metrics.MetricReport(config_hash=config_mod.config_hash(cfg))
    generated, truth = [], []
    for c in clips:
        arrs = data_mod.load_clip_arrays(corpus_dir, c["clip_id"])
        idx = int(c["clip_id"].rsplit("_", 1)[1])
        video = generate_for_clip(model, cfg, arrs, idx)
        gt = np.ascontiguousarray(arrs["char"].transpose(1, 0, 2, 3))
        report.add(c["clip_id"], metrics.ssim(video, gt),
                   metrics.psnr(video, gt))
        generated.append(video)
        truth.append(gt)
    if len(generated) >= 2:
        report.fvd_proxy = metrics.frechet_proxy(generated, truth)
    return report


# -- strategy comparison -------------------------------------------------------

COMPARE_GRID = tuple(
    (mode, region)
    for mode in ("unified_sequence", "channel_concat", "token_residual")
    for region in ("half", "all"))


def _variant_config(base: config_mod.RunConfig, mode: str,
                    region: str) -> config_mod.RunConfig:
    text = config_mod.to_text(base)
    cfg = config_mod.from_text(text)
    cfg.conditioning_mode = mode
    cfg.diffusion.loss_region = region
    return cfg.validate()


def compare_run(base_cfg: config_mod.RunConfig, out_dir: str,
                quiet: bool = True) -> dict:
    """Train all six (mode, loss-region) variants with identical seeds and
    data order; emit the summary CSV and per-epoch metric curves (CSV + SVG).

    A failing variant is recorded and the others continue.
    """
    os.makedirs(out_dir, exist_ok=True)
    test_clips = _load_split(base_cfg.data.corpus, "test")
    probe_ids = [c["clip_id"] for c in test_clips[:PROBE_CLIPS]]
    results = {}
    failures = {}
    curves = {}
    order_hashes = {}
    for mode, region in COMPARE_GRID:
        label = f"{mode}/{region}"
        cfg = _variant_config(base_cfg, mode, region)
        run_dir = os.path.join(out_dir, f"{mode}__{region}")
        try:
            out = train_run(cfg, run_dir, quiet=quiet)
            order_hashes[label] = out["batch_order_hash"]
            per_epoch = _epoch_curves(cfg, run_dir, probe_ids)
            curves[label] = per_epoch
            report = evaluate(out["model"], cfg, cfg.data.corpus, "test")
            results[label] = {
                "ssim": report.mean_ssim, "psnr": report.mean_psnr,
                "fvd_proxy": report.fvd_proxy,
                "train_loss": float(np.mean(out["losses"][-50:])),
            }
        except Exception as e:  # record, keep going
            failures[label] = f"{type(e).__name__}: {e}"
    _write_compare_outputs(out_dir, results, curves, failures, order_hashes)
    return {"results": results, "failures": failures,
            "order_hashes": order_hashes}


def _epoch_curves(cfg: config_mod.RunConfig, run_dir: str,
                  probe_ids: list) -> dict:
    """Evaluate every per-epoch checkpoint on the fixed probe subset."""
    names = sorted(f for f in os.listdir(run_dir)
                   if f.startswith(("model_epoch", "lora_epoch")))
    model = build_model(cfg)
    out = {"epoch": [], "ssim": [], "psnr": [], "fvd_proxy": []}
    for name in names:
        loaded, _, _ = ckpt.load(os.path.join(run_dir, name))
        # evaluate with the averaged weights when the checkpoint carries them
        weights = {k: v for k, v in loaded.items() if not k.startswith("ema.")}
        for k, v in loaded.items():
            if k.startswith("ema."):
                weights[k[len("ema."):]] = v
        ckpt.restore_into(model.params, weights)
        report = evaluate(model, cfg, cfg.data.corpus, "test", probe_ids)
        epoch = int(name.split("epoch_")[1].split(".")[0])
        out["epoch"].append(epoch)
        out["ssim"].append(report.mean_ssim)
        out["psnr"].append(report.mean_psnr)
        out["fvd_proxy"].append(report.fvd_proxy)
    return out


def _write_compare_outputs(out_dir, results, curves, failures, order_hashes):
    rows = ["method,loss_region,ssim,psnr,fvd_proxy,train_loss"]
    for mode, region in COMPARE_GRID:
        label = f"{mode}/{region}"
        if label in results:
            r = results[label]
            rows.append(f"{mode},{region},{r['ssim']:.6f},{r['psnr']:.6f},"
                        f"{r['fvd_proxy']:.6f},{r['train_loss']:.6f}")
        else:
            rows.append(f"{mode},{region},failed,failed,failed,failed")
    with open(os.path.join(out_dir, "summary.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    curve_rows = ["method,loss_region,epoch,ssim,psnr,fvd_proxy"]
    for label, c in curves.items():
        mode, region = label.split("/")
        for i, e in enumerate(c["epoch"]):
            curve_rows.append(f"{mode},{region},{e},{c['ssim'][i]:.6f},"
                              f"{c['psnr'][i]:.6f},{c['fvd_proxy'][i]:.6f}")
    with open(os.path.join(out_dir, "curves.csv"), "w") as f:
        f.write("\n".join(curve_rows) + "\n")
    for metric in ("ssim", "psnr", "fvd_proxy"):
        series = {label: (c["epoch"], c[metric]) for label, c in curves.items()
                  if c["epoch"]}
        if series:
            svgplot.line_chart(series, f"{metric} vs epoch (probe subset)",
                               "epoch", metric,
                               os.path.join(out_dir, f"curve_{metric}.svg"))
    if failures:
        with open(os.path.join(out_dir, "failures.txt"), "w") as f:
            for label, msg in failures.items():
                f.write(f"{label}: {msg}\n")
    with open(os.path.join(out_dir, "batch_order.txt"), "w") as f:
        for label, h in order_hashes.items():
            f.write(f"{label}: {h}\n")
