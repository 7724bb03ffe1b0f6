"""Forward noising, masked training loss, and the deterministic sampler.

The context region (mask == 1) is clamped: it is never noised during
training and is re-pinned to the clean context latent after every sampler
step. Latents are mapped from [0, 1] pixels to a zero-mean, unit-variance
scale before noising (and back before decoding) so the data scale matches
the unit-variance noise. The formula-literal variants (context scaled by sqrt(alpha_bar) and
the x0 estimate without the 1/sqrt(alpha_bar) factor) stay available behind
`mode="literal"` / `literal=True` for side-by-side study; they do not invert
each other, so the default is the consistent pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec as codec_mod
from . import sequence as seq_mod
from . import tensor as tk
from .model import DiT, build_attention_mask
from .tensor import Tensor


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; carries diagnostics."""

    def __init__(self, step, t, loss_history):
        super().__init__(f"non-finite loss at step {step} (t={t})")
        self.step = step
        self.t = t
        self.loss_history = loss_history


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # (N,) float64
    alpha_bar: np.ndarray    # (N,) float64, strictly decreasing

    @property
    def n_steps(self) -> int:
        return self.betas.shape[0]


# Pixel statistics of the packed [reference, skeletons, targets] sequence on
# the default synthetic corpus after the [0, 1] -> [-1, 1] shift;
# normalize_latent standardizes with these so latents are roughly zero-mean,
# unit-variance, matching the noise the denoiser must separate.
# Calibrated once on the seed-42 default corpus, then frozen.
LATENT_MEAN = -0.36
LATENT_STD = 0.62

# The [0, 1] pixel range mapped through normalize_latent: no valid latent
# can fall outside it.
LATENT_RANGE = ((-1.0 - LATENT_MEAN) / LATENT_STD,
                (1.0 - LATENT_MEAN) / LATENT_STD)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    # x0 estimates are clamped to this range inside the DDIM loop. Near
    # t = N the inversion divides by sqrt(alpha_bar) ~ 1e-2, so small noise
    # prediction errors blow up into x0 values far outside the data range
    # and the trajectory never recovers; clamping to the known latent range
    # keeps every intermediate state on-distribution. None disables.
    x0_clip: tuple[float, float] | None = LATENT_RANGE


# Loss regions: 'half' supervises only prediction positions via the (1-M)
# weight; 'all' weights every position equally.
LOSS_REGIONS = ("half", "all")


def make_schedule(n_steps: int = 1000, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError("need 0 < beta_min < beta_max < 1")
    betas = np.linspace(beta_min, beta_max, n_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


def add_noise_selective(z0: np.ndarray, eps: np.ndarray, t: int,
                        latent_mask: np.ndarray, schedule: NoiseSchedule,
                        mode: str = "corrected") -> np.ndarray:
    """Noise only the prediction region; context stays bit-identical.

    corrected (default): z_t = M*z0 + (1-M)*(sqrt(ab_t)*z0 + sqrt(1-ab_t)*eps)
    literal:             z_t = sqrt(ab_t)*z0 + sqrt(1-ab_t)*eps*(1-M)
    """
    if not (0 <= t < schedule.n_steps):
        raise ValueError(f"timestep {t} out of range [0, {schedule.n_steps})")
    ab = schedule.alpha_bar[t]
    m = np.broadcast_to(latent_mask, z0.shape).astype(z0.dtype)
    noised = (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)
    if mode == "literal":
        return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps * (1.0 - m)).astype(z0.dtype)
    if mode != "corrected":
        raise ValueError(f"unknown noising mode {mode!r}")
    return np.where(m > 0, z0, noised)


def masked_loss(eps_pred: Tensor, eps_true: np.ndarray,
                latent_mask: np.ndarray, region: str = "half") -> Tensor:
    """Mean squared error over the weighted positions.

    Weights are (1-M) for 'half' and all-ones for 'all'; normalization is by
    the count of weighted elements so the two regions are comparable.
    """
    if region not in LOSS_REGIONS:
        raise ValueError(f"unknown loss region {region!r}")
    m = np.broadcast_to(latent_mask, eps_pred.shape).astype(eps_pred.dtype)
    weights = (1.0 - m) if region == "half" else np.ones_like(m)
    n = float(weights.sum())
    if n == 0:
        raise ValueError("no supervised positions (all-context mask with "
                         "region='half')")
    diff = eps_pred - Tensor(eps_true.astype(eps_pred.dtype))
    return (diff * diff * Tensor(weights)).sum() * (1.0 / n)


def x0_estimate(z_t: np.ndarray, eps_pred: np.ndarray, t: int,
                schedule: NoiseSchedule, literal: bool = False) -> np.ndarray:
    """Invert the forward process given a noise prediction."""
    if not (0 <= t < schedule.n_steps):
        raise ValueError(f"timestep {t} out of range")
    ab = schedule.alpha_bar[t]
    if literal:
        return (z_t - np.sqrt(1.0 - ab) * eps_pred).astype(z_t.dtype)
    sq = np.sqrt(ab)
    if sq < 1e-8:
        raise FloatingPointError(f"alpha_bar at t={t} too small to invert")
    return ((z_t - np.sqrt(1.0 - ab) * eps_pred) / sq).astype(z_t.dtype)


def sampler_timesteps(n_steps: int, inference_steps: int) -> np.ndarray:
    """Strictly decreasing, evenly spaced timestep subsequence."""
    if not (1 <= inference_steps <= n_steps):
        raise ValueError("inference steps must be in [1, N]")
    ts = np.linspace(0, n_steps - 1, inference_steps)
    return np.unique(np.round(ts)).astype(np.int64)[::-1]


def ddim_loop(denoise_fn, z_init: np.ndarray, clean_context: np.ndarray,
              latent_mask: np.ndarray, schedule: NoiseSchedule,
              cfg: SamplerConfig) -> np.ndarray:
    """Deterministic (eta=0) denoising loop with context re-clamping.

    denoise_fn(z_t, t) -> predicted noise, same shape as z_t. Returns the
    final latent; context positions equal `clean_context` exactly.
    """
    m = np.broadcast_to(latent_mask, z_init.shape).astype(bool)
    z = np.where(m, clean_context, z_init)
    ts = sampler_timesteps(schedule.n_steps, cfg.steps)
    for i, t in enumerate(ts):
        eps = denoise_fn(z, int(t))
        x0 = x0_estimate(z, eps, int(t), schedule)
        if cfg.x0_clip is not None:
            x0 = np.clip(x0, cfg.x0_clip[0], cfg.x0_clip[1])
        if i + 1 < len(ts):
            ab_prev = schedule.alpha_bar[ts[i + 1]]
            z = (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps).astype(z.dtype)
        else:
            z = x0
        z = np.where(m, clean_context, z)
    return z


def normalize_latent(z: np.ndarray) -> np.ndarray:
    """Map unit-range latents ([0, 1] pixels) to the zero-mean/unit-variance
    scale the diffusion process operates on, so the data scale matches the
    unit-variance noise: shift to [-1, 1], then standardize with the corpus
    statistics LATENT_MEAN / LATENT_STD."""
    return (((2.0 * z - 1.0) - LATENT_MEAN) / LATENT_STD).astype(z.dtype)


def denormalize_latent(z: np.ndarray) -> np.ndarray:
    """Inverse of normalize_latent."""
    return (0.5 * ((z * LATENT_STD + LATENT_MEAN) + 1.0)).astype(z.dtype)


def _condition_latents(seq: seq_mod.UnifiedSequence,
                       codec_cfg: codec_mod.CodecConfig) -> tuple:
    """Reference and skeleton latents aligned to the target frames.

    Returns (ref_latent, skel_latent), each (c, T/rt, h, w).
    """
    t = seq.clip_len
    skel_video = np.ascontiguousarray(seq.skeletons.transpose(1, 0, 2, 3))
    ref_video = np.ascontiguousarray(
        np.repeat(seq.ref[:, None], t, axis=1))
    return (codec_mod.encode(ref_video, codec_cfg),
            codec_mod.encode(skel_video, codec_cfg))


def _prepare_inputs(seq: seq_mod.UnifiedSequence, model: DiT,
                    codec_cfg: codec_mod.CodecConfig):
    """Mode-specific (z0, latent_mask, cond, attn_mask) for one clip."""
    mode = model.cfg.conditioning_mode
    tpf = None
    if mode == "unified_sequence":
        z0 = normalize_latent(codec_mod.encode(seq.video(), codec_cfg))
        mask = seq_mod.build_mask(seq.clip_len, codec_cfg, z0.shape[2:])
        latent_mask = mask.latent_mask
        frame_mask = codec_mod.downsample_mask(mask.frame_mask,
                                               codec_cfg.temporal_stride)
        cond = None
    else:
        tgt_video = np.ascontiguousarray(seq.targets.transpose(1, 0, 2, 3))
        z0 = normalize_latent(codec_mod.encode(tgt_video, codec_cfg))
        latent_mask = np.zeros((1,) + z0.shape[1:], dtype=np.float32)
        frame_mask = np.zeros(z0.shape[1], dtype=np.int64)
        ref_lat, skel_lat = _condition_latents(seq, codec_cfg)
        ref_lat = normalize_latent(ref_lat)
        skel_lat = normalize_latent(skel_lat)
        if mode == "channel_concat":
            cond = ref_lat + skel_lat
        else:  # token_residual
            cond = np.concatenate([ref_lat, skel_lat], axis=0)
    tpf = z0.shape[2] * z0.shape[3]
    attn_mask, _ = build_attention_mask(
        frame_mask, tpf, model.cfg.attention_mode,
        model.cfg.prediction_block_bidirectional)
    return z0, latent_mask, cond, attn_mask


def train_step(model: DiT, seq: seq_mod.UnifiedSequence,
               codec_cfg: codec_mod.CodecConfig, schedule: NoiseSchedule,
               region: str, opt_state, trainable: dict, rng: np.random.Generator,
               noising_mode: str = "corrected",
               grad_clip: float = 0.0) -> tuple[float, int]:
    """One forward/backward/optimizer step on a single training clip.

    Returns (loss, sampled timestep). The caller owns the seeded RNG stream,
    the optimizer state, the trainable-parameter selection, and the learning
    rate on opt_state; grad_clip > 0 caps the global gradient norm.
    """
    from . import optim
    if seq.mode != "train":
        raise ValueError("train_step requires a train-mode sequence")
    z0, latent_mask, cond, attn_mask = _prepare_inputs(seq, model, codec_cfg)
    t = int(rng.integers(0, schedule.n_steps))
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    z_t = add_noise_selective(z0, eps, t, latent_mask, schedule, noising_mode)
    tk.zero_grads(trainable)
    with tk.tape() as tp:
        pred = model.epsilon_theta(z_t, t, latent_mask, schedule.n_steps,
                                   attn_mask, cond)
        loss = masked_loss(pred, eps, latent_mask, region)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericalAbort(opt_state.step, t, [loss_val])
        tk.backward(loss, tp)
    if grad_clip > 0.0:
        optim.clip_grad_norm(trainable, grad_clip)
    optim.adamw_step(trainable, opt_state)
    return loss_val, t


def sample(model: DiT, seq: seq_mod.UnifiedSequence,
           codec_cfg: codec_mod.CodecConfig, schedule: NoiseSchedule,
           cfg: SamplerConfig, seed: int) -> np.ndarray:
    """Generate the target clip for an inference-mode sequence.

    Returns a (C, T, H, W) pixel video: the decoded target segment only.
    """
    if seq.mode != "infer":
        raise ValueError("sample requires an infer-mode sequence")
    z0, latent_mask, cond, attn_mask = _prepare_inputs(seq, model, codec_cfg)
    rng = np.random.default_rng(seed)
    z_init = rng.standard_normal(z0.shape).astype(z0.dtype)

    def denoise(z, t):
        pred = model.epsilon_theta(z, t, latent_mask, schedule.n_steps,
                                   attn_mask, cond)
        return pred.data

    z_hat = ddim_loop(denoise, z_init, z0, latent_mask, schedule, cfg)
    if model.cfg.conditioning_mode == "unified_sequence":
        z_hat = np.ascontiguousarray(
            seq_mod.split_target(z_hat, seq.clip_len,
                                 codec_cfg.temporal_stride))
    video = codec_mod.decode(denormalize_latent(z_hat), codec_cfg)
    return np.clip(video, 0.0, 1.0)
