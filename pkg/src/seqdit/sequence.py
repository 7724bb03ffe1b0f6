"""Packed conditioning sequence: [reference, skeletons, targets] plus the
binary context/prediction mask.

Positions are 1-based in docs (context = positions 1..1+T, targets =
1+T+1..1+2T) and 0-based in code: context = [0, 1+T), targets = [1+T, 1+2T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec


@dataclass
class UnifiedSequence:
    """Reference frame + T skeleton frames + T target frames, one clip."""
    ref: np.ndarray          # (C, H, W)
    skeletons: np.ndarray    # (T, C, H, W)
    targets: np.ndarray      # (T, C, H, W); zeros in infer mode
    mode: str                # 'train' | 'infer'

    @property
    def clip_len(self) -> int:
        return self.skeletons.shape[0]

    @property
    def total_len(self) -> int:
        return 1 + 2 * self.clip_len

    def video(self) -> np.ndarray:
        """Concatenate to a (C, 1+2T, H, W) pixel video."""
        frames = np.concatenate(
            [self.ref[None], self.skeletons, self.targets], axis=0)
        return np.ascontiguousarray(frames.transpose(1, 0, 2, 3))


@dataclass
class MaskSpec:
    frame_mask: np.ndarray   # (1+2T,) of {1, 0}; 1 = context
    latent_mask: np.ndarray  # (1, l, h, w) of {1, 0}


def build_sequence(ref: np.ndarray, skeletons: np.ndarray,
                   targets: np.ndarray | None, mode: str) -> UnifiedSequence:
    """Assemble the packed sequence. In infer mode targets are zero-filled."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    skeletons = np.asarray(skeletons)
    ref = np.asarray(ref)
    if skeletons.ndim != 4:
        raise ValueError("skeletons must be (T, C, H, W)")
    if ref.shape != skeletons.shape[1:]:
        raise ValueError(
            f"reference shape {ref.shape} != frame shape {skeletons.shape[1:]}")
    if mode == "infer":
        targets = np.zeros_like(skeletons)
    else:
        targets = np.asarray(targets)
        if targets.shape != skeletons.shape:
            raise ValueError(
                f"target count/shape {targets.shape} != skeleton {skeletons.shape}")
    return UnifiedSequence(ref=ref, skeletons=skeletons, targets=targets, mode=mode)


def build_mask(clip_len: int, cfg: codec.CodecConfig,
               latent_hw: tuple[int, int]) -> MaskSpec:
    """Binary mask: 1 on the reference and skeleton positions, 0 on targets."""
    if clip_len < 1:
        raise ValueError("clip length must be >= 1")
    t = clip_len
    frame_mask = np.concatenate(
        [np.ones(1 + t, dtype=np.int64), np.zeros(t, dtype=np.int64)])
    latent_frames = codec.downsample_mask(frame_mask, cfg.temporal_stride)
    h, w = latent_hw
    latent = np.broadcast_to(
        latent_frames[None, :, None, None], (1, latent_frames.shape[0], h, w))
    return MaskSpec(frame_mask=frame_mask,
                    latent_mask=np.ascontiguousarray(latent).astype(np.float32))


def split_target(seq: np.ndarray, clip_len: int, temporal_stride: int = 1) -> np.ndarray:
    """Return the trailing target segment of a (C, L, ...) sequence array."""
    t = clip_len
    if (1 + 2 * t) % temporal_stride != 0:
        raise ValueError("1+2T not divisible by temporal stride")
    expect = (1 + 2 * t) // temporal_stride
    if seq.shape[1] != expect:
        raise ValueError(
            f"sequence length {seq.shape[1]} != expected {expect} "
            f"(T={t}, stride={temporal_stride})")
    n_target = t // temporal_stride
    return seq[:, expect - n_target:]


def context_part(seq: np.ndarray, clip_len: int) -> np.ndarray:
    """Leading 1+T context segment of a (C, L, ...) sequence array."""
    return seq[:, :1 + clip_len]
