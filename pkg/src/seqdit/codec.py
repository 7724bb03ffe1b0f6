"""Exactly invertible latent codec: spatial patchify (space-to-depth) with
optional temporal striding, plus tiled encoding and temporal mask
downsampling.

The codec is a pure reshuffle, so decode(encode(x)) is bit-exact and tiled
encoding equals untiled encoding exactly. A learned codec could replace it
behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CodecConfigError(ValueError):
    """Input dimensions incompatible with the codec configuration."""


class MixedMaskWindowError(ValueError):
    """A temporal-stride window mixes context and prediction frames."""


@dataclass(frozen=True)
class CodecConfig:
    spatial_patch: int = 4
    temporal_stride: int = 1
    channels: int = 3

    def __post_init__(self):
        if self.spatial_patch < 1 or self.temporal_stride < 1:
            raise CodecConfigError("patch and stride must be >= 1")

    @property
    def latent_channels(self) -> int:
        return self.channels * self.spatial_patch ** 2 * self.temporal_stride

    def latent_shape(self, video_shape: tuple) -> tuple:
        c, l, h, w = video_shape
        self._check_divisibility(video_shape)
        p, rt = self.spatial_patch, self.temporal_stride
        return (c * p * p * rt, l // rt, h // p, w // p)

    def _check_divisibility(self, video_shape: tuple):
        c, l, h, w = video_shape
        if c != self.channels:
            raise CodecConfigError(f"channel count {c} != configured {self.channels}")
        p, rt = self.spatial_patch, self.temporal_stride
        for name, extent, div in (("L", l, rt), ("H", h, p), ("W", w, p)):
            if extent % div != 0:
                raise CodecConfigError(
                    f"axis {name}={extent} not divisible by {div}")


@dataclass(frozen=True)
class TileSpec:
    """Latent-pixel-space tile geometry for tiled encoding."""
    tile_h: int = 34
    tile_w: int = 34
    stride_h: int = 18
    stride_w: int = 16

    def __post_init__(self):
        if self.stride_h > self.tile_h or self.stride_w > self.tile_w:
            raise ValueError("tile stride must not exceed tile size")
        if self.tile_h < 1 or self.tile_w < 1:
            raise ValueError("tile size must be >= 1")


def encode(video: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """(C, L, H, W) -> (C*p*p*rt, L/rt, H/p, W/p), pure rearrangement."""
    cfg._check_divisibility(video.shape)
    c, l, h, w = video.shape
    p, rt = cfg.spatial_patch, cfg.temporal_stride
    x = video.reshape(c, l // rt, rt, h // p, p, w // p, p)
    # channel block order: (C, rt, ph, pw)
    x = x.transpose(0, 2, 4, 6, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(c * rt * p * p, l // rt, h // p, w // p))


def decode(latent: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Exact inverse of encode."""
    cl, ll, hh, ww = latent.shape
    p, rt, c = cfg.spatial_patch, cfg.temporal_stride, cfg.channels
    if cl != c * rt * p * p:
        raise CodecConfigError(
            f"latent channels {cl} inconsistent with config ({c * rt * p * p})")
    x = latent.reshape(c, rt, p, p, ll, hh, ww)
    x = x.transpose(0, 4, 1, 5, 2, 6, 3)
    return np.ascontiguousarray(x.reshape(c, ll * rt, hh * p, ww * p))


def encode_tiled(video: np.ndarray, cfg: CodecConfig,
                 tiles: TileSpec = TileSpec()) -> np.ndarray:
    """Encode tile by tile over the latent plane; identical output to encode.

    Tiles are specified in latent pixels and mapped back to pixel space via
    the spatial patch size, so every tile is aligned to the patch grid.
    Overlaps write identical values (the codec is local), so last-writer-wins
    is exact.
    """
    out = np.empty(cfg.latent_shape(video.shape), dtype=video.dtype)
    _, _, lh, lw = out.shape
    p = cfg.spatial_patch
    ys = list(range(0, lh, tiles.stride_h))
    xs = list(range(0, lw, tiles.stride_w))
    for y0 in ys:
        for x0 in xs:
            y1 = min(y0 + tiles.tile_h, lh)
            x1 = min(x0 + tiles.tile_w, lw)
            patch = video[:, :, y0 * p:y1 * p, x0 * p:x1 * p]
            out[:, :, y0:y1, x0:x1] = encode(np.ascontiguousarray(patch), cfg)
    return out


def downsample_mask(frame_mask: np.ndarray, temporal_stride: int) -> np.ndarray:
    """Collapse a frame-level binary mask to latent-frame resolution.

    Every window of `temporal_stride` frames must be mask-homogeneous; a
    latent frame is context (1) iff all covered pixel frames are context.
    """
    frame_mask = np.asarray(frame_mask)
    rt = temporal_stride
    if frame_mask.shape[0] % rt != 0:
        raise CodecConfigError(
            f"mask length {frame_mask.shape[0]} not divisible by stride {rt}")
    if rt == 1:
        return frame_mask.copy()
    windows = frame_mask.reshape(-1, rt)
    mixed = np.any(windows.min(axis=1) != windows.max(axis=1))
    if mixed:
        raise MixedMaskWindowError(
            "context/prediction boundary falls inside a temporal-stride window; "
            "choose T so that 1+T is divisible by the temporal stride")
    return windows[:, 0].copy()
