"""Image/video quality metrics: SSIM, PSNR, and a declared Fréchet-distance
proxy over hand-crafted video features (labelled "fvd_proxy" everywhere; it
is not FVD and never claims to be).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

FEATURE_DIM = 16
COV_REGULARIZER = 1e-6


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter2d_reflect(img: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    """Separable 2D convolution with reflect (symmetric) padding, same size."""
    r = (kernel1d.size - 1) // 2
    padded = np.pad(img, ((r, r), (0, 0)), mode="symmetric")
    rows = np.stack([padded[i:i + img.shape[0]] for i in range(kernel1d.size)])
    out = np.tensordot(kernel1d, rows, axes=(0, 0))
    padded = np.pad(out, ((0, 0), (r, r)), mode="symmetric")
    cols = np.stack([padded[:, i:i + img.shape[1]] for i in range(kernel1d.size)])
    return np.tensordot(kernel1d, cols, axes=(0, 0))


def _ssim_single_channel(a: np.ndarray, b: np.ndarray) -> float:
    k = gaussian_kernel()
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a = _filter2d_reflect(a, k)
    mu_b = _filter2d_reflect(b, k)
    var_a = _filter2d_reflect(a * a, k) - mu_a ** 2
    var_b = _filter2d_reflect(b * b, k) - mu_b ** 2
    cov = _filter2d_reflect(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Accepts (H, W), (C, H, W) frames, or (C, L, H, W) videos; channels and
    frames are averaged.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_single_channel(a, b)
    if a.ndim == 3:
        return float(np.mean([_ssim_single_channel(a[c], b[c])
                              for c in range(a.shape[0])]))
    if a.ndim == 4:
        return float(np.mean([ssim(a[:, f], b[:, f])
                              for f in range(a.shape[1])]))
    raise ValueError(f"unsupported rank {a.ndim}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for dynamic range 1, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def video_features(video: np.ndarray) -> np.ndarray:
    """Hand-crafted 16-dim descriptor of a (C, L, H, W) video."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim != 4:
        raise ValueError("expected (C, L, H, W)")
    feats = []
    feats.extend(v.mean(axis=(1, 2, 3)))          # 3: per-channel mean
    feats.extend(v.std(axis=(1, 2, 3)))           # 3: per-channel std
    if v.shape[1] > 1:
        feats.append(np.abs(np.diff(v, axis=1)).mean())   # temporal change
    else:
        feats.append(0.0)
    gy = np.abs(np.diff(v, axis=2)).mean()
    gx = np.abs(np.diff(v, axis=3)).mean()
    feats.append(0.5 * (gx + gy))                 # spatial gradient magnitude
    traj = v.mean(axis=(0, 2, 3))                 # per-frame mean trajectory
    dtraj = np.diff(traj) if traj.size > 1 else np.zeros(1)
    feats.extend([traj.mean(), traj.std(), traj.min(), traj.max(),
                  traj[0], traj[-1], np.abs(dtraj).mean(),
                  traj[-1] - traj[0]])            # 8: trajectory stats
    out = np.array(feats, dtype=np.float64)
    assert out.shape == (FEATURE_DIM,)
    return out


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD matrix square root via eigendecomposition."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_features(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), computed through
    the symmetric form sqrtm(sqrt(S_a) S_b sqrt(S_a)). Covariances get a
    1e-6 diagonal regularizer against degeneracy.
    """
    fa = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False) + COV_REGULARIZER * np.eye(fa.shape[1])
    cov_b = np.cov(fb, rowvar=False) + COV_REGULARIZER * np.eye(fb.shape[1])
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    root_a = _sqrtm_psd(cov_a)
    middle = _sqrtm_psd(root_a @ cov_b @ root_a)
    dist = float(((mu_a - mu_b) ** 2).sum()
                 + np.trace(cov_a + cov_b - 2.0 * middle))
    return max(dist, 0.0)


def frechet_proxy(videos_a: list, videos_b: list) -> float:
    """Distribution distance between two sets of (C, L, H, W) videos."""
    if len(videos_a) < 2 or len(videos_b) < 2:
        raise ValueError("need at least 2 videos per set")
    fa = np.stack([video_features(v) for v in videos_a])
    fb = np.stack([video_features(v) for v in videos_b])
    return frechet_from_features(fa, fb)


@dataclass
class MetricReport:
    """Per-clip and aggregate scores, serializable as CSV."""
    clip_ids: list = field(default_factory=list)
    ssim_scores: list = field(default_factory=list)
    psnr_scores: list = field(default_factory=list)
    fvd_proxy: float = float("nan")
    config_hash: str = ""

    def add(self, clip_id: str, ssim_score: float, psnr_score: float):
        self.clip_ids.append(clip_id)
        self.ssim_scores.append(ssim_score)
        self.psnr_scores.append(psnr_score)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_scores))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_scores))

    def to_csv(self) -> str:
        lines = ["clip_id,ssim,psnr,fvd_proxy,config_hash"]
        for cid, s, p in zip(self.clip_ids, self.ssim_scores, self.psnr_scores):
            lines.append(f"{cid},{s:.6f},{p:.6f},,{self.config_hash}")
        lines.append(f"mean,{self.mean_ssim:.6f},{self.mean_psnr:.6f},"
                     f"{self.fvd_proxy:.6f},{self.config_hash}")
        return "\n".join(lines) + "\n"
