"""Seeded synthetic corpus: articulated 2D stick figures with distinct
appearances, paired with OpenPose-style skeleton renderings.

Joint layout is the 18-point OpenPose COCO body convention. Motions come
from a bounded Ornstein-Uhlenbeck walk on the joint angles, which gives
smooth, diverse clips without any external assets. Character frames and
skeleton frames are rendered from the same track, so alignment holds by
construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .clipio import save_clip

N_JOINTS = 18

JOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist", "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)

# Bone list (parent, child) following the OpenPose limb sequence.
BONES = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

# Canonical OpenPose limb palette (RGB in [0,1]), one color per bone.
SKELETON_PALETTE = np.array([
    [255, 0, 0], [255, 85, 0], [255, 170, 0], [255, 255, 0],
    [170, 255, 0], [85, 255, 0], [0, 255, 0], [0, 255, 85],
    [0, 255, 170], [0, 255, 255], [0, 170, 255], [0, 85, 255],
    [0, 0, 255], [85, 0, 255], [170, 0, 255], [255, 0, 255],
    [255, 0, 170],
], dtype=np.float32) / 255.0

CONFIDENCE_THRESHOLD = 0.05

# BODY_25 -> COCO-18 joint index mapping (drops MidHip and the foot points).
BODY25_TO_COCO18 = (0, 1, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18)


class KeypointFormatError(ValueError):
    pass


@dataclass
class SkeletonTrack:
    """(T, 18, 3) array of normalized (x, y, confidence)."""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[1:] != (N_JOINTS, 3):
            raise ValueError(f"track must be (T, {N_JOINTS}, 3), "
                             f"got {self.points.shape}")

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]


@dataclass
class SpriteCharacter:
    """Deterministic appearance derived from an identity seed."""
    identity_seed: int
    limb_colors: np.ndarray = field(init=False)   # (n_bones, 3)
    limb_widths: np.ndarray = field(init=False)   # (n_bones,) as fraction of H
    head_radius: float = field(init=False)        # fraction of H
    background: np.ndarray = field(init=False)    # (3,)

    def __post_init__(self):
        rng = np.random.default_rng(self.identity_seed)
        # one base body color per identity with small per-limb jitter, and an
        # identity-specific mid-tone background: appearance at every pixel
        # carries identity information, which keeps the desk-scale
        # conditioning task learnable at 32x32
        while True:
            base = rng.uniform(0.25, 1.0, size=3).astype(np.float32)
            # keep appearances distinguishable from the pose rendering
            if np.min(np.linalg.norm(SKELETON_PALETTE - base, axis=1)) > 0.4:
                break
        jitter = rng.uniform(-0.08, 0.08, size=(len(BONES), 3))
        self.limb_colors = np.clip(base[None] + jitter,
                                   0.05, 1.0).astype(np.float32)
        self.limb_widths = rng.uniform(0.10, 0.16, size=len(BONES))
        self.head_radius = float(rng.uniform(0.16, 0.22))
        self.background = rng.uniform(0.25, 0.75, size=3).astype(np.float32)


@dataclass
class ClipRecord:
    clip_id: str
    seed: int
    split: str                      # 'train' | 'test'
    character: SpriteCharacter
    track: SkeletonTrack            # T+1 frames; frame 0 is the reference pose
    ref_frame: np.ndarray           # (C, H, W)
    char_frames: np.ndarray         # (T, C, H, W) ground-truth targets
    skel_frames: np.ndarray         # (T, C, H, W) pose guidance


# -- motion model ---------------------------------------------------------------

_ANGLE_KEYS = ("r_arm", "r_elbow", "l_arm", "l_elbow",
               "r_leg", "r_knee", "l_leg", "l_knee", "torso", "head")

_REST_ANGLES = {
    "r_arm": 2.4, "r_elbow": 2.2, "l_arm": 0.7, "l_elbow": 0.9,
    "r_leg": 1.8, "r_knee": 1.6, "l_leg": 1.35, "l_knee": 1.5,
    "torso": math.pi / 2, "head": -math.pi / 2,
}

_BODY = {
    "torso_len": 0.22, "head_len": 0.10, "shoulder_half": 0.085,
    "hip_half": 0.055, "upper_arm": 0.11, "forearm": 0.10,
    "thigh": 0.13, "shin": 0.12, "eye_off": 0.028, "ear_off": 0.05,
}


def _unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def _pose_joints(root: np.ndarray, ang: dict) -> np.ndarray:
    """Forward kinematics: joint positions (18, 2) in normalized coords."""
    b = _BODY
    j = np.zeros((N_JOINTS, 2))
    neck = root
    torso_dir = _unit(ang["torso"])
    midhip = neck + b["torso_len"] * torso_dir
    side = np.array([torso_dir[1], -torso_dir[0]])  # perpendicular
    j[1] = neck
    j[2] = neck - b["shoulder_half"] * side
    j[5] = neck + b["shoulder_half"] * side
    j[3] = j[2] + b["upper_arm"] * _unit(ang["r_arm"])
    j[4] = j[3] + b["forearm"] * _unit(ang["r_arm"] + ang["r_elbow"] - _REST_ANGLES["r_elbow"] + 0.4)
    j[6] = j[5] + b["upper_arm"] * _unit(ang["l_arm"])
    j[7] = j[6] + b["forearm"] * _unit(ang["l_arm"] + ang["l_elbow"] - _REST_ANGLES["l_elbow"] - 0.4)
    j[8] = midhip - b["hip_half"] * side
    j[11] = midhip + b["hip_half"] * side
    j[9] = j[8] + b["thigh"] * _unit(ang["r_leg"])
    j[10] = j[9] + b["shin"] * _unit(ang["r_leg"] + ang["r_knee"] - _REST_ANGLES["r_knee"] + 0.2)
    j[12] = j[11] + b["thigh"] * _unit(ang["l_leg"])
    j[13] = j[12] + b["shin"] * _unit(ang["l_leg"] + ang["l_knee"] - _REST_ANGLES["l_knee"] - 0.2)
    head_dir = _unit(ang["head"])
    j[0] = neck + b["head_len"] * head_dir
    head_side = np.array([head_dir[1], -head_dir[0]])
    j[14] = j[0] - b["eye_off"] * head_side
    j[15] = j[0] + b["eye_off"] * head_side
    j[16] = j[0] - b["ear_off"] * head_side + 0.015 * head_dir
    j[17] = j[0] + b["ear_off"] * head_side + 0.015 * head_dir
    return j


def generate_track(n_frames: int, rng: np.random.Generator,
                   amplitude: float | None = None) -> SkeletonTrack:
    """Smooth bounded random-walk motion, n_frames poses, all confidence 1."""
    if amplitude is None:
        amplitude = float(rng.uniform(0.05, 0.12))
    ang = dict(_REST_ANGLES)
    # start slightly away from rest so clips differ from frame 0
    for k in _ANGLE_KEYS:
        ang[k] += float(rng.normal(0.0, 0.12 * amplitude))
    root = np.array([0.5, 0.34]) + rng.normal(0.0, 0.005, size=2)
    vel_root = np.zeros(2)
    theta, sigma = 0.12, 0.10 * amplitude
    pts = np.zeros((n_frames, N_JOINTS, 3))
    for f in range(n_frames):
        joints = _pose_joints(root, ang)
        pts[f, :, :2] = np.clip(joints, 0.0, 1.0)
        pts[f, :, 2] = 1.0
        for k in _ANGLE_KEYS:
            rest = _REST_ANGLES[k]
            ang[k] += theta * (rest - ang[k]) + sigma * float(rng.normal())
            ang[k] = float(np.clip(ang[k], rest - amplitude, rest + amplitude))
        vel_root = 0.8 * vel_root + rng.normal(0.0, 0.002, size=2)
        root = np.clip(root + vel_root, 0.35, 0.65)
    return SkeletonTrack(pts)


# -- rasterization ----------------------------------------------------------------


def _blend_segment(img: np.ndarray, p0, p1, color, width_px: float) -> None:
    """Anti-aliased line segment; img is (H, W, 3), coords in pixels."""
    h, w = img.shape[:2]
    half = width_px / 2.0
    x0 = max(int(math.floor(min(p0[0], p1[0]) - half - 1)), 0)
    x1 = min(int(math.ceil(max(p0[0], p1[0]) + half + 1)), w - 1)
    y0 = max(int(math.floor(min(p0[1], p1[1]) - half - 1)), 0)
    y1 = min(int(math.ceil(max(p0[1], p1[1]) + half + 1)), h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    px = np.stack([xs, ys], axis=-1).astype(np.float64)
    a = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - a
    len2 = float(d @ d)
    if len2 < 1e-12:
        t = np.zeros(px.shape[:2])
    else:
        t = np.clip(((px - a) @ d) / len2, 0.0, 1.0)
    closest = a + t[..., None] * d
    dist = np.linalg.norm(px - closest, axis=-1)
    cov = np.clip(half + 0.5 - dist, 0.0, 1.0)[..., None]
    region = img[y0:y1 + 1, x0:x1 + 1]
    region[...] = region * (1.0 - cov) + np.asarray(color) * cov


def _blend_disk(img: np.ndarray, center, radius_px: float, color) -> None:
    h, w = img.shape[:2]
    x0 = max(int(math.floor(center[0] - radius_px - 1)), 0)
    x1 = min(int(math.ceil(center[0] + radius_px + 1)), w - 1)
    y0 = max(int(math.floor(center[1] - radius_px - 1)), 0)
    y1 = min(int(math.ceil(center[1] + radius_px + 1)), h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    dist = np.hypot(xs - center[0], ys - center[1])
    cov = np.clip(radius_px + 0.5 - dist, 0.0, 1.0)[..., None]
    region = img[y0:y1 + 1, x0:x1 + 1]
    region[...] = region * (1.0 - cov) + np.asarray(color) * cov


def _to_pixels(joint: np.ndarray, h: int, w: int) -> tuple:
    return (float(joint[0]) * (w - 1), float(joint[1]) * (h - 1))


def render_skeleton_frame(track: SkeletonTrack, t: int, h: int, w: int) -> np.ndarray:
    """OpenPose-palette bones on black, (C, H, W) in [0,1]."""
    pts = track.points[t]
    img = np.zeros((h, w, 3), dtype=np.float64)
    width = max(0.045 * h, 1.0)
    for bone_idx, (a, b) in enumerate(BONES):
        if pts[a, 2] < CONFIDENCE_THRESHOLD or pts[b, 2] < CONFIDENCE_THRESHOLD:
            continue
        _blend_segment(img, _to_pixels(pts[a], h, w), _to_pixels(pts[b], h, w),
                       SKELETON_PALETTE[bone_idx], width)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def render_character_frame(character: SpriteCharacter, track: SkeletonTrack,
                           t: int, h: int, w: int) -> np.ndarray:
    """Same geometry as the skeleton render, with the character's look."""
    pts = track.points[t]
    img = np.broadcast_to(character.background.astype(np.float64),
                          (h, w, 3)).copy()
    for bone_idx, (a, b) in enumerate(BONES):
        if pts[a, 2] < CONFIDENCE_THRESHOLD or pts[b, 2] < CONFIDENCE_THRESHOLD:
            continue
        _blend_segment(img, _to_pixels(pts[a], h, w), _to_pixels(pts[b], h, w),
                       character.limb_colors[bone_idx],
                       max(character.limb_widths[bone_idx] * h, 1.0))
    if pts[0, 2] >= CONFIDENCE_THRESHOLD:
        _blend_disk(img, _to_pixels(pts[0], h, w), character.head_radius * h,
                    character.limb_colors[12])
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


# -- corpus generation ------------------------------------------------------------

DEFAULT_N_TRAIN = 64
DEFAULT_N_TEST = 8
DEFAULT_CLIP_LEN = 8
DEFAULT_SIZE = 32
DEFAULT_N_IDENTITIES = 8


def _clip_seed(master_seed: int, clip_idx: int) -> int:
    ss = np.random.SeedSequence([master_seed, clip_idx])
    return int(ss.generate_state(1)[0])


def make_clip(clip_idx: int, master_seed: int, clip_len: int, h: int, w: int,
              split: str, identity_seed: int) -> ClipRecord:
    seed = _clip_seed(master_seed, clip_idx)
    rng = np.random.default_rng(seed)
    character = SpriteCharacter(identity_seed)
    track = generate_track(clip_len + 1, rng)
    ref = render_character_frame(character, track, 0, h, w)
    chars = np.stack([render_character_frame(character, track, f, h, w)
                      for f in range(1, clip_len + 1)])
    skels = np.stack([render_skeleton_frame(track, f, h, w)
                      for f in range(1, clip_len + 1)])
    return ClipRecord(clip_id=f"clip_{clip_idx:04d}", seed=seed, split=split,
                      character=character, track=track, ref_frame=ref,
                      char_frames=chars, skel_frames=skels)


def gen_dataset(n_train: int = DEFAULT_N_TRAIN, n_test: int = DEFAULT_N_TEST,
                clip_len: int = DEFAULT_CLIP_LEN, h: int = DEFAULT_SIZE,
                w: int = DEFAULT_SIZE, master_seed: int = 42,
                n_identities: int = DEFAULT_N_IDENTITIES) -> list[ClipRecord]:
    """Generate the full corpus in memory, deterministically.

    Test clips reuse identities from the training pool (held-out motions,
    seen appearances). Per-clip seeds derive from (master_seed, clip index),
    so generation order is irrelevant.
    """
    if n_train < 1 or n_test < 0:
        raise ValueError("need n_train >= 1 and n_test >= 0")
    if h < 2 or w < 2:
        raise ValueError("frame size too small")
    id_rng = np.random.default_rng(np.random.SeedSequence([master_seed, 10 ** 9]))
    identity_seeds = [int(s) for s in
                      id_rng.integers(0, 2 ** 31, size=n_identities)]
    records = []
    total = n_train + n_test
    for i in range(total):
        split = "train" if i < n_train else "test"
        records.append(make_clip(i, master_seed, clip_len, h, w, split,
                                 identity_seeds[i % n_identities]))
    return records


def write_dataset(records: list[ClipRecord], out_dir: str, meta: dict) -> str:
    """Write clip containers, keypoints, and the manifest (written last)."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for rec in records:
        base = os.path.join(out_dir, rec.clip_id)
        save_clip(base + ".char.vclip",
                  rec.char_frames.transpose(1, 0, 2, 3))
        save_clip(base + ".skel.vclip",
                  rec.skel_frames.transpose(1, 0, 2, 3))
        save_clip(base + ".ref.vclip", rec.ref_frame[:, None])
        h, w = rec.ref_frame.shape[1:]
        save_keypoints(base + ".keypoints.json",
                       SkeletonTrack(rec.track.points[1:]), h, w)
        entries.append({"clip_id": rec.clip_id, "seed": rec.seed,
                        "split": rec.split,
                        "identity_seed": rec.character.identity_seed})
    manifest = dict(meta)
    manifest["clips"] = entries
    manifest_path = os.path.join(out_dir, "manifest.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def load_dataset(corpus_dir: str) -> tuple[dict, list[dict]]:
    """Read the manifest; clip arrays load lazily via load_clip_record."""
    path = os.path.join(corpus_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {corpus_dir}")
    with open(path) as f:
        manifest = json.load(f)
    return manifest, manifest["clips"]


def load_clip_arrays(corpus_dir: str, clip_id: str) -> dict:
    from .clipio import load_clip
    base = os.path.join(corpus_dir, clip_id)
    return {
        "ref": load_clip(base + ".ref.vclip")[:, 0],
        "char": load_clip(base + ".char.vclip").transpose(1, 0, 2, 3),
        "skel": load_clip(base + ".skel.vclip").transpose(1, 0, 2, 3),
    }


# -- keypoint files ----------------------------------------------------------------


def save_keypoints(path: str, track: SkeletonTrack, h: int, w: int) -> None:
    """OpenPose-layout JSON: one object per frame, people/pose_keypoints_2d."""
    frames = []
    for f in range(track.n_frames):
        pts = track.points[f].copy()
        flat = np.empty(N_JOINTS * 3)
        flat[0::3] = pts[:, 0] * w
        flat[1::3] = pts[:, 1] * h
        flat[2::3] = pts[:, 2]
        frames.append({"people": [{"pose_keypoints_2d": flat.tolist()}]})
    doc = {"canvas_width": w, "canvas_height": h, "frames": frames}
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_keypoints(path: str) -> SkeletonTrack:
    """Parse an OpenPose-layout keypoint document into a normalized track.

    Frames with an empty people array become zero-confidence poses. BODY_25
    joints are coerced to the 18-joint layout; other counts are an error.
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise KeypointFormatError(f"{path}: not valid JSON: {e}") from e
    try:
        w = float(doc["canvas_width"])
        h = float(doc["canvas_height"])
        frames = doc["frames"]
    except (KeyError, TypeError) as e:
        raise KeypointFormatError(
            f"{path}: missing canvas_width/canvas_height/frames") from e
    out = np.zeros((len(frames), N_JOINTS, 3))
    for i, frame in enumerate(frames):
        people = frame.get("people", [])
        if not people:
            continue
        flat = np.asarray(people[0]["pose_keypoints_2d"], dtype=np.float64)
        if flat.size % 3 != 0:
            raise KeypointFormatError(
                f"{path}: frame {i}: keypoint array length {flat.size} "
                "is not a multiple of 3")
        pts = flat.reshape(-1, 3)
        if pts.shape[0] == 25:
            pts = pts[list(BODY25_TO_COCO18)]
        elif pts.shape[0] != N_JOINTS:
            raise KeypointFormatError(
                f"{path}: frame {i}: {pts.shape[0]} joints, no known "
                f"mapping to {N_JOINTS}")
        out[i, :, 0] = pts[:, 0] / w
        out[i, :, 1] = pts[:, 1] / h
        out[i, :, 2] = pts[:, 2]
    return SkeletonTrack(out)
