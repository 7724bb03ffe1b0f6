"""Binary checkpoint format.

Layout (little-endian):
  magic b"SQCK", version uint32
  config-hash: uint16 length + ascii bytes
  n parameter blocks: uint32
  per block: uint16 tag length + utf-8 tag, uint8 ndim, uint32 shape extents,
             float32 raw data
  optimizer flag: uint8 (0/1); if 1: step uint64, then m and v blocks in the
  same block format (tags prefixed "m." / "v.") plus lr/betas/eps/wd float64.

Round trip is bit-exact. LoRA adapters are written to their own file by the
training driver, never mixed into a base checkpoint.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .optim import AdamWState
from .tensor import Tensor

MAGIC = b"SQCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigHashMismatch(CheckpointError):
    pass


def _write_block(f, tag: str, arr: np.ndarray):
    tb = tag.encode()
    f.write(struct.pack("<H", len(tb)))
    f.write(tb)
    # note: np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(arr, dtype="<f4", order="C")
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_block(f) -> tuple[str, np.ndarray]:
    (tlen,) = struct.unpack("<H", f.read(2))
    tag = f.read(tlen).decode()
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    n = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
    return tag, data.copy()


def save(path: str, params: dict[str, Tensor], config_hash: str,
         opt_state: AdamWState | None = None) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            hb = config_hash.encode()
            f.write(struct.pack("<H", len(hb)))
            f.write(hb)
            f.write(struct.pack("<I", len(params)))
            for tag in sorted(params):
                _write_block(f, tag, params[tag].data)
            if opt_state is None:
                f.write(struct.pack("<B", 0))
            else:
                f.write(struct.pack("<B", 1))
                f.write(struct.pack("<Q", opt_state.step))
                f.write(struct.pack("<5d", opt_state.lr, opt_state.beta1,
                                    opt_state.beta2, opt_state.eps,
                                    opt_state.weight_decay))
                f.write(struct.pack("<I", len(opt_state.m)))
                for tag in sorted(opt_state.m):
                    _write_block(f, "m." + tag, opt_state.m[tag])
                    _write_block(f, "v." + tag, opt_state.v[tag])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str, expect_hash: str | None = None,
         allow_hash_mismatch: bool = False):
    """Returns (params: dict[str, np.ndarray], config_hash, opt_state|None)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<H", f.read(2))
        file_hash = f.read(hlen).decode()
        if expect_hash is not None and file_hash != expect_hash:
            if not allow_hash_mismatch:
                raise ConfigHashMismatch(
                    f"{path}: checkpoint hash {file_hash} != config hash "
                    f"{expect_hash} (pass allow_hash_mismatch to override)")
        (n,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(n):
            tag, arr = _read_block(f)
            params[tag] = arr
        (has_opt,) = struct.unpack("<B", f.read(1))
        opt_state = None
        if has_opt:
            (step,) = struct.unpack("<Q", f.read(8))
            lr, b1, b2, eps, wd = struct.unpack("<5d", f.read(40))
            opt_state = AdamWState(lr=lr, beta1=b1, beta2=b2, eps=eps,
                                   weight_decay=wd, step=step)
            (nm,) = struct.unpack("<I", f.read(4))
            for _ in range(nm):
                mt, marr = _read_block(f)
                vt, varr = _read_block(f)
                opt_state.m[mt[2:]] = marr
                opt_state.v[vt[2:]] = varr
    return params, file_hash, opt_state


def restore_into(model_params: dict[str, Tensor], loaded: dict[str, np.ndarray],
                 prefix: str = "") -> None:
    """Copy loaded arrays into matching model tensors; shape-checked."""
    for tag, arr in loaded.items():
        key = prefix + tag
        if key not in model_params:
            raise CheckpointError(f"checkpoint tag {key!r} not in model")
        p = model_params[key]
        if p.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {key}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
