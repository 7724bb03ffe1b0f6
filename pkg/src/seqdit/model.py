"""Transformer denoiser over patchified latent tokens.

Supports three conditioning modes sharing one trunk:
  - unified_sequence: the packed [reference, skeletons, targets] latent plus
    a mask channel runs through the trunk as a single token stream.
  - channel_concat: condition latents are concatenated channel-wise with the
    noised target latents (sequence covers target frames only).
  - token_residual: condition latents pass through a dedicated linear encoder
    and are added to the target tokens after patch embedding.

Attention masking is additive (-inf on forbidden pairs), which realizes the
"prediction tokens attend only to earlier positions" contract exactly; a
multiplicative variant is kept behind a debug flag for study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

ATTENTION_MODES = ("full", "block_causal")
CONDITIONING_MODES = ("unified_sequence", "channel_concat", "token_residual")
LORA_TARGETS = ("q", "k", "v", "o", "ffn.0", "ffn.2")


@dataclass(frozen=True)
class DiTConfig:
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    mlp_ratio: int = 4
    max_tokens: int = 8192
    attention_mode: str = "full"
    conditioning_mode: str = "unified_sequence"
    prediction_block_bidirectional: bool = False
    multiplicative_mask_debug: bool = False

    def __post_init__(self):
        if self.dim != self.n_heads * self.head_dim:
            raise ValueError("dim must equal n_heads * head_dim")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(
                f"unknown conditioning_mode {self.conditioning_mode!r}")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 128
    alpha: float = 128.0
    targets: tuple = LORA_TARGETS
    enabled: bool = False

    def __post_init__(self):
        if self.enabled and self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        unknown = set(self.targets) - set(LORA_TARGETS)
        if unknown:
            raise ValueError(f"unknown LoRA target tags: {sorted(unknown)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def sinusoidal_embedding(pos: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Standard sin/cos embedding, (len(pos), dim)."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:  # odd dim: pad one zero column
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb.astype(dtype)


def factorized_positions(l: int, h: int, w: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 3D-factorized sinusoidal positions, (l*h*w, dim), (l,h,w) order."""
    d_l = dim // 2
    d_h = dim // 4
    d_w = dim - d_l - d_h
    el = sinusoidal_embedding(np.arange(l), d_l, dtype)
    eh = sinusoidal_embedding(np.arange(h), d_h, dtype)
    ew = sinusoidal_embedding(np.arange(w), d_w, dtype)
    out = np.empty((l, h, w, dim), dtype=dtype)
    out[..., :d_l] = el[:, None, None, :]
    out[..., d_l:d_l + d_h] = eh[None, :, None, :]
    out[..., d_l + d_h:] = ew[None, None, :, :]
    return out.reshape(l * h * w, dim)


def build_attention_mask(latent_frame_mask: np.ndarray, tokens_per_frame: int,
                         attention_mode: str,
                         prediction_block_bidirectional: bool = False):
    """Token-level attention mask derived from the latent frame mask.

    Returns (additive, allowed) where additive is (N, N) float32 with 0 on
    allowed pairs and -inf on forbidden pairs, and allowed is the boolean
    matrix. Full mode returns (None, None): no restriction.
    """
    if attention_mode == "full":
        return None, None
    fm = np.asarray(latent_frame_mask).astype(bool)  # True = context
    l = fm.shape[0]
    idx = np.arange(l)
    is_ctx = fm
    # context rows: attend to context only; prediction rows: context plus
    # prediction frames up to their own (strict causal) or all predictions.
    allowed = np.zeros((l, l), dtype=bool)
    allowed[np.ix_(is_ctx, is_ctx)] = True
    pred = ~is_ctx
    allowed[np.ix_(pred, is_ctx)] = True
    if prediction_block_bidirectional:
        allowed[np.ix_(pred, pred)] = True
    else:
        causal = idx[None, :] <= idx[:, None]
        allowed |= (pred[:, None] & pred[None, :] & causal)
    allowed = np.repeat(np.repeat(allowed, tokens_per_frame, axis=0),
                        tokens_per_frame, axis=1)
    additive = np.where(allowed, 0.0, -np.inf).astype(np.float32)
    return additive, allowed


class DiT:
    """The denoiser network; owns a flat tag -> Tensor parameter dict."""

    def __init__(self, cfg: DiTConfig, latent_channels: int, seed: int = 0,
                 dtype=np.float32, lora: LoRAConfig | None = None):
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.dtype = dtype
        self.lora = lora if (lora is not None and lora.enabled) else None
        self.params: dict[str, Tensor] = {}
        self._pos_cache: dict[tuple, np.ndarray] = {}
        self._ln_one = Tensor(np.ones(cfg.dim, dtype=dtype))
        self._ln_zero = Tensor(np.zeros(cfg.dim, dtype=dtype))
        self._init_params(np.random.default_rng(seed))
        if self.lora is not None:
            self._init_lora(np.random.default_rng(seed + 1))

    # -- parameter construction ------------------------------------------------

    @property
    def in_channels(self) -> int:
        c = self.latent_channels
        if self.cfg.conditioning_mode == "channel_concat":
            return 2 * c + 1
        return c + 1  # latent plus mask channel

    def _w(self, rng, shape, std=0.02):
        return Tensor(rng.normal(0.0, std, size=shape).astype(self.dtype),
                      requires_grad=True)

    def _zeros(self, shape):
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def _init_params(self, rng):
        d = self.cfg.dim
        c = self.latent_channels
        p = self.params
        # patch embed scaled like 1/sqrt(fan_in): token activations start
        # near unit scale so the positional code stays readable downstream
        p["patch_embed.w"] = self._w(rng, (self.in_channels, d),
                                     std=1.0 / math.sqrt(self.in_channels))
        p["patch_embed.b"] = self._zeros(d)
        p["time_embed.0.w"] = self._w(rng, (d, d))
        p["time_embed.0.b"] = self._zeros(d)
        p["time_embed.2.w"] = self._w(rng, (d, d))
        p["time_embed.2.b"] = self._zeros(d)
        hidden = d * self.cfg.mlp_ratio
        for i in range(self.cfg.n_layers):
            pre = f"blocks.{i}"
            for tag in ("q", "k", "v", "o"):
                p[f"{pre}.attn.{tag}.w"] = self._w(rng, (d, d))
                p[f"{pre}.attn.{tag}.b"] = self._zeros(d)
            p[f"{pre}.ffn.0.w"] = self._w(rng, (d, hidden))
            p[f"{pre}.ffn.0.b"] = self._zeros(hidden)
            p[f"{pre}.ffn.2.w"] = self._w(rng, (hidden, d))
            p[f"{pre}.ffn.2.b"] = self._zeros(d)
            # adaLN modulation: weights start at zero but the gate biases
            # start open (1.0) so attention and FFN contribute from step one;
            # a fully closed gate takes too long to open at short budgets
            p[f"{pre}.mod.w"] = self._zeros((d, 6 * d))
            mod_b = np.zeros(6 * d, dtype=self.dtype)
            mod_b[2 * d:3 * d] = 1.0
            mod_b[5 * d:6 * d] = 1.0
            p[f"{pre}.mod.b"] = Tensor(mod_b, requires_grad=True)
            self._init_structured_heads(i)
        p["final_mod.w"] = self._zeros((d, 2 * d))
        p["final_mod.b"] = self._zeros(2 * d)
        # zero-init head: the fresh model predicts zero noise
        p["head.w"] = self._zeros((d, c))
        p["head.b"] = self._zeros(c)
        if self.cfg.conditioning_mode == "token_residual":
            p["cond_embed.w"] = self._w(rng, (2 * c, d))
            p["cond_embed.b"] = self._zeros(d)

    def _init_structured_heads(self, block: int):
        """Give the first two attention heads a spatial-alignment prior.

        Queries and keys are wired to the low-frequency components of the
        factorized positional code, so before any training:
          - head 0 attends to tokens at its own (h, w) grid position across
            all frames (a temporal column), and
          - head 1 additionally keys on the first frame's temporal code, so
            it reads the token at the same position in the leading frame.
        Both are soft priors expressed purely through q/k values; training
        is free to reshape them. Remaining heads keep the random init; head 1
        is only structured when at least one other head stays unstructured,
        so every model retains a diffuse attention path at init.
        """
        d, hd = self.cfg.dim, self.cfg.head_dim
        d_l = d // 2
        d_h = d // 4
        d_w = d - d_l - d_h
        nf0 = min(hd // 4, d_h // 2, d_w // 2)
        if nf0 < 1:
            return
        scale = 5.0
        h0, w0 = d_l, d_l + d_h
        def spatial_dims(nf):
            return ([h0 + f for f in range(nf)]
                    + [h0 + d_h // 2 + f for f in range(nf)]
                    + [w0 + f for f in range(nf)]
                    + [w0 + d_w // 2 + f for f in range(nf)])
        qw = self.params[f"blocks.{block}.attn.q.w"].data
        kw = self.params[f"blocks.{block}.attn.k.w"].data
        qb = self.params[f"blocks.{block}.attn.q.b"].data
        # head 0: same-(h, w) column across frames
        qw[:, :hd] = 0.0
        kw[:, :hd] = 0.0
        for j, src in enumerate(spatial_dims(nf0)):
            qw[src, j] = scale
            kw[src, j] = scale
        if self.cfg.n_heads < 3:
            return
        # head 1: same (h, w) in the first frame
        nt = min(4, d_l // 2)
        nf1 = min((hd - 2 * nt) // 4, d_h // 2, d_w // 2)
        if nf1 < 1 or nt < 1:
            return
        t_scale = 4.0
        qw[:, hd:2 * hd] = 0.0
        kw[:, hd:2 * hd] = 0.0
        for j, src in enumerate(spatial_dims(nf1)):
            qw[src, hd + j] = scale
            kw[src, hd + j] = scale
        t_dims = ([f for f in range(nt)]
                  + [d_l // 2 + f for f in range(nt)])
        e_t0 = sinusoidal_embedding(np.array([0.0]), d_l)[0]
        off = hd + 4 * nf1
        for j, src in enumerate(t_dims):
            kw[src, off + j] = t_scale
            qb[off + j] = t_scale * e_t0[src]

    def _init_lora(self, rng):
        cfg = self.lora
        d = self.cfg.dim
        hidden = d * self.cfg.mlp_ratio
        dims = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "ffn.0": (d, hidden), "ffn.2": (hidden, d)}
        for i in range(self.cfg.n_layers):
            for tag in cfg.targets:
                din, dout = dims[tag]
                base = f"blocks.{i}.{'attn.' + tag if tag in 'qkvo' else tag}"
                if base + ".w" not in self.params:
                    raise KeyError(f"LoRA target {base} not found")
                a = rng.normal(0.0, 1.0 / math.sqrt(din),
                               size=(din, cfg.rank)).astype(self.dtype)
                self.params[f"lora.{base}.A"] = Tensor(a, requires_grad=True)
                # zero-init B: adapted forward equals base forward initially
                self.params[f"lora.{base}.B"] = self._zeros((cfg.rank, dout))

    def trainable_params(self, tuning: str = "full") -> dict[str, Tensor]:
        """Select and flag the trainable subset ('full' or 'lora')."""
        if tuning == "lora":
            if self.lora is None:
                raise ValueError("tuning=lora requires an enabled LoRAConfig")
            chosen = {k: v for k, v in self.params.items() if k.startswith("lora.")}
        elif tuning == "full":
            chosen = {k: v for k, v in self.params.items() if not k.startswith("lora.")}
        else:
            raise ValueError(f"unknown tuning {tuning!r}")
        for k, v in self.params.items():
            v.requires_grad = k in chosen
        return chosen

    def merge_lora(self) -> None:
        """Fold A @ B * (alpha/rank) into the base weights and drop adapters."""
        if self.lora is None:
            return
        scale = self.lora.scale
        for key in [k for k in self.params if k.startswith("lora.") and k.endswith(".A")]:
            base = key[len("lora."):-2] + ".w"
            a = self.params[key].data
            b = self.params[key[:-2] + ".B"].data
            w = self.params[base]
            w.data = (w.data + (a @ b) * scale).astype(w.data.dtype)
            del self.params[key]
            del self.params[key[:-2] + ".B"]
        self.lora = None

    def n_trunk_params(self) -> int:
        """Parameter count of the shared transformer trunk (blocks + norms)."""
        return sum(v.data.size for k, v in self.params.items()
                   if k.startswith(("blocks.", "final_mod.", "head.",
                                    "time_embed.")))

    # -- forward ----------------------------------------------------------------

    def _linear(self, x: Tensor, tag: str) -> Tensor:
        w = self.params[tag + ".w"]
        b = self.params[tag + ".b"]
        y = x.matmul(w) + b
        akey = "lora." + tag + ".A"
        if akey in self.params:
            a = self.params[akey]
            bb = self.params["lora." + tag + ".B"]
            y = y + x.matmul(a).matmul(bb) * self.lora.scale
        return y

    def _positions(self, l: int, h: int, w: int) -> np.ndarray:
        key = (l, h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = factorized_positions(
                l, h, w, self.cfg.dim, self.dtype)
        return self._pos_cache[key]

    def _time_embedding(self, t: int, n_steps: int) -> Tensor:
        if not (0 <= t < n_steps):
            raise ValueError(f"timestep {t} outside schedule [0, {n_steps})")
        sin = Tensor(sinusoidal_embedding([t], self.cfg.dim, self.dtype))
        h = self._linear(sin, "time_embed.0").gelu()
        return self._linear(h, "time_embed.2")  # (1, d)

    def _attention(self, x: Tensor, block: int, attn_mask) -> Tensor:
        cfg = self.cfg
        n = x.shape[0]
        pre = f"blocks.{block}.attn"
        q = self._linear(x, f"{pre}.q").reshape(n, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
        k = self._linear(x, f"{pre}.k").reshape(n, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
        v = self._linear(x, f"{pre}.v").reshape(n, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
        inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)
        if attn_mask is not None and cfg.multiplicative_mask_debug:
            binary = (attn_mask == 0.0).astype(self.dtype)
            scores = q.matmul(k.transpose(0, 2, 1)) * Tensor(binary) * inv_sqrt
        elif attn_mask is not None:
            # scale folded into q: cheaper than scaling the score matrix
            scores = (q * inv_sqrt).matmul(k.transpose(0, 2, 1)) + Tensor(attn_mask)
        else:
            scores = (q * inv_sqrt).matmul(k.transpose(0, 2, 1))
        weights = scores.softmax(axis=-1)
        out = weights.matmul(v).transpose(1, 0, 2).reshape(n, cfg.dim)
        return self._linear(out, f"{pre}.o")

    @staticmethod
    def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        return x * (scale + 1.0) + shift

    def _forward_tokens(self, tokens: Tensor, grid: tuple, t: int, n_steps: int,
                        attn_mask, cond_tokens: Tensor | None = None) -> Tensor:
        """Trunk over (N, in_channels) tokens; returns (N, latent_channels)."""
        cfg = self.cfg
        l, h, w = grid
        n = l * h * w
        if n > cfg.max_tokens:
            raise ValueError(f"token count {n} exceeds max_tokens {cfg.max_tokens}")
        x = self._linear(tokens, "patch_embed")
        if cond_tokens is not None:
            x = x + cond_tokens
        x = x + Tensor(self._positions(l, h, w))
        temb = self._time_embedding(t, n_steps)
        d = cfg.dim
        for i in range(cfg.n_layers):
            mod = self._linear(temb, f"blocks.{i}.mod")  # (1, 6d)
            sh1, sc1, g1 = mod[:, :d], mod[:, d:2 * d], mod[:, 2 * d:3 * d]
            sh2, sc2, g2 = mod[:, 3 * d:4 * d], mod[:, 4 * d:5 * d], mod[:, 5 * d:]
            hmod = self._modulate(x.layer_norm(self._ln_one, self._ln_zero), sh1, sc1)
            x = x + g1 * self._attention(hmod, i, attn_mask)
            hmod = self._modulate(x.layer_norm(self._ln_one, self._ln_zero), sh2, sc2)
            ff = self._linear(hmod, f"blocks.{i}.ffn.0").gelu()
            ff = self._linear(ff, f"blocks.{i}.ffn.2")
            x = x + g2 * ff
        fmod = self._linear(temb, "final_mod")
        x = self._modulate(x.layer_norm(self._ln_one, self._ln_zero),
                           fmod[:, :d], fmod[:, d:])
        return self._linear(x, "head")

    @staticmethod
    def _to_tokens(latent: np.ndarray) -> tuple[np.ndarray, tuple]:
        """(c, l, h, w) -> ((l*h*w, c) tokens, (l, h, w) grid)."""
        c, l, h, w = latent.shape
        tokens = latent.reshape(c, l * h * w).T
        return np.ascontiguousarray(tokens), (l, h, w)

    @staticmethod
    def _from_tokens(tokens: Tensor, grid: tuple) -> Tensor:
        l, h, w = grid
        return tokens.transpose(1, 0).reshape(tokens.shape[1], l, h, w)

    def epsilon_theta(self, z_t: np.ndarray, t: int, latent_mask: np.ndarray,
                      n_steps: int, attn_mask=None,
                      cond: np.ndarray | None = None) -> Tensor:
        """Predict noise for z_t; shape of the return equals z_t's shape.

        `cond` carries the mode-specific condition latents: the channel-wise
        condition (c channels) for channel_concat, the paired reference and
        skeleton latents (2c channels) for token_residual, unused for
        unified_sequence (conditioning lives inside z_t itself).
        """
        mode = self.cfg.conditioning_mode
        mask_ch = np.broadcast_to(latent_mask, (1,) + z_t.shape[1:]).astype(z_t.dtype)
        cond_tokens = None
        if mode == "unified_sequence":
            z_in = np.concatenate([z_t, mask_ch], axis=0)
        elif mode == "channel_concat":
            if cond is None:
                cond = np.zeros_like(z_t)
            if cond.shape != z_t.shape:
                raise ValueError(
                    f"condition latent shape {cond.shape} != z_t {z_t.shape}")
            z_in = np.concatenate([z_t, cond, mask_ch], axis=0)
        elif mode == "token_residual":
            z_in = np.concatenate([z_t, mask_ch], axis=0)
            if cond is not None:
                if cond.shape[1:] != z_t.shape[1:]:
                    raise ValueError(
                        f"condition grid {cond.shape[1:]} != z_t grid {z_t.shape[1:]}")
                ctoks, _ = self._to_tokens(cond.astype(self.dtype))
                cond_tokens = self._linear(Tensor(ctoks), "cond_embed")
        tokens, grid = self._to_tokens(z_in.astype(self.dtype))
        out = self._forward_tokens(Tensor(tokens), grid, t, n_steps,
                                   attn_mask, cond_tokens)
        return self._from_tokens(out, grid)
