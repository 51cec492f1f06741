"""Transformer velocity network with adaptive-layernorm (zero-init) conditioning.

Latents are cut into non-overlapping patches, embedded as tokens, and
run through pre-norm transformer blocks whose scale/shift/gate
modulation comes from a condition embedding built from the timestep and
the style vector.  All modulation projections and the final output
projection start at exactly zero, so a fresh model is the identity on
its token stream and predicts an all-zero velocity.

Two RGB conditioning variants share one external signature: ``concat``
stacks the RGB latent onto the noised thermal latent channel-wise
before patchification; ``cross_attn`` patchifies the RGB latent
separately and inserts, between self-attention and the feedforward, a
cross-attention whose queries are the RGB tokens and whose keys/values
are the thermal token stream, added back residually.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .style import StyleBank

CONDITIONING_VARIANTS = ("concat", "cross_attn")


@dataclass(frozen=True)
class ModelConfig:
    latent_h: int = 16
    latent_w: int = 16
    latent_channels: int = 4
    patch_size: int = 2
    width: int = 128
    depth: int = 4
    heads: int = 4
    conditioning: str = "concat"
    style_dim: int = 64
    t_embed_dim: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.patch_size not in (2, 4, 8):
            raise ConfigError(f"patch_size must be one of 2/4/8, got {self.patch_size}")
        if self.latent_h % self.patch_size or self.latent_w % self.patch_size:
            raise ConfigError(
                f"latent {self.latent_h}x{self.latent_w} not divisible by patch {self.patch_size}"
            )
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.conditioning not in CONDITIONING_VARIANTS:
            raise ConfigError(
                f"conditioning must be one of {CONDITIONING_VARIANTS}, got '{self.conditioning}'"
            )

    @property
    def tokens(self) -> int:
        return (self.latent_h // self.patch_size) * (self.latent_w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.latent_channels


def patchify(z, p: int):
    """Cut (h, w, C) or (B, h, w, C) into row-major flattened p x p patches."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 3
    if single:
        z = z[None]
    if z.ndim != 4:
        raise DimensionError(f"patchify expects (B,h,w,C) or (h,w,C), got {z.shape}")
    b, h, w, c = z.shape
    if h % p or w % p:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = (
        z.reshape(b, gh, p, gw, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * gw, p * p * c)
    )
    return out[0] if single else out


def unpatchify(tokens, p: int, h: int, w: int, c: int):
    """Inverse of patchify; bitwise round-trips because both are pure reindexing."""
    tokens = np.asarray(tokens, dtype=np.float64)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    b = tokens.shape[0]
    gh, gw = h // p, w // p
    if tokens.shape[1] != gh * gw or tokens.shape[2] != p * p * c:
        raise DimensionError(f"token grid {tokens.shape} incompatible with {h}x{w}x{c}, p={p}")
    out = (
        tokens.reshape(b, gh, gw, p, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, h, w, c)
    )
    return out[0] if single else out


def _unpatchify_op(tokens: T.Tensor, p: int, h: int, w: int, c: int) -> T.Tensor:
    b = tokens.shape[0]
    gh, gw = h // p, w // p
    x = T.reshape(tokens, (b, gh, gw, p, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Frequency embedding of scalar times, cos halves then sin halves."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def positional_embedding_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos position table of shape (grid_h * grid_w, dim)."""
    if dim % 4:
        raise ConfigError(f"positional embedding width must be divisible by 4, got {dim}")
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb_y = sinusoidal_embedding(ys.reshape(-1), dim // 2, max_period=10000.0)
    emb_x = sinusoidal_embedding(xs.reshape(-1), dim // 2, max_period=10000.0)
    return np.concatenate([emb_y, emb_x], axis=1)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init: str = "xavier"):
        if init == "xavier":
            bound = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        elif init == "normal02":
            w = rng.normal(0.0, 0.02, size=(d_in, d_out))
        elif init == "zeros":
            w = np.zeros((d_in, d_out))
        else:
            raise ConfigError(f"unknown init '{init}'")
        self.w = T.Tensor(w, requires_grad=True)
        self.b = T.Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self) -> dict[str, T.Tensor]:
        return {"w": self.w, "b": self.b}


class MultiHeadAttention:
    """Scaled dot-product attention; queries may come from a second stream."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.head_dim = width // heads
        self.width = width
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)

    def _split(self, x: T.Tensor, n: int) -> T.Tensor:
        b = x.shape[0]
        x = T.reshape(x, (b, n, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, q_tokens: T.Tensor, kv_tokens: T.Tensor) -> T.Tensor:
        b, nq = q_tokens.shape[0], q_tokens.shape[1]
        nk = kv_tokens.shape[1]
        q = self._split(self.wq(q_tokens), nq)
        k = self._split(self.wk(kv_tokens), nk)
        v = self._split(self.wv(kv_tokens), nk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        attn = T.softmax_lastdim(scores)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, nq, self.width))
        return self.wo(out)

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for key, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for pk, pv in lin.params().items():
                out[f"{key}.{pk}"] = pv
        return out


class Mlp:
    def __init__(self, width: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(width, width * ratio, rng)
        self.fc2 = Linear(width * ratio, width, rng)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.fc2(T.silu(self.fc1(x)))

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for key, lin in (("fc1", self.fc1), ("fc2", self.fc2)):
            for pk, pv in lin.params().items():
                out[f"{key}.{pk}"] = pv
        return out


class ConditionEmbedder:
    """Maps (t, style embedding) to the width-sized condition vector."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.t_embed_dim = cfg.t_embed_dim
        self.t_fc1 = Linear(cfg.t_embed_dim, cfg.width, rng, init="normal02")
        self.t_fc2 = Linear(cfg.width, cfg.width, rng, init="normal02")
        self.style_proj = Linear(cfg.style_dim, cfg.width, rng, init="normal02")

    def __call__(self, t: np.ndarray, y: T.Tensor) -> T.Tensor:
        t_freq = sinusoidal_embedding(t, self.t_embed_dim)
        t_emb = self.t_fc2(T.silu(self.t_fc1(T.Tensor(t_freq))))
        return T.add(t_emb, self.style_proj(y))

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for key, lin in (("t_fc1", self.t_fc1), ("t_fc2", self.t_fc2),
                         ("style_proj", self.style_proj)):
            for pk, pv in lin.params().items():
                out[f"{key}.{pk}"] = pv
        return out


def _modulate(x: T.Tensor, shift: T.Tensor, scl: T.Tensor) -> T.Tensor:
    b, width = scl.shape
    one_plus = T.add(T.reshape(scl, (b, 1, width)), T.Tensor(np.ones(1)))
    return T.add(T.mul(x, one_plus), T.reshape(shift, (b, 1, width)))


def _gate(x: T.Tensor, g: T.Tensor) -> T.Tensor:
    b, width = g.shape
    return T.mul(x, T.reshape(g, (b, 1, width)))


class SitBlock:
    """Pre-norm transformer block, fully gated by its condition embedding.

    The modulation projection starts at zero, so shift = scale = gate = 0
    and the block is the identity map until training moves it.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cross = cfg.conditioning == "cross_attn"
        self.width = cfg.width
        self.attn = MultiHeadAttention(cfg.width, cfg.heads, rng)
        self.cross_attn = MultiHeadAttention(cfg.width, cfg.heads, rng) if self.cross else None
        self.mlp = Mlp(cfg.width, cfg.mlp_ratio, rng)
        n_mod = 9 if self.cross else 6
        self.mod = Linear(cfg.width, n_mod * cfg.width, rng, init="zeros")

    def __call__(self, x: T.Tensor, c: T.Tensor, rgb_tokens: T.Tensor | None = None) -> T.Tensor:
        if self.cross and rgb_tokens is None:
            raise ContractError("cross_attn blocks require RGB tokens")
        w = self.width
        mods = self.mod(T.silu(c))
        chunk = lambda i: T.slice_lastdim(mods, i * w, (i + 1) * w)  # noqa: E731

        h = _modulate(T.layernorm_lastdim(x), chunk(0), chunk(1))
        x = T.add(x, _gate(self.attn(h, h), chunk(2)))
        nxt = 3
        if self.cross:
            h = _modulate(T.layernorm_lastdim(x), chunk(3), chunk(4))
            x = T.add(x, _gate(self.cross_attn(rgb_tokens, h), chunk(5)))
            nxt = 6
        h = _modulate(T.layernorm_lastdim(x), chunk(nxt), chunk(nxt + 1))
        return T.add(x, _gate(self.mlp(h), chunk(nxt + 2)))

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        groups = [("attn", self.attn), ("mlp", self.mlp), ("mod", self.mod)]
        if self.cross:
            groups.insert(1, ("cross_attn", self.cross_attn))
        for key, comp in groups:
            for pk, pv in comp.params().items():
                out[f"{key}.{pk}"] = pv
        return out


class FinalLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.width = cfg.width
        self.mod = Linear(cfg.width, 2 * cfg.width, rng, init="zeros")
        self.proj = Linear(cfg.width, cfg.patch_dim, rng, init="zeros")

    def __call__(self, x: T.Tensor, c: T.Tensor) -> T.Tensor:
        mods = self.mod(T.silu(c))
        shift = T.slice_lastdim(mods, 0, self.width)
        scl = T.slice_lastdim(mods, self.width, 2 * self.width)
        return self.proj(_modulate(T.layernorm_lastdim(x), shift, scl))

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for key, lin in (("mod", self.mod), ("proj", self.proj)):
            for pk, pv in lin.params().items():
                out[f"{key}.{pk}"] = pv
        return out


class VelocityModel:
    """The full conditional velocity predictor over thermal latents."""

    def __init__(self, cfg: ModelConfig, bank: StyleBank, seed: int = 0):
        if bank.dim != cfg.style_dim:
            raise ConfigError(f"bank dim {bank.dim} != config style_dim {cfg.style_dim}")
        self.cfg = cfg
        self.bank = bank
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        in_channels = 2 * cfg.latent_channels if cfg.conditioning == "concat" else cfg.latent_channels
        p = cfg.patch_size
        self.patch_embed = Linear(p * p * in_channels, cfg.width, rng)
        self.rgb_embed = (
            Linear(p * p * cfg.latent_channels, cfg.width, rng)
            if cfg.conditioning == "cross_attn"
            else None
        )
        self.cond = ConditionEmbedder(cfg, rng)
        self.blocks = [SitBlock(cfg, rng) for _ in range(cfg.depth)]
        self.final = FinalLayer(cfg, rng)
        self.pos = positional_embedding_2d(cfg.latent_h // p, cfg.latent_w // p, cfg.width)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {"style.bank": self.bank.matrix}
        out.update({f"patch_embed.{k}": v for k, v in self.patch_embed.params().items()})
        if self.rgb_embed is not None:
            out.update({f"rgb_embed.{k}": v for k, v in self.rgb_embed.params().items()})
        out.update({f"cond.{k}": v for k, v in self.cond.params().items()})
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.params().items()})
        out.update({f"final.{k}": v for k, v in self.final.params().items()})
        return out

    def parameter_list(self) -> list[T.Tensor]:
        return list(self.parameters().values())

    def _validate(self, z_t: np.ndarray, z_rgb: np.ndarray) -> None:
        cfg = self.cfg
        want = (cfg.latent_h, cfg.latent_w, cfg.latent_channels)
        if z_t.shape[1:] != want:
            raise DimensionError(f"z_t shape {z_t.shape[1:]} != configured latent {want}")
        if z_rgb.shape != z_t.shape:
            raise DimensionError(f"z_rgb shape {z_rgb.shape} != z_t shape {z_t.shape}")

    def forward(self, z_t, t, z_rgb, y: T.Tensor) -> T.Tensor:
        """Predict the velocity field; output shape equals z_t's shape."""
        cfg = self.cfg
        z_t = np.asarray(z_t, dtype=np.float64)
        z_rgb = np.asarray(z_rgb, dtype=np.float64)
        single = z_t.ndim == 3
        if single:
            z_t, z_rgb = z_t[None], z_rgb[None]
        self._validate(z_t, z_rgb)
        n = z_t.shape[0]
        t_vec = np.full(n, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        if y.ndim == 1:
            y = T.reshape(y, (1, y.shape[0]))
        if y.shape[0] == 1 and n > 1:
            y = T.reshape(T.concat([y] * n, axis=0), (n, y.shape[1]))

        p = cfg.patch_size
        rgb_tokens = None
        if cfg.conditioning == "concat":
            stream = np.concatenate([z_t, z_rgb], axis=-1)
        else:
            stream = z_t
            rgb_tokens = T.add(
                self.rgb_embed(T.Tensor(patchify(z_rgb, p))), T.Tensor(self.pos)
            )
        x = T.add(self.patch_embed(T.Tensor(patchify(stream, p))), T.Tensor(self.pos))
        c = self.cond(t_vec, y)
        for blk in self.blocks:
            x = blk(x, c, rgb_tokens)
        tokens = self.final(x, c)
        out = _unpatchify_op(tokens, p, cfg.latent_h, cfg.latent_w, cfg.latent_channels)
        return T.reshape(out, out.shape[1:]) if single else out

    def forward_styled(self, z_t, t, z_rgb, style_indices) -> T.Tensor:
        """Forward with rows of the style bank selected per item (differentiable
        into the bank, which is how the embeddings train)."""
        idx = np.atleast_1d(np.asarray(style_indices, dtype=np.int64))
        y = T.embedding_select(self.bank.matrix, idx)
        return self.forward(z_t, t, z_rgb, y)


def parameter_count(cfg: ModelConfig, n_styles: int) -> int:
    """Closed-form parameter count for a config plus a bank of n_styles."""
    w = cfg.width
    p = cfg.patch_size
    c = cfg.latent_channels
    lin = lambda i, o: i * o + o  # noqa: E731
    in_ch = 2 * c if cfg.conditioning == "concat" else c
    total = lin(p * p * in_ch, w)
    if cfg.conditioning == "cross_attn":
        total += lin(p * p * c, w)
    total += lin(cfg.t_embed_dim, w) + lin(w, w) + lin(cfg.style_dim, w)
    attn = 4 * lin(w, w)
    mlp = lin(w, w * cfg.mlp_ratio) + lin(w * cfg.mlp_ratio, w)
    n_mod = 9 if cfg.conditioning == "cross_attn" else 6
    block = attn + mlp + lin(w, n_mod * w)
    if cfg.conditioning == "cross_attn":
        block += attn
    total += cfg.depth * block
    total += lin(w, 2 * w) + lin(w, p * p * c)
    total += (n_styles + 1) * cfg.style_dim
    return total


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    known = set(ModelConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)
