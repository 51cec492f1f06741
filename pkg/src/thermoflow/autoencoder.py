"""KL-regularized convolutional autoencoder for thermal and RGB images.

Strided 3x3 convolutions halve the spatial dims log2(f) times on the
way down; the decoder mirrors them with nearest-neighbor upsampling and
ends in a tanh so outputs stay inside [-1, 1].  The encoder head is
zero-initialized, making the initial posterior exactly standard normal
(zero mean, zero log-variance, zero KL).

The latent flow model consumes these latents frozen; training the flow
never touches autoencoder parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass(frozen=True)
class AutoencoderConfig:
    downsample_factor: int = 4
    latent_channels: int = 4
    channels_in: int = 1
    kl_weight: float = 1e-6
    hidden: tuple[int, ...] = field(default=(32, 64))

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ConfigError(f"downsample_factor must be a power of two >= 2, got {f}")
        if self.channels_in not in (1, 3):
            raise ConfigError(f"channels_in must be 1 (thermal) or 3 (RGB), got {self.channels_in}")
        if self.kl_weight < 0:
            raise ConfigError(f"kl_weight must be non-negative, got {self.kl_weight}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) != self.stages:
            raise ConfigError(
                f"hidden needs one width per stage: {self.stages} for f={f}, got {self.hidden}"
            )

    @property
    def stages(self) -> int:
        return int(np.log2(self.downsample_factor))


@dataclass
class LatentDistribution:
    """Diagonal Gaussian posterior; log-variance clamped to keep exp finite."""

    mean: T.Tensor
    logvar: T.Tensor


def _conv_params(k, c_in, c_out, rng, init="xavier"):
    if init == "zeros":
        w = np.zeros((k, k, c_in, c_out))
    else:
        fan_in = k * k * c_in
        fan_out = k * k * c_out
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(k, k, c_in, c_out))
    return T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(c_out), requires_grad=True)


class Autoencoder:
    def __init__(self, cfg: AutoencoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        h = cfg.hidden
        # Stem at full resolution, then one stride-2 conv per stage; h[i] is
        # the width after stage i's downsample.
        self._enc = [_conv_params(3, cfg.channels_in, h[0], rng)]
        for i in range(cfg.stages):
            self._enc.append(_conv_params(3, h[i - 1] if i > 0 else h[0], h[i], rng))
        # Posterior head starts at zero: initial KL is exactly zero.
        self._enc_head = _conv_params(3, h[-1], 2 * cfg.latent_channels, rng, init="zeros")

        rh = list(reversed(h))
        self._dec = [_conv_params(3, cfg.latent_channels, rh[0], rng)]
        for i in range(cfg.stages - 1):
            self._dec.append(_conv_params(3, rh[i], rh[i + 1], rng))
        self._dec_head = _conv_params(3, rh[-1], cfg.channels_in, rng)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for i, (w, b) in enumerate(self._enc):
            out[f"enc.{i}.w"], out[f"enc.{i}.b"] = w, b
        out["enc.head.w"], out["enc.head.b"] = self._enc_head
        for i, (w, b) in enumerate(self._dec):
            out[f"dec.{i}.w"], out[f"dec.{i}.b"] = w, b
        out["dec.head.w"], out["dec.head.b"] = self._dec_head
        return out

    def parameter_list(self) -> list[T.Tensor]:
        return list(self.parameters().values())

    def encode(self, x) -> LatentDistribution:
        """Posterior of images in [-1, 1]; returns mean/log-variance maps."""
        x = self._as_batch(x, self.cfg.channels_in)
        h, w = x.shape[1], x.shape[2]
        f = self.cfg.downsample_factor
        if h % f or w % f:
            raise DimensionError(f"image dims {h}x{w} not divisible by downsample factor {f}")
        t = T.silu(self._cv(T.Tensor(x), self._enc[0], stride=1))
        for layer in self._enc[1:]:
            t = T.silu(self._cv(t, layer, stride=2))
        stats = self._cv(t, self._enc_head, stride=1)
        c = self.cfg.latent_channels
        mean = T.slice_lastdim(stats, 0, c)
        logvar = T.clamp(T.slice_lastdim(stats, c, 2 * c), LOGVAR_MIN, LOGVAR_MAX)
        return LatentDistribution(mean=mean, logvar=logvar)

    def decode(self, z) -> T.Tensor:
        """Latent back to image space, saturated into [-1, 1]."""
        zd = np.asarray(z.data if isinstance(z, T.Tensor) else z, dtype=np.float64)
        single = zd.ndim == 3
        if single:
            zd = zd[None]
        if zd.ndim != 4 or zd.shape[3] != self.cfg.latent_channels:
            raise DimensionError(
                f"latent shape {zd.shape} incompatible with C={self.cfg.latent_channels}"
            )
        t = z if isinstance(z, T.Tensor) and not single else T.Tensor(zd)
        t = T.silu(self._cv(t, self._dec[0], stride=1))
        for layer in self._dec[1:]:
            t = T.upsample_nearest2x(t)
            t = T.silu(self._cv(t, layer, stride=1))
        t = T.upsample_nearest2x(t)
        out = T.tanh(self._cv(t, self._dec_head, stride=1))
        return T.reshape(out, out.shape[1:]) if single else out

    @staticmethod
    def _cv(t, layer, stride):
        w, b = layer
        return T.conv2d(t, w, b, stride=stride, padding=1)

    @staticmethod
    def _as_batch(x, channels):
        arr = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[3] != channels:
            raise DimensionError(f"expected (B,H,W,{channels}) images, got {arr.shape}")
        return arr


def sample_latent(d: LatentDistribution, rng: np.random.Generator) -> T.Tensor:
    """Reparameterized draw mean + exp(logvar/2) * eps."""
    eps = rng.standard_normal(d.mean.shape)
    return T.add(d.mean, T.mul(T.exp(T.scale(d.logvar, 0.5)), T.Tensor(eps)))


def kl_divergence(d: LatentDistribution) -> T.Tensor:
    """Per-element mean of KL(N(mean, var) || N(0, I)) in closed form."""
    mu2 = T.mul(d.mean, d.mean)
    inner = T.sub(T.sub(T.add(mu2, T.exp(d.logvar)), T.Tensor(np.ones(1))), d.logvar)
    return T.scale(T.mean_all(inner), 0.5)


def vae_loss(x, recon: T.Tensor, d: LatentDistribution, kl_weight: float) -> T.Tensor:
    """Mean absolute reconstruction error plus weighted KL."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != recon.shape:
        raise DimensionError(f"reconstruction shape {recon.shape} != input {x.shape}")
    l1 = T.mean_all(T.abs_(T.sub(recon, T.Tensor(x))))
    return T.add(l1, T.scale(kl_divergence(d), kl_weight))


def config_to_dict(cfg: AutoencoderConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


def config_from_dict(d: dict) -> AutoencoderConfig:
    known = set(AutoencoderConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown autoencoder config keys: {sorted(unknown)}")
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return AutoencoderConfig(**d)
