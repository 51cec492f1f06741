"""Training loops, checkpoint assembly, and the sampling pipeline.

Both trainers follow the same scheme: seeded sub-streams for data
order, noise draws, and style dropout (so a fixed config seed gives
bit-identical checkpoints), a step-indexed CSV loss log, periodic
checkpoints every ``checkpoint_every`` steps (old ones retained), and a
final checkpoint that is also flushed if the loop dies mid-run.

Checkpoint metadata is deliberately path-free: runs into different
output directories from the same seed produce identical files.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from . import interpolant
from . import tensor as T
from .autoencoder import Autoencoder, config_from_dict as ae_config_from_dict
from .autoencoder import config_to_dict as ae_config_to_dict
from .autoencoder import sample_latent, vae_loss
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig
from .data import PairLoader, from_model_range, random_resize_crop, to_model_range
from .errors import ConfigError, DataError
from .network import VelocityModel, config_from_dict as model_config_from_dict
from .network import config_to_dict as model_config_to_dict
from .style import StyleBank

from thermoflow import SCHEMA_VERSION


class LossLog:
    """Step-indexed CSV: step, loss, wallclock (seconds since run start)."""

    def __init__(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._f)
        self._writer.writerow(["step", "loss", "wallclock"])
        self._t0 = time.monotonic()

    def log(self, step: int, loss: float) -> None:
        self._writer.writerow([step, f"{loss:.8e}", f"{time.monotonic() - self._t0:.3f}"])

    def close(self) -> None:
        self._f.close()


def _seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _assign_params(params: dict[str, T.Tensor], arrays: dict[str, np.ndarray], what: str) -> None:
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise DataError(f"{what} checkpoint mismatch; missing={missing} unexpected={extra}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise DataError(f"{what} tensor '{name}' shape {arrays[name].shape} != {p.shape}")
        p.data[...] = arrays[name]


# ---------------------------------------------------------------------------
# autoencoder training


def save_vae(path, ae: Autoencoder, meta: dict) -> None:
    arrays = {k: v.data for k, v in ae.parameters().items()}
    save_tensors(path, arrays, meta=meta)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **meta},
                                  sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_vae(path) -> tuple[Autoencoder, dict]:
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "vae":
        raise DataError(f"{path} is not an autoencoder checkpoint (kind={meta.get('kind')})")
    ae = Autoencoder(ae_config_from_dict(meta["config"]), seed=int(meta.get("seed", 0)))
    _assign_params(ae.parameters(), arrays, "autoencoder")
    return ae, meta


def _stack_target(pairs, target: str) -> np.ndarray:
    if target == "thermal":
        return np.stack([to_model_range(p.thermal) for p in pairs])
    return np.stack([to_model_range(p.rgb) for p in pairs])


def compute_latent_scale(ae: Autoencoder, loader: PairLoader, target: str,
                         chunk: int = 32) -> float:
    """1 / std of posterior means over the dataset (stored with the VAE,
    applied to every latent the flow model sees)."""
    total = 0.0
    sq = 0.0
    count = 0
    for start in range(0, len(loader), chunk):
        idx = range(start, min(start + chunk, len(loader)))
        x = _stack_target([loader.pair(i) for i in idx], target)
        means = ae.encode(x).mean.data
        total += means.sum()
        sq += (means * means).sum()
        count += means.size
    var = sq / count - (total / count) ** 2
    std = float(np.sqrt(max(var, 0.0)))
    return 1.0 / std if std > 0 else 1.0


def train_vae(cfg: RunConfig, manifest_path, target: str, out_path) -> Path:
    """Train the thermal (or RGB) autoencoder; returns the final checkpoint path."""
    if target not in ("thermal", "rgb"):
        raise ConfigError(f"train-vae target must be 'thermal' or 'rgb', got '{target}'")
    ae_cfg = cfg.thermal_autoencoder if target == "thermal" else cfg.rgb_autoencoder
    want_ch = 1 if target == "thermal" else 3
    if ae_cfg.channels_in != want_ch:
        raise ConfigError(
            f"{target} autoencoder config has channels_in={ae_cfg.channels_in}, need {want_ch}"
        )
    tc = cfg.vae_training
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rng_data, rng_latent = _seed_streams(cfg.seed, 2)
    loader = PairLoader(manifest_path, "train", tc.batch_size, rng_data)
    ae = Autoencoder(ae_cfg, seed=cfg.seed)
    opt = T.AdamW(ae.parameter_list(), lr=tc.lr, weight_decay=tc.weight_decay)
    log = LossLog(out_path.with_suffix(".loss.csv"))

    def meta_at(step: int) -> dict:
        return {"kind": "vae", "target": target, "config": ae_config_to_dict(ae_cfg),
                "seed": cfg.seed, "step": step, "latent_scale": 1.0}

    batches = loader.batches()
    step = 0
    try:
        for step in range(1, tc.steps + 1):
            x = _stack_target(next(batches), target)
            opt.zero_grad()
            with T.Tape():
                dist = ae.encode(x)
                z = sample_latent(dist, rng_latent)
                recon = ae.decode(z)
                loss = vae_loss(x, recon, dist, ae_cfg.kl_weight)
            T.backward(loss)
            opt.step()
            log.log(step, loss.item())
            if tc.checkpoint_every and step % tc.checkpoint_every == 0 and step < tc.steps:
                save_vae(out_path.with_suffix(f".step{step}.tfck"), ae, meta_at(step))
    except Exception:
        save_vae(out_path, ae, meta_at(step))
        raise
    finally:
        log.close()

    meta = meta_at(tc.steps)
    meta["latent_scale"] = compute_latent_scale(ae, loader, target)
    save_vae(out_path, ae, meta)
    return out_path


# ---------------------------------------------------------------------------
# flow training


def save_flow(path, model: VelocityModel, meta: dict) -> None:
    arrays = {k: v.data for k, v in model.parameters().items()}
    save_tensors(path, arrays, meta=meta)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **meta},
                                  sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_flow(path) -> tuple[VelocityModel, dict]:
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "flow":
        raise DataError(f"{path} is not a flow checkpoint (kind={meta.get('kind')})")
    bank = StyleBank.from_state(arrays, meta["style"])
    model = VelocityModel(model_config_from_dict(meta["model"]), bank,
                          seed=int(meta.get("seed", 0)))
    _assign_params(model.parameters(), arrays, "flow")
    return model, meta


class _LatentStore:
    """Frozen posterior statistics for every training pair, encoded once."""

    def __init__(self, loader: PairLoader, ae: Autoencoder, target: str, chunk: int = 32):
        means, logvars = [], []
        for start in range(0, len(loader), chunk):
            idx = range(start, min(start + chunk, len(loader)))
            x = _stack_target([loader.pair(i) for i in idx], target)
            dist = ae.encode(x)
            means.append(dist.mean.data)
            logvars.append(dist.logvar.data)
        self.mean = np.concatenate(means)
        self.logvar = np.concatenate(logvars)

    def draw(self, idx: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        mean = self.mean[idx]
        if rng is None:
            return mean
        return mean + np.exp(self.logvar[idx] / 2.0) * rng.standard_normal(mean.shape)


def train_flow(cfg: RunConfig, manifest_path, thermal_vae_path, rgb_vae_path,
               out_path) -> Path:
    """Train the velocity model on frozen autoencoder latents."""
    tc = cfg.flow_training
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    thermal_ae, t_meta = load_vae(thermal_vae_path)
    rgb_ae, r_meta = load_vae(rgb_vae_path)
    scale_t = float(t_meta["latent_scale"])
    scale_r = float(r_meta["latent_scale"])
    sched = interpolant.get_schedule(cfg.schedule)

    rng_data, rng_loss, rng_bank, rng_aug, rng_post = _seed_streams(cfg.seed, 5)
    bank = StyleBank(cfg.styles, cfg.model.style_dim, dropout_prob=tc.dropout_prob,
                     rng=rng_bank)
    model = VelocityModel(cfg.model, bank, seed=cfg.seed)
    opt = T.AdamW(model.parameter_list(), lr=tc.lr, weight_decay=tc.weight_decay)
    loader = PairLoader(manifest_path, "train", tc.batch_size, rng_data)
    log = LossLog(out_path.with_suffix(".loss.csv"))

    def meta_at(step: int) -> dict:
        return {
            "kind": "flow",
            "model": model_config_to_dict(cfg.model),
            "style": bank.state_meta(),
            "schedule": cfg.schedule,
            "sampler": {"steps": cfg.sampler.steps, "integrator": cfg.sampler.integrator,
                        "cfg_scale": cfg.sampler.cfg_scale},
            "latent_scale_thermal": scale_t,
            "latent_scale_rgb": scale_r,
            "seed": cfg.seed,
            "step": step,
        }

    use_cache = not tc.augment_enabled
    if use_cache:
        store_t = _LatentStore(loader, thermal_ae, "thermal")
        store_r = _LatentStore(loader, rgb_ae, "rgb")
        styles = [loader.pair(i).style_id for i in range(len(loader))]
        order = np.array([], dtype=np.int64)
    batches = None if use_cache else loader.batches()

    step = 0
    try:
        for step in range(1, tc.steps + 1):
            if use_cache:
                while order.size < tc.batch_size:
                    order = np.concatenate([order, rng_data.permutation(len(loader))])
                idx, order = order[: tc.batch_size], order[tc.batch_size :]
                z0 = store_t.draw(idx, rng_post if tc.use_sampled_latents else None) * scale_t
                z_rgb = store_r.draw(idx, None) * scale_r
                batch = {"z0": z0, "z_rgb": z_rgb,
                         "style_ids": [styles[i] for i in idx]}
            else:
                pairs = next(batches)
                pairs = [
                    random_resize_crop(p, tc.augment_out_px, rng_aug,
                                       scale_range=(1.0, tc.augment_scale_max))
                    for p in pairs
                ]
                t_dist = thermal_ae.encode(_stack_target(pairs, "thermal"))
                if tc.use_sampled_latents:
                    z0 = sample_latent(t_dist, rng_post).data * scale_t
                else:
                    z0 = t_dist.mean.data * scale_t
                z_rgb = rgb_ae.encode(_stack_target(pairs, "rgb")).mean.data * scale_r
                batch = {"z0": z0, "z_rgb": z_rgb, "style_ids": [p.style_id for p in pairs]}

            opt.zero_grad()
            with T.Tape():
                loss = interpolant.flow_matching_loss(model, batch, rng_loss, sched)
            T.backward(loss)
            opt.step()
            log.log(step, loss.item())
            if tc.checkpoint_every and step % tc.checkpoint_every == 0 and step < tc.steps:
                save_flow(out_path.with_suffix(f".step{step}.tfck"), model, meta_at(step))
    except Exception:
        save_flow(out_path, model, meta_at(step))
        raise
    finally:
        log.close()

    save_flow(out_path, model, meta_at(tc.steps))
    return out_path


# ---------------------------------------------------------------------------
# sampling


def sample_thermal(model: VelocityModel, meta: dict, thermal_ae: Autoencoder,
                   rgb_ae: Autoencoder, rgb_images: list[np.ndarray], style_id: str,
                   sampler_cfg: interpolant.SamplerConfig, seed: int) -> list[np.ndarray]:
    """RGB uint8 images in, thermal uint8 images out, deterministic per seed."""
    sched = interpolant.get_schedule(meta["schedule"])
    scale_t = float(meta["latent_scale_thermal"])
    scale_r = float(meta["latent_scale_rgb"])
    x = np.stack([to_model_range(img) for img in rgb_images])
    z_rgb = rgb_ae.encode(x).mean.data * scale_r
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(z_rgb.shape)
    z_hat = interpolant.sample(model, eps, z_rgb, style_id, sampler_cfg, sched)
    decoded = thermal_ae.decode(z_hat / scale_t).data
    return [from_model_range(img) for img in decoded]
