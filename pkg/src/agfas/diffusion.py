"""De-fake generator: noise schedule, forward process, DDIM sampler and training.

The working latent is pixel space (``z = image``, channel-first), so every
reconstruction error measured here is directly an image-space residual.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# schedule and closed-form processes

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_min: float
    beta_max: float
    alpha: np.ndarray = field(repr=False)

    def sqrt_alpha(self, t: int) -> float:
        return float(np.sqrt(self.alpha[t]))

    def sqrt_one_minus_alpha(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha[t]))

    def bound_coefficient(self, t) -> np.ndarray:
        """sqrt((1 - alpha_t) / alpha_t), the growth factor of the reconstruction bound."""
        a = self.alpha[np.asarray(t)]
        return np.sqrt((1.0 - a) / a)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.05) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if np.any(np.diff(alpha) >= 0) or alpha[-1] <= 0:
        raise ValueError("schedule is not strictly decreasing in (0, 1]")
    return NoiseSchedule(T, float(beta_min), float(beta_max), alpha)


def _check_t(t: int, schedule: NoiseSchedule, lo: int = 0):
    if not (lo <= int(t) <= schedule.T):
        raise ValueError(f"time step {t} outside [{lo}, {schedule.T}]")


def forward_sample(z0, t: int, eps, schedule: NoiseSchedule):
    """z_t = sqrt(alpha_t) z0 + sqrt(1 - alpha_t) eps."""
    _check_t(t, schedule)
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    return schedule.sqrt_alpha(t) * z0 + schedule.sqrt_one_minus_alpha(t) * eps


def ddim_step(z_t, t: int, t_prev: int, eps_pred, schedule: NoiseSchedule):
    """Deterministic (sigma = 0) reverse update from ``t`` to ``t_prev``."""
    if not (0 <= t_prev < t <= schedule.T):
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    z0_hat = (z_t - schedule.sqrt_one_minus_alpha(t) * eps_pred) / schedule.sqrt_alpha(t)
    return schedule.sqrt_alpha(t_prev) * z0_hat + schedule.sqrt_one_minus_alpha(t_prev) * eps_pred


def timestep_sequence(t_hat: int, n_steps: int) -> list[int]:
    """Uniform-stride decreasing indices from ``t_hat`` to 0 (inclusive)."""
    if t_hat == 0:
        return [0]
    if not (1 <= n_steps <= t_hat):
        raise ValueError(f"need 1 <= n_steps <= t_hat, got n_steps={n_steps}, t_hat={t_hat}")
    seq = np.round(np.linspace(t_hat, 0, n_steps + 1)).astype(int)
    return [int(v) for v in seq]


def generate(z_that, t_hat: int, identity_tokens, predictor: Callable, schedule: NoiseSchedule,
             n_steps: int):
    """Run the DDIM chain from ``z_that`` at ``t_hat`` down to 0 and return z0'."""
    _check_t(t_hat, schedule)
    seq = timestep_sequence(t_hat, n_steps)
    z = z_that
    for t, t_prev in zip(seq[:-1], seq[1:]):
        eps = predictor(z, t, identity_tokens)
        z = ddim_step(z, t, t_prev, eps, schedule)
    return z


def single_step_reconstruct(z_t, t: int, identity_tokens, predictor: Callable,
                            schedule: NoiseSchedule):
    _check_t(t, schedule, lo=1)
    eps = predictor(z_t, t, identity_tokens)
    return (z_t - schedule.sqrt_one_minus_alpha(t) * eps) / schedule.sqrt_alpha(t)


def noise_oracle(z0, schedule: NoiseSchedule):
    """Predictor that returns the exact forward noise of a known clean latent.

    On a DDIM trajectory started from ``forward_sample(z0, t, eps)`` every
    intermediate state is ``sqrt(a) z0 + sqrt(1-a) eps``, so the noise can be
    recovered analytically at any step.
    """
    def predict(z_t, t, identity_tokens=None):
        if torch.is_tensor(t) and t.ndim > 0:
            a = torch.as_tensor(schedule.alpha, dtype=z_t.dtype)[t].reshape(-1, *([1] * (z_t.ndim - 1)))
            return (z_t - a.sqrt() * z0) / (1 - a).sqrt()
        if int(t) == 0:
            return torch.zeros_like(z_t) if torch.is_tensor(z_t) else np.zeros_like(z_t)
        return (z_t - schedule.sqrt_alpha(t) * z0) / schedule.sqrt_one_minus_alpha(t)
    return predict


# --------------------------------------------------------------------------
# networks

class IdentityEncoder(nn.Module):
    """Frozen coarse-content encoder standing in for a face-identity backbone.

    The image is average-pooled to ``pool x pool`` (which washes out
    high-frequency spoof textures), split into a square grid of ``k_id``
    regions and each region is mapped to ``d_id`` features by a fixed random
    projection.
    """

    def __init__(self, channels: int = 3, k_id: int = 4, d_id: int = 16, pool: int = 8, seed: int = 0):
        super().__init__()
        g = int(round(math.sqrt(k_id)))
        if g * g != k_id or pool % g:
            raise ValueError("k_id must be a square whose root divides pool")
        self.k_id, self.d_id, self.pool, self.grid = k_id, d_id, pool, g
        n_in = channels * (pool // g) ** 2
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("proj", torch.randn(n_in, d_id, generator=gen) / math.sqrt(n_in))
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        b, c = image.shape[:2]
        x = F.adaptive_avg_pool2d(image, self.pool) - 0.4
        r = self.pool // self.grid
        x = x.reshape(b, c, self.grid, r, self.grid, r).permute(0, 2, 4, 1, 3, 5)
        x = x.reshape(b, self.k_id, c * r * r)
        return 4.0 * x @ self.proj.to(x.dtype)


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = (t.to(torch.float64)[:, None] / T * 1000.0) * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0 and ch >= 2 * g:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TokenCrossAttention(nn.Module):
    """Feature-map pixels attend to the identity tokens."""

    def __init__(self, ch: int, d_tok: int, heads: int = 2):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.attn = nn.MultiheadAttention(ch, heads, kdim=d_tok, vdim=d_tok, batch_first=True)

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(q, tokens, tokens, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class NoisePredictor(nn.Module):
    """Small identity-conditioned U-Net predicting the forward noise.

    The input is space-to-depth folded by 2 first (lossless), so the widest
    feature maps run at half resolution.
    """

    def __init__(self, channels: int = 3, base: int = 32, emb_dim: int = 64, k_id: int = 4,
                 d_id: int = 16, T: int = 100, heads: int = 2):
        super().__init__()
        self.config = dict(channels=channels, base=base, emb_dim=emb_dim, k_id=k_id, d_id=d_id,
                           T=T, heads=heads)
        self.T = T
        self.trained = False
        b = base
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.id_proj = nn.Linear(k_id * d_id, emb_dim)
        self.stem = nn.Conv2d(4 * channels, b, 3, padding=1)
        self.enc1 = ResBlock(b, b, emb_dim)
        self.down = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * b, 2 * b, emb_dim)
        self.mid_attn = TokenCrossAttention(2 * b, d_id, heads)
        # each region token also conditions its own patch of the mid feature map
        self.id_map = nn.Linear(d_id, 2 * b)
        self.up = nn.Conv2d(2 * b, b, 3, padding=1)
        self.dec1 = ResBlock(2 * b, b, emb_dim)
        self.out_norm = nn.GroupNorm(_groups(b), b)
        self.out = nn.Conv2d(b, 4 * channels, 3, padding=1)
        # identity paths start silent so conditioning can only add to the unconditioned model
        for m in (self.id_proj, self.mid_attn.attn.out_proj, self.id_map):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, z: torch.Tensor, t, identity_tokens: torch.Tensor | None = None) -> torch.Tensor:
        n = z.shape[0]
        if not torch.is_tensor(t) or t.ndim == 0:
            t = torch.full((n,), int(t), dtype=torch.long)
        k_id, d_id = self.config["k_id"], self.config["d_id"]
        if identity_tokens is None:
            identity_tokens = z.new_zeros(n, k_id, d_id)
        identity_tokens = identity_tokens.to(z.dtype)
        emb = timestep_embedding(t, self.config["emb_dim"], self.T).to(z.dtype)
        emb = self.time_mlp(emb) + self.id_proj(identity_tokens.reshape(n, -1))

        h1 = self.enc1(self.stem(F.pixel_unshuffle(z, 2)), emb)
        h = self.enc2(self.down(h1), emb)
        h = self.mid_attn(h, identity_tokens)
        g = int(round(math.sqrt(k_id)))
        m = self.id_map(identity_tokens).transpose(1, 2).reshape(n, -1, g, g)
        h = h + F.interpolate(m, size=h.shape[-2:], mode="nearest")
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec1(torch.cat([h, h1], 1), emb)
        return F.pixel_shuffle(self.out(F.silu(self.out_norm(h))), 2)


# --------------------------------------------------------------------------
# training

def dfg_loss(z0: torch.Tensor, t, identity_tokens, eps: torch.Tensor, predictor: Callable,
             schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Mean-squared noise-prediction error; ``t`` may be an int or a per-sample tensor.

    ``schedule`` defaults to the one attached to ``predictor``.
    """
    if schedule is None:
        schedule = getattr(predictor, "schedule", None)
        if schedule is None:
            raise ValueError("no noise schedule given or attached to the predictor")
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if torch.is_tensor(t) and t.ndim > 0:
        if bool((t < 1).any()) or bool((t > schedule.T).any()):
            raise ValueError("time steps must lie in [1, T]")
        z_t = _batch_forward(z0, t, eps, schedule)
    else:
        _check_t(t, schedule, lo=1)
        z_t = forward_sample(z0, int(t), eps, schedule)
    pred = predictor(z_t, t, identity_tokens)
    if pred.shape != eps.shape:
        raise ValueError("predictor output shape differs from the latent shape")
    return F.mse_loss(pred, eps)


def _batch_forward(z0, t: torch.Tensor, eps, schedule: NoiseSchedule):
    a = torch.as_tensor(schedule.alpha, dtype=z0.dtype)[t].reshape(-1, *([1] * (z0.ndim - 1)))
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


@dataclass
class DFGConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    seed: int = 0
    base_channels: int = 32
    emb_dim: int = 64
    k_id: int = 4
    d_id: int = 16
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.05
    use_identity: bool = True
    log_every: int = 100

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_min, self.beta_max)


def images_to_tensor(samples_or_images, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x C arrays (or samples carrying ``.image``) into B x C x H x W."""
    arrs = [getattr(s, "image", s) for s in samples_or_images]
    return torch.as_tensor(np.stack(arrs), dtype=dtype).permute(0, 3, 1, 2).contiguous()


class DFG:
    """A trained generator bundle: predictor, frozen identity encoder and schedule."""

    def __init__(self, predictor: NoisePredictor, encoder: IdentityEncoder, schedule: NoiseSchedule,
                 use_identity: bool = True):
        self.predictor = predictor
        self.encoder = encoder
        self.schedule = schedule
        self.use_identity = use_identity
        predictor.schedule = schedule

    @property
    def trained(self) -> bool:
        return bool(self.predictor.trained)

    def identity_tokens(self, images: torch.Tensor) -> torch.Tensor:
        tok = self.encoder(images)
        return tok if self.use_identity else torch.zeros_like(tok)

    @torch.no_grad()
    def predict(self, z, t, identity_tokens):
        return self.predictor(z, t, identity_tokens)


def build_dfg(config: DFGConfig) -> DFG:
    torch.manual_seed(config.seed)
    predictor = NoisePredictor(base=config.base_channels, emb_dim=config.emb_dim, k_id=config.k_id,
                               d_id=config.d_id, T=config.T)
    encoder = IdentityEncoder(k_id=config.k_id, d_id=config.d_id, seed=config.seed)
    return DFG(predictor, encoder, config.schedule(), config.use_identity)


def train_dfg(real_pool: Sequence, config: DFGConfig = DFGConfig()) -> tuple[DFG, list[float]]:
    """Fit the noise predictor on real samples only; returns the bundle and the loss curve."""
    if not real_pool:
        raise ValueError("real pool is empty")
    if any(getattr(s, "label", "real") != "real" for s in real_pool):
        raise ValueError("DFG training pool must contain real samples only")
    dfg = build_dfg(config)
    x = images_to_tensor(real_pool)
    with torch.no_grad():
        tokens = dfg.identity_tokens(x)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.AdamW(dfg.predictor.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.steps, 1))
    curve = []
    dfg.predictor.train()
    for step in range(config.steps):
        idx = torch.randint(0, x.shape[0], (config.batch_size,), generator=gen)
        t = torch.randint(1, config.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x[idx].shape, generator=gen)
        loss = dfg_loss(x[idx], t, tokens[idx], eps, dfg.predictor, dfg.schedule)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        curve.append(loss.item())
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("dfg step %d loss %.5f", step + 1, np.mean(curve[-config.log_every:]))
    dfg.predictor.eval()
    dfg.predictor.trained = True
    return dfg, curve


def save_dfg(dfg: DFG, out_dir, config: DFGConfig | None = None):
    from .checkpoint import config_hash, save_module
    cfg = asdict(config) if config is not None else {}
    return save_module(
        dfg.predictor, out_dir,
        schedule=dfg.schedule.to_dict(),
        predictor=dfg.predictor.config,
        encoder={"k_id": dfg.encoder.k_id, "d_id": dfg.encoder.d_id, "pool": dfg.encoder.pool,
                 "seed": int(cfg.get("seed", 0))},
        use_identity=dfg.use_identity,
        trained=dfg.trained,
        config=cfg,
        config_hash=config_hash(cfg),
    )


def load_dfg(ckpt_dir) -> DFG:
    from .checkpoint import load_module, read_manifest
    m = read_manifest(ckpt_dir)
    predictor = NoisePredictor(**m["predictor"])
    load_module(predictor, ckpt_dir)
    predictor.eval()
    predictor.trained = bool(m.get("trained", False))
    enc = m["encoder"]
    encoder = IdentityEncoder(k_id=enc["k_id"], d_id=enc["d_id"], pool=enc["pool"], seed=enc["seed"])
    s = m["schedule"]
    dfg = DFG(predictor, encoder, make_schedule(s["T"], s["beta_min"], s["beta_max"]), m["use_identity"])
    dfg.manifest = m
    return dfg
