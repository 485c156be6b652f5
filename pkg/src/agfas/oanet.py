"""Off-real attention network: a patch transformer whose blocks cross-attend to cue tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn


@dataclass
class OANetConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    cross_heads: int = 4
    mlp_ratio: float = 2.0
    cue_grid: int = 4  # cue tokens = cue_grid ** 2
    d_cue: int = 32
    cue_layers: int = 4
    use_cue: bool = True

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def k_cue(self) -> int:
        return self.cue_grid ** 2


class PatchEmbed(nn.Module):
    def __init__(self, image_size: int, patch: int, channels: int, d_model: int):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch}")
        self.patch = patch
        self.n_patches = (image_size // patch) ** 2
        self.proj = nn.Conv2d(channels, d_model, patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(1, self.n_patches, d_model) * 0.02)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ValueError(f"image {h}x{w} not divisible by patch size {self.patch}")
        tokens = self.proj(image).flatten(2).transpose(1, 2)
        if tokens.shape[1] != self.n_patches:
            raise ValueError(f"expected {self.n_patches} patches, got {tokens.shape[1]}")
        return tokens + self.pos


class CueEncoder(nn.Module):
    """Strided convolutional encoder; the final feature map is read out row-major as tokens."""

    def __init__(self, image_size: int, channels: int, grid: int, d_cue: int, n_layers: int = 4):
        super().__init__()
        ratio = image_size // grid
        n_down = int(round(math.log2(ratio))) if ratio >= 1 else -1
        if grid * ratio != image_size or 2 ** n_down != ratio:
            raise ValueError("image_size / cue_grid must be a power of two")
        n_layers = max(n_layers, n_down)
        widths = [max(d_cue // 2 ** (n_down - i), 8) for i in range(n_layers)]
        widths[-1] = d_cue
        layers, c_in = [], channels
        for i, c_out in enumerate(widths):
            stride = 2 if i < n_down else 1
            layers += [nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.GELU()]
            c_in = c_out
        self.net = nn.Sequential(*layers[:-1])  # no activation on the token read-out
        self.pos = nn.Parameter(torch.randn(1, grid * grid, d_cue) * 0.02)
        self.image_size, self.channels = image_size, channels

    def forward(self, cue: torch.Tensor) -> torch.Tensor:
        if tuple(cue.shape[1:]) != (self.channels, self.image_size, self.image_size):
            raise ValueError(f"cue shape {tuple(cue.shape[1:])} does not match the encoder")
        return self.net(cue).flatten(2).transpose(1, 2) + self.pos


class CrossAttention(nn.Module):
    """Image-token queries over cue-token keys/values; output projection starts at zero."""

    def __init__(self, d_model: int, d_cue: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by the number of heads")
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_cue, d_model)
        self.v = nn.Linear(d_cue, d_model)
        self.out = nn.Linear(d_model, d_model)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.k(ctx).reshape(b, ctx.shape[1], h, d // h).transpose(1, 2)
        v = self.v(ctx).reshape(b, ctx.shape[1], h, d // h).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))


class OABlock(nn.Module):
    def __init__(self, cfg: OANetConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.use_cue = cfg.use_cue
        if cfg.use_cue:
            self.norm_x = nn.LayerNorm(d)
            self.cross_attn = CrossAttention(d, cfg.d_cue, cfg.cross_heads)
        self.norm2 = nn.LayerNorm(d)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x, cue_tokens=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        if self.use_cue:
            x = x + self.cross_attn(self.norm_x(x), cue_tokens)
        return x + self.mlp(self.norm2(x))


@dataclass
class FASFeature:
    feature: torch.Tensor
    logits: torch.Tensor


class OANet(nn.Module):
    def __init__(self, cfg: OANetConfig = OANetConfig()):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.image_size, cfg.patch, cfg.channels, cfg.d_model)
        self.cue_encoder = (CueEncoder(cfg.image_size, cfg.channels, cfg.cue_grid, cfg.d_cue, cfg.cue_layers)
                            if cfg.use_cue else None)
        self.blocks = nn.ModuleList(OABlock(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, 2)

    def cross_out_params(self):
        return [b.cross_attn.out.weight for b in self.blocks if b.use_cue]

    def forward(self, image: torch.Tensor, cue: torch.Tensor | None = None) -> FASFeature:
        x = self.patch_embed(image)
        ctx = None
        if self.cfg.use_cue:
            if cue is None:
                cue = torch.zeros_like(image)
            if cue.shape != image.shape:
                raise ValueError(f"cue shape {tuple(cue.shape)} != image shape {tuple(image.shape)}")
            ctx = self.cue_encoder(cue)
        for blk in self.blocks:
            x = blk(x, ctx)
        feat = self.norm(x).mean(dim=1)
        return FASFeature(feat, self.head(feat))


def patch_embed(image: torch.Tensor, model: OANet) -> torch.Tensor:
    return model.patch_embed(image)


def cue_encode(cue: torch.Tensor, model: OANet) -> torch.Tensor:
    if model.cue_encoder is None:
        raise ValueError("model was built without a cue branch")
    return model.cue_encoder(cue)


def oa_forward(image: torch.Tensor, cue: torch.Tensor | None, model: OANet, mode: str = "eval") -> FASFeature:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(image, cue)
    return model(image, cue)


def classify(feature: FASFeature | torch.Tensor) -> torch.Tensor:
    """Probability of the "fake" class."""
    logits = feature.logits if isinstance(feature, FASFeature) else feature
    return torch.softmax(logits, dim=-1)[..., 1]


def save_oanet(model: OANet, out_dir, **manifest):
    from .checkpoint import save_module
    return save_module(model, out_dir, model_config=asdict(model.cfg), **manifest)


def load_oanet(ckpt_dir) -> OANet:
    from .checkpoint import load_module, read_manifest
    m = read_manifest(ckpt_dir)
    model = OANet(OANetConfig(**m["model_config"]))
    load_module(model, ckpt_dir)
    model.eval()
    return model
