"""Noise estimator interface and the toy conditional U-Net.

The toy network is a 2-down/2-up U-Net (widths 32 and 64) with one
self-attention and one cross-attention block at each of its two lowest
resolutions. Pooled text conditioning is added to the timestep embedding;
token conditioning enters through cross-attention.

Named layers (``LAYER_IDS``) can be tapped: cross-attention layers record their
head-averaged weight matrices, any layer can record its output feature map.
"""

from __future__ import annotations

import abc
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from zerocon.denoiser.attention import attention
from zerocon.denoiser.text import TextEmbedding, ToyTextEncoder

CROSS_LAYERS = ("enc1.cross", "mid.cross")
DEFAULT_TAPS = ("enc1.self", "mid.self")
LAYER_IDS = (
    "enc0.res",
    "enc1.res",
    "enc1.self",
    "enc1.cross",
    "mid.res",
    "mid.self",
    "mid.cross",
    "dec1.res",
    "dec0.res",
)


@dataclass
class AttentionMapSet:
    """Cross-attention weights per layer, each ``(N_l, L)`` with unit row sums."""

    maps: dict[str, torch.Tensor]
    head_averaged: bool = True

    def layers(self) -> list[str]:
        return list(self.maps)

    def detach(self) -> "AttentionMapSet":
        return AttentionMapSet({k: v.detach() for k, v in self.maps.items()}, self.head_averaged)


@dataclass
class FeatureStack:
    """Tapped feature maps per layer, each ``(d_l, N_l)``."""

    features: dict[str, torch.Tensor]

    def layers(self) -> list[str]:
        return list(self.features)

    def detach(self) -> "FeatureStack":
        return FeatureStack({k: v.detach() for k, v in self.features.items()})


@dataclass
class DenoiserOutput:
    eps: torch.Tensor
    attention: AttentionMapSet | None = None
    features: FeatureStack | None = None


@dataclass(frozen=True)
class Record:
    attention: bool = False
    features: bool = False
    taps: tuple[str, ...] | None = None

    @classmethod
    def parse(cls, record) -> "Record":
        if record is None or record == "none":
            return cls()
        if isinstance(record, Record):
            return record
        if record == "all":
            return cls(True, True)
        if isinstance(record, str):
            record = [record]
        flags = set(record)
        unknown = flags - {"attention", "features"}
        if unknown:
            raise ValueError(f"unknown record flags {sorted(unknown)}")
        return cls("attention" in flags, "features" in flags)


class Denoiser(abc.ABC):
    """Conditional noise estimator ``eps(x_t, t, c)``.

    Implementations take a batch of latents ``(B, C, H, W)``; :func:`predict`
    is the single-latent entry point that validates inputs.
    """

    latent_shape: tuple[int, int, int]
    num_timesteps: int
    cross_layers: tuple[str, ...]
    tap_layers: tuple[str, ...]

    @abc.abstractmethod
    def forward_batch(
        self, x: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor, pooled: torch.Tensor, record: Record
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor], dict[str, torch.Tensor]]:
        """Return ``(eps, attention maps, features)`` with a leading batch dimension."""


def predict(model: Denoiser, x_t: torch.Tensor, t: int, c: TextEmbedding, record=None) -> DenoiserOutput:
    """Run the denoiser on one latent ``(C, H, W)``.

    ``record`` is ``None``/``"none"``, ``"attention"``, ``"features"``, ``"all"`` or
    an iterable of those flags. Recording never changes ``eps``.
    """
    rec = Record.parse(record)
    if tuple(x_t.shape) != tuple(model.latent_shape):
        raise ValueError(f"unsupported latent shape {tuple(x_t.shape)}; model expects {model.latent_shape}")
    if not 1 <= int(t) <= model.num_timesteps:
        raise ValueError(f"timestep {t} out of range [1, {model.num_timesteps}]")
    tt = torch.tensor([int(t)], dtype=torch.long)
    eps, maps, feats = model.forward_batch(x_t[None], tt, c.tokens[None], c.pooled[None], rec)
    return DenoiserOutput(
        eps=eps[0],
        attention=AttentionMapSet({k: v[0] for k, v in maps.items()}) if rec.attention else None,
        features=FeatureStack({k: v[0] for k, v in feats.items()}) if rec.features else None,
    )


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _Recorder:
    def __init__(self, record: Record, taps: tuple[str, ...]):
        self.record = record
        self.taps = taps
        self.maps: dict[str, torch.Tensor] = {}
        self.features: dict[str, torch.Tensor] = {}

    def tap(self, name: str, h: torch.Tensor) -> None:
        if self.record.features and name in self.taps:
            self.features[name] = h.flatten(2)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Pre-norm multi-head attention with residual; ``context=None`` means self-attention."""

    def __init__(self, channels: int, heads: int, context_dim: int | None = None, groups: int = 8):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        kv_dim = channels if context_dim is None else context_dim
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(kv_dim, channels, bias=False)
        self.to_v = nn.Linear(kv_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context=None):
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)  # B, N, C
        src = h if context is None else context
        q, k, v = self.to_q(h), self.to_k(src), self.to_v(src)

        def split(a):
            return a.reshape(B, a.shape[1], self.heads, C // self.heads).transpose(1, 2)

        out, weights = attention(split(q), split(k), split(v))
        out = out.transpose(1, 2).reshape(B, H * W, C)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, H, W)
        return x + out, weights


@dataclass
class UNetConfig:
    in_channels: int = 3
    image_size: int = 32
    widths: tuple[int, int] = (32, 64)
    heads: int = 4
    time_dim: int = 64
    emb_dim: int = 128
    text_len: int = 16
    text_dim: int = 16
    num_timesteps: int = 200
    tap_layers: tuple[str, ...] = DEFAULT_TAPS
    per_head_maps: bool = False
    vocab: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["tap_layers"] = list(self.tap_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["tap_layers"] = tuple(d["tap_layers"])
        return cls(**d)


class ToyUNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        c0, c1 = cfg.widths
        E = cfg.emb_dim
        self.cfg = cfg
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, E), nn.SiLU(), nn.Linear(E, E))
        self.pooled_proj = nn.Linear(cfg.text_dim, E)
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, E)
        self.down0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c0, c1, E)
        self.enc1_self = AttentionBlock(c1, cfg.heads)
        self.enc1_cross = AttentionBlock(c1, cfg.heads, context_dim=cfg.text_dim)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.mid = ResBlock(c1, c1, E)
        self.mid_self = AttentionBlock(c1, cfg.heads)
        self.mid_cross = AttentionBlock(c1, cfg.heads, context_dim=cfg.text_dim)
        self.dec1 = ResBlock(c1 + c1, c1, E)
        self.dec0 = ResBlock(c1 + c0, c0, E)
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)
        # untrained model predicts eps = 0 exactly
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _cross(self, block, name, h, tokens, rec: _Recorder):
        h, w = block(h, tokens)
        if rec.record.attention:
            rec.maps[name] = w if self.cfg.per_head_maps else w.mean(dim=1)
        rec.tap(name, h)
        return h

    def forward(self, x, t, tokens, pooled, rec: _Recorder):
        dtype = x.dtype
        emb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(dtype)) + self.pooled_proj(pooled)
        h0 = self.enc0(self.conv_in(x), emb)
        rec.tap("enc0.res", h0)
        h1 = self.enc1(self.down0(h0), emb)
        rec.tap("enc1.res", h1)
        h1, _ = self.enc1_self(h1)
        rec.tap("enc1.self", h1)
        h1 = self._cross(self.enc1_cross, "enc1.cross", h1, tokens, rec)
        h2 = self.mid(self.down1(h1), emb)
        rec.tap("mid.res", h2)
        h2, _ = self.mid_self(h2)
        rec.tap("mid.self", h2)
        h2 = self._cross(self.mid_cross, "mid.cross", h2, tokens, rec)
        u1 = F.interpolate(h2, scale_factor=2, mode="nearest")
        u1 = self.dec1(torch.cat([u1, h1], dim=1), emb)
        rec.tap("dec1.res", u1)
        u0 = F.interpolate(u1, scale_factor=2, mode="nearest")
        u0 = self.dec0(torch.cat([u0, h0], dim=1), emb)
        rec.tap("dec0.res", u0)
        return self.conv_out(F.silu(self.norm_out(u0)))


class ToyDenoiser(nn.Module, Denoiser):
    """Toy U-Net plus the caption embedding table it was trained with."""

    cross_layers = CROSS_LAYERS

    def __init__(self, cfg: UNetConfig):
        nn.Module.__init__(self)
        unknown = set(cfg.tap_layers) - set(LAYER_IDS)
        if unknown:
            raise ValueError(f"unknown tap layers {sorted(unknown)}; choose from {LAYER_IDS}")
        self.cfg = cfg
        self.unet = ToyUNet(cfg)
        self.text_encoder = ToyTextEncoder(cfg.vocab, cfg.text_len, cfg.text_dim)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size)

    @property
    def num_timesteps(self) -> int:
        return self.cfg.num_timesteps

    @property
    def tap_layers(self) -> tuple[str, ...]:
        return self.cfg.tap_layers

    def forward_batch(self, x, t, tokens, pooled, record: Record):
        taps = self.cfg.tap_layers if record.taps is None else tuple(record.taps)
        unknown = set(taps) - set(LAYER_IDS)
        if unknown:
            raise ValueError(f"unknown tap layers {sorted(unknown)}")
        rec = _Recorder(record, taps)
        eps = self.unet(x, t, tokens.to(x.dtype), pooled.to(x.dtype), rec)
        return eps, rec.maps, rec.features

    def forward(self, x, t, tokens, pooled):
        return self.forward_batch(x, t, tokens, pooled, Record())[0]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
