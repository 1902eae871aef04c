"""Two-branch restoration network: NAFBlock U-Net for the optical image and
a NAFBlock encoder for SAR, fused level by level with channel-wise
cross-modal attention (SFBlock).

Tensors are NCHW throughout. ``DBCRNet.forward(x_t, t, z)`` returns the
clean-image estimate with the same shape as ``x_t``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BackboneConfig:
    """Network hyperparameters. Defaults are the full-size configuration."""

    opt_channels_in: int = 13
    sar_channels_in: int = 2
    widths: list[int] = field(default_factory=lambda: [22, 44, 88, 176])
    enc_blocks: list[int] = field(default_factory=lambda: [1, 1, 1, 28])
    dec_blocks: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    fusion_heads: list[int] = field(default_factory=lambda: [1, 1, 2, 4])
    time_embed_dim: int = 176

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.enc_blocks = [int(b) for b in self.enc_blocks]
        self.dec_blocks = [int(b) for b in self.dec_blocks]
        self.fusion_heads = [int(h) for h in self.fusion_heads]
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.widths)

    def validate(self):
        n = len(self.widths)
        if n == 0:
            raise ValueError("at least one level is required")
        if not (len(self.enc_blocks) == len(self.dec_blocks) == len(self.fusion_heads) == n):
            raise ValueError("widths, enc_blocks, dec_blocks and fusion_heads must have equal length")
        for w, h in zip(self.widths, self.fusion_heads):
            if w <= 0 or w % 2:
                raise ValueError(f"every width must be positive and even, got {w}")
            if h <= 0 or w % h:
                raise ValueError(f"fusion head count {h} does not divide width {w}")
        if any(b < 0 for b in self.enc_blocks + self.dec_blocks):
            raise ValueError("block counts must be nonnegative")
        if self.opt_channels_in < 1 or self.sar_channels_in < 1:
            raise ValueError("channel counts must be positive")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be positive and even")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Raw ``[sin(t w_k)..., cos(t w_k)...]`` features; ``t`` has shape (B,)."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be positive and even, got {dim}")
    half = dim // 2
    # w_0 = 1 keeps integer timesteps pairwise distinct
    k = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * k / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding of the integer timestep followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        if dim <= 0 or dim % 2:
            raise ValueError(f"embedding dim must be positive and even, got {dim}")
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        raw = sinusoidal_embedding(t, self.dim).to(self.mlp[0].weight.dtype)
        return self.mlp(raw)


def time_embedding(t: int, dim: int, T: int, module: TimeEmbedding | None = None) -> torch.Tensor:
    """Embed a single timestep; returns the raw sinusoid when ``module`` is None."""
    if not 0 <= t <= T:
        raise ValueError(f"timestep {t} outside [0, {T}]")
    tt = torch.tensor([t])
    if module is None:
        return sinusoidal_embedding(tt, dim)[0]
    if module.dim != dim:
        raise ValueError(f"module embeds to {module.dim}, requested {dim}")
    return module(tt)[0]


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        y = (x - mu) / torch.sqrt(var + self.eps)
        return self.weight[None, :, None, None] * y + self.bias[None, :, None, None]


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """Split channels in half and multiply the halves."""
    if x.shape[1] % 2:
        raise ValueError(f"simple_gate needs an even channel count, got {x.shape[1]}")
    x1, x2 = x.chunk(2, dim=1)
    return x1 * x2


class SimpleGate(nn.Module):
    def forward(self, x):
        return simple_gate(x)


class NAFBlock(nn.Module):
    """Time-conditioned NAFBlock.

    The time embedding yields a per-channel scale and shift applied to the
    normalized input of the MBConv branch.
    """

    def __init__(self, c: int, time_dim: int, dw_expand: int = 2, ffn_expand: int = 2):
        super().__init__()
        self.c = c
        dw = c * dw_expand
        ffn = c * ffn_expand
        self.time_proj = nn.Linear(time_dim, 2 * c)

        self.norm1 = LayerNorm2d(c)
        self.conv1 = nn.Conv2d(c, dw, 1)
        self.conv2 = nn.Conv2d(dw, dw, 3, padding=1, groups=dw)
        self.sca = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(dw // 2, dw // 2, 1))
        self.conv3 = nn.Conv2d(dw // 2, c, 1)

        self.norm2 = LayerNorm2d(c)
        self.conv4 = nn.Conv2d(c, ffn, 1)
        self.conv5 = nn.Conv2d(ffn // 2, c, 1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c:
            raise ValueError(f"NAFBlock expects {self.c} channels, got {x.shape[1]}")
        scale, shift = self.time_proj(temb)[:, :, None, None].chunk(2, dim=1)

        h = self.norm1(x) * (1 + scale) + shift
        h = simple_gate(self.conv2(self.conv1(h)))
        h = h * self.sca(h)
        z = x + self.conv3(h)

        h = simple_gate(self.conv4(self.norm2(z)))
        return z + self.conv5(h)


class SFBlock(nn.Module):
    """Channel-wise cross-modal attention: optical queries, SAR keys/values.

    Per head of ``d = c / heads`` channels the ``d x d`` score matrix
    ``K^T Q / sqrt(d)`` is softmax-normalized over the key axis (each column
    sums to 1) and applied as ``V @ weights``, so output channel ``j`` is a
    convex combination of SAR value channels. Each head adds its result to
    the matching slice of the optical input and passes it through a
    residual MLP; heads are concatenated and projected by a 1x1 conv.
    """

    def __init__(self, c: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        if heads <= 0 or c % heads:
            raise ValueError(f"head count {heads} does not divide channels {c}")
        self.c, self.heads = c, heads
        d = c // heads
        self.norm_opt = LayerNorm2d(c)
        self.norm_sar = LayerNorm2d(c)
        self.q = nn.Conv2d(c, c, 1)
        self.k = nn.Conv2d(c, c, 1)
        self.v = nn.Conv2d(c, c, 1)
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))
            for _ in range(heads)
        )
        self.proj = nn.Conv2d(c, c, 1)

    def attention_weights(self, opt_feat: torch.Tensor, sar_feat: torch.Tensor) -> torch.Tensor:
        """Softmax weights of shape (B, heads, d_key, d_query)."""
        B, c, h, w = opt_feat.shape
        d = c // self.heads
        q = self.q(self.norm_opt(opt_feat)).reshape(B, self.heads, d, h * w)
        k = self.k(self.norm_sar(sar_feat)).reshape(B, self.heads, d, h * w)
        scores = k @ q.transpose(-1, -2) / math.sqrt(d)
        return scores.softmax(dim=-2)

    def forward(self, opt_feat: torch.Tensor, sar_feat: torch.Tensor) -> torch.Tensor:
        if opt_feat.shape != sar_feat.shape:
            raise ValueError(f"optical {tuple(opt_feat.shape)} and SAR {tuple(sar_feat.shape)} features differ in shape")
        if opt_feat.shape[1] != self.c:
            raise ValueError(f"SFBlock expects {self.c} channels, got {opt_feat.shape[1]}")
        B, c, h, w = opt_feat.shape
        d = c // self.heads
        weights = self.attention_weights(opt_feat, sar_feat)
        # (B, heads, hw, d_key) @ (B, heads, d_key, d_query) -> (B, heads, hw, d_query)
        v = self.v(self.norm_sar(sar_feat)).reshape(B, self.heads, d, h * w).transpose(-1, -2)
        attended = v @ weights
        base = opt_feat.reshape(B, self.heads, d, h * w).transpose(-1, -2)
        z_sum = base + attended
        outs = [z_sum[:, i] + mlp(z_sum[:, i]) for i, mlp in enumerate(self.mlps)]
        z_out = torch.stack(outs, dim=1).transpose(-1, -2).reshape(B, c, h, w)
        return self.proj(z_out)


def sf_block(opt_feat: torch.Tensor, sar_feat: torch.Tensor, heads: int,
             module: SFBlock | None = None) -> torch.Tensor:
    if module is None:
        module = SFBlock(opt_feat.shape[1], heads)
    elif module.heads != heads:
        raise ValueError(f"module has {module.heads} heads, requested {heads}")
    return module(opt_feat, sar_feat)


class _Stage(nn.Module):
    def __init__(self, c, n, time_dim):
        super().__init__()
        self.blocks = nn.ModuleList(NAFBlock(c, time_dim) for _ in range(n))

    def forward(self, x, temb):
        for blk in self.blocks:
            x = blk(x, temb)
        return x


class DBCRNet(nn.Module):
    """R_theta(x_t, t, z) -> estimate of the cloud-free image.

    A global residual adds ``x_t`` to the output head, and the head is
    zero-initialized, so a fresh network is the identity on ``x_t``.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        W, L = cfg.widths, cfg.levels
        td = cfg.time_embed_dim

        self.time_embed = TimeEmbedding(td)
        self.opt_intro = nn.Conv2d(cfg.opt_channels_in, W[0], 1)
        self.sar_intro = nn.Conv2d(cfg.sar_channels_in, W[0], 1)

        self.opt_enc = nn.ModuleList(_Stage(W[i], cfg.enc_blocks[i], td) for i in range(L))
        self.sar_enc = nn.ModuleList(_Stage(W[i], cfg.enc_blocks[i], td) for i in range(L))
        self.fusion = nn.ModuleList(SFBlock(W[i], cfg.fusion_heads[i]) for i in range(L))
        self.opt_down = nn.ModuleList(nn.Conv2d(W[i], W[i + 1], 2, stride=2) for i in range(L - 1))
        self.sar_down = nn.ModuleList(nn.Conv2d(W[i], W[i + 1], 2, stride=2) for i in range(L - 1))

        self.ups = nn.ModuleList(
            nn.Sequential(nn.Conv2d(W[i + 1], 4 * W[i], 1, bias=False), nn.PixelShuffle(2))
            for i in range(L - 1)
        )
        self.dec = nn.ModuleList(_Stage(W[i], cfg.dec_blocks[i], td) for i in range(L))
        self.head = nn.Conv2d(W[0], cfg.opt_channels_in, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def forward(self, x_t: torch.Tensor, t, z: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x_t.dim() != 4 or z.dim() != 4:
            raise ValueError("x_t and z must be NCHW tensors")
        B, C, H, Wd = x_t.shape
        if C != cfg.opt_channels_in:
            raise ValueError(f"x_t has {C} channels, network expects {cfg.opt_channels_in}")
        if z.shape[1] != cfg.sar_channels_in:
            raise ValueError(f"z has {z.shape[1]} channels, network expects {cfg.sar_channels_in}")
        if z.shape[0] != B or z.shape[2:] != x_t.shape[2:]:
            raise ValueError(f"z shape {tuple(z.shape)} not aligned with x_t shape {tuple(x_t.shape)}")
        m = self.spatial_multiple
        if H % m or Wd % m:
            raise ValueError(f"spatial dims {H}x{Wd} must be divisible by {m}")

        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and B > 1:
            t = t.expand(B)
        temb = self.time_embed(t)

        o = self.opt_intro(x_t)
        s = self.sar_intro(z)
        skips = []
        for i in range(cfg.levels):
            o = self.opt_enc[i](o, temb)
            s = self.sar_enc[i](s, temb)
            o = self.fusion[i](o, s)
            skips.append(o)
            if i < cfg.levels - 1:
                o = self.opt_down[i](o)
                s = self.sar_down[i](s)

        o = self.dec[-1](skips[-1], temb)
        for i in range(cfg.levels - 2, -1, -1):
            o = self.ups[i](o) + skips[i]
            o = self.dec[i](o, temb)
        return x_t + self.head(o)


def backbone_forward(x_t, t, z, net: DBCRNet) -> torch.Tensor:
    """Run the network on a single CHW image or an NCHW batch."""
    single = x_t.dim() == 3
    if single:
        x_t, z = x_t[None], z[None]
    out = net(x_t, t, z)
    return out[0] if single else out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
