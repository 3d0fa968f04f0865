"""Token-based classifiers: a CLS-token ViT and a cross-covariance (XCA)
transformer with local patch interaction.

Both patchify the input with a kernel = stride = token_size convolution. The
ViT adds learned position embeddings (fixed input resolution); the XCA model
uses sinusoidal two-dimensional embeddings computed per resolution, so it
accepts any input size divisible by token_size.

The last attention / XCA block supports capture: when its ``capture`` flag is
set, the softmax attention (ViT) or the raw per-head queries and keys (XCA,
before l2 normalization) are stored detached. Capture never feeds back into
the computation, so logits are bitwise unchanged by it.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.capture = False
        self.captured = None

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        if self.capture:
            self.captured = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class ViTBlock(nn.Module):
    def __init__(self, dim, heads, layer_scale=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 4 * dim)
        if layer_scale is not None:
            self.g1 = nn.Parameter(layer_scale * torch.ones(dim))
            self.g2 = nn.Parameter(layer_scale * torch.ones(dim))
        else:
            self.g1 = self.g2 = None

    def forward(self, x):
        a = self.attn(self.norm1(x))
        x = x + (a if self.g1 is None else a * self.g1)
        m = self.mlp(self.norm2(x))
        return x + (m if self.g2 is None else m * self.g2)


class ViTNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c, h, w = cfg.input_size
        self.grid = (h // cfg.token_size, w // cfg.token_size)
        n_tokens = self.grid[0] * self.grid[1]
        d = cfg.embed_dim
        self.patch = nn.Conv2d(c, d, cfg.token_size, stride=cfg.token_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.zeros(1, n_tokens + 1, d))
        depth = sum(cfg.stage_blocks)
        self.blocks = nn.ModuleList(
            ViTBlock(d, cfg.num_heads, cfg.layer_scale) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.num_classes)
        self.input_hw = (h, w)

    @property
    def last_attention(self):
        return self.blocks[-1].attn

    def forward(self, x):
        if x.shape[-2:] != torch.Size(self.input_hw):
            raise ConfigurationError(
                f"vit built for input {self.input_hw}, got {tuple(x.shape[-2:])} "
                "(learned position embeddings fix the resolution)"
            )
        t = self.patch(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1)
        t = t + self.pos
        for blk in self.blocks:
            t = blk(t)
        return self.head(self.norm(t)[:, 0])


def sincos_position_embedding(grid_h, grid_w, dim, dtype=torch.float32):
    """Deterministic 2D sine/cosine embedding, (grid_h * grid_w, dim)."""
    if dim % 4 != 0:
        raise ConfigurationError(
            f"sinusoidal embeddings need embed_dim divisible by 4, got {dim}"
        )
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=dtype) / quarter))
    ys = torch.arange(grid_h, dtype=dtype).repeat_interleave(grid_w)
    xs = torch.arange(grid_w, dtype=dtype).repeat(grid_h)
    parts = []
    for coord in (ys, xs):
        ang = coord.unsqueeze(1) * omega.unsqueeze(0)
        parts.extend([ang.sin(), ang.cos()])
    return torch.cat(parts, dim=1)


class XCA(nn.Module):
    """Cross-covariance attention: attention over channels, tokens as the
    sample axis. Queries/keys are l2-normalized along tokens; a learnable
    per-head temperature scales the channel-channel similarity."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.capture = False
        self.captured_q = None
        self.captured_k = None

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # (b, heads, tokens, dh)
        if self.capture:
            self.captured_q = q.detach()
            self.captured_k = k.detach()
        q = F.normalize(q.transpose(-2, -1), dim=-1)  # (b, heads, dh, tokens)
        k = F.normalize(k.transpose(-2, -1), dim=-1)
        attn = (q @ k.transpose(-2, -1)) * self.temperature
        attn = attn.softmax(dim=-1)  # (b, heads, dh, dh)
        out = attn @ v.transpose(-2, -1)  # (b, heads, dh, tokens)
        out = out.permute(0, 3, 1, 2).reshape(b, t, d)
        return self.proj(out)


class LPI(nn.Module):
    """Local patch interaction: two depthwise 3x3 convolutions over the token
    grid with an activation and a batch norm in between."""

    def __init__(self, dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.bn = nn.BatchNorm2d(dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)

    def forward(self, x, grid):
        b, t, d = x.shape
        y = x.transpose(1, 2).reshape(b, d, grid[0], grid[1])
        y = self.conv2(self.bn(F.gelu(self.conv1(y))))
        return y.reshape(b, d, t).transpose(1, 2)


class XCiTBlock(nn.Module):
    def __init__(self, dim, heads, layer_scale=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.xca = XCA(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.lpi = LPI(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 4 * dim)
        if layer_scale is not None:
            self.g1 = nn.Parameter(layer_scale * torch.ones(dim))
            self.g2 = nn.Parameter(layer_scale * torch.ones(dim))
            self.g3 = nn.Parameter(layer_scale * torch.ones(dim))
        else:
            self.g1 = self.g2 = self.g3 = None

    def forward(self, x, grid):
        a = self.xca(self.norm1(x))
        x = x + (a if self.g1 is None else a * self.g1)
        l = self.lpi(self.norm2(x), grid)
        x = x + (l if self.g2 is None else l * self.g2)
        m = self.mlp(self.norm3(x))
        return x + (m if self.g3 is None else m * self.g3)


class XCiTNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c = cfg.input_size[0]
        d = cfg.embed_dim
        self.token_size = cfg.token_size
        self.patch = nn.Conv2d(c, d, cfg.token_size, stride=cfg.token_size)
        depth = sum(cfg.stage_blocks)
        self.blocks = nn.ModuleList(
            XCiTBlock(d, cfg.num_heads, cfg.layer_scale) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.num_classes)
        sincos_position_embedding(2, 2, d)  # validates dim divisibility early

    @property
    def last_xca(self):
        return self.blocks[-1].xca

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.token_size or w % self.token_size:
            raise ConfigurationError(
                f"input {h}x{w} not divisible by token_size {self.token_size}"
            )
        grid = (h // self.token_size, w // self.token_size)
        t = self.patch(x).flatten(2).transpose(1, 2)
        pos = sincos_position_embedding(*grid, t.shape[-1], dtype=t.dtype)
        t = t + pos.to(device=t.device).unsqueeze(0)
        for blk in self.blocks:
            t = blk(t, grid)
        return self.head(self.norm(t).mean(dim=1))
