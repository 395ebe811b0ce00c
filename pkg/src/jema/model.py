"""Dual-encoder vision transformer with metadata-aligned embedding heads.

Each modality (on-axis, off-axis) has its own ViT encoder. The CLS
representation goes through two independent two-layer heads that produce
the power-aligned embedding ``s_p`` and the velocity-aligned embedding
``s_v``; their concatenation feeds a single linear head predicting the
normalized melt-pool length and height. Both the multimodal path (mean of
the two modalities' fused vectors) and the unimodal path share that head.
"""
import enum
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

__all__ = [
    "Modality",
    "EncoderConfig",
    "EmbeddingPair",
    "MultimodalOutput",
    "UnimodalOutput",
    "ViTEncoder",
    "JemaModel",
    "save_checkpoint",
    "load_checkpoint",
]


class Modality(str, enum.Enum):
    ON_AXIS = "on_axis"
    OFF_AXIS = "off_axis"


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 2
    width: int = 64
    heads: int = 4
    embed_head_width: int = 128
    mlp_ratio: float = 4.0
    activation: str = "gelu"
    causal: bool = False

    def __post_init__(self):
        for name in ("image_size", "patch_size", "depth", "width", "heads", "embed_head_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @classmethod
    def desk(cls):
        return cls(image_size=32, patch_size=8, depth=2, width=64, heads=4)

    @classmethod
    def full(cls):
        # ViT-Base/16
        return cls(image_size=224, patch_size=16, depth=12, width=768, heads=12)

    @classmethod
    def preset(cls, name):
        if name == "desk":
            return cls.desk()
        if name == "full":
            return cls.full()
        raise ValueError(f"unknown preset {name!r} (expected 'desk' or 'full')")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def tokens(self):
        return self.grid**2 + 1


_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU}


class EmbeddingPair(NamedTuple):
    s_p: torch.Tensor
    s_v: torch.Tensor
    fused: torch.Tensor


class MultimodalOutput(NamedTuple):
    on_axis: EmbeddingPair
    off_axis: EmbeddingPair
    fused_joint: torch.Tensor
    predictions: torch.Tensor


class UnimodalOutput(NamedTuple):
    embeddings: EmbeddingPair
    predictions: torch.Tensor


class Attention(nn.Module):
    """Multi-head self-attention that can keep its Q, K and weights for inspection."""

    def __init__(self, width, heads, causal=False):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.causal = causal
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.record = False
        self.recorded = None

    def forward(self, x):
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if self.causal:
            mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        weights = scores.softmax(dim=-1)
        if self.record:
            self.recorded = {"q": q.detach(), "k": k.detach(), "weights": weights.detach()}
        out = (weights @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        hidden = int(cfg.width * cfg.mlp_ratio)
        self.norm1 = nn.LayerNorm(cfg.width)
        self.attn = Attention(cfg.width, cfg.heads, cfg.causal)
        self.norm2 = nn.LayerNorm(cfg.width)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.width, hidden),
            _ACTIVATIONS[cfg.activation](),
            nn.Linear(hidden, cfg.width),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    """Single-channel ViT returning the final CLS representation."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(1, cfg.width, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.tokens, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images):
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[:, 0]


def _embed_head(width, head_width, activation):
    return nn.Sequential(
        nn.Linear(width, head_width),
        _ACTIVATIONS[activation](),
        nn.Linear(head_width, head_width),
    )


class JemaModel(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig.desk()):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleDict({m.value: ViTEncoder(cfg) for m in Modality})
        self.head_p = _embed_head(cfg.width, cfg.embed_head_width, cfg.activation)
        self.head_v = _embed_head(cfg.width, cfg.embed_head_width, cfg.activation)
        self.predict_head = nn.Linear(2 * cfg.embed_head_width, 2)

    def _batch(self, images, return_single=False):
        """Coerce (H,W), (H,W,1), (B,H,W), (B,1,H,W) or (B,H,W,1) to (B,1,H,W)."""
        x = torch.as_tensor(images)
        single = x.ndim == 2 or (x.ndim == 3 and x.shape[-1] == 1 and x.shape[0] == self.cfg.image_size)
        if not x.is_floating_point():
            x = x.float()
        x = x.to(self.predict_head.weight.dtype)
        size = self.cfg.image_size
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x.permute(2, 0, 1)[None] if single else x[:, None]
        elif x.ndim == 4 and x.shape[1] != 1 and x.shape[-1] == 1:
            x = x.permute(0, 3, 1, 2)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (size, size):
            raise ValueError(f"expected single-channel {size}x{size} images, got shape {tuple(torch.as_tensor(images).shape)}")
        if not torch.isfinite(x).all() or x.min() < 0 or x.max() > 1:
            raise ValueError("pixel values must be finite and within [0, 1]")
        return (x, single) if return_single else x

    def encode(self, images, modality):
        modality = Modality(modality)
        return self.encoders[modality.value](self._batch(images))

    def embed_heads(self, cls):
        s_p = self.head_p(cls)
        s_v = self.head_v(cls)
        return EmbeddingPair(s_p, s_v, torch.cat([s_p, s_v], dim=-1))

    def predict(self, fused):
        return self.predict_head(fused)

    def forward_unimodal(self, images, modality="on_axis"):
        emb = self.embed_heads(self.encode(images, modality))
        return UnimodalOutput(emb, self.predict(emb.fused))

    def forward_multimodal(self, on_axis, off_axis):
        on = self.embed_heads(self.encode(on_axis, Modality.ON_AXIS))
        off = self.embed_heads(self.encode(off_axis, Modality.OFF_AXIS))
        joint = 0.5 * (on.fused + off.fused)
        return MultimodalOutput(on, off, joint, self.predict(joint))

    forward = forward_multimodal

    @torch.no_grad()
    def record_attention(self, images, modality):
        """Run one encoder and return the per-layer recorded ``q``, ``k`` and weights."""
        encoder = self.encoders[Modality(modality).value]
        attns = [block.attn for block in encoder.blocks]
        for a in attns:
            a.record = True
        try:
            encoder(self._batch(images))
            return [a.recorded for a in attns]
        finally:
            for a in attns:
                a.record = False
                a.recorded = None

    def extract_attention(self, images, modality="on_axis", layer=-1, scale=1.0):
        """Visualization attention ``softmax(Q K^T) * scale`` for one layer.

        No 1/sqrt(d) factor is applied; this differs from the attention the
        model actually uses. Returns ``(heads, T, T)`` for a single image and
        ``(B, heads, T, T)`` for a batch.
        """
        depth = self.cfg.depth
        if not -depth <= layer < depth:
            raise IndexError(f"layer {layer} out of range for depth {depth}")
        if not scale > 0:
            raise ValueError("scale must be positive")
        x, single = self._batch(images, return_single=True)
        rec = self.record_attention(x, modality)[layer]
        weights = torch.softmax(rec["q"] @ rec["k"].transpose(-2, -1), dim=-1) * scale
        return weights[0] if single else weights


def save_checkpoint(path, model, norm=None, meta=None):
    """Write config, all weights, normalization constants and training metadata."""
    torch.save(
        {
            "format": "jema-checkpoint/1",
            "config": asdict(model.cfg),
            "state_dict": model.state_dict(),
            "norm": None if norm is None else asdict(norm),
            "meta": dict(meta or {}),
        },
        path,
    )


class Checkpoint(NamedTuple):
    model: JemaModel
    norm: object
    meta: dict


def load_checkpoint(path, map_location="cpu"):
    from .synth import NormalizationConstants

    blob = torch.load(path, map_location=map_location, weights_only=False)
    if blob.get("format") != "jema-checkpoint/1":
        raise ValueError(f"{path} is not a checkpoint written by save_checkpoint")
    model = JemaModel(EncoderConfig(**blob["config"]))
    dtype = next(iter(blob["state_dict"].values())).dtype
    model.to(dtype).load_state_dict(blob["state_dict"])
    model.eval()
    norm = None if blob["norm"] is None else NormalizationConstants(**blob["norm"])
    return Checkpoint(model, norm, blob["meta"])
