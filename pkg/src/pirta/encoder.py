"""3D ViT image encoder, patch rearrangement, MAE mask plans and checkpoints.

Token order is x-fastest raster order over the patch grid: token
``ix + gx * (iy + gy * iz)``. Each token flattens its ``(C, px, py, pz)`` block
in C order.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import N_CHANNELS, Volume


class NumericalError(RuntimeError):
    """Non-finite activations or losses."""


def check_divisible(dims: Sequence[int], patch: Sequence[int]) -> None:
    for axis, d, p in zip("xyz", dims, patch):
        if p <= 0 or d % p:
            raise ValueError(f"patch size {p} does not divide volume extent {d} on axis {axis}")


@dataclass(frozen=True)
class EncoderConfig:
    volume_dims: tuple[int, int, int] = (32, 32, 16)
    patch_size: tuple[int, int, int] = (8, 8, 8)
    in_channels: int = N_CHANNELS
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "volume_dims", tuple(int(d) for d in self.volume_dims))
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        check_divisible(self.volume_dims, self.patch_size)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")

    @property
    def feature_dim(self) -> int:
        return self.embed_dim

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(d // p for d, p in zip(self.volume_dims, self.patch_size))

    @property
    def num_patches(self) -> int:
        gx, gy, gz = self.grid_shape
        return gx * gy * gz

    @property
    def patch_dim(self) -> int:
        px, py, pz = self.patch_size
        return self.in_channels * px * py * pz

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


# The canonical grid uses 16x16x8 patches: 6 * 7 * 6 = 252 tokens.
CANONICAL_ENCODER = EncoderConfig(volume_dims=(96, 112, 48), patch_size=(16, 16, 8),
                                  embed_dim=768, depth=12, heads=12, mlp_ratio=4.0)
DESK_ENCODER = EncoderConfig()


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchGrid:
    tokens: np.ndarray  # (P, C * px * py * pz)
    grid_shape: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[0]


def patchify_tensor(x: torch.Tensor, patch_size: Sequence[int]) -> torch.Tensor:
    """(B, C, X, Y, Z) -> (B, P, C*px*py*pz)."""
    B, C, X, Y, Z = x.shape
    check_divisible((X, Y, Z), patch_size)
    px, py, pz = patch_size
    gx, gy, gz = X // px, Y // py, Z // pz
    x = x.reshape(B, C, gx, px, gy, py, gz, pz)
    x = x.permute(0, 6, 4, 2, 1, 3, 5, 7)
    return x.reshape(B, gx * gy * gz, C * px * py * pz)


def unpatchify_tensor(tokens: torch.Tensor, grid_shape: Sequence[int], patch_size: Sequence[int],
                      channels: int = N_CHANNELS) -> torch.Tensor:
    """(B, P, C*px*py*pz) -> (B, C, X, Y, Z)."""
    gx, gy, gz = grid_shape
    px, py, pz = patch_size
    B, P, D = tokens.shape
    if P != gx * gy * gz or D != channels * px * py * pz:
        raise ValueError(f"token tensor {tuple(tokens.shape)} does not match grid {tuple(grid_shape)} "
                         f"with patch {tuple(patch_size)}")
    x = tokens.reshape(B, gz, gy, gx, channels, px, py, pz)
    x = x.permute(0, 4, 3, 5, 2, 6, 1, 7)
    return x.reshape(B, channels, gx * px, gy * py, gz * pz)


def patchify(v: Volume, cfg: EncoderConfig | Sequence[int]) -> PatchGrid:
    patch = cfg.patch_size if isinstance(cfg, EncoderConfig) else tuple(cfg)
    check_divisible(v.dims, patch)
    t = patchify_tensor(torch.from_numpy(np.array(v.data))[None], patch)[0]
    grid = tuple(d // p for d, p in zip(v.dims, patch))
    return PatchGrid(t.numpy(), grid, tuple(patch), v.spacing)


def unpatchify(g: PatchGrid, cfg: Optional[EncoderConfig] = None) -> Volume:
    patch = g.patch_size if cfg is None else cfg.patch_size
    channels = N_CHANNELS if cfg is None else cfg.in_channels
    tokens = np.asarray(g.tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 2-D (P, D), got shape {tokens.shape}")
    x = unpatchify_tensor(torch.from_numpy(np.array(tokens))[None], g.grid_shape, patch, channels)[0]
    return Volume(x.numpy(), g.spacing)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    visible_indices: tuple[int, ...]
    masked_indices: tuple[int, ...]
    q: float

    @property
    def num_patches(self) -> int:
        return len(self.visible_indices) + len(self.masked_indices)

    def mask(self) -> np.ndarray:
        """Boolean array, True at masked (reconstructed) positions."""
        m = np.zeros(self.num_patches, dtype=bool)
        m[list(self.masked_indices)] = True
        return m


def num_visible(P: int, q: float) -> int:
    return int(math.floor(q * P + 0.5))


def sample_mask(P: int, q: float, seed=None) -> MaskPlan:
    """Keep a uniformly random ``round(q * P)`` patches visible.

    ``seed`` may be an int or a :class:`numpy.random.Generator`.
    """
    if not 0 < q < 1:
        raise ValueError(f"visible fraction q must lie in (0, 1), got {q}")
    if P < 2:
        raise ValueError(f"need at least 2 patches, got {P}")
    n = num_visible(P, q)
    if n in (0, P):
        raise ValueError(f"q={q} with P={P} keeps {n} patches visible; the plan is degenerate")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(P)
    return MaskPlan(tuple(sorted(int(i) for i in perm[:n])), tuple(sorted(int(i) for i in perm[n:])), q)


# ---------------------------------------------------------------------------
# transformer


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        x = attn.softmax(dim=-1) @ v
        return self.proj(x.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(round(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def _check_finite(x: torch.Tensor, layer: int | str) -> None:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations after encoder layer {layer}")


class ViT3DEncoder(nn.Module):
    """Linear patch embedding + learned positions + pre-norm blocks + mean pooling."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward_tokens(self, tokens: torch.Tensor, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Encode patch vectors. ``positions`` (B, L) indexes the original patch slots."""
        x = self.patch_embed(tokens)
        if positions is None:
            x = x + self.pos_embed
        else:
            if positions.numel() and (positions.min() < 0 or positions.max() >= self.cfg.num_patches):
                raise IndexError(f"patch index out of range [0, {self.cfg.num_patches})")
            x = x + self.pos_embed[0][positions]
        _check_finite(x, "embed")
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            _check_finite(x, i)
        return self.norm(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, X, Y, Z) -> pooled features (B, feature_dim)."""
        return self.forward_tokens(patchify_tensor(x, self.cfg.patch_size)).mean(dim=1)


def _as_batch(v: Volume, dtype) -> torch.Tensor:
    return torch.from_numpy(np.array(v.data)).to(dtype)[None]


def encode(v: Volume, model: ViT3DEncoder) -> np.ndarray:
    """Pooled feature vector of a single volume (inference mode)."""
    if v.dims != model.cfg.volume_dims:
        raise ValueError(f"volume dims {v.dims} differ from encoder grid {model.cfg.volume_dims}")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        was_training = model.training
        model.eval()
        out = model(_as_batch(v, dtype))[0]
        model.train(was_training)
    return out.numpy()


def encode_batch(volumes: torch.Tensor, model: ViT3DEncoder, batch_size: int = 64) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(volumes), batch_size):
            out.append(model(volumes[i:i + batch_size].to(dtype)))
    if not out:
        return np.zeros((0, model.cfg.feature_dim), dtype=np.float32)
    return torch.cat(out).numpy()


def encode_visible(g: PatchGrid, plan: MaskPlan, model: ViT3DEncoder) -> np.ndarray:
    """Token representations of the visible patches only, in ``visible_indices`` order."""
    if plan.num_patches != g.num_patches:
        raise ValueError(f"plan covers {plan.num_patches} patches but the grid has {g.num_patches}")
    idx = torch.tensor(plan.visible_indices, dtype=torch.long)
    if len(idx) and (idx.min() < 0 or idx.max() >= g.num_patches):
        raise IndexError("visible index out of range")
    dtype = next(model.parameters()).dtype
    tokens = torch.from_numpy(np.array(g.tokens)).to(dtype)[idx][None]
    with torch.no_grad():
        return model.forward_tokens(tokens, idx[None])[0].numpy()


# ---------------------------------------------------------------------------
# MAE


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 32
    depth: int = 1
    heads: int = 4
    mlp_ratio: float = 2.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def for_encoder(cls, enc: EncoderConfig) -> "DecoderConfig":
        width = max(enc.heads, enc.embed_dim // 2)
        return cls(embed_dim=width, depth=1, heads=enc.heads, mlp_ratio=enc.mlp_ratio)


class MAEDecoder(nn.Module):
    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.num_patches = enc.num_patches
        self.embed = nn.Linear(enc.embed_dim, cfg.embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, enc.num_patches, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.pred = nn.Linear(cfg.embed_dim, enc.patch_dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, latent: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """latent (B, L, E) at slots ``visible`` (B, L) -> predictions (B, P, patch_dim)."""
        B, L, _ = latent.shape
        x = self.mask_token.expand(B, self.num_patches, -1).clone()
        x = x.scatter(1, visible[..., None].expand(-1, -1, x.shape[-1]), self.embed(latent))
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


class MaskedAutoencoder(nn.Module):
    def __init__(self, enc: EncoderConfig, dec: Optional[DecoderConfig] = None):
        super().__init__()
        self.encoder = ViT3DEncoder(enc)
        self.decoder = MAEDecoder(enc, dec or DecoderConfig.for_encoder(enc))

    def forward(self, x: torch.Tensor, visible: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (predictions, targets), both (B, P, patch_dim)."""
        target = patchify_tensor(x, self.encoder.cfg.patch_size)
        tokens = target.gather(1, visible[..., None].expand(-1, -1, target.shape[-1]))
        latent = self.encoder.forward_tokens(tokens, visible)
        return self.decoder(latent, visible), target


class TerritoryClassifier(nn.Module):
    def __init__(self, enc: EncoderConfig, n_classes: int = 4):
        super().__init__()
        self.encoder = ViT3DEncoder(enc)
        self.head = nn.Linear(enc.feature_dim, n_classes)
        _init_weights(self.head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str  # "mae" | "classifier"
    encoder_cfg: EncoderConfig
    state: dict[str, torch.Tensor]
    decoder_cfg: Optional[DecoderConfig] = None
    meta: dict = dataclasses.field(default_factory=dict)

    def build(self) -> nn.Module:
        if self.kind == "mae":
            model = MaskedAutoencoder(self.encoder_cfg, self.decoder_cfg)
        elif self.kind == "classifier":
            model = TerritoryClassifier(self.encoder_cfg)
        else:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        model.load_state_dict(self.state)
        return model

    def encoder(self) -> ViT3DEncoder:
        enc = ViT3DEncoder(self.encoder_cfg)
        enc.load_state_dict(self.encoder_state())
        enc.eval()
        return enc

    def encoder_state(self) -> dict[str, torch.Tensor]:
        return {k[len("encoder."):]: v for k, v in self.state.items() if k.startswith("encoder.")}

    @classmethod
    def from_model(cls, model: nn.Module, meta: Optional[dict] = None) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if isinstance(model, MaskedAutoencoder):
            return cls("mae", model.encoder.cfg, state, model.decoder.cfg, meta or {})
        if isinstance(model, TerritoryClassifier):
            return cls("classifier", model.encoder.cfg, state, None, meta or {})
        raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write ``<path>.bin`` (concatenated f32le tensors) and ``<path>.json`` (table of contents)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    toc, offset = [], 0
    with open(str(path) + ".bin", "wb") as fh:
        for name, t in ckpt.state.items():
            raw = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            toc.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    doc = {
        "kind": ckpt.kind,
        "encoder": ckpt.encoder_cfg.to_dict(),
        "decoder": ckpt.decoder_cfg.to_dict() if ckpt.decoder_cfg else None,
        "dtype": "f32le",
        "tensors": toc,
        "meta": ckpt.meta,
    }
    Path(str(path) + ".json").write_text(json.dumps(doc, indent=1))


def checkpoint_exists(path: str | Path) -> bool:
    return Path(str(path) + ".json").exists() and Path(str(path) + ".bin").exists()


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = json.loads(Path(str(path) + ".json").read_text())
    blob = Path(str(path) + ".bin").read_bytes()
    state = {}
    for entry in doc["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(entry["shape"], dtype=int)),
                            offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
    dec = DecoderConfig(**doc["decoder"]) if doc.get("decoder") else None
    return Checkpoint(doc["kind"], EncoderConfig.from_dict(doc["encoder"]), state, dec, doc.get("meta", {}))
