"""Asymmetric masked autoencoder over frame features.

Features are projected to ``dim``, sinusoidal positions for the full sequence
are added, masked frames are dropped, and the visible frames go through the
(large) encoder. The encoder output is expanded back to full length with a
single shared mask token, positions are added again, and the (small) decoder
plus one linear head per codebook produce the posteriors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .audio_io import AudioBuffer, chunk_for_inference
from .errors import CapacityError, ConfigError, NumericError, ShapeError
from .frontend import HOP_LENGTH, FeatureSequence, frame_count, melspectrogram
from .masking import MaskSpec

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 128
    dim: int = 64
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    n_books: int = 8
    n_classes: int = 64
    max_len: int = 4096

    def __post_init__(self):
        if self.dec_layers >= self.enc_layers:
            raise ConfigError(f"decoder must be shallower than encoder ({self.dec_layers} >= {self.enc_layers})")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if min(self.input_dim, self.dim, self.heads, self.ff_mult, self.n_books, self.max_len) < 1 or self.n_classes < 2:
            raise ConfigError(f"invalid model config {self}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            "desk": {},
            "small": dict(input_dim=256, dim=768, enc_layers=5, heads=12, n_classes=1024),
            "base": dict(input_dim=256, dim=768, enc_layers=10, heads=12, n_classes=1024),
            "large": dict(input_dim=256, dim=1024, enc_layers=20, heads=16, n_classes=1024),
        }
        if name not in presets:
            raise ConfigError(f"unknown model preset {name!r}")
        return cls(**{**presets[name], **overrides})


@dataclass(frozen=True)
class Posteriors:
    """``Q x T x K`` softmax outputs."""

    probs: np.ndarray


def positional_embeddings(length: int, dim: int, max_len: int | None = None) -> np.ndarray:
    if max_len is not None and length > max_len:
        raise CapacityError(f"sequence length {length} exceeds max_len {max_len}")
    t = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = t / 10000.0 ** (i2 / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_pad=None):
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / (d // self.heads) ** 0.5
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        y = scores.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """Transformer layer with layer norm both before each sublayer and after its residual add."""

    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.attn_pre = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.attn_post = nn.LayerNorm(dim)
        self.ff_pre = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))
        self.ff_post = nn.LayerNorm(dim)

    def forward(self, x, key_pad=None):
        x = self.attn_post(x + self.attn(self.attn_pre(x), key_pad))
        return self.ff_post(x + self.ff(self.ff_pre(x)))


def _run(blocks, h, key_pad, where: str):
    for i, block in enumerate(blocks):
        h = block(h, key_pad)
        if not torch.isfinite(h).all():
            raise NumericError(f"non-finite activation in {where}", layer=i)
    return h


class MaskedAutoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.input_dim, cfg.dim)
        self.encoder = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.dec_layers))
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        self.head = nn.Linear(cfg.dim, cfg.n_books * cfg.n_classes)
        self.register_buffer("pe", torch.from_numpy(positional_embeddings(cfg.max_len, cfg.dim)).float(), persistent=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.normal_(m.weight, 0.0, INIT_STD, generator=gen)
                    nn.init.zeros_(m.bias)
                elif isinstance(m, nn.LayerNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)
            nn.init.normal_(self.mask_token, 0.0, INIT_STD, generator=gen)

    def reset_heads(self, n_books: int, n_classes: int, seed: int = 0, zero: bool = False) -> None:
        """Replace the classification heads with fresh ones for a new target vocabulary."""
        ref = self.proj.weight
        self.cfg = ModelConfig(**{**asdict(self.cfg), "n_books": n_books, "n_classes": n_classes})
        self.head = nn.Linear(self.cfg.dim, n_books * n_classes).to(dtype=ref.dtype)
        with torch.no_grad():
            if zero:
                nn.init.zeros_(self.head.weight)
            else:
                nn.init.normal_(self.head.weight, 0.0, INIT_STD, generator=torch.Generator().manual_seed(seed))
            nn.init.zeros_(self.head.bias)

    def positions(self, length: int) -> torch.Tensor:
        if length > self.cfg.max_len:
            raise CapacityError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        return self.pe[:length].to(self.proj.weight.dtype)

    def encode_batch(self, x: torch.Tensor, masks: list[MaskSpec] | None = None):
        """Encode a ``B x T x F`` batch. Returns padded ``B x T_v x D`` activations and visible lengths."""
        if x.ndim != 3 or x.shape[-1] != self.cfg.input_dim:
            raise ShapeError(f"expected B x T x {self.cfg.input_dim} features, got {tuple(x.shape)}")
        b, t, _ = x.shape
        h = self.proj(x) + self.positions(t)
        if masks is None:
            return _run(self.encoder, h, None, "encoder"), torch.full((b,), t, dtype=torch.long)
        if len(masks) != b or any(m.n_frames != t for m in masks):
            raise ShapeError(f"masks do not match batch of {b} sequences of length {t}")
        lengths = torch.tensor([m.n_visible for m in masks], dtype=torch.long)
        width = int(lengths.max())
        idx = torch.zeros((b, width), dtype=torch.long)
        for i, m in enumerate(masks):
            idx[i, : m.n_visible] = torch.from_numpy(m.visible)
        h = h.gather(1, idx[..., None].expand(-1, -1, h.shape[-1]))
        key_pad = None
        if int(lengths.min()) < width:
            key_pad = torch.arange(width)[None, :] >= lengths[:, None]
        return _run(self.encoder, h, key_pad, "encoder"), lengths

    def decode_batch(self, h: torch.Tensor, masks: list[MaskSpec] | None, length: int) -> torch.Tensor:
        """Expand with mask tokens, decode, and return ``B x Q x T x K`` logits."""
        b, _, d = h.shape
        if masks is None:
            full = h
        else:
            rows, cols, src = [], [], []
            for i, m in enumerate(masks):
                rows.append(np.full(m.n_visible, i))
                cols.append(m.visible)
                src.append(np.arange(m.n_visible))
            rows, cols, src = (torch.from_numpy(np.concatenate(a)).long() for a in (rows, cols, src))
            full = self.mask_token.expand(b, length, d).clone()
            full = full.index_put((rows, cols), h[rows, src])
        full = _run(self.decoder, full + self.positions(length), None, "decoder")
        logits = self.head(full).view(b, length, self.cfg.n_books, self.cfg.n_classes)
        return logits.permute(0, 2, 1, 3)

    def forward(self, x: torch.Tensor, masks: list[MaskSpec] | None = None) -> torch.Tensor:
        h, _ = self.encode_batch(x, masks)
        return self.decode_batch(h, masks, x.shape[1])

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode_batch(x, None)[0]


def _features_tensor(x_f, model: MaskedAutoencoder) -> torch.Tensor:
    data = x_f.data if isinstance(x_f, FeatureSequence) else np.asarray(x_f)
    return torch.as_tensor(np.asarray(data), dtype=model.proj.weight.dtype)[None]


def encode(x_f, mask: MaskSpec, model: MaskedAutoencoder) -> FeatureSequence:
    """Encoder output for the visible frames of one sequence, ``T_v x D``."""
    x = _features_tensor(x_f, model)
    if x.shape[1] != mask.n_frames:
        raise ShapeError(f"features have {x.shape[1]} frames, mask expects {mask.n_frames}")
    with torch.no_grad():
        h, _ = model.encode_batch(x, [mask])
    return FeatureSequence(h[0].double().numpy(), kind="embedding")


def decode(x_e, mask: MaskSpec, model: MaskedAutoencoder) -> Posteriors:
    data = x_e.data if isinstance(x_e, FeatureSequence) else np.asarray(x_e)
    if data.shape[0] != mask.n_visible:
        raise ShapeError(f"encoder output has {data.shape[0]} rows, mask leaves {mask.n_visible} visible")
    h = torch.as_tensor(data, dtype=model.proj.weight.dtype)[None]
    with torch.no_grad():
        logits = model.decode_batch(h, [mask], mask.n_frames)
    return Posteriors(logits[0].double().softmax(dim=-1).numpy())


def extract_embeddings(x_f, model: MaskedAutoencoder) -> FeatureSequence:
    """Last encoder layer activations with nothing masked, ``T x D``."""
    with torch.no_grad():
        h = model.embed(_features_tensor(x_f, model))
    return FeatureSequence(h[0].double().numpy(), kind="embedding")


def extract_audio_embeddings(
    audio: AudioBuffer, model: MaskedAutoencoder, chunk_s: float = 4.0, n_mels: int | None = None
) -> FeatureSequence:
    """Embed arbitrary-length audio in fixed chunks and concatenate, trimming padded frames."""
    n_mels = n_mels or model.cfg.input_dim
    chunks = chunk_for_inference(audio, chunk_s)
    feats = np.stack([melspectrogram(c, n_mels).data for c in chunks]).astype(np.float32)
    with torch.no_grad():
        h = model.embed(torch.as_tensor(feats, dtype=model.proj.weight.dtype))
    h = h.reshape(-1, h.shape[-1])[: frame_count(len(audio), HOP_LENGTH)]
    return FeatureSequence(h.double().numpy(), frame_rate=audio.sample_rate / HOP_LENGTH, kind="embedding")


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every parameter (zeros where unused)."""
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient", tensor=name)
        out[name] = g
    return out


def model_to_tensors(model: MaskedAutoencoder) -> tuple[dict, dict]:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return tensors, {"kind": "mae", "config": asdict(model.cfg)}


def model_from_tensors(tensors: dict, meta: dict) -> MaskedAutoencoder:
    cfg = ModelConfig(**meta["config"])
    model = MaskedAutoencoder(cfg)
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise ShapeError(f"checkpoint lacks tensor {missing[0]}")
    for k, v in state.items():
        if tuple(tensors[k].shape) != tuple(v.shape):
            raise ShapeError(f"tensor {k} has shape {tensors[k].shape}, expected {tuple(v.shape)}")
    dtype = torch.from_numpy(np.asarray(tensors["proj.weight"])).dtype
    model.load_state_dict({k: torch.from_numpy(np.array(tensors[k])) for k in state})
    return model.to(dtype)
