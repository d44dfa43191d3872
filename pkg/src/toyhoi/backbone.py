"""Toy text-conditioned denoiser standing in for a pretrained latent diffusion U-Net.

The denoiser works directly on 32x32 RGB "latents". It has convolutional blocks at
32x32 and attention blocks (self + cross) at 16x16 and 8x8; cross-attention maps
for concept supervision are read at 8x8. Text conditioning is a plain embedding
lookup over a whitespace-tokenised toy vocabulary, with reserved slots whose
rows are supplied by learnable concept clues.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import archive, scenes
from .attention_lora import AttentionLayer

FUNCTION_WORDS = ("<pad>", "a", "photo", "of", "and", "at")
CONCEPT_TOKENS = ("<s*>", "<o*>", "<bg*>", "<c*>")
CONCEPT_LABELS = {"subject": "<s*>", "object": "<o*>", "background": "<bg*>", "merged": "<c*>"}


class NumericError(ArithmeticError):
    pass


class VocabularyError(KeyError):
    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class DenoiserConfig:
    img_res: int = 32
    latent_channels: int = 3
    base_width: int = 32
    map_res: int = 8
    n_heads: int = 1
    d_text: int = 32
    vocab_size: int = 64
    reserved_concept_slots: int = 8
    context_len: int = 8
    time_dim: int = 64
    latent_scale: float = 0.25  # latent = scale * image, like a VAE scale factor
    text_init_std: float = 0.1

    def __post_init__(self):
        if not self.latent_scale > 0:
            raise ValueError("latent_scale must be positive")
        if self.img_res % self.map_res:
            raise ValueError("map_res must divide img_res")
        if self.reserved_concept_slots < 3:
            raise ValueError("need at least 3 reserved concept slots")
        if self.img_res // self.map_res != 4:
            raise ValueError("the toy U-Net downsamples exactly twice; map_res must be img_res / 4")

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.base_width // 2, self.base_width, self.base_width * 2)

    def to_dict(self) -> dict:
        return asdict(self)

    def encode_image(self, image) -> torch.Tensor:
        """Image in [-1, 1] -> latent. The toy has no autoencoder, only this scale."""
        return torch.as_tensor(np.asarray(image, dtype=np.float32)) * self.latent_scale

    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        return (z / self.latent_scale).clamp(-1.0, 1.0).numpy()


class Vocabulary:
    """Fixed word list padded to ``vocab_size``; concept tokens occupy ids above it."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        words = list(FUNCTION_WORDS) + list(scenes.SUBJECTS) + list(scenes.OBJECTS) \
            + list(scenes.BACKGROUNDS) + list(scenes.VERBS)
        if len(words) > cfg.vocab_size:
            raise ValueError("vocabulary does not fit vocab_size")
        self.words = words
        self.size = cfg.vocab_size
        self.context_len = cfg.context_len
        self.ids = {w: i for i, w in enumerate(words)}
        self.concept_ids = {tok: cfg.vocab_size + i for i, tok in enumerate(CONCEPT_TOKENS)}
        self.pad_id = self.ids["<pad>"]

    @staticmethod
    def normalize(word: str) -> str:
        return "_".join(word.strip().lower().replace("-", " ").split())

    def word_id(self, word: str) -> int:
        if word in self.concept_ids:
            return self.concept_ids[word]
        key = self.normalize(word)
        if key not in self.ids:
            known = ", ".join(w for w in self.words if not w.startswith("<"))
            raise VocabularyError(f"unknown word {word!r}; vocabulary: {known}")
        return self.ids[key]

    def is_concept(self, token_id: int) -> bool:
        return token_id >= self.size

    def tokenize(self, text: str, interaction: str | None = None) -> "PromptSequence":
        """Whitespace tokenisation, padded to the context length.

        ``interaction`` (if given) is substituted for a literal ``{i}`` placeholder so
        multi-word verbs like "lie on" stay a single token.
        """
        parts = text.split()
        ids, positions = [], {}
        for part in parts:
            if part == "{i}":
                part = self.normalize(interaction)
            tid = self.word_id(part)
            if self.is_concept(tid):
                if part in positions:
                    raise ValueError(f"concept {part} appears twice in {text!r}")
                positions[part] = len(ids)
            ids.append(tid)
        if len(ids) > self.context_len:
            raise ValueError(f"prompt longer than {self.context_len} tokens: {text!r}")
        ids += [self.pad_id] * (self.context_len - len(ids))
        return PromptSequence(ids, positions)

    def decode(self, seq: "PromptSequence") -> str:
        inv = {v: k for k, v in self.concept_ids.items()}
        return " ".join(inv.get(t) or self.words[t] for t in seq.tokens if t != self.pad_id)


@dataclass
class PromptSequence:
    tokens: list[int]
    concept_positions: dict[str, int] = field(default_factory=dict)


@dataclass
class ConceptClue:
    """A learnable token embedding bound to a spatial region of the source image."""

    label: str
    token: str
    token_id: int
    embedding: torch.Tensor
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError("concept mask must be binary")
        self.mask = m.astype(bool)
        if not self.mask.any():
            raise ValueError(f"concept {self.label!r} has an empty mask")


def encode_prompt(seq: PromptSequence, embeddings, concepts=()) -> torch.Tensor:
    """``[len, d_text]`` conditioning; concept positions read the live clue embeddings."""
    table = embeddings.weight if isinstance(embeddings, nn.Embedding) else embeddings
    by_token = {c.token: c for c in concepts}
    tokens = torch.tensor(seq.tokens)
    n_vocab = table.shape[0]
    if (tokens < 0).any():
        raise ValueError("negative token id")
    concept_rows = {}
    for token, pos in seq.concept_positions.items():
        if token not in by_token:
            raise VocabularyError(f"no concept clue supplied for {token}")
        concept_rows[pos] = by_token[token].embedding
    plain = [i for i, t in enumerate(seq.tokens) if i not in concept_rows]
    if any(seq.tokens[i] >= n_vocab for i in plain):
        raise VocabularyError("concept token id without a concept position")
    if not concept_rows:
        return table[tokens]
    rows = [concept_rows[i] if i in concept_rows else table[seq.tokens[i]]
            for i in range(len(seq.tokens))]
    return torch.stack(rows)


# -- network ------------------------------------------------------------------

def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def position_features(res: int, dim: int) -> torch.Tensor:
    """Fixed 2D sinusoidal features, ``[res*res, dim]``."""
    quarter = dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float32) / quarter)
    ys, xs = torch.meshgrid(torch.arange(res, dtype=torch.float32),
                            torch.arange(res, dtype=torch.float32), indexing="ij")
    ay = ys.reshape(-1, 1) * freqs
    ax = xs.reshape(-1, 1) * freqs
    return torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=-1)


def _norm(c):
    return nn.GroupNorm(min(8, c), c)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.n1 = _norm(c_in)
        self.c1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t = nn.Linear(t_dim, c_out)
        self.n2 = _norm(c_out)
        self.c2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Self-attention, cross-attention and a feed-forward on the flattened grid."""

    def __init__(self, c, d_text, n_heads, res):
        super().__init__()
        self.res = res
        self.norm_in = _norm(c)
        self.register_buffer("pos", position_features(res, c), persistent=False)
        self.ln1 = nn.LayerNorm(c)
        self.self_attn = AttentionLayer(c, n_heads=n_heads, kind="self", resolution=res)
        self.ln2 = nn.LayerNorm(c)
        self.cross_attn = AttentionLayer(c, d_text, n_heads=n_heads, kind="cross", resolution=res)
        self.ln3 = nn.LayerNorm(c)
        self.ff = nn.Sequential(nn.Linear(c, 2 * c), nn.GELU(), nn.Linear(2 * c, c))

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.norm_in(x).flatten(2).transpose(1, 2) + self.pos
        tokens = tokens + self.self_attn(self.ln1(tokens))
        tokens = tokens + self.cross_attn(self.ln2(tokens), context)
        tokens = tokens + self.ff(self.ln3(tokens))
        return x + tokens.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Noise predictor ``eps(z_t, t, cond)`` with a frozen-able text table."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.widths
        td = cfg.time_dim
        r1, r2 = cfg.img_res // 2, cfg.map_res
        self.text = nn.Embedding(cfg.vocab_size, cfg.d_text)
        nn.init.normal_(self.text.weight, std=cfg.text_init_std)
        self.time_mlp = nn.Sequential(nn.Linear(32, td), nn.SiLU(), nn.Linear(td, td))
        self.text_norm = nn.LayerNorm(cfg.d_text)  # final norm of the toy text encoder
        # pooled prompt vector joins the timestep embedding (global conditioning path)
        self.text_pool = nn.Sequential(nn.Linear(cfg.d_text, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.res0 = ResBlock(c0, c0, td)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.res1 = ResBlock(c1, c1, td)
        self.attn1 = AttentionBlock(c1, cfg.d_text, cfg.n_heads, r1)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res2 = ResBlock(c2, c2, td)
        self.attn2 = AttentionBlock(c2, cfg.d_text, cfg.n_heads, r2)
        self.res_mid = ResBlock(c2, c2, td)
        self.attn_mid = AttentionBlock(c2, cfg.d_text, cfg.n_heads, r2)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.res3 = ResBlock(2 * c1, c1, td)
        self.attn3 = AttentionBlock(c1, cfg.d_text, cfg.n_heads, r1)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.res4 = ResBlock(2 * c0, c0, td)
        self.norm_out = _norm(c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)

    # attention bookkeeping ---------------------------------------------------

    def attention_blocks(self):
        return [(n, m) for n, m in self.named_modules() if isinstance(m, AttentionBlock)]

    def attention_layers(self):
        """``(path, AttentionLayer)`` for every attention layer, in forward order."""
        return [(n, m) for n, m in self.named_modules() if isinstance(m, AttentionLayer)]

    def cross_layers(self, res: int | None = None):
        return [m for _, m in self.attention_layers()
                if m.kind == "cross" and (res is None or m.resolution == res)]

    @contextlib.contextmanager
    def capture_maps(self):
        layers = self.cross_layers()
        for layer in layers:
            layer.capture = True
        try:
            yield self
        finally:
            for layer in layers:
                layer.capture = False

    def base_state(self) -> dict[str, torch.Tensor]:
        """Pretrained tensors only (adapters excluded)."""
        return {k: v for k, v in self.state_dict().items() if ".adapter." not in k}

    # forward -------------------------------------------------------------------

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_features(t, 32))

    def forward(self, z_t, t, cond):
        if not torch.isfinite(z_t).all():
            raise NumericError("non-finite latent passed to the denoiser")
        if z_t.ndim == 3:
            return self.forward(z_t[None], t, cond)[0]
        b = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(b) if torch.as_tensor(t).numel() == 1 \
            else torch.as_tensor(t)
        if cond.ndim == 2:
            cond = cond[None].expand(b, -1, -1)
        cond = self.text_norm(cond)
        temb = self.time_embedding(t) + self.text_pool(cond.mean(dim=1))
        h0 = self.res0(self.conv_in(z_t), temb)
        h1 = self.attn1(self.res1(self.down1(h0), temb), cond)
        h = self.attn2(self.res2(self.down2(h1), temb), cond)
        h = self.attn_mid(self.res_mid(h, temb), cond)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.attn3(self.res3(torch.cat([h, h1], 1), temb), cond)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.res4(torch.cat([h, h0], 1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_noise(model: Denoiser, z_t, t, cond):
    return model(z_t, t, cond)


# -- checkpoints ---------------------------------------------------------------

def base_checksum(model: Denoiser) -> str:
    return archive.tensor_checksum(model.base_state())


def save_base(model: Denoiser, path, extra_meta: dict | None = None):
    meta = {"kind": "base", "config": model.cfg.to_dict(), "checksum": base_checksum(model)}
    meta.update(extra_meta or {})
    return archive.save(path, model.base_state(), meta)


def load_base(path=None) -> Denoiser:
    """Load a base checkpoint; with no path, the packaged pretrained toy backbone."""
    path = Path(path) if path is not None else default_base_path()
    tensors, meta = archive.load(path)
    model = Denoiser(DenoiserConfig(**meta["config"]))
    model.load_state_dict(tensors, strict=False)
    missing = set(model.base_state()) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint {path} is missing tensors: {sorted(missing)[:5]}")
    model.requires_grad_(False)
    model.eval()
    return model


def default_base_path() -> Path:
    return Path(__file__).parent / "data" / "base.zip"
