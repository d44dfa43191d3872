"""Two-stage inversion of one source image into concept tokens and attention adapters.

Stage 1 optimises only the concept embeddings. Stage 2 optimises them jointly with
the attention adapters selected by the freeze policy (Key/Value by default). Each
step draws a timestep, a random non-empty subset of concepts and the matching
source prompt, and minimises

    L_total = L_rec + lambda_attn * L_attn

where ``L_rec`` is the noise-prediction error restricted to the union of the
selected concept masks and ``L_attn`` pulls each concept's cross-attention map
towards its mask.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import archive, rng
from .attention_lora import (DenseDelta, FreezePolicy, LoRAAdapter, cross_attention_map,
                             detach_adapters, inject_adapters)
from .backbone import (CONCEPT_LABELS, ConceptClue, Denoiser, Vocabulary, base_checksum,
                       encode_prompt)
from .diffusion import DEFAULT_SCHEDULE, add_noise

CONCEPT_ORDER = ("subject", "object", "background")


class DegenerateMaskError(ValueError):
    pass


class IncompatibleArtifactError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage1_steps: int = 1000
    stage1_lr: float = 5e-4
    stage2_steps: int = 200
    stage2_lr: float = 1e-4
    batch: int = 1
    weight_decay: float = 1e-4
    lambda_attn: float = 0.01
    rank_q: int = 4
    rank_k: int = 4
    rank_v: int = 4
    disassembly: bool = True
    sft: bool = True
    lora: bool = True
    include_source_interaction: bool = False
    concept_init_std: float | None = None  # None: match the spread of the frozen word table
    init_from_labels: bool = True  # start each concept at its class word's embedding when known
    seed: int = 0

    def __post_init__(self):
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if self.lambda_attn < 0:
            raise ValueError("lambda_attn must be non-negative")

    @property
    def policy(self) -> FreezePolicy:
        return FreezePolicy() if self.sft else FreezePolicy.uniform(True, True, True)

    @property
    def adapter_mode(self) -> str:
        return "lora" if self.lora else "dense"

    @property
    def ranks(self) -> dict:
        return {"q": self.rank_q, "k": self.rank_k, "v": self.rank_v}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# Ablation grid: name -> (disassembly, sft, lora)
ABLATIONS = {
    "baseline": (False, False, False),
    "w/o SFT & LoRA": (True, False, False),
    "w/o LoRA": (True, True, False),
    "w/o SFT": (True, False, True),
    "w/o Disass.": (False, True, True),
    "full": (True, True, True),
}


def ablation_config(name: str, **overrides) -> TrainConfig:
    d, s, l = ABLATIONS[name]
    return TrainConfig(disassembly=d, sft=s, lora=l, **overrides)


# -- concept bookkeeping --------------------------------------------------------

def make_concepts(masks: dict, d_text: int, vocab: Vocabulary, gen, init_std: float,
                  disassembly: bool = True, init_words: dict | None = None) -> list[ConceptClue]:
    """One clue per concept. ``init_words`` maps a concept label to a ``[d_text]``
    starting embedding; concepts without one start from ``N(0, init_std)``."""
    init_words = init_words or {}
    if disassembly:
        labels = CONCEPT_ORDER
    else:
        labels = ("merged",)
        masks = {"merged": np.ones_like(np.asarray(masks["subject"]), dtype=bool)}
    out = []
    for label in labels:
        token = CONCEPT_LABELS[label]
        draw = rng.normal(gen, (d_text,), init_std)  # always drawn, keeps the stream aligned
        start = init_words.get(label)
        emb = torch.nn.Parameter(start.detach().clone().float() if start is not None else draw)
        out.append(ConceptClue(label, token, vocab.concept_ids[token], emb, masks[label]))
    return out


def label_embeddings(labels: dict | None, vocab: Vocabulary, base: Denoiser) -> dict:
    """Frozen word embeddings of the concept labels that are in the vocabulary."""
    out = {}
    for key, word in (labels or {}).items():
        if word is None:
            continue
        tid = vocab.ids.get(vocab.normalize(str(word)))
        if tid is not None:
            out[key] = base.text.weight[tid]
    return out


def sample_concept_subset(concepts: list, gen: np.random.Generator) -> list:
    """Uniform draw over the ``2**N - 1`` non-empty subsets, order preserved."""
    n = len(concepts)
    bits = int(gen.integers(1, 2 ** n))
    return [c for i, c in enumerate(concepts) if bits >> i & 1]


def source_prompt_text(subset: list, interaction: str | None = None) -> str:
    """``a photo of [X]`` / ``[X] and [Y]`` / ``[X] and [Y] at [BG]``, background last.

    With ``interaction`` and both entities selected, the verb joins them instead of "and".
    """
    by_label = {c.label: c.token for c in subset}
    entities = [by_label[l] for l in ("subject", "object", "merged") if l in by_label]
    bg = by_label.get("background")
    if interaction and "subject" in by_label and "object" in by_label:
        text = f"a photo of {by_label['subject']} {{i}} {by_label['object']}"
        return text + (f" at {bg}" if bg else "")
    names = entities + ([bg] if bg else [])
    if len(names) == 1:
        return f"a photo of {names[0]}"
    if len(names) == 2:
        return f"a photo of {names[0]} and {names[1]}"
    return f"a photo of {names[0]} and {names[1]} at {names[2]}"


def downsample_mask(mask, res: int) -> np.ndarray:
    """Area-average to ``res x res`` and threshold at 0.5.

    A mask that would vanish keeps its best-covered cell(s) so every concept has a target.
    """
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    if h % res or w % res:
        raise ValueError(f"cannot downsample {h}x{w} to {res}")
    cover = m.reshape(res, h // res, res, w // res).mean(axis=(1, 3))
    out = cover >= 0.5
    if not out.any() and cover.max() > 0:
        out = cover == cover.max()
    return out


def union_mask(subset: list) -> np.ndarray:
    return np.logical_or.reduce([np.asarray(c.mask, bool) for c in subset])


# -- losses ---------------------------------------------------------------------

def masked_reconstruction_loss(eps, eps_hat, mask) -> torch.Tensor:
    """Mean squared error over the masked elements only (``mask`` is ``[H, W]``)."""
    m = torch.as_tensor(np.asarray(mask), dtype=eps.dtype) if not torch.is_tensor(mask) else mask.to(eps.dtype)
    if m.sum() == 0:
        raise DegenerateMaskError("concept mask union is empty")
    m = m.expand_as(eps)
    diff = (eps - eps_hat) * m
    return diff.pow(2).sum() / m.sum()


def attention_alignment_loss(maps, masks) -> torch.Tensor:
    """Mean over concepts of the per-pixel squared error between map and mask."""
    maps = torch.stack(list(maps)) if not torch.is_tensor(maps) else maps
    masks = torch.as_tensor(np.asarray(masks) if not torch.is_tensor(masks) else masks, dtype=maps.dtype)
    if maps.shape != masks.shape:
        raise ValueError(f"attention map {tuple(maps.shape)} vs mask {tuple(masks.shape)} resolution mismatch")
    return (maps - masks).pow(2).flatten(1).mean(dim=1).mean()


def total_loss(l_rec, l_attn, lambda_attn: float = 0.01):
    if lambda_attn < 0:
        raise ValueError("lambda_attn must be non-negative")
    return l_rec + lambda_attn * l_attn


# -- artifact -----------------------------------------------------------------------

@dataclass
class InversionArtifact:
    """Everything learned from one source image; contains no base weights."""

    concepts: dict  # label -> embedding tensor [d_text]
    tokens: dict  # label -> concept token string
    masks: dict  # label -> bool array [H, W]
    adapters: dict  # "layer_path.proj" -> {"lora_A": A, "lora_B": B} or {"delta": D}
    config: TrainConfig
    base_checksum: str
    denoiser_config: dict
    source_prompt: str
    loss_summary: dict = field(default_factory=dict)
    source_interaction: str | None = None
    sampler: dict = field(default_factory=dict)  # sampler settings the run was configured with

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def disassembled(self) -> bool:
        return "subject" in self.concepts

    def config_hash(self) -> str:
        return self.run_config().hash()

    def run_config(self):
        from .backbone import DenoiserConfig
        from .runconfig import RunConfig, SamplerConfig
        return RunConfig(self.config, SamplerConfig(**self.sampler), DenoiserConfig(**self.denoiser_config))

    def tensors(self) -> dict:
        out = {f"concept.{k}": v for k, v in self.concepts.items()}
        out.update({f"mask.{k}": torch.from_numpy(np.asarray(v, dtype=np.float32))
                    for k, v in self.masks.items()})
        for name, factors in self.adapters.items():
            for fname, t in factors.items():
                out[f"{name}.{fname}"] = t
        return out

    def meta(self) -> dict:
        return {"kind": "inversion", "config": self.config.to_dict(),
                "config_hash": self.config_hash(), "seed": self.seed,
                "base_checksum": self.base_checksum, "denoiser": self.denoiser_config,
                "tokens": self.tokens, "source_prompt": self.source_prompt,
                "source_interaction": self.source_interaction,
                "loss_summary": self.loss_summary, "sampler": self.sampler}

    def dumps(self) -> bytes:
        return archive.dumps(self.tensors(), self.meta())

    def save(self, path):
        return archive.save(path, self.tensors(), self.meta())

    @classmethod
    def from_archive(cls, tensors: dict, meta: dict) -> "InversionArtifact":
        if meta.get("kind") != "inversion":
            raise ValueError("archive is not an inversion artifact")
        concepts, masks, adapters = {}, {}, {}
        for name, t in tensors.items():
            if name.startswith("concept."):
                concepts[name.split(".", 1)[1]] = t
            elif name.startswith("mask."):
                masks[name.split(".", 1)[1]] = t.numpy() >= 0.5
            else:
                path, fname = name.rsplit(".", 1)
                adapters.setdefault(path, {})[fname] = t
        return cls(concepts, meta["tokens"], masks, adapters, TrainConfig.from_dict(meta["config"]),
                   meta["base_checksum"], meta["denoiser"], meta["source_prompt"],
                   meta.get("loss_summary", {}), meta.get("source_interaction"), meta.get("sampler", {}))

    @classmethod
    def load(cls, path) -> "InversionArtifact":
        return cls.from_archive(*archive.load(path))

    @classmethod
    def loads(cls, data: bytes) -> "InversionArtifact":
        return cls.from_archive(*archive.loads(data))


def check_compatible(model: Denoiser, art: InversionArtifact, force: bool = False):
    if model.cfg.to_dict() != art.denoiser_config:
        raise IncompatibleArtifactError("artifact was trained on a differently configured denoiser")
    if not force and base_checksum(model) != art.base_checksum:
        raise IncompatibleArtifactError(
            "base checkpoint checksum differs from the one recorded in the artifact (use force to override)")


@contextlib.contextmanager
def applied(model: Denoiser, art: InversionArtifact, force: bool = False):
    """Attach the artifact's adapters to ``model``; yields the concept clues.

    Adapters are removed on exit, leaving the base model exactly as it was.
    """
    check_compatible(model, art, force)
    layers = dict(model.attention_layers())
    try:
        for name, factors in art.adapters.items():
            path, proj = name.rsplit(".", 1)
            target = layers[path].projection(proj)
            if "delta" in factors:
                adapter = DenseDelta(*target.shape)
                adapter.D.data.copy_(factors["delta"])
            else:
                A, B = factors["lora_A"], factors["lora_B"]
                adapter = LoRAAdapter(target.shape[0], target.shape[1], A.shape[1])
                adapter.A.data.copy_(A)
                adapter.B.data.copy_(B)
            adapter.requires_grad_(False)
            target.attach(adapter)
        vocab = Vocabulary(model.cfg)
        clues = [ConceptClue(label, art.tokens[label], vocab.concept_ids[art.tokens[label]],
                             emb.clone(), art.masks[label])
                 for label, emb in art.concepts.items()]
        yield clues
    finally:
        detach_adapters(model.attention_layers())


# -- training loop --------------------------------------------------------------------

def _adapter_params(model: Denoiser) -> list[torch.Tensor]:
    params = []
    for _, layer in model.attention_layers():
        for name in ("q", "k", "v"):
            adapter = layer.projection(name).adapter
            if adapter is not None:
                params.extend(adapter.factors().values())
    return params


def _collect_adapters(model: Denoiser) -> dict:
    out = {}
    for path, layer in model.attention_layers():
        for name in ("q", "k", "v"):
            adapter = layer.projection(name).adapter
            if adapter is not None:
                out[f"{path}.{name}"] = {k: v.detach().clone() for k, v in adapter.factors().items()}
    return out


def training_step(model: Denoiser, vocab: Vocabulary, z0: torch.Tensor, concepts: list,
                  gen: np.random.Generator, cfg: TrainConfig, interaction: str | None = None):
    """One forward pass of the inversion objective. Returns ``(L_total, L_rec, L_attn)``."""
    res = model.cfg.map_res
    t = int(gen.integers(0, DEFAULT_SCHEDULE.T))
    subset = sample_concept_subset(concepts, gen)
    seq = vocab.tokenize(source_prompt_text(subset, interaction if cfg.include_source_interaction else None),
                         interaction=interaction)
    cond = encode_prompt(seq, model.text, concepts)
    eps = rng.normal(gen, z0.shape)
    z_t = add_noise(z0, eps, t)
    with model.capture_maps():
        eps_hat = model(z_t[None], torch.tensor([t]), cond[None])[0]
        maps = [cross_attention_map(model.cross_layers(res), seq.concept_positions[c.token], res)[0]
                for c in subset]
    l_rec = masked_reconstruction_loss(eps, eps_hat, union_mask(subset))
    targets = np.stack([downsample_mask(c.mask, res) for c in subset])
    l_attn = attention_alignment_loss(maps, targets)
    return total_loss(l_rec, l_attn, cfg.lambda_attn), l_rec, l_attn


def invert(image, masks: dict, labels: dict | None, base: Denoiser, cfg: TrainConfig = TrainConfig(),
           source_interaction: str | None = None,
           callback: Callable[[int, int, float], None] | None = None) -> InversionArtifact:
    """Learn concept clues and adapters for one source image.

    ``image`` is ``[3, H, W]`` in [-1, 1]; ``masks`` maps subject/object/background to
    boolean ``[H, W]`` arrays. ``base`` is only borrowed: its weights are never
    updated and any adapters are removed before returning. ``callback(stage, step,
    loss)`` is called after every optimiser step.
    """
    checksum = base_checksum(base)
    vocab = Vocabulary(base.cfg)
    base.requires_grad_(False)
    z0 = base.cfg.encode_image(image)
    if tuple(z0.shape) != (base.cfg.latent_channels, base.cfg.img_res, base.cfg.img_res):
        raise ValueError(f"image shape {tuple(z0.shape)} does not match the denoiser")
    for key in CONCEPT_ORDER:
        if not np.asarray(masks[key]).any():
            raise DegenerateMaskError(f"{key} mask is empty")
    init_std = cfg.concept_init_std or float(base.text.weight.std())
    init_words = label_embeddings(labels, vocab, base) if cfg.init_from_labels else None
    concepts = make_concepts(masks, base.cfg.d_text, vocab, rng.stream(cfg.seed, "concepts"),
                             init_std, cfg.disassembly, init_words)
    embeddings = [c.embedding for c in concepts]
    gen = rng.stream(cfg.seed, "inversion")
    history = {1: [], 2: []}
    try:
        inject_adapters(base.attention_layers(), cfg.policy, cfg.adapter_mode,
                        gen=rng.stream(cfg.seed, "adapters"), ranks=cfg.ranks)
        stages = [(1, cfg.stage1_steps, cfg.stage1_lr, embeddings),
                  (2, cfg.stage2_steps, cfg.stage2_lr, embeddings + _adapter_params(base))]
        for stage, steps, lr, params in stages:
            if steps <= 0:
                continue
            opt = torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)
            for step in range(steps):
                loss, _, _ = training_step(base, vocab, z0, concepts, gen, cfg, source_interaction)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                history[stage].append(loss.item())
                if callback:
                    callback(stage, step, history[stage][-1])
        adapters = _collect_adapters(base)
    finally:
        detach_adapters(base.attention_layers())
    if base_checksum(base) != checksum:
        raise RuntimeError("base weights changed during inversion")

    def summary(xs):
        if not xs:
            return {}
        k = max(1, min(50, len(xs) // 4))
        return {"first": float(np.mean(xs[:k])), "last": float(np.mean(xs[-k:])), "steps": len(xs)}

    return InversionArtifact(
        concepts={c.label: c.embedding.detach().clone() for c in concepts},
        tokens={c.label: c.token for c in concepts},
        masks={c.label: c.mask for c in concepts},
        adapters=adapters, config=cfg, base_checksum=checksum,
        denoiser_config=base.cfg.to_dict(),
        source_prompt=source_prompt_text(concepts),
        loss_summary={"stage1": summary(history[1]), "stage2": summary(history[2])},
        source_interaction=source_interaction,
    )


def reconstruction_loss(model: Denoiser, art: InversionArtifact, image, seed: int = 0,
                        n: int = 32, force: bool = False) -> float:
    """Average full-prompt masked reconstruction loss over ``n`` seeded (t, noise) draws."""
    vocab = Vocabulary(model.cfg)
    z0 = model.cfg.encode_image(image)
    gen = rng.stream(seed, "recon-eval")
    ts = gen.integers(0, DEFAULT_SCHEDULE.T, n)
    eps = rng.normal(gen, (n, *z0.shape))
    with torch.no_grad(), applied(model, art, force) as clues:
        seq = vocab.tokenize(source_prompt_text(clues))
        cond = encode_prompt(seq, model.text, clues)
        z_t = add_noise(z0[None].expand(n, -1, -1, -1), eps, torch.from_numpy(ts))
        eps_hat = model(z_t, torch.from_numpy(ts), cond[None].expand(n, -1, -1))
        return float(masked_reconstruction_loss(eps, eps_hat, union_mask(clues)))
