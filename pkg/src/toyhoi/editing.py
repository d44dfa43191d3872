"""Edit the interaction of an inverted scene by sampling from pure noise.

The source image is never used here: identity comes only from the learned
concept tokens and attention adapters, the interaction only from the verb in the
target prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Denoiser, Vocabulary, encode_prompt
from .diffusion import sample
from .iebench.metrics import HOITriplet
from .inversion import InversionArtifact, applied
from .runconfig import RunConfig, SamplerConfig


def target_prompt_text(art: InversionArtifact) -> str:
    """Prompt template with an ``{i}`` slot for the interaction."""
    t = art.tokens
    if art.disassembled:
        return f"a photo of {t['subject']} {{i}} {t['object']} at {t['background']}"
    return f"a photo of {t['merged']} {{i}}"


def build_target_prompt(art: InversionArtifact, interaction: str, vocab: Vocabulary | None = None):
    vocab = vocab or Vocabulary()
    return vocab.tokenize(target_prompt_text(art), interaction=interaction)


@dataclass
class EditRequest:
    artifact: InversionArtifact
    interaction: str
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    labels: dict | None = None  # scene labels, for the target triplet

    @property
    def prompt(self) -> str:
        return Vocabulary().decode(build_target_prompt(self.artifact, self.interaction))

    @property
    def triplet(self) -> HOITriplet | None:
        if not self.labels:
            return None
        return HOITriplet(self.labels["subject"], self.interaction, self.labels["object"])

    def config_hash(self) -> str:
        run = self.artifact.run_config()
        return RunConfig(run.train, self.sampler, run.denoiser).hash()


def edit_many(base: Denoiser, art: InversionArtifact, interaction: str, seeds,
              sampler: SamplerConfig | None = None, force: bool = False) -> list[np.ndarray]:
    """One edited image ``[3, H, W]`` per seed. Each seed is sampled on its own."""
    sampler = sampler or SamplerConfig()
    vocab = Vocabulary(base.cfg)
    seq = build_target_prompt(art, interaction, vocab)
    shape = (base.cfg.latent_channels, base.cfg.img_res, base.cfg.img_res)
    out = []
    with torch.no_grad(), applied(base, art, force) as clues:
        cond = encode_prompt(seq, base.text, clues)
        denoise = base
        if sampler.guidance_scale != 1.0:
            uncond = encode_prompt(vocab.tokenize(""), base.text)
            g = sampler.guidance_scale

            def denoise(z, t, c):
                e_c = base(z, t, c)
                e_u = base(z, t, uncond)
                return e_u + g * (e_c - e_u)
        for seed in seeds:
            z0 = sample(denoise, cond, T=sampler.steps, seed=int(seed), shape=shape,
                        method=sampler.method, clip=sampler.clip, clip_range=base.cfg.latent_scale)
            out.append(base.cfg.decode_latent(z0))
    return out


def edit(base: Denoiser, art: InversionArtifact, interaction: str, seed: int = 0,
         sampler: SamplerConfig | None = None, force: bool = False) -> np.ndarray:
    return edit_many(base, art, interaction, [seed], sampler, force)[0]


def run_request(base: Denoiser, req: EditRequest, force: bool = False) -> np.ndarray:
    return edit(base, req.artifact, req.interaction, req.seed, req.sampler, force)
