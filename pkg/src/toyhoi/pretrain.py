"""Pretraining of the toy backbone on procedurally generated HOI scenes.

This produces the frozen "pretrained" checkpoint that inversion and editing start
from. Captions mix full interaction sentences with concept-only sentences so the
model knows both the verb -> layout prior and the prompts used during inversion.

    python -m toyhoi.pretrain --steps 16000 --out src/toyhoi/data/base.zip
"""

from __future__ import annotations

import argparse
import copy
import logging
import math
import time

import numpy as np
import torch
import torch.nn.functional as F

from . import rng, scenes
from .backbone import Denoiser, DenoiserConfig, Vocabulary, save_base
from .diffusion import DEFAULT_SCHEDULE, add_noise

log = logging.getLogger(__name__)

PARTS = ("subject", "object", "background")


def random_caption(spec: scenes.SceneSpec, gen: np.random.Generator) -> str:
    u = gen.random()
    if u < 0.45:
        return scenes.caption(spec)
    if u < 0.55:
        return scenes.caption(spec, parts=("subject", "object"))
    # concept-only captions over a random non-empty subset, in canonical order
    while True:
        keep = [p for p in PARTS if gen.random() < 0.5]
        if keep:
            return scenes.caption(spec, parts=tuple(keep), with_verb=False)


def make_batch(vocab: Vocabulary, model: Denoiser, gen: np.random.Generator, batch: int,
               uncond_p: float = 0.1):
    """Images and captions; ``uncond_p`` of the captions are dropped to the empty prompt."""
    imgs, toks = [], []
    for _ in range(batch):
        spec = scenes.random_spec(gen, jitter=0.06)
        img, _ = scenes.render(spec)
        imgs.append(img)
        text = random_caption(spec, gen)
        toks.append(vocab.tokenize("" if gen.random() < uncond_p else text).tokens)
    z0 = model.cfg.encode_image(np.stack(imgs))
    cond = model.text(torch.tensor(toks))
    return z0, cond


def pretrain(steps: int = 16000, batch: int = 32, seed: int = 0, lr: float = 1e-3,
             ema_decay: float = 0.999, cfg: DenoiserConfig = DenoiserConfig(),
             log_every: int = 200) -> Denoiser:
    torch.manual_seed(seed)
    model = Denoiser(cfg)
    ema = copy.deepcopy(model).requires_grad_(False)
    vocab = Vocabulary(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 200) * 0.5 * (1 + math.cos(math.pi * min(s, steps) / steps)))
    gen = rng.stream(seed, "pretrain")
    t0, running = time.time(), 0.0
    for step in range(steps):
        z0, cond = make_batch(vocab, model, gen, batch)
        t = torch.from_numpy(gen.integers(0, DEFAULT_SCHEDULE.T, batch))
        eps = rng.normal(gen, z0.shape)
        loss = F.mse_loss(model(add_noise(z0, eps, t), t, cond), eps)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        with torch.no_grad():
            for pe, p in zip(ema.parameters(), model.parameters()):
                pe.lerp_(p, 1.0 - ema_decay)
        running += loss.item()
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f (%.0fs)", step + 1, running / log_every, time.time() - t0)
            running = 0.0
    ema.eval()
    return ema


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=16000)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    model = pretrain(args.steps, args.batch, args.seed)
    save_base(model, args.out, {"pretrain": {"steps": args.steps, "batch": args.batch, "seed": args.seed}})
    log.info("wrote %s", args.out)


if __name__ == "__main__":
    main()
