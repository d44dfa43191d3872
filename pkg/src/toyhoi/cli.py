"""Command-line entry points: invert, edit, eval, ablate, plus fixture helpers.

Every command is a separate process; they share state only through files. Each
emitted file records the hash of the run configuration that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import scenes
from .backbone import Vocabulary, VocabularyError, base_checksum, load_base
from .editing import EditRequest, edit_many
from .iebench import mock
from .iebench.harness import EvalReport, Manifest, run_benchmark, write_csv
from .iebench.manifest import make_toy_benchmark
from .iebench.metrics import InvalidInstance
from .inversion import ABLATIONS, IncompatibleArtifactError, InversionArtifact, invert
from .runconfig import RunConfig, SamplerConfig

log = logging.getLogger("toyhoi")

CACHE_ENV = "TOYHOI_CACHE"
EXIT_PARTIAL = 3  # eval finished but some instances were invalid


def cache_dir() -> Path:
    """Fixture cache directory (``$TOYHOI_CACHE``, default ``~/.cache/toyhoi``)."""
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "toyhoi")


def parse_seeds(text: str) -> list[int]:
    """``"0..9"`` (inclusive), ``"3"`` or ``"0,2,5"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            if int(hi) < int(lo):
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("no seeds given")
    return out


# -- configuration -------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="RunConfig JSON file")
    g.add_argument("--seed", type=int)
    g.add_argument("--stage1-steps", type=int)
    g.add_argument("--stage2-steps", type=int)
    g.add_argument("--stage1-lr", type=float)
    g.add_argument("--stage2-lr", type=float)
    g.add_argument("--lambda-attn", type=float)
    g.add_argument("--rank", type=int, help="LoRA rank for every adapted projection")
    g.add_argument("--no-disassembly", action="store_true", help="single merged concept token")
    g.add_argument("--no-sft", action="store_true", help="also adapt Query projections")
    g.add_argument("--no-lora", action="store_true", help="dense weight deltas instead of LoRA")
    g.add_argument("--source-interaction-in-prompt", action="store_true")
    g.add_argument("--no-label-init", action="store_true", help="random concept tokens instead of label words")


def _add_sampler_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("sampler")
    g.add_argument("--sampler", choices=("ddim", "ddpm"))
    g.add_argument("--steps", type=int, help="reverse-process steps")
    g.add_argument("--no-clip", action="store_true", help="disable x0 clipping")
    g.add_argument("--guidance", type=float, help="classifier-free guidance scale (1 = off)")


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    t = cfg.train
    for flag, attr in (("seed", "seed"), ("stage1_steps", "stage1_steps"),
                       ("stage2_steps", "stage2_steps"), ("stage1_lr", "stage1_lr"),
                       ("stage2_lr", "stage2_lr"), ("lambda_attn", "lambda_attn")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(t, attr, value)
    if getattr(args, "rank", None) is not None:
        t.rank_q = t.rank_k = t.rank_v = args.rank
    if getattr(args, "no_disassembly", False):
        t.disassembly = False
    if getattr(args, "no_sft", False):
        t.sft = False
    if getattr(args, "no_lora", False):
        t.lora = False
    if getattr(args, "source_interaction_in_prompt", False):
        t.include_source_interaction = True
    if getattr(args, "no_label_init", False):
        t.init_from_labels = False
    _apply_sampler_flags(cfg.sampler, args)
    t.__post_init__()
    cfg.sampler.__post_init__()
    return cfg


def _apply_sampler_flags(s: SamplerConfig, args):
    if getattr(args, "sampler", None):
        s.method = args.sampler
    if getattr(args, "steps", None) is not None:
        s.steps = args.steps
    if getattr(args, "no_clip", False):
        s.clip = False
    if getattr(args, "guidance", None) is not None:
        s.guidance_scale = args.guidance


def _load_base(args):
    return load_base(args.base)


# -- invert -----------------------------------------------------------------------------

def invert_scene(scene_dir, cfg: RunConfig, base) -> InversionArtifact:
    bundle = scenes.read_bundle(scene_dir)
    if base.cfg != cfg.denoiser:
        raise IncompatibleArtifactError("run config denoiser does not match the base checkpoint")
    art = invert(bundle.image, bundle.masks, bundle.labels, base, cfg.train,
                 source_interaction=bundle.meta.get("source_interaction"))
    art.sampler = vars(cfg.sampler).copy()
    return art


def cmd_invert(args) -> int:
    cfg = build_config(args)
    base = _load_base(args)
    art = invert_scene(args.scene, cfg, base)
    out = art.save(args.out)
    s1, s2 = art.loss_summary["stage1"], art.loss_summary["stage2"]
    for name, s in (("stage 1", s1), ("stage 2", s2)):
        if s:
            print(f"{name}: {s['steps']} steps, loss {s['first']:.4f} -> {s['last']:.4f}")
    n_pairs = sum(1 for f in art.adapters.values() if "lora_A" in f)
    print(f"wrote {out} ({len(art.concepts)} concept tensors, {len(art.adapters)} adapters, "
          f"{n_pairs} LoRA pairs, config {art.config_hash()})")
    return 0


# -- edit -----------------------------------------------------------------------------

def save_edit(out_dir, req: EditRequest, image, checksum: str) -> Path:
    """Write ``<verb>_seedNNNN.png`` (config hash in a text chunk) plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{Vocabulary.normalize(req.interaction)}_seed{req.seed:04d}"
    chash = req.config_hash()
    info = PngInfo()
    info.add_text("toyhoi:config_hash", chash)
    Image.fromarray(scenes.to_uint8(image), mode="RGB").save(out_dir / f"{stem}.png", pnginfo=info)
    sidecar = {"prompt": req.prompt, "interaction": req.interaction, "seed": req.seed,
               "config_hash": chash, "artifact_config_hash": req.artifact.config_hash(),
               "base_checksum": checksum, "sampler": vars(req.sampler),
               "image": f"{stem}.png"}
    if req.triplet:
        sidecar["target_triplet"] = list(req.triplet.normalized())
    (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out_dir / f"{stem}.png"


def cmd_edit(args) -> int:
    art = InversionArtifact.load(args.artifact)
    sampler = SamplerConfig(**art.sampler)
    _apply_sampler_flags(sampler, args)
    sampler.__post_init__()
    Vocabulary().tokenize("{i}", interaction=args.interaction)  # fail fast on unknown verbs
    base = _load_base(args)
    images = edit_many(base, art, args.interaction, args.seeds, sampler, force=args.force)
    checksum = base_checksum(base)
    for seed, img in zip(args.seeds, images):
        req = EditRequest(art, args.interaction, seed, sampler)
        path = save_edit(args.out, req, img, checksum)
        print(path)
    return 0


# -- eval -------------------------------------------------------------------------------

def artifact_editor(manifest: Manifest, artifact_dir, base, sampler: SamplerConfig | None = None,
                    force: bool = False):
    """Editor callback for the harness; reads ``<artifact_dir>/<instance id>.zip``."""
    cache = {}

    def editor(inst, target, seed):
        if inst.id not in cache:
            path = Path(artifact_dir) / f"{inst.id}.zip"
            if not path.is_file():
                raise InvalidInstance(f"no artifact for {inst.id} at {path}")
            cache[inst.id] = InversionArtifact.load(path)
        art = cache[inst.id]
        s = sampler or SamplerConfig(**art.sampler)
        return edit_many(base, art, target, [seed], s, force)[0]

    return editor, cache


def _backends(name: str):
    if name == "mock":
        return mock.mock_backends()
    raise SystemExit("external perception backends are not bundled; pass objects implementing "
                     "toyhoi.iebench.metrics.Backends through the Python API")


def evaluate(manifest: Manifest, artifact_dir, base, backends, seeds, method: str = "",
             config_hash: str | None = None) -> EvalReport:
    editor, cache = artifact_editor(manifest, artifact_dir, base)
    report = run_benchmark(manifest, editor, backends, seeds=seeds, method=method,
                           log=lambda m: log.info(m))
    hashes = sorted({a.config_hash() for a in cache.values()})
    report.config_hash = config_hash or (hashes[0] if len(hashes) == 1 else ",".join(hashes))
    for c in report.cells:
        c["config_hash"] = cache[c["instance"]].config_hash()
    return report


def cmd_eval(args) -> int:
    manifest = Manifest.load(args.manifest)
    report = evaluate(manifest, args.artifact_dir, _load_base(args), _backends(args.backends),
                      args.seeds, method=args.method)
    report.save(args.report)
    if args.csv:
        write_csv(args.csv, {args.method or "method": report})
    a = report.aggregates()
    print(f"cells {a['n_cells']}  editability {a['hoi_editability']:.3f}  "
          f"IC {a['identity_consistency']:.3f}  overall {a['overall']:.4f}"
          + ("  (partial)" if report.partial else ""))
    if report.partial:
        for item in report.invalid:
            print(f"invalid: {item['instance']}: {item['reason']}", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


# -- ablate -----------------------------------------------------------------------------

def _reusable(path: Path, cfg: RunConfig, base) -> bool:
    if not path.is_file():
        return False
    art = InversionArtifact.load(path)
    return art.config_hash() == cfg.hash() and art.base_checksum == base_checksum(base)


def run_ablation(manifest: Manifest, base, backends, names, out, seeds, cfg: RunConfig | None = None,
                 echo=print) -> dict:
    """Invert every scene under each named configuration, then score it.

    Artifacts land in ``out/<config slug>/<instance>.zip`` and are reused when their
    config hash and base checksum still match.
    """
    out = Path(out)
    reports = {}
    for name in names:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        run = RunConfig.from_dict((cfg or RunConfig()).to_dict())
        run.train.disassembly, run.train.sft, run.train.lora = ABLATIONS[name]
        art_dir = out / ablation_slug(name)
        art_dir.mkdir(parents=True, exist_ok=True)
        for inst in manifest.instances:
            path = art_dir / f"{inst.id}.zip"
            if _reusable(path, run, base):
                continue
            try:
                invert_scene(inst.scene_dir, run, base).save(path)
            except FileNotFoundError as exc:
                log.warning("skipping %s: %s", inst.id, exc)
        report = evaluate(manifest, art_dir, base, backends, seeds, method=name, config_hash=run.hash())
        report.save(out / f"{ablation_slug(name)}.json")
        reports[name] = report
        echo(f"{name:16s} overall {report.overall:.4f}  editability {report.editability_mean:.3f}"
             f"  IC {report.ic_mean:.3f}")
    write_csv(out / "table.csv", reports)
    return reports


def ablation_slug(name: str) -> str:
    return name.replace("/", "").replace("&", "and").replace(".", "").replace(" ", "_").lower()


def cmd_ablate(args) -> int:
    manifest = Manifest.load(args.manifest)
    run_ablation(manifest, _load_base(args), _backends(args.backends), args.configs or list(ABLATIONS),
                 args.out, args.seeds, build_config(args))
    return 0


# -- fixtures ----------------------------------------------------------------------------

def cmd_make_bench(args) -> int:
    root = Path(args.out) if args.out else cache_dir() / "bench"
    m = make_toy_benchmark(root, args.scenes, args.targets, args.seed)
    print(f"wrote {len(m.instances)} scenes / {len(m.pairs)} pairs to {root / 'manifest.json'}")
    return 0


def cmd_pretrain(args) -> int:
    from .pretrain import main as pretrain_main
    argv = ["--steps", str(args.steps), "--seed", str(args.seed), "--out", str(args.out)]
    return pretrain_main(argv) or 0


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toyhoi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--base", type=Path, default=None,
                   help="base checkpoint archive (default: the packaged toy backbone)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("invert", help="invert one scene bundle into an artifact")
    s.add_argument("scene", type=Path, help="scene bundle directory")
    s.add_argument("--out", type=Path, required=True)
    _add_config_flags(s)
    _add_sampler_flags(s)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("edit", help="generate edited images from an artifact")
    s.add_argument("--artifact", type=Path, required=True)
    s.add_argument("--interaction", required=True)
    s.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..9"))
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--force", action="store_true", help="ignore a base checksum mismatch")
    _add_sampler_flags(s)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval", help="score artifacts on a benchmark manifest")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--artifact-dir", type=Path, required=True)
    s.add_argument("--backends", choices=("mock", "external"), default="mock")
    s.add_argument("--report", type=Path, required=True)
    s.add_argument("--csv", type=Path)
    s.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..9"))
    s.add_argument("--method", default="")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="invert and score every ablation configuration")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--backends", choices=("mock", "external"), default="mock")
    s.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..2"))
    s.add_argument("--configs", nargs="+", metavar="NAME", help=f"subset of: {', '.join(ABLATIONS)}")
    _add_config_flags(s)
    _add_sampler_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("make-bench", help="write the procedural toy benchmark")
    s.add_argument("--out", type=Path)
    s.add_argument("--scenes", type=int, default=8)
    s.add_argument("--targets", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_bench)

    s = sub.add_parser("pretrain", help="train a toy base checkpoint")
    s.add_argument("--steps", type=int, default=16000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_pretrain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (VocabularyError, FileNotFoundError, IncompatibleArtifactError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
