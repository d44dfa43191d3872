"""Benchmark manifests: the procedural toy benchmark and the full-size IEBench layout."""

from __future__ import annotations

from pathlib import Path

from .. import rng, scenes
from .harness import BenchmarkInstance, Manifest
from .metrics import HOITriplet

# Objects and their candidate target interactions in the published benchmark,
# restricted to its 25-action list.
IEBENCH_OBJECTS = {
    "broccoli": ("cut", "eat", "hold", "smell", "wash"),
    "dining_table": ("eat_at", "sit_at"),
    "skateboard": ("hold", "jump", "ride", "sit_on"),
    "chair": ("hold", "lie_on", "sit_on", "stand_on"),
    "book": ("carry", "hold"),
    "snowboard": ("hold", "jump", "ride"),
    "surfboard": ("hold", "jump", "ride", "sit_on"),
    "sports_ball": ("catch", "dribble", "hit", "hold", "kick", "throw"),
    "cake": ("cut", "eat", "hold", "make"),
    "horse": ("feed", "kiss", "ride", "walk", "wash"),
    "dog": ("feed", "groom", "hug", "walk", "wash"),
    "pizza": ("cut", "eat", "hold", "make", "pick_up"),
    "cat": ("feed", "hold", "hug", "kiss", "wash"),
}
IEBENCH_ACTIONS = (
    "feed", "make", "pick_up", "sit_on", "hit", "ride", "walk", "cut", "eat_at", "jump", "throw",
    "dribble", "smell", "kick", "hug", "eat", "hold", "catch", "sit_at", "wash", "stand_on",
    "kiss", "groom", "carry", "lie_on",
)
# (object, source interaction, number of targets); sums to 28 sources / 100 pairs.
_IEBENCH_SOURCES = [
    ("sports_ball", "kick", 5), ("sports_ball", "throw", 4), ("sports_ball", "catch", 4),
    ("sports_ball", "hold", 3),
    ("horse", "ride", 4), ("horse", "walk", 4), ("horse", "feed", 4),
    ("dog", "walk", 4), ("dog", "hug", 4), ("dog", "feed", 4),
    ("cat", "hold", 4), ("cat", "hug", 4), ("cat", "kiss", 4),
    ("pizza", "eat", 4), ("pizza", "cut", 4), ("pizza", "hold", 4),
    ("broccoli", "hold", 4), ("broccoli", "cut", 4),
    ("skateboard", "ride", 3), ("skateboard", "hold", 3),
    ("chair", "sit_on", 3), ("chair", "stand_on", 3),
    ("surfboard", "ride", 3), ("surfboard", "hold", 3),
    ("cake", "blow", 4), ("snowboard", "ride", 2), ("book", "read", 2), ("dining_table", "clean", 2),
]


def iebench_manifest() -> Manifest:
    """Manifest with the shape of the published benchmark (images not bundled).

    Scene paths point at ``hico/<id>``; attach real assets there to run it.
    """
    insts = []
    for n, (obj, src, k) in enumerate(_IEBENCH_SOURCES):
        cands = [a for a in IEBENCH_OBJECTS[obj] if a != src]
        insts.append(BenchmarkInstance(f"iebench_{n:02d}", f"hico/{n:02d}",
                                       HOITriplet("person", src, obj), cands[:k]))
    return Manifest(insts, name="iebench")


def make_toy_benchmark(root, n_scenes: int = 8, targets_per_scene: int = 3, seed: int = 0,
                       jitter: float = 0.05) -> Manifest:
    """Write ``n_scenes`` procedural scene bundles and a manifest under ``root``."""
    root = Path(root)
    gen = rng.stream(seed, "toy-benchmark")
    subjects, objects, bgs = list(scenes.SUBJECTS), list(scenes.OBJECTS), list(scenes.BACKGROUNDS)
    insts = []
    for n in range(n_scenes):
        obj = objects[n % len(objects)]
        cands = list(scenes.OBJECT_INTERACTIONS[obj])
        src = str(gen.choice(cands))
        others = [v for v in cands if v != src]
        gen.shuffle(others)
        spec = scenes.random_spec(gen, subject=subjects[n % len(subjects)], obj=obj,
                                  background=bgs[(n // 2) % len(bgs)], verb=src, jitter=jitter)
        scene = f"scenes/s{n:02d}"
        scenes.write_bundle(root / scene, spec)
        insts.append(BenchmarkInstance(f"s{n:02d}", scene, HOITriplet(*spec.triplet),
                                       others[:targets_per_scene], root))
    manifest = Manifest(insts, name="toy", root=root)
    manifest.save(root / "manifest.json")
    return manifest
