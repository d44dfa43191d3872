"""Procedural toy HOI world.

Scenes are 32x32 RGB canvases: a sky band over a ground band, one "person"
rectangle (the subject) and one object rectangle. The interaction verb fixes the
relative layout of subject and object; nouns fix sizes and colours. The same
generator produces the pretraining corpus for the toy backbone, the benchmark
source scenes, and the geometric prototypes used by the mock HOI detector.

Images are float32 arrays ``[3, H, W]`` in ``[-1, 1]``; masks are boolean ``[H, W]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMG_RES = 32
GROUND_Y = 24  # first ground row; things standing on the ground end at row 23
SKY = (0.62, 0.80, 0.95)

SUBJECTS = {
    "man": (0.85, 0.10, 0.10),
    "woman": (0.80, 0.15, 0.75),
    "boy": (0.98, 0.55, 0.05),
    "girl": (0.45, 0.15, 0.85),
}
# name -> (width, height, rgb)
OBJECTS = {
    "horse": (10, 6, (0.40, 0.22, 0.05)),
    "dog": (7, 4, (0.08, 0.08, 0.08)),
    "ball": (4, 4, (1.00, 0.95, 0.15)),
    "board": (10, 2, (0.05, 0.85, 0.85)),
    "chair": (6, 6, (0.10, 0.25, 1.00)),
    "cake": (6, 4, (1.00, 0.60, 0.80)),
}
BACKGROUNDS = {
    "grass": (0.30, 0.62, 0.25),
    "beach": (0.92, 0.82, 0.55),
    "street": (0.45, 0.45, 0.48),
    "room": (0.62, 0.48, 0.38),
}
VERBS = ("ride", "carry", "hold", "kick", "walk", "lie_on")

# Candidate target interactions per object, used for benchmark manifests.
OBJECT_INTERACTIONS = {
    "horse": ("ride", "walk", "lie_on", "hold"),
    "dog": ("walk", "carry", "hold", "ride"),
    "ball": ("kick", "hold", "carry", "walk"),
    "board": ("ride", "carry", "hold", "lie_on"),
    "chair": ("carry", "hold", "kick", "lie_on"),
    "cake": ("hold", "carry", "kick", "walk"),
}

STAND_W, STAND_H = 4, 11
SIDE_GAP = {"hold": 0, "kick": 0, "walk": 4}


@dataclass
class SceneSpec:
    subject: str
    object: str
    background: str
    verb: str
    x: int  # left edge of the subject/object group
    flip: bool = False  # object on the left of the subject for side verbs
    subject_rgb: tuple = ()
    object_rgb: tuple = ()
    background_rgb: tuple = ()

    def __post_init__(self):
        if not self.subject_rgb:
            self.subject_rgb = SUBJECTS[self.subject]
        if not self.object_rgb:
            self.object_rgb = OBJECTS[self.object][2]
        if not self.background_rgb:
            self.background_rgb = BACKGROUNDS[self.background]
        self.subject_rgb = tuple(float(c) for c in self.subject_rgb)
        self.object_rgb = tuple(float(c) for c in self.object_rgb)
        self.background_rgb = tuple(float(c) for c in self.background_rgb)

    def with_verb(self, verb: str, x: int | None = None) -> "SceneSpec":
        d = asdict(self)
        d["verb"] = verb
        d["x"] = clamp_x(self.object, verb, self.x if x is None else x)
        return SceneSpec(**d)

    @property
    def triplet(self) -> tuple[str, str, str]:
        return (self.subject, self.verb, self.object)


def _rect(x0, y0, w, h):
    return (x0, y0, x0 + w - 1, y0 + h - 1)


def group_width(obj: str, verb: str) -> int:
    ow = OBJECTS[obj][0]
    if verb in ("ride", "carry"):
        return max(ow, STAND_W)
    if verb == "lie_on":
        return max(ow, STAND_H)
    return STAND_W + SIDE_GAP[verb] + ow


def clamp_x(obj: str, verb: str, x: int) -> int:
    return int(min(max(x, 1), IMG_RES - 1 - group_width(obj, verb)))


def layout(obj: str, verb: str, x: int, flip: bool = False):
    """Subject and object boxes ``(x0, y0, x1, y1)``, inclusive pixel coords."""
    ow, oh, _ = OBJECTS[obj]
    floor = GROUND_Y  # exclusive bottom
    gw = group_width(obj, verb)
    if verb == "ride":
        o = _rect(x + (gw - ow) // 2, floor - oh, ow, oh)
        s = _rect(x + (gw - STAND_W) // 2, floor - oh - STAND_H, STAND_W, STAND_H)
    elif verb == "lie_on":
        o = _rect(x + (gw - ow) // 2, floor - oh, ow, oh)
        s = _rect(x + (gw - STAND_H) // 2, floor - oh - STAND_W, STAND_H, STAND_W)
    elif verb == "carry":
        s = _rect(x + (gw - STAND_W) // 2, floor - STAND_H, STAND_W, STAND_H)
        o = _rect(x + (gw - ow) // 2, floor - STAND_H - oh, ow, oh)
    else:
        gap = SIDE_GAP[verb]
        s_x = x + ow + gap if flip else x
        o_x = x if flip else x + STAND_W + gap
        s = _rect(s_x, floor - STAND_H, STAND_W, STAND_H)
        if verb == "hold":
            # object centred on the upper body
            cy = floor - STAND_H + 3
            o = _rect(o_x, cy - oh // 2, ow, oh)
        else:
            o = _rect(o_x, floor - oh, ow, oh)
    return s, o


def _to_signed(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float32) * 2.0 - 1.0


def render(spec: SceneSpec):
    """Rasterise a scene. Returns ``(image, masks)`` with masks keyed subject/object/background."""
    img = np.empty((3, IMG_RES, IMG_RES), dtype=np.float32)
    img[:, :GROUND_Y, :] = _to_signed(SKY)[:, None, None]
    img[:, GROUND_Y:, :] = _to_signed(spec.background_rgb)[:, None, None]
    s, o = layout(spec.object, spec.verb, spec.x, spec.flip)
    masks = {k: np.zeros((IMG_RES, IMG_RES), dtype=bool) for k in ("subject", "object")}
    for key, box, rgb in (("object", o, spec.object_rgb), ("subject", s, spec.subject_rgb)):
        x0, y0, x1, y1 = box
        img[:, y0 : y1 + 1, x0 : x1 + 1] = _to_signed(rgb)[:, None, None]
        masks[key][y0 : y1 + 1, x0 : x1 + 1] = True
    masks["object"] &= ~masks["subject"]
    masks["background"] = ~(masks["subject"] | masks["object"])
    return img, masks


def random_spec(gen: np.random.Generator, *, subject=None, obj=None, background=None,
                verb=None, jitter: float = 0.0) -> SceneSpec:
    subject = subject or gen.choice(list(SUBJECTS))
    obj = obj or gen.choice(list(OBJECTS))
    background = background or gen.choice(list(BACKGROUNDS))
    verb = verb or gen.choice(VERBS)
    gw = group_width(obj, verb)
    x = int(gen.integers(1, IMG_RES - gw))
    flip = bool(gen.integers(0, 2))

    def jit(rgb):
        if jitter <= 0:
            return tuple(rgb)
        return tuple(np.clip(np.asarray(rgb) + gen.uniform(-jitter, jitter, 3), 0, 1).round(4))

    return SceneSpec(str(subject), str(obj), str(background), str(verb), x, flip,
                     jit(SUBJECTS[subject]), jit(OBJECTS[obj][2]), jit(BACKGROUNDS[background]))


# -- captions -----------------------------------------------------------------

def caption(spec: SceneSpec, parts=("subject", "object", "background"), with_verb=True) -> str:
    """Caption naming ``parts`` of the scene.

    Concept-only captions follow the inversion templates (``a photo of X``,
    ``a photo of X and Y``, ``a photo of X and Y at Z``, background last);
    with both entities named and ``with_verb`` the full interaction caption is used.
    """
    words = {"subject": spec.subject, "object": spec.object, "background": spec.background}
    if with_verb and "subject" in parts and "object" in parts:
        text = f"a photo of {spec.subject} {spec.verb} {spec.object}"
        if "background" in parts:
            text += f" at {spec.background}"
        return text
    return concept_caption([words[p] for p in parts], background_last="background" in parts)


def concept_caption(names: list[str], background_last: bool = False) -> str:
    if len(names) == 1:
        return f"a photo of {names[0]}"
    if len(names) == 2:
        return f"a photo of {names[0]} and {names[1]}"
    if len(names) == 3:
        return f"a photo of {names[0]} and {names[1]} at {names[2]}"
    raise ValueError(f"expected 1-3 concepts, got {len(names)}")


# -- scene bundles ------------------------------------------------------------

MASK_FILES = {"subject": "mask_subject.png", "object": "mask_object.png",
              "background": "mask_background.png"}


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` in [-1, 1] -> ``[H, W, 3]`` uint8."""
    x = np.clip((np.asarray(img, dtype=np.float32) + 1.0) * 127.5 + 0.5, 0, 255)
    return x.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_png(path, img: np.ndarray):
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def save_mask(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask, bool) * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128


@dataclass
class SceneBundle:
    image: np.ndarray
    masks: dict
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> dict:
        return self.meta["labels"]


def scene_meta(spec: SceneSpec) -> dict:
    return {
        "labels": {"subject": spec.subject, "object": spec.object, "background": spec.background},
        "source_interaction": spec.verb,
        "colors": {"subject": list(spec.subject_rgb), "object": list(spec.object_rgb),
                   "background": list(spec.background_rgb)},
        "spec": asdict(spec),
    }


def write_bundle(directory, spec: SceneSpec) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img, masks = render(spec)
    save_png(directory / "image.png", img)
    for key, name in MASK_FILES.items():
        save_mask(directory / name, masks[key])
    (directory / "meta.json").write_text(json.dumps(scene_meta(spec), indent=2, sort_keys=True))
    return directory


def read_bundle(directory) -> SceneBundle:
    directory = Path(directory)
    missing = [n for n in ["image.png", *MASK_FILES.values(), "meta.json"]
               if not (directory / n).is_file()]
    if missing:
        raise FileNotFoundError(f"scene bundle {directory} is missing {', '.join(missing)}")
    masks = {k: load_mask(directory / n) for k, n in MASK_FILES.items()}
    meta = json.loads((directory / "meta.json").read_text())
    return SceneBundle(load_png(directory / "image.png"), masks, meta)
