"""HOI Editability, Identity Consistency and the Overall score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np


def normalize_label(label: str) -> str:
    """Lower-case, underscore-joined form used for all label comparisons ("Sit on" -> "sit_on")."""
    return "_".join(str(label).strip().lower().replace("-", " ").replace("_", " ").split())


@dataclass(frozen=True)
class HOITriplet:
    subject: str
    interaction: str
    object: str

    def __post_init__(self):
        for name in ("subject", "interaction", "object"):
            if not normalize_label(getattr(self, name)):
                raise ValueError(f"HOI triplet needs a non-empty {name}")

    def normalized(self) -> tuple[str, str, str]:
        return (normalize_label(self.subject), normalize_label(self.interaction),
                normalize_label(self.object))


@dataclass(frozen=True)
class Detection:
    triplet: HOITriplet
    subject_box: tuple
    object_box: tuple
    confidence: float


class InvalidInstance(Exception):
    """The source image itself cannot be scored (an entity is not detected in it)."""


class Backends(Protocol):
    def hoi_detector(self, image, meta) -> list[Detection]: ...
    def object_detector(self, image, label, meta): ...
    def segmenter(self, image, box): ...
    def embedder(self, image, mask) -> np.ndarray: ...


@dataclass
class PerceptionBackends:
    """The four perception callables the harness needs.

    ``meta`` is the scene metadata of the instance being scored; real detectors may
    ignore it, the mock oracles use it to know the colour of each label.
    """

    hoi_detector: Callable
    object_detector: Callable
    segmenter: Callable
    embedder: Callable


def hoi_match(detections: Sequence[Detection], target: HOITriplet, threshold: float = 0.5) -> float:
    """1.0 iff some detection at or above ``threshold`` names the target triplet."""
    want = target.normalized()
    for det in detections:
        if det.confidence >= threshold and det.triplet.normalized() == want:
            return 1.0
    return 0.0


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def entity_similarity(source, edited, label, backends, meta=None) -> float:
    box_src = backends.object_detector(source, label, meta)
    if box_src is None:
        raise InvalidInstance(f"{label!r} not detected in the source image")
    box_edit = backends.object_detector(edited, label, meta)
    if box_edit is None:
        return 0.0
    emb_src = backends.embedder(source, backends.segmenter(source, box_src))
    emb_edit = backends.embedder(edited, backends.segmenter(edited, box_edit))
    return cosine(emb_src, emb_edit)


def identity_consistency(source, edited, subject_label: str, object_label: str, backends,
                         meta=None) -> float:
    """Mean cosine similarity of the subject and object embeddings, source vs edited.

    An entity missing from the edited image scores 0.0; one missing from the source
    raises :class:`InvalidInstance`.
    """
    sims = [entity_similarity(source, edited, label, backends, meta)
            for label in (subject_label, object_label)]
    return (sims[0] + sims[1]) / 2.0


def overall(editability: float, ic: float) -> float:
    return (editability + ic) / 2.0


def mean(values) -> float:
    values = list(values)
    if not values:
        return float("nan")
    return math.fsum(values) / len(values)
