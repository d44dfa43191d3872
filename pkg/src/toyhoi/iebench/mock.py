"""Deterministic perception oracles for toy scenes.

They play the roles of the HOI detector, the open-vocabulary object detector, the
promptable segmenter and the feature embedder. Everything is keyed by the scene
metadata (which colour belongs to which label) and reads only pixels; no
generation-time layout information is consulted when scoring an image.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .. import rng, scenes
from .metrics import Detection, HOITriplet, PerceptionBackends

COLOR_TOL = 0.22  # in [0, 1] RGB units
MIN_PIXELS = 4
SUBJECT_PIXELS = scenes.STAND_W * scenes.STAND_H


def _rgb01(image) -> np.ndarray:
    """``[3, H, W]`` in [-1, 1] -> ``[H, W, 3]`` in [0, 1]."""
    return (np.asarray(image, dtype=np.float64).transpose(1, 2, 0) + 1.0) / 2.0


def color_blob(image, rgb, tol: float = COLOR_TOL):
    """Largest 4-connected region within ``tol`` of ``rgb``: ``(mask, box)`` or ``None``."""
    dist = np.linalg.norm(_rgb01(image) - np.asarray(rgb, dtype=np.float64), axis=-1)
    near = dist < tol
    labels, n = ndimage.label(near)
    if n == 0:
        return None
    sizes = ndimage.sum_labels(near, labels, index=np.arange(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < MIN_PIXELS:
        return None
    mask = labels == best
    ys, xs = np.nonzero(mask)
    return mask, (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def _label_color(meta: dict, label: str):
    for role, name in meta["labels"].items():
        if name == label:
            return meta["colors"][role]
    raise KeyError(f"label {label!r} not in scene metadata")


def classify_relation(s_box, o_box) -> str | None:
    """Interaction verb implied by subject/object boxes ``(x0, y0, x1, y1)``."""
    sx0, sy0, sx1, sy1 = s_box
    ox0, oy0, ox1, oy1 = o_box
    s_w, s_h = sx1 - sx0 + 1, sy1 - sy0 + 1
    s_cy, o_cy = (sy0 + sy1) / 2, (oy0 + oy1) / 2
    overlap_x = min(sx1, ox1) - max(sx0, ox0) + 1
    if s_w > s_h:
        return "lie_on" if o_cy > s_cy and overlap_x > 0 else None
    if overlap_x > 0:
        return "carry" if o_cy < s_cy else "ride"
    gap = max(ox0 - sx1, sx0 - ox1) - 1
    if oy1 < sy1 - 1:
        return "hold"
    return "kick" if gap <= 2 else "walk"


class MockHOIDetector:
    def __init__(self, tol: float = COLOR_TOL):
        self.tol = tol

    def __call__(self, image, meta) -> list[Detection]:
        labels = meta["labels"]
        s = color_blob(image, meta["colors"]["subject"], self.tol)
        o = color_blob(image, meta["colors"]["object"], self.tol)
        if s is None or o is None:
            return []
        verb = classify_relation(s[1], o[1])
        if verb is None:
            return []
        w, h, _ = scenes.OBJECTS.get(labels["object"], (4, 4, None))
        conf = min(1.0, s[0].sum() / SUBJECT_PIXELS, o[0].sum() / (w * h))
        return [Detection(HOITriplet(labels["subject"], verb, labels["object"]), s[1], o[1], float(conf))]


class MockObjectDetector:
    def __init__(self, tol: float = COLOR_TOL):
        self.tol = tol

    def __call__(self, image, label, meta):
        blob = color_blob(image, _label_color(meta, label), self.tol)
        return None if blob is None else blob[1]


class MockSegmenter:
    """Foreground inside a box: pixels that differ from the colour just outside it."""

    def __init__(self, tol: float = 0.15):
        self.tol = tol

    def __call__(self, image, box):
        rgb = _rgb01(image)
        h, w, _ = rgb.shape
        x0, y0, x1, y1 = box
        ring = np.zeros((h, w), dtype=bool)
        ring[max(y0 - 1, 0):y1 + 2, max(x0 - 1, 0):x1 + 2] = True
        ring[y0:y1 + 1, x0:x1 + 1] = False
        inside = np.zeros((h, w), dtype=bool)
        inside[y0:y1 + 1, x0:x1 + 1] = True
        if not ring.any():
            return inside
        bg = np.median(rgb[ring], axis=0)
        fg = inside & (np.linalg.norm(rgb - bg, axis=-1) > self.tol)
        return fg if fg.any() else inside


class MockEmbedder:
    """Fixed orthonormal projection of colour statistics of the masked pixels.

    Features are the mean colour of the whole region and of its upper and lower
    halves, in the signed [-1, 1] colour space.
    """

    def __init__(self, dim: int = 16, seed: int = 0):
        g = rng.stream(seed, "mock-embedder")
        q, _ = np.linalg.qr(g.standard_normal((dim, 9)))
        self.proj = q

    def features(self, image, mask) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return np.zeros(9)
        ys = np.nonzero(mask)[0]
        mid = (ys.min() + ys.max()) / 2
        rows = np.arange(mask.shape[0])[:, None]
        parts = [mask, mask & (rows <= mid), mask & (rows >= mid)]
        return np.concatenate([img[:, p].mean(axis=1) for p in parts])

    def __call__(self, image, mask) -> np.ndarray:
        return self.proj @ self.features(image, mask)


def mock_backends(tol: float = COLOR_TOL) -> PerceptionBackends:
    return PerceptionBackends(MockHOIDetector(tol), MockObjectDetector(tol), MockSegmenter(), MockEmbedder())
