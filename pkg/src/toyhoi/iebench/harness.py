"""Benchmark manifests, the scoring loop and the evaluation report."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import scenes
from ..archive import canonical_json
from .metrics import HOITriplet, InvalidInstance, hoi_match, identity_consistency, mean, overall

MANIFEST_SCHEMA = 1
REPORT_SCHEMA = "toyhoi.eval_report/1"


@dataclass
class BenchmarkInstance:
    id: str
    scene: str  # scene bundle directory, relative to the manifest
    source_triplet: HOITriplet
    target_interactions: list[str]
    root: Path = Path(".")

    @property
    def object_label(self) -> str:
        return self.source_triplet.object

    @property
    def scene_dir(self) -> Path:
        return self.root / self.scene

    @property
    def source_image(self) -> Path:
        return self.scene_dir / "image.png"

    @property
    def masks(self) -> dict[str, Path]:
        return {k: self.scene_dir / v for k, v in scenes.MASK_FILES.items()}

    def to_dict(self) -> dict:
        t = self.source_triplet
        return {"id": self.id, "scene": self.scene,
                "source_image": f"{self.scene}/image.png",
                "masks": {k: f"{self.scene}/{v}" for k, v in scenes.MASK_FILES.items()},
                "source_triplet": [t.subject, t.interaction, t.object],
                "object_label": t.object,
                "target_interactions": list(self.target_interactions)}


@dataclass
class Manifest:
    instances: list[BenchmarkInstance]
    name: str = "toy"
    root: Path = Path(".")

    @property
    def pairs(self) -> list[tuple[BenchmarkInstance, str]]:
        return [(inst, target) for inst in self.instances for target in inst.target_interactions]

    def to_dict(self) -> dict:
        return {"schema_version": MANIFEST_SCHEMA, "name": self.name,
                "instances": [i.to_dict() for i in self.instances]}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def from_dict(cls, data: dict, root=Path(".")) -> "Manifest":
        if data.get("schema_version") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema {data.get('schema_version')!r}")
        root = Path(root)
        insts = [BenchmarkInstance(d["id"], d["scene"], HOITriplet(*d["source_triplet"]),
                                   list(d["target_interactions"]), root)
                 for d in data["instances"]]
        return cls(insts, data.get("name", "toy"), root)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)


@dataclass
class EvalReport:
    cells: list[dict] = field(default_factory=list)
    invalid: list[dict] = field(default_factory=list)
    config_hash: str = ""
    seeds_per_pair: int = 0
    method: str = ""

    @property
    def editability_mean(self) -> float:
        return mean(c["editability"] for c in self.cells)

    @property
    def ic_mean(self) -> float:
        return mean(c["identity_consistency"] for c in self.cells)

    @property
    def overall(self) -> float:
        return overall(self.editability_mean, self.ic_mean)

    @property
    def partial(self) -> bool:
        return bool(self.invalid)

    def aggregates(self) -> dict:
        return {"hoi_editability": self.editability_mean,
                "identity_consistency": self.ic_mean,
                "overall": self.overall,
                "n_cells": len(self.cells)}

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "method": self.method, "config_hash": self.config_hash,
                "seeds_per_pair": self.seeds_per_pair, "partial": self.partial,
                "aggregates": self.aggregates(), "cells": self.cells, "invalid": self.invalid}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(d["cells"], d["invalid"], d["config_hash"], d["seeds_per_pair"], d.get("method", ""))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def write_csv(path, reports: dict[str, EvalReport]):
    """Table-style summary: one row per method with Overall / Editability / IC."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method", "Overall", "HOI Editability", "Identity Consistency"])
        for name, rep in reports.items():
            w.writerow([name, f"{rep.overall:.4f}", f"{rep.editability_mean:.3f}", f"{rep.ic_mean:.3f}"])
    return path


Editor = Callable[[BenchmarkInstance, str, int], np.ndarray]


def run_benchmark(manifest: Manifest, editor: Editor, backends, seeds_per_pair: int = 10,
                  seeds=None, config_hash: str = "", method: str = "", threshold: float = 0.5,
                  log: Callable[[str], None] | None = None) -> EvalReport:
    """Edit every (source, target interaction) pair once per seed and score it.

    ``editor(instance, target_interaction, seed)`` returns an image ``[3, H, W]`` in
    [-1, 1]. Instances whose assets are missing, or whose source image fails
    detection, are listed in ``report.invalid`` and excluded from the aggregates.
    """
    seeds = list(range(seeds_per_pair)) if seeds is None else list(seeds)
    report = EvalReport(config_hash=config_hash, seeds_per_pair=len(seeds), method=method)
    for inst in manifest.instances:
        try:
            bundle = scenes.read_bundle(inst.scene_dir)
        except FileNotFoundError as exc:
            report.invalid.append({"instance": inst.id, "reason": str(exc)})
            continue
        labels = bundle.labels
        meta = bundle.meta
        cells = []
        try:
            for target in inst.target_interactions:
                triplet = HOITriplet(labels["subject"], target, labels["object"])
                for seed in seeds:
                    edited = editor(inst, target, seed)
                    e = hoi_match(backends.hoi_detector(edited, meta), triplet, threshold)
                    ic = identity_consistency(bundle.image, edited, labels["subject"],
                                              labels["object"], backends, meta)
                    cells.append({"instance": inst.id, "target": target, "seed": int(seed),
                                  "editability": float(e), "identity_consistency": float(ic),
                                  "config_hash": config_hash})
        except InvalidInstance as exc:
            report.invalid.append({"instance": inst.id, "reason": str(exc)})
            continue
        report.cells.extend(cells)
        if log:
            log(f"{inst.id}: editability {mean(c['editability'] for c in cells):.3f} "
                f"IC {mean(c['identity_consistency'] for c in cells):.3f}")
    return report


def report_digest(report: EvalReport) -> str:
    return hashlib.sha256(canonical_json(report.to_dict()).encode()).hexdigest()
