"""Dataset directory layout: images/%06d.png + concepts.csv + meta.json."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .. import graphs
from ..errors import DataError
from . import generators, render


@dataclass
class GroundTruthStructure:
    adjacency_gt: np.ndarray  # m x m, directed edges over concepts
    mask_gt: np.ndarray  # n x m concept-to-factor assignment
    concept_names: list[str]
    normalization_ranges: list[tuple]

    def validate(self):
        if not graphs.is_acyclic(self.adjacency_gt != 0):
            raise DataError("adjacency_gt has a cycle")
        if np.any(np.asarray(self.mask_gt).sum(axis=0) < 1):
            raise DataError("mask_gt must link every concept to at least one factor")

    def to_dict(self) -> dict:
        return {
            "adjacency_gt": np.asarray(self.adjacency_gt, dtype=int).tolist(),
            "mask_gt": np.asarray(self.mask_gt, dtype=int).tolist(),
            "concept_names": list(self.concept_names),
            "normalization_ranges": [[float(a), float(b)] for a, b in self.normalization_ranges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthStructure":
        return cls(
            adjacency_gt=np.array(d["adjacency_gt"], dtype=np.int64),
            mask_gt=np.array(d["mask_gt"], dtype=np.int64),
            concept_names=list(d["concept_names"]),
            normalization_ranges=[tuple(r) for r in d["normalization_ranges"]],
        )


@dataclass
class DatasetManifest:
    name: str
    sample_count: int
    image_size: int
    concept_names: list[str]
    normalization_ranges: list[tuple]
    structure: GroundTruthStructure
    seed: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sample_count": self.sample_count,
            "image_size": self.image_size,
            "concept_names": list(self.concept_names),
            "normalization_ranges": [[float(a), float(b)] for a, b in self.normalization_ranges],
            "structure": self.structure.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            name=d["name"],
            sample_count=int(d["sample_count"]),
            image_size=int(d["image_size"]),
            concept_names=list(d["concept_names"]),
            normalization_ranges=[tuple(r) for r in d["normalization_ranges"]],
            structure=GroundTruthStructure.from_dict(d["structure"]),
            seed=int(d["seed"]),
        )


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W) float in [0,1]
    concepts: np.ndarray  # normalized, in [0,1]^m
    index: int


def image_path(root: Path, index: int) -> Path:
    return Path(root) / "images" / f"{index:06d}.png"


def save_image(path: Path, img: np.ndarray) -> None:
    Image.fromarray(render.to_uint8(img), mode="L").save(path, format="PNG", optimize=False)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return render.from_uint8(np.asarray(im.convert("L")))


def generate_dataset(name: str, out_dir, count: int, seed: int, image_size: int = 64) -> DatasetManifest:
    """Write `count` samples of the named family into out_dir."""
    if name not in generators.FAMILIES:
        raise DataError(f"unknown dataset family: {name!r}")
    if not isinstance(count, (int, np.integer)) or count < 1:
        raise DataError(f"count must be a positive integer, got {count!r}")
    if image_size not in (32, 64):
        raise DataError(f"image_size must be 32 or 64, got {image_size!r}")

    fam = generators.FAMILIES[name]
    ranges = generators.family_ranges(name)
    adj, mask = fam.structure()
    structure = GroundTruthStructure(adj, mask, list(fam.concept_names), ranges)
    structure.validate()

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for index in range(count):
        img, concepts, _ = generators.make_sample(name, index, seed, image_size)
        save_image(image_path(out, index), img)
        rows.append(concepts)

    with open(out / "concepts.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fam.concept_names)
        for r in rows:
            w.writerow([f"{v:.9g}" for v in r])

    manifest = DatasetManifest(
        name=name,
        sample_count=count,
        image_size=image_size,
        concept_names=list(fam.concept_names),
        normalization_ranges=ranges,
        structure=structure,
        seed=seed,
    )
    with open(out / "meta.json", "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(root) -> DatasetManifest:
    meta = Path(root) / "meta.json"
    if not meta.exists():
        raise DataError(f"no dataset manifest at {meta}")
    with open(meta) as f:
        return DatasetManifest.from_dict(json.load(f))


def load_dataset(root) -> tuple[np.ndarray, np.ndarray, DatasetManifest]:
    """Load the full dataset into memory: (images (N,H,W), concepts (N,m), manifest)."""
    root = Path(root)
    manifest = load_manifest(root)
    with open(root / "concepts.csv", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != manifest.concept_names:
            raise DataError("concepts.csv header does not match manifest concept names")
        concepts = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    if concepts.shape[0] != manifest.sample_count:
        raise DataError(
            f"manifest says {manifest.sample_count} samples, concepts.csv has {concepts.shape[0]}"
        )
    images = np.empty((manifest.sample_count, manifest.image_size, manifest.image_size), dtype=np.float32)
    for i in range(manifest.sample_count):
        p = image_path(root, i)
        if not p.exists():
            raise DataError(f"missing image file {p}")
        images[i] = load_image(p)
    return images, concepts, manifest


def load_sample(root, index: int) -> SceneSample:
    manifest = load_manifest(root)
    if not 0 <= index < manifest.sample_count:
        raise DataError(f"sample index {index} out of range [0, {manifest.sample_count})")
    with open(Path(root) / "concepts.csv", newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for i, row in enumerate(reader):
            if i == index:
                concepts = np.array([float(v) for v in row])
                break
    return SceneSample(load_image(image_path(root, index)), concepts, index)
