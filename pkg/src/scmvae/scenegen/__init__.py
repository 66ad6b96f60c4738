"""Synthetic scene generators (pendulum, flow, dSprites-style) with exact labels."""

from .dataio import (
    DatasetManifest,
    GroundTruthStructure,
    SceneSample,
    generate_dataset,
    load_dataset,
    load_manifest,
    load_sample,
)
from .generators import FAMILIES, denormalize, family_ranges, make_sample, normalize


def gen_pendulum(out_dir, count: int, seed: int = 0, image_size: int = 64) -> DatasetManifest:
    return generate_dataset("pendulum", out_dir, count, seed, image_size)


def gen_flow(out_dir, count: int, seed: int = 0, image_size: int = 64) -> DatasetManifest:
    return generate_dataset("flow", out_dir, count, seed, image_size)


def gen_dsprites(out_dir, count: int, seed: int = 0, image_size: int = 64) -> DatasetManifest:
    return generate_dataset("dsprites", out_dir, count, seed, image_size)
