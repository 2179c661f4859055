"""Fixtures for nightreid tests."""
import colorsys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
import pytest
import torch

from nightreid.config import ModelConfig
from nightreid.datasets import DatasetSplit, PersonSample, write_manifest

TEST_SIZE = (64, 32)
TEST_NUM_CLASSES = {"real": 4, "synthetic": 4}
TEST_NUM_CAMERAS = {"real": 2, "synthetic": 2}


@pytest.fixture
def float64():
    """Run the test with float64 as the default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def toy_config():
    """Return the toy model configuration with two domains."""
    return ModelConfig.preset("toy", num_classes=TEST_NUM_CLASSES, num_cameras=TEST_NUM_CAMERAS)


@pytest.fixture
def generator():
    """Return a seeded generator."""
    return torch.Generator().manual_seed(0)


def draw_person(pid: int, num_ids: int, index: int, size=TEST_SIZE, seed: int = 0) -> Image.Image:
    """Draw a coloured-shape stand-in for a person image."""
    height, width = size
    rng = np.random.default_rng([seed, pid, index])
    hue = pid / max(1, num_ids)
    body = tuple(int(255 * c) for c in colorsys.hsv_to_rgb(hue, 0.9, 0.95))
    legs = tuple(int(255 * c) for c in colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.7, 0.8))
    image = Image.new("RGB", (width, height), (200, 200, 190))
    draw = ImageDraw.Draw(image)
    dx, dy = (int(v) for v in rng.integers(-2, 3, size=2))
    draw.ellipse([width // 3 + dx, 2 + dy, 2 * width // 3 + dx, height // 6 + dy], fill=(230, 190, 160))
    draw.rectangle([width // 4 + dx, height // 6 + dy, 3 * width // 4 + dx, height // 2 + dy], fill=body)
    draw.rectangle([width // 4 + dx, height // 2 + dy, 3 * width // 4 + dx, height - 3 + dy], fill=legs)
    return image


def write_corpus(
    root: Path,
    num_ids: int,
    per_id: int,
    role: str = "train",
    domain: str = "real",
    cameras: int = 2,
    name: str = "manifest.txt",
    seed: int = 0,
) -> Path:
    """Write person images and their manifest under ``root``; camera alternates per image."""
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for pid in range(num_ids):
        for index in range(per_id):
            path = image_dir / f"{role}_{pid:03d}_{index:03d}.png"
            draw_person(pid, num_ids, index, seed=seed).save(path)
            samples.append(
                PersonSample(image_path=path, pid=pid, camid=index % cameras, domain=domain, role=role)
            )
    manifest = root / name
    write_manifest(DatasetSplit.from_samples(samples, role), manifest)
    return manifest


@pytest.fixture
def make_corpus(tmp_path):
    """Return a factory writing coloured-shape corpora below ``tmp_path``."""

    def factory(subdir: str = "day", **kwargs) -> Path:
        return write_corpus(tmp_path / subdir, **kwargs)

    return factory


@pytest.fixture
def day_manifest(make_corpus):
    """Return a daytime manifest of 4 identities x 4 images."""
    return make_corpus("day", num_ids=4, per_id=4)
