"""Person ReID datasets: manifests, synthetic night generation, PK sampling and augmentation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
import json
import logging
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset
import torchvision.transforms.functional as TF
from tqdm import tqdm

from .config import AugmentConfig, DegradationConfig
from .const import (
    DEGRADATION_ORDER,
    DOMAIN_SYNTHETIC,
    DOMAINS,
    MANIFEST_FIELD_SEP,
    MANIFEST_FIELDS,
    MANIFEST_KV_SEP,
    ROLES,
)
from .errors import DatasetValidationError, InvalidArgumentError, ManifestParseError
from .imageops import EraseParams, adjust, load_image, random_erase, save_image

_LOGGER = logging.getLogger(__name__)

_REQUIRED_FIELDS = ("path", "pid", "camid", "domain", "role")


@dataclass(frozen=True)
class PersonSample:
    """One person image with its labels."""

    image_path: Path
    pid: int
    camid: int
    domain: str
    role: str
    pair_path: Path | None = None
    label: int = -1


@dataclass(frozen=True)
class DatasetSplit:
    """An immutable list of samples sharing a role.

    ``id_index`` maps ``(domain, pid)`` to the sample indices of that identity;
    ``label`` on every sample is the identity's dense index within its domain.
    """

    samples: tuple[PersonSample, ...]
    role: str
    id_index: Mapping[tuple[str, int], tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: Iterable[PersonSample], role: str) -> DatasetSplit:
        """Build a split, re-indexing identities densely per domain."""
        samples = tuple(samples)
        labels: dict[str, dict[int, int]] = {}
        for domain in DOMAINS:
            pids = sorted({s.pid for s in samples if s.domain == domain})
            labels[domain] = {pid: i for i, pid in enumerate(pids)}
        relabelled = tuple(replace(s, label=labels[s.domain][s.pid]) for s in samples)
        index: dict[tuple[str, int], list[int]] = {}
        for i, sample in enumerate(relabelled):
            index.setdefault((sample.domain, sample.pid), []).append(i)
        return cls(
            samples=relabelled,
            role=role,
            id_index={key: tuple(value) for key, value in sorted(index.items())},
        )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def domains(self) -> tuple[str, ...]:
        """Return the domains present in the split."""
        return tuple(d for d in DOMAINS if any(s.domain == d for s in self.samples))

    def num_classes(self, domain: str) -> int:
        """Return the number of identities of ``domain``."""
        return sum(1 for d, _ in self.id_index if d == domain)

    def num_cameras(self, domain: str) -> int:
        """Return ``max(camid) + 1`` over samples of ``domain``."""
        camids = [s.camid for s in self.samples if s.domain == domain]
        return max(camids) + 1 if camids else 0

    def identities(self, domain: str | None = None) -> list[tuple[str, int]]:
        """Return the identity keys, optionally restricted to one domain."""
        return [key for key in self.id_index if domain is None or key[0] == domain]


def _parse_record(manifest: Path, lineno: int, text: str) -> dict[str, str]:
    record: dict[str, str] = {}
    for item in text.split(MANIFEST_FIELD_SEP):
        key, sep, value = item.partition(MANIFEST_KV_SEP)
        key = key.strip()
        if not sep:
            raise ManifestParseError(manifest, lineno, f"field without '{MANIFEST_KV_SEP}': {item!r}")
        if key not in MANIFEST_FIELDS:
            raise ManifestParseError(manifest, lineno, f"unknown field {key!r}")
        if key in record:
            raise ManifestParseError(manifest, lineno, f"duplicate field {key!r}")
        record[key] = value.strip()
    missing = [name for name in _REQUIRED_FIELDS if name not in record]
    if missing:
        raise ManifestParseError(manifest, lineno, f"missing fields {', '.join(missing)}")
    return record


def _resolve(base: Path, value: str) -> Path:
    return Path(os.path.normpath(base / value))


def load_manifest(
    path: str | Path, num_cameras: Mapping[str, int] | None = None
) -> DatasetSplit:
    """Load a line-delimited manifest into a split.

    Raises:
        OSError: If the manifest cannot be read
        ManifestParseError: If a record is malformed (carries the line number)
        DatasetValidationError: If a record violates a dataset invariant
    """
    path = Path(path)
    base = path.parent
    samples: list[PersonSample] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            record = _parse_record(path, lineno, text)
            try:
                pid = int(record["pid"])
                camid = int(record["camid"])
            except ValueError as err:
                raise ManifestParseError(path, lineno, f"non-integer label: {err}") from err
            if pid < 0 or camid < 0:
                raise ManifestParseError(path, lineno, "pid and camid must be non-negative")
            domain = record["domain"]
            if domain not in DOMAINS:
                raise ManifestParseError(path, lineno, f"unknown domain {domain!r}")
            role = record["role"]
            if role not in ROLES:
                raise ManifestParseError(path, lineno, f"unknown role {role!r}")
            pair = record.get("pair_path") or None
            pair_path = None
            if pair is not None:
                if domain != DOMAIN_SYNTHETIC:
                    raise DatasetValidationError(
                        f"{path}:{lineno}: pair_path is only allowed in the synthetic domain"
                    )
                pair_path = _resolve(base, pair)
                if not pair_path.exists():
                    raise DatasetValidationError(f"{path}:{lineno}: pair_path {pair_path} does not exist")
            if num_cameras and domain in num_cameras and camid >= num_cameras[domain]:
                raise DatasetValidationError(
                    f"{path}:{lineno}: camid {camid} >= {num_cameras[domain]} cameras of {domain}"
                )
            samples.append(
                PersonSample(
                    image_path=_resolve(base, record["path"]),
                    pid=pid,
                    camid=camid,
                    domain=domain,
                    role=role,
                    pair_path=pair_path,
                )
            )
    if not samples:
        raise DatasetValidationError(f"{path} contains no records")
    roles = {s.role for s in samples}
    if len(roles) != 1:
        raise DatasetValidationError(f"{path} mixes roles {sorted(roles)}")
    split = DatasetSplit.from_samples(samples, roles.pop())
    _LOGGER.debug("Loaded %d samples (%d identities) from %s", len(split), len(split.id_index), path)
    return split


def format_record(sample: PersonSample, base: Path) -> str:
    """Render one manifest line with paths relative to ``base``."""

    def rel(p: Path) -> str:
        return Path(os.path.relpath(p, base)).as_posix()

    fields = [
        ("path", rel(sample.image_path)),
        ("pid", str(sample.pid)),
        ("camid", str(sample.camid)),
        ("domain", sample.domain),
        ("role", sample.role),
    ]
    if sample.pair_path is not None:
        fields.append(("pair_path", rel(sample.pair_path)))
    return MANIFEST_FIELD_SEP.join(f"{k}{MANIFEST_KV_SEP}{v}" for k, v in fields)


def write_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Write a split as a manifest; paths are stored relative to its directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    lines = [format_record(_absolute(s), base) for s in split.samples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _absolute(sample: PersonSample) -> PersonSample:
    pair = sample.pair_path.resolve() if sample.pair_path is not None else None
    return replace(sample, image_path=sample.image_path.resolve(), pair_path=pair)


def check_disjoint(query: DatasetSplit, gallery: DatasetSplit) -> None:
    """Raise if query and gallery share an image path."""
    shared = {s.image_path for s in query.samples} & {s.image_path for s in gallery.samples}
    if shared:
        raise DatasetValidationError(
            f"query and gallery share {len(shared)} image(s), e.g. {sorted(shared)[0]}"
        )


@dataclass(frozen=True)
class DegradationRecord:
    """Sampled degradation factors for one source image."""

    source: str
    output: str | None
    brightness: float
    contrast: float
    saturation: float
    hue: float
    error: str | None = None


def _uniform(generator: torch.Generator, bounds: Sequence[float]) -> float:
    lo, hi = bounds
    return lo + (hi - lo) * torch.rand(1, generator=generator, dtype=torch.float64).item()


def degrade(image: torch.Tensor, factors: Mapping[str, float]) -> torch.Tensor:
    """Apply the degradation factors in the fixed brightness, contrast, saturation, hue order."""
    for mode in DEGRADATION_ORDER:
        image = adjust(image, mode, factors[mode])
    return image


def synthesize_dark(
    source: DatasetSplit, cfg: DegradationConfig, out_dir: str | Path
) -> tuple[DatasetSplit, list[DegradationRecord]]:
    """Degrade every source image into a paired synthetic night sample.

    Factors are drawn from one generator seeded with ``cfg.seed`` before the
    image is read, so an unreadable image does not shift later draws. Failed
    images are reported, not raised.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images" / source.role
    image_dir.mkdir(parents=True, exist_ok=True)
    generator = torch.Generator().manual_seed(cfg.seed)

    samples: list[PersonSample] = []
    report: list[DegradationRecord] = []
    for index, sample in enumerate(tqdm(source.samples, desc="synth", disable=None)):
        factors = {
            "brightness": _uniform(generator, cfg.brightness_range),
            "contrast": _uniform(generator, cfg.contrast_range),
            "saturation": _uniform(generator, cfg.color_range),
            "hue": _uniform(generator, cfg.hue_range),
        }
        if torch.rand(1, generator=generator).item() < 0.5:
            factors["hue"] = -factors["hue"]
        target = image_dir / f"{index:06d}_{sample.image_path.stem}.png"
        try:
            image = load_image(sample.image_path)
        except OSError as err:
            _LOGGER.warning("Cannot read %s: %s", sample.image_path, err)
            report.append(DegradationRecord(str(sample.image_path), None, **factors, error=str(err)))
            continue
        save_image(degrade(image, factors), target)
        report.append(DegradationRecord(str(sample.image_path), str(target), **factors))
        samples.append(
            PersonSample(
                image_path=target,
                pid=sample.pid,
                camid=sample.camid,
                domain=DOMAIN_SYNTHETIC,
                role=sample.role,
                pair_path=sample.image_path,
            )
        )
    failed = sum(1 for r in report if r.error)
    _LOGGER.info("Synthesized %d images into %s (%d failed)", len(samples), image_dir, failed)
    return DatasetSplit.from_samples(samples, source.role), report


def write_degradation_report(records: Iterable[DegradationRecord], path: str | Path) -> None:
    """Write one JSON record per source image."""
    lines = [json.dumps(asdict(r), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def pk_batch(
    split: DatasetSplit,
    num_ids: int,
    num_instances: int,
    generator: torch.Generator,
    domain: str | None = None,
) -> list[PersonSample]:
    """Sample ``num_ids`` identities with ``num_instances`` images each.

    Identities with fewer images than ``num_instances`` are sampled with
    replacement.
    """
    identities = split.identities(domain)
    if len(identities) < num_ids:
        raise InvalidArgumentError(
            f"PK batch needs {num_ids} identities, split has {len(identities)}"
        )
    chosen = torch.randperm(len(identities), generator=generator)[:num_ids].tolist()
    batch: list[PersonSample] = []
    for i in chosen:
        indices = split.id_index[identities[i]]
        if len(indices) >= num_instances:
            picks = torch.randperm(len(indices), generator=generator)[:num_instances].tolist()
        else:
            picks = torch.randint(0, len(indices), (num_instances,), generator=generator).tolist()
        batch.extend(split.samples[indices[p]] for p in picks)
    return batch


def derive_generator(base_seed: int, worker: int, epoch: int) -> torch.Generator:
    """Return the generator owned by one data-loading worker in one epoch."""
    seed = np.random.SeedSequence([base_seed, worker, epoch]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(seed))


def _resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return TF.resize(image, list(size), antialias=True).clamp(0.0, 1.0)


def augment_pair(
    image: torch.Tensor,
    pair: torch.Tensor | None,
    generator: torch.Generator,
    mode: str,
    size: tuple[int, int],
    cfg: AugmentConfig = AugmentConfig(),
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor]:
    """Augment an image and, with the same geometry, its well-lit pair.

    Eval mode only resizes. Train mode resizes, flips, pads and crops both
    images identically, then randomly erases the first image only. Returns
    ``(image, pair, erase_mask)``.
    """
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"Unknown augmentation mode: {mode}")
    image = _resize(image, size)
    pair = _resize(pair, size) if pair is not None else None
    empty = torch.zeros(size, dtype=torch.bool)
    if mode == "eval":
        return image, pair, empty

    flip = torch.rand(1, generator=generator).item() < cfg.flip_prob
    top = left = cfg.pad
    if cfg.pad:
        top = int(torch.randint(0, 2 * cfg.pad + 1, (1,), generator=generator).item())
        left = int(torch.randint(0, 2 * cfg.pad + 1, (1,), generator=generator).item())

    def geometry(t: torch.Tensor) -> torch.Tensor:
        if flip:
            t = TF.hflip(t)
        if cfg.pad:
            t = TF.pad(t, [cfg.pad], fill=0.0)
            t = TF.crop(t, top, left, size[0], size[1])
        return t

    image = geometry(image)
    pair = geometry(pair) if pair is not None else None
    erase = EraseParams(cfg.erase_prob, cfg.erase_area, cfg.erase_aspect)
    image, mask = random_erase(image, generator, erase)
    return image, pair, mask


def augment(
    image: torch.Tensor,
    generator: torch.Generator,
    mode: str,
    size: tuple[int, int] = (256, 128),
    cfg: AugmentConfig = AugmentConfig(),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Augment a single image; returns ``(image, erase_mask)``."""
    image, _, mask = augment_pair(image, None, generator, mode, size, cfg)
    return image, mask


@lru_cache(maxsize=4096)
def _load_versioned(path: str, mtime_ns: int, size: int) -> torch.Tensor:
    return load_image(path)


def _load_cached(path: Path) -> torch.Tensor:
    """Load an image, reusing the decoded tensor while the file is unchanged."""
    stat = os.stat(path)
    return _load_versioned(str(path), stat.st_mtime_ns, stat.st_size)


@dataclass
class Batch:
    """A collated single-domain batch."""

    images: torch.Tensor
    labels: torch.Tensor
    camids: torch.Tensor
    pids: torch.Tensor
    erase_masks: torch.Tensor
    domain: str
    pairs: torch.Tensor | None = None

    def to(self, device: torch.device | str) -> Batch:
        """Move tensors to ``device``."""
        return replace(
            self,
            images=self.images.to(device),
            labels=self.labels.to(device),
            camids=self.camids.to(device),
            pids=self.pids.to(device),
            erase_masks=self.erase_masks.to(device),
            pairs=self.pairs.to(device) if self.pairs is not None else None,
        )


def load_batch(
    samples: Sequence[PersonSample],
    generator: torch.Generator,
    mode: str,
    size: tuple[int, int],
    cfg: AugmentConfig = AugmentConfig(),
) -> Batch:
    """Load, augment and collate samples from one domain."""
    if not samples:
        raise InvalidArgumentError("cannot collate an empty batch")
    domains = {s.domain for s in samples}
    if len(domains) != 1:
        raise InvalidArgumentError(f"batch mixes domains {sorted(domains)}")
    with_pairs = all(s.pair_path is not None for s in samples)
    images, pairs, masks = [], [], []
    for sample in samples:
        pair = _load_cached(sample.pair_path) if with_pairs else None
        image, pair, mask = augment_pair(
            _load_cached(sample.image_path), pair, generator, mode, size, cfg
        )
        images.append(image)
        masks.append(mask)
        if pair is not None:
            pairs.append(pair)
    return Batch(
        images=torch.stack(images),
        labels=torch.tensor([s.label for s in samples], dtype=torch.long),
        camids=torch.tensor([s.camid for s in samples], dtype=torch.long),
        pids=torch.tensor([s.pid for s in samples], dtype=torch.long),
        erase_masks=torch.stack(masks),
        domain=domains.pop(),
        pairs=torch.stack(pairs) if with_pairs else None,
    )


class PersonImageDataset(Dataset):
    """Eval-mode images of a split, for batched feature extraction."""

    def __init__(self, split: DatasetSplit, size: tuple[int, int]) -> None:
        """Initialize the dataset."""
        self.split = split
        self.size = tuple(size)

    def __len__(self) -> int:
        return len(self.split)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int, int]:
        sample = self.split.samples[index]
        image = _resize(load_image(sample.image_path), self.size)
        return image, sample.camid, index
