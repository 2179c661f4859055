"""Retrieval evaluation: feature extraction, distances, CMC and mAP.

Protocol: for every query, gallery images with the same identity *and* the
same camera are removed before ranking (switchable), ranking is by
ascending Euclidean distance with ties broken by gallery order, and
queries left without any true match are skipped.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from .const import EVAL_RANKS
from .datasets import DatasetSplit, PersonImageDataset
from .errors import EvaluationError, InvalidArgumentError
from .model import CENet

_LOGGER = logging.getLogger(__name__)

REPORT_FORMATS = ("text", "csv", "json")


@dataclass
class FeatureSet:
    """Row-normalised features with the labels of each row."""

    features: torch.Tensor
    pids: np.ndarray
    camids: np.ndarray


@torch.no_grad()
def extract_features(model: CENet, split: DatasetSplit, batch_size: int = 64) -> FeatureSet:
    """Embed every image of ``split`` with the ReID path and L2-normalise the rows.

    ``batch_size`` only groups image loading; each image is embedded on its
    own so a row never depends on its batch neighbours.
    """
    model.eval()
    loader = DataLoader(PersonImageDataset(split, model.config.img_size), batch_size=batch_size, shuffle=False)
    rows: list[torch.Tensor] = []
    device = next(model.parameters()).device
    for images, camids, indices in tqdm(loader, desc="features", disable=None):
        for image, camid, index in zip(images, camids, indices.tolist()):
            domain = split.samples[index].domain
            feat = model.infer(image[None].to(device), camid[None].to(device), domain)
            rows.append(F.normalize(feat.float(), dim=1).cpu())
    features = torch.cat(rows) if rows else torch.empty(0, model.config.embed_dim)
    return FeatureSet(
        features=features,
        pids=np.array([s.pid for s in split.samples], dtype=np.int64),
        camids=np.array([s.camid for s in split.samples], dtype=np.int64),
    )


def export_features(features: FeatureSet, path: str | Path) -> Path:
    """Write a feature set to ``path`` as ``.npz`` (``features``, ``pids``, ``camids``)."""
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        features=features.features.numpy().astype(np.float32),
        pids=features.pids,
        camids=features.camids,
    )
    _LOGGER.debug("Wrote %d features to %s", len(features.pids), path)
    return path


def load_features(path: str | Path) -> FeatureSet:
    """Read a feature set written by :func:`export_features`."""
    with np.load(path) as archive:
        missing = {"features", "pids", "camids"} - set(archive.files)
        if missing:
            raise InvalidArgumentError(f"{path} lacks {sorted(missing)}")
        features = torch.from_numpy(archive["features"].copy())
        pids = archive["pids"].astype(np.int64)
        camids = archive["camids"].astype(np.int64)
    if features.dim() != 2 or not len(features) == len(pids) == len(camids):
        raise InvalidArgumentError(f"{path} holds inconsistent feature and label counts")
    return FeatureSet(features=features, pids=pids, camids=camids)


def pairwise_distance(query: torch.Tensor, gallery: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix between query and gallery rows."""
    if query.dim() != 2 or gallery.dim() != 2 or query.shape[1] != gallery.shape[1]:
        raise InvalidArgumentError(f"expected Q x D and G x D, got {tuple(query.shape)}, {tuple(gallery.shape)}")
    return torch.cdist(query, gallery, compute_mode="donot_use_mm_for_euclid_dist")


@dataclass
class EvalReport:
    """mAP, the CMC curve over all gallery ranks and per-query APs."""

    mAP: float
    cmc: list[float]
    aps: list[float]
    query_indices: list[int]
    num_query: int
    num_gallery: int
    ranks: tuple[int, ...] = EVAL_RANKS
    extra: dict[str, Any] = field(default_factory=dict)

    def rank(self, k: int) -> float:
        """Return the rank-``k`` accuracy."""
        if k < 1:
            raise InvalidArgumentError("rank must be >= 1")
        return self.cmc[min(k, len(self.cmc)) - 1]

    def summary(self) -> str:
        """Return the one-line percent summary."""
        parts = [f"mAP {100 * self.mAP:.2f}"]
        parts.extend(f"Rank-{k} {100 * self.rank(k):.2f}" for k in self.ranks)
        return " | ".join(parts)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-compatible mapping."""
        return {
            "mAP": self.mAP,
            "cmc": list(self.cmc),
            "aps": list(self.aps),
            "query_indices": list(self.query_indices),
            "num_query": self.num_query,
            "num_gallery": self.num_gallery,
            "ranks": list(self.ranks),
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalReport:
        """Build a report from :meth:`to_dict` output."""
        return cls(**{**data, "ranks": tuple(data.get("ranks", EVAL_RANKS))})


def evaluate(
    dist: Any,
    q_pids: Sequence[int],
    q_camids: Sequence[int],
    g_pids: Sequence[int],
    g_camids: Sequence[int],
    ranks: Iterable[int] = EVAL_RANKS,
    exclude_same_camera: bool = True,
) -> EvalReport:
    """Compute CMC and mAP from a query x gallery distance matrix.

    Raises:
        InvalidArgumentError: If metadata does not match the matrix
        EvaluationError: If no query has a valid true match
    """
    if isinstance(dist, torch.Tensor):
        dist = dist.detach().cpu().numpy()
    dist = np.asarray(dist, dtype=np.float64)
    q_pids, q_camids = np.asarray(q_pids), np.asarray(q_camids)
    g_pids, g_camids = np.asarray(g_pids), np.asarray(g_camids)
    num_q, num_g = dist.shape
    if q_pids.shape != (num_q,) or q_camids.shape != (num_q,) or g_pids.shape != (num_g,) or g_camids.shape != (num_g,):
        raise InvalidArgumentError(f"metadata does not match a {num_q} x {num_g} distance matrix")

    cmc_sum = np.zeros(num_g, dtype=np.float64)
    aps: list[float] = []
    valid_queries: list[int] = []
    for i in range(num_q):
        order = np.argsort(dist[i], kind="stable")
        matches = g_pids[order] == q_pids[i]
        if exclude_same_camera:
            matches = matches[~(matches & (g_camids[order] == q_camids[i]))]
        if not matches.any():
            continue
        hits = np.cumsum(matches)
        curve = np.ones(num_g, dtype=np.float64)
        curve[: len(hits)] = (hits > 0).astype(np.float64)
        cmc_sum += curve
        positions = np.flatnonzero(matches) + 1
        aps.append(float(np.mean(hits[positions - 1] / positions)))
        valid_queries.append(i)

    if not aps:
        _LOGGER.error("No query has a valid match among %d gallery images", num_g)
        raise EvaluationError("all queries lack a valid gallery match")
    skipped = num_q - len(aps)
    if skipped:
        _LOGGER.debug("Skipped %d queries without valid matches", skipped)
    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc=(cmc_sum / len(aps)).tolist(),
        aps=aps,
        query_indices=valid_queries,
        num_query=num_q,
        num_gallery=num_g,
        ranks=tuple(ranks),
    )


def evaluate_model(
    model: CENet,
    query: DatasetSplit,
    gallery: DatasetSplit,
    ranks: Iterable[int] = EVAL_RANKS,
    exclude_same_camera: bool = True,
    batch_size: int = 64,
    features_dir: str | Path | None = None,
) -> EvalReport:
    """Extract features for both splits and evaluate them.

    With ``features_dir`` both feature sets are also exported there as
    ``query_features.npz`` and ``gallery_features.npz``.
    """
    q = extract_features(model, query, batch_size)
    g = extract_features(model, gallery, batch_size)
    if features_dir is not None:
        export_features(q, Path(features_dir) / "query_features")
        export_features(g, Path(features_dir) / "gallery_features")
    report = evaluate(
        pairwise_distance(q.features, g.features),
        q.pids,
        q.camids,
        g.pids,
        g.camids,
        ranks,
        exclude_same_camera,
    )
    _LOGGER.info("%s", report.summary())
    return report


def emit_report(report: EvalReport, path: str | Path, formats: Iterable[str] = ("text", "csv")) -> list[Path]:
    """Write the report next to ``path`` as ``.txt``, ``.csv`` and/or ``.json``.

    The CSV holds a ``k,cmc`` block over every gallery rank followed by a
    ``query_index,ap`` block.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt not in REPORT_FORMATS:
            raise InvalidArgumentError(f"Unknown report format: {fmt}")
        if fmt == "text":
            target = path.with_suffix(".txt")
            target.write_text(report.summary() + "\n", encoding="utf-8")
        elif fmt == "csv":
            target = path.with_suffix(".csv")
            with open(target, "w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(["k", "cmc"])
                writer.writerows((k, repr(v)) for k, v in enumerate(report.cmc, start=1))
                writer.writerow(["query_index", "ap"])
                writer.writerows((q, repr(ap)) for q, ap in zip(report.query_indices, report.aps))
        else:
            target = path.with_suffix(".json")
            target.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        written.append(target)
    _LOGGER.debug("Wrote %s", ", ".join(str(p) for p in written))
    return written
