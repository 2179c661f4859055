"""Training objectives and the per-domain composites."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Any, Mapping

import torch
import torch.nn.functional as F

from .config import LossWeights
from .const import DOMAIN_REAL, DOMAIN_SYNTHETIC, DOMAINS
from .errors import InvalidArgumentError
from .imageops import channel_max, hist_equalize, ssim, total_variation, weighted_total_variation

_LOGGER = logging.getLogger(__name__)

UNSUPERVISED_TERMS = ("rec", "ref", "col", "sa")


def identity_loss(
    scores: torch.Tensor, labels: torch.Tensor, scale: float = 1.0, margin: float = 0.0
) -> torch.Tensor:
    """Scaled cross-entropy with an additive margin on the target score."""
    if scores.dim() != 2 or labels.shape != scores.shape[:1]:
        raise InvalidArgumentError(f"expected B x C scores and B labels, got {tuple(scores.shape)}, {tuple(labels.shape)}")
    num_classes = scores.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise InvalidArgumentError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")
    logits = scale * scores
    if margin:
        logits = logits - scale * margin * F.one_hot(labels, num_classes).to(logits.dtype)
    return F.cross_entropy(logits, labels)


def _pairwise_euclidean(features: torch.Tensor) -> torch.Tensor:
    diff = features.unsqueeze(1) - features.unsqueeze(0)
    return (diff**2).sum(dim=-1).clamp(min=1e-12).sqrt()


def hard_example_distances(
    features: torch.Tensor, labels: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return per-anchor hardest-positive and hardest-negative distances."""
    if features.dim() != 2 or labels.shape != features.shape[:1]:
        raise InvalidArgumentError("expected B x D features and B labels")
    if labels.unique().numel() < 2:
        raise InvalidArgumentError("triplet loss needs at least two identities in the batch")
    dist = _pairwise_euclidean(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    d_ap = dist.masked_fill(~same, float("-inf")).amax(dim=1)
    d_an = dist.masked_fill(same, float("inf")).amin(dim=1)
    return d_ap, d_an


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss under Euclidean distance."""
    d_ap, d_an = hard_example_distances(features, labels)
    return F.relu(margin + (d_ap - d_an)).mean()


def _check_tokens(f_s: torch.Tensor, f_t: torch.Tensor) -> None:
    if f_s.shape != f_t.shape or f_s.dim() != 3:
        raise InvalidArgumentError(f"expected matching B x N x D tokens, got {tuple(f_s.shape)}, {tuple(f_t.shape)}")
    if f_s.shape[0] == 0:
        raise InvalidArgumentError("distillation needs a non-empty batch")


def brightness_term(f_s: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """Squared error between per-channel token means."""
    _check_tokens(f_s, f_t)
    return F.mse_loss(f_s.mean(dim=1), f_t.detach().mean(dim=1))


def contrastive_term(f_s: torch.Tensor, f_t: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """InfoNCE-style alignment of pooled tokens with a mean (not sum) denominator."""
    _check_tokens(f_s, f_t)
    student = F.normalize(f_s.mean(dim=1), dim=-1)
    relit = F.normalize(f_t.detach().mean(dim=1), dim=-1)
    sim = student @ relit.t() / temperature
    per_sample = torch.logsumexp(sim, dim=1) - math.log(sim.shape[1]) - sim.diagonal()
    return per_sample.mean()


def lighting_distillation(
    f_s: torch.Tensor, f_t: torch.Tensor, temperature: float = 1.0, mode: str = "full"
) -> torch.Tensor:
    """Distil relighting decoder tokens ``f_t`` into ReID tokens ``f_s``.

    ``f_t`` never receives gradient. ``mode="brightness"`` drops the
    contrastive term.
    """
    if mode not in ("full", "brightness"):
        raise InvalidArgumentError(f"Unknown distillation mode: {mode}")
    loss = brightness_term(f_s, f_t)
    if mode == "full":
        loss = loss + contrastive_term(f_s, f_t, temperature)
    return loss


def supervised_relight_loss(
    reflectance: torch.Tensor, target: torch.Tensor, valid_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean squared error against the well-lit pair over valid pixels.

    ``valid_mask`` is ``H x W`` or ``B x H x W`` and true where the pixel
    counts; pass the inverse of the erase mask.
    """
    if reflectance.shape != target.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {tuple(reflectance.shape)} vs {tuple(target.shape)}"
        )
    squared = (reflectance - target) ** 2
    if valid_mask is None:
        return squared.mean()
    mask = valid_mask.to(device=squared.device, dtype=torch.bool).unsqueeze(-3).expand_as(squared)
    if not mask.any():
        raise InvalidArgumentError("valid mask selects no pixels")
    return squared[mask].mean()


def reconstruction_loss(
    reflectance: torch.Tensor, illumination: torch.Tensor, image: torch.Tensor
) -> torch.Tensor:
    """``1 - SSIM(R * I, M) + L1(R * I, M)``."""
    recomposed = reflectance * illumination
    return 1.0 - ssim(recomposed, image) + (recomposed - image).abs().mean()


def reflection_loss(reflectance: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Match the brightest channel of R to the equalised brightest channel of M, plus TV(R)."""
    target = hist_equalize(channel_max(image))
    return (channel_max(reflectance) - target).abs().mean() + total_variation(reflectance)


def color_loss(reflectance: torch.Tensor) -> torch.Tensor:
    """Gray-world penalty on the channel means of R."""
    means = reflectance.mean(dim=(-2, -1))
    r, g, b = means.unbind(dim=-1)
    return ((r - g) ** 2 + (r - b) ** 2 + (g - b) ** 2).mean()


def smooth_loss(illumination: torch.Tensor, reflectance: torch.Tensor) -> torch.Tensor:
    """Total variation of I, damped where R itself has edges."""
    return weighted_total_variation(illumination, reflectance.mean(dim=-3, keepdim=True))


def unsupervised_terms(
    reflectance: torch.Tensor, illumination: torch.Tensor, image: torch.Tensor
) -> dict[str, torch.Tensor]:
    """Return the four unweighted Retinex losses keyed rec/ref/col/sa."""
    return {
        "rec": reconstruction_loss(reflectance, illumination, image),
        "ref": reflection_loss(reflectance, image),
        "col": color_loss(reflectance),
        "sa": smooth_loss(illumination, reflectance),
    }


def combine_unsupervised(terms: Mapping[str, Any], weights: LossWeights) -> Any:
    """Weighted sum of the four Retinex terms."""
    return (
        weights.lambda_rec * terms["rec"]
        + weights.lambda_ref * terms["ref"]
        + weights.lambda_col * terms["col"]
        + weights.lambda_sa * terms["sa"]
    )


def unsupervised_relight_loss(
    reflectance: torch.Tensor,
    illumination: torch.Tensor,
    image: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Relighting loss for unpaired real-domain images."""
    return combine_unsupervised(unsupervised_terms(reflectance, illumination, image), weights)


@dataclass
class LossBundle:
    """Loss components of one step, their weighted total and the domain."""

    domain: str
    id: torch.Tensor
    triplet: torch.Tensor
    distill: torch.Tensor
    relight: torch.Tensor
    total: torch.Tensor
    extras: dict[str, torch.Tensor] = field(default_factory=dict)

    def as_record(self, step: int) -> dict[str, Any]:
        """Return the metrics-log record of this bundle."""
        record: dict[str, Any] = {"step": step, "domain": self.domain}
        for name in ("id", "triplet", "distill", "relight", "total"):
            record[name] = float(getattr(self, name).detach())
        for name, value in sorted(self.extras.items()):
            record[name] = float(value.detach())
        return record


def _weighted(weight: float, value: torch.Tensor) -> torch.Tensor:
    # A zero weight contributes an exact, graph-free zero.
    if weight == 0:
        return torch.zeros((), dtype=value.dtype, device=value.device)
    return weight * value


def domain_total(
    parts: Mapping[str, torch.Tensor], domain: str, weights: LossWeights = LossWeights()
) -> LossBundle:
    """Combine ``id``, ``triplet``, ``relight`` and ``distill`` for one domain.

    ``relight`` is the supervised loss on synthetic batches and the
    unsupervised loss on real ones. Any further entries are carried as
    extras for logging only.
    """
    if domain not in DOMAINS:
        raise InvalidArgumentError(f"Unknown domain: {domain}")
    missing = {"id", "triplet", "relight", "distill"} - set(parts)
    if missing:
        raise InvalidArgumentError(f"missing loss components: {sorted(missing)}")
    total = (
        parts["id"]
        + parts["triplet"]
        + _weighted(weights.lambda_relight, parts["relight"])
        + _weighted(weights.lambda_distill, parts["distill"])
    )
    extras = {k: v for k, v in parts.items() if k not in ("id", "triplet", "relight", "distill")}
    return LossBundle(
        domain=domain,
        id=parts["id"],
        triplet=parts["triplet"],
        distill=parts["distill"],
        relight=parts["relight"],
        total=total,
        extras=extras,
    )


def relight_loss_for(
    domain: str,
    reflectance: torch.Tensor,
    illumination: torch.Tensor,
    image: torch.Tensor,
    weights: LossWeights,
    pair: torch.Tensor | None = None,
    erase_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Return the domain's relighting loss and any sub-terms worth logging."""
    if domain == DOMAIN_SYNTHETIC:
        if pair is None:
            raise InvalidArgumentError("synthetic batches need well-lit pairs")
        valid = None if erase_mask is None else ~erase_mask
        return supervised_relight_loss(reflectance, pair, valid), {}
    if domain == DOMAIN_REAL:
        terms = unsupervised_terms(reflectance, illumination, image)
        return combine_unsupervised(terms, weights), {f"relight_{k}": v for k, v in terms.items()}
    raise InvalidArgumentError(f"Unknown domain: {domain}")
