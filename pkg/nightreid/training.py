"""Optimisation, the per-domain train step and the alternating multi-domain loop."""
from __future__ import annotations

import base64
from dataclasses import asdict, dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

from .checkpoint import load_state_file, read_archive, write_archive
from .config import Config, LossWeights, ModelConfig, TrainConfig
from .const import ABLATIONS, DOMAIN_REAL, DOMAIN_SYNTHETIC, DOMAINS, SUBNET_RELIGHT, SUBNET_REID, SUBNETS
from .datasets import Batch, DatasetSplit, derive_generator, load_batch, pk_batch
from .errors import InvalidArgumentError, MissingParametersError
from .losses import (
    LossBundle,
    domain_total,
    identity_loss,
    lighting_distillation,
    relight_loss_for,
    triplet_loss,
)
from .metrics import MetricsLogger
from .model import CENet, import_pretrained, subnet_of

_LOGGER = logging.getLogger(__name__)

_OPTIMIZER_PREFIX = "optimizer/"
_MOMENTUM_SUFFIX = "/momentum_buffer"


def make_optimizer(
    params: Iterable[tuple[str, nn.Parameter]], cfg: TrainConfig
) -> torch.optim.SGD:
    """SGD with momentum; parameters with ``ndim <= 1`` (norms, biases) skip weight decay."""
    decay, no_decay = [], []
    for _, param in params:
        if not param.requires_grad:
            continue
        (no_decay if param.ndim <= 1 else decay).append(param)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": cfg.weight_decay})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=cfg.base_lr, momentum=cfg.momentum)


class WarmupCosineSchedule:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""

    def __init__(self, optimizer: torch.optim.Optimizer, base_lr: float, warmup_steps: int, total_steps: int) -> None:
        """Initialize the schedule."""
        self.optimizer = optimizer
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps

    def lr_factor(self, step: int) -> float:
        """Return the multiplier of ``base_lr`` at ``step`` (0-based)."""
        if step < self.warmup_steps:
            return (step + 1) / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return 1.0
        progress = min(1.0, (step - self.warmup_steps) / span)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    def apply(self, step: int) -> float:
        """Set the learning rate for ``step`` and return it."""
        lr = self.base_lr * self.lr_factor(step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    model: CENet
    optimizer: torch.optim.SGD
    schedule: WarmupCosineSchedule
    train_config: TrainConfig
    generator: torch.Generator
    step: int = 0
    best_metric: float | None = None
    history: list[str] = field(default_factory=list)


def apply_ablation(config: Config, name: str | None = None) -> Config:
    """Switch off multi-domain learning, distillation or parameter sharing.

    ``name`` defaults to ``config.train.ablation``; ``None`` leaves the
    configuration untouched.
    """
    name = name if name is not None else config.train.ablation
    if name is None:
        return config
    if name not in ABLATIONS:
        raise InvalidArgumentError(f"Unknown ablation: {name}")
    flags = ABLATIONS[name]
    train = config.train
    if not flags["multi_domain"]:
        train = replace(train, pattern=(DOMAIN_SYNTHETIC,))
    loss = config.loss if flags["distill"] else replace(config.loss, lambda_distill=0.0)
    model = replace(config.model, share_encoder=flags["share_encoder"])
    return replace(config, model=model, train=replace(train, ablation=name), loss=loss)


def init_state(
    model_config: ModelConfig,
    train_config: TrainConfig,
    total_steps: int,
    pretrained: str | Path | None = None,
) -> TrainState:
    """Build a freshly initialised model, optimizer and sampler generator."""
    torch.manual_seed(train_config.seed)
    model = CENet(model_config)
    if pretrained is not None:
        import_pretrained(model, load_state_file(pretrained))
    optimizer = make_optimizer(model.named_parameters(), train_config)
    schedule = WarmupCosineSchedule(optimizer, train_config.base_lr, train_config.warmup_steps, total_steps)
    return TrainState(
        model=model,
        optimizer=optimizer,
        schedule=schedule,
        train_config=train_config,
        generator=derive_generator(train_config.seed, 0, 0),
    )


def compute_losses(model: CENet, batch: Batch, weights: LossWeights) -> LossBundle:
    """Forward one batch through both subnets and combine the domain's losses."""
    domain = batch.domain
    if domain == DOMAIN_SYNTHETIC and batch.pairs is None:
        raise InvalidArgumentError("synthetic batches need well-lit pairs")
    run_relight = weights.lambda_relight > 0 or weights.lambda_distill > 0
    branches = (SUBNET_REID, SUBNET_RELIGHT) if run_relight else (SUBNET_REID,)
    out = model(batch.images, batch.camids, domain, branches)
    zero = out.reid.feat.new_zeros(())
    parts = {
        "id": identity_loss(out.reid.logits, batch.labels, weights.id_scale, weights.id_margin),
        "triplet": triplet_loss(out.reid.global_feat, batch.labels, weights.triplet_margin),
        "relight": zero,
        "distill": zero,
    }
    if out.retinex is not None and weights.lambda_relight > 0:
        parts["relight"], extras = relight_loss_for(
            domain,
            out.retinex.reflectance,
            out.retinex.illumination,
            batch.images,
            weights,
            pair=batch.pairs,
            erase_mask=batch.erase_masks,
        )
        parts.update(extras)
    if out.relight is not None and weights.lambda_distill > 0:
        parts["distill"] = lighting_distillation(
            out.reid.high_tokens,
            out.relight.tokens,
            weights.distill_temperature,
            weights.distill_mode,
        )
    return domain_total(parts, domain, weights)


def train_step(batch: Batch, domain: str, state: TrainState, weights: LossWeights) -> LossBundle:
    """Run one optimisation step on a single-domain batch."""
    model = state.model
    for subnet in (SUBNET_REID, SUBNET_RELIGHT):
        if getattr(model, subnet) is None:
            raise MissingParametersError(f"training needs the {subnet} subnet")
    if batch.domain != domain:
        raise InvalidArgumentError(f"batch is from {batch.domain!r}, expected {domain!r}")
    model.train()
    state.schedule.apply(state.step)
    bundle = compute_losses(model, batch, weights)
    state.optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    state.optimizer.step()
    state.step += 1
    return bundle


def domain_schedule(
    pattern: Sequence[str], alternation: str = "iteration", steps_per_epoch: int = 1
) -> Callable[[int], str]:
    """Return a function mapping a step index to its domain."""
    if not pattern:
        raise InvalidArgumentError("alternation pattern must not be empty")
    unknown = set(pattern) - set(DOMAINS)
    if unknown:
        raise InvalidArgumentError(f"Unknown domains in pattern: {sorted(unknown)}")
    if alternation == "iteration":
        return lambda step: pattern[step % len(pattern)]
    if alternation == "epoch":
        return lambda step: pattern[(step // max(1, steps_per_epoch)) % len(pattern)]
    raise InvalidArgumentError(f"Unknown alternation: {alternation}")


def plan_steps(train: TrainConfig, splits: Iterable[DatasetSplit]) -> tuple[int, int]:
    """Return ``(steps_per_epoch, total_steps)``."""
    per_epoch = train.steps_per_epoch
    if not per_epoch:
        per_epoch = max(1, math.ceil(sum(len(s) for s in splits) / train.batch_size))
    return per_epoch, per_epoch * train.epochs


def _model_config_for(config: ModelConfig, splits: dict[str, DatasetSplit]) -> ModelConfig:
    num_classes = dict(config.num_classes)
    num_cameras = dict(config.num_cameras)
    for domain, split in splits.items():
        num_classes.setdefault(domain, split.num_classes(domain))
        num_cameras[domain] = max(num_cameras.get(domain, 0), split.num_cameras(domain))
    return config.with_data(num_classes, num_cameras)


def alternating_loop(
    real_split: DatasetSplit | None,
    syn_split: DatasetSplit | None,
    config: Config,
    weights: LossWeights | None = None,
    *,
    state: TrainState | None = None,
    metrics: MetricsLogger | None = None,
    checkpoint_path: str | Path | None = None,
    evaluate_fn: Callable[[CENet], float] | None = None,
) -> TrainState:
    """Train by alternating real and synthetic batches per the configured pattern.

    Passing ``state`` resumes from its step. Checkpoints are written every
    ``checkpoint_every`` steps and at the end when ``checkpoint_path`` is set;
    ``evaluate_fn`` runs every ``eval_every`` steps and tracks the best value.
    """
    config = apply_ablation(config)
    weights = weights if weights is not None else config.loss
    train = config.train
    splits: dict[str, DatasetSplit] = {}
    for domain, split in ((DOMAIN_REAL, real_split), (DOMAIN_SYNTHETIC, syn_split)):
        if domain not in train.pattern:
            continue
        if split is None or not split.identities(domain):
            raise InvalidArgumentError(f"pattern uses {domain!r} but no {domain} samples were given")
        splits[domain] = split
    steps_per_epoch, total_steps = plan_steps(train, splits.values())
    domain_at = domain_schedule(train.pattern, train.alternation, steps_per_epoch)
    if state is None:
        state = init_state(_model_config_for(config.model, splits), train, total_steps, config.data.pretrained)
    else:
        state.schedule.total_steps = total_steps
    metrics = metrics if metrics is not None else MetricsLogger()
    size = state.model.config.img_size
    _LOGGER.info(
        "Training %d steps (%d per epoch) from step %d, pattern %s",
        total_steps,
        steps_per_epoch,
        state.step,
        "/".join(train.pattern),
    )
    while state.step < total_steps:
        domain = domain_at(state.step)
        samples = pk_batch(
            splits[domain], train.ids_per_batch, train.instances_per_id, state.generator, domain
        )
        batch = load_batch(samples, state.generator, "train", size, config.augment)
        bundle = train_step(batch, domain, state, weights)
        record = bundle.as_record(state.step)
        record["lr"] = state.optimizer.param_groups[0]["lr"]
        metrics.log(record)
        state.history.append(domain)
        _LOGGER.debug("Step %d [%s] total %.4f", state.step, domain, record["total"])
        if evaluate_fn is not None and train.eval_every and state.step % train.eval_every == 0:
            _track_best(state, evaluate_fn(state.model))
            state.model.train()
        if checkpoint_path is not None and train.checkpoint_every and state.step % train.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    if evaluate_fn is not None and train.eval_every and state.step % train.eval_every:
        _track_best(state, evaluate_fn(state.model))
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


def _track_best(state: TrainState, value: float) -> None:
    if state.best_metric is None or value > state.best_metric:
        _LOGGER.info("New best metric %.4f at step %d", value, state.step)
        state.best_metric = value


def _b64(tensor: torch.Tensor) -> str:
    return base64.b64encode(tensor.numpy().tobytes()).decode("ascii")


def _unb64(text: str) -> torch.Tensor:
    return torch.frombuffer(bytearray(base64.b64decode(text)), dtype=torch.uint8)


def _train_config_dict(cfg: TrainConfig) -> dict:
    data = asdict(cfg)
    data["pattern"] = list(cfg.pattern)
    return data


def save_checkpoint(state: TrainState, path: str | Path, exclude: Sequence[str] = ()) -> None:
    """Write model, optimizer buffers, step, RNG states and best metric.

    ``exclude`` drops whole subnets, e.g. ``("relight",)`` for a ReID-only
    inference checkpoint.
    """
    unknown = set(exclude) - set(SUBNETS)
    if unknown:
        raise InvalidArgumentError(f"Unknown subnets: {sorted(unknown)}")
    tensors = {
        name: tensor
        for name, tensor in state.model.state_dict().items()
        if subnet_of(name) not in exclude
    }
    for name, param in state.model.named_parameters():
        if subnet_of(name) in exclude:
            continue
        buffer = state.optimizer.state.get(param, {}).get("momentum_buffer")
        if buffer is not None:
            tensors[f"{_OPTIMIZER_PREFIX}{name}{_MOMENTUM_SUFFIX}"] = buffer
    header = {
        "model_config": state.model.config.to_dict(),
        "train_config": _train_config_dict(state.train_config),
        "step": state.step,
        "best_metric": state.best_metric,
        "total_steps": state.schedule.total_steps,
        "subnets": [s for s in state.model.subnets if s not in exclude],
        "rng": {"generator": _b64(state.generator.get_state()), "torch": _b64(torch.get_rng_state())},
    }
    write_archive(path, header, tensors)
    _LOGGER.info("Saved checkpoint at step %d to %s", state.step, path)


def load_checkpoint(
    path: str | Path, subnets: Sequence[str] | None = None, restore_rng: bool = True
) -> TrainState:
    """Load a checkpoint written by :func:`save_checkpoint`.

    ``subnets`` selects what to build (default: everything stored); the
    shared subnet is always loaded. Asking for a subnet the file lacks raises
    :class:`MissingParametersError`.
    """
    archive = read_archive(path)
    header = archive.header
    stored = tuple(header["subnets"])
    wanted = tuple(subnets) if subnets is not None else stored
    missing = set(wanted) - set(stored)
    if missing:
        raise MissingParametersError(f"{path} does not contain the {', '.join(sorted(missing))} subnet(s)")
    model = CENet(
        ModelConfig.from_dict(header["model_config"]),
        with_reid=SUBNET_REID in wanted,
        with_relight=SUBNET_RELIGHT in wanted,
    )
    own = model.state_dict()
    absent = [name for name in own if name not in archive.tensors]
    if absent:
        raise MissingParametersError(f"{path} lacks {len(absent)} tensors, e.g. {absent[0]}")
    with torch.no_grad():
        for name, tensor in own.items():
            tensor.copy_(archive.tensors[name].to(tensor.dtype))

    train_data = dict(header["train_config"])
    train_data["pattern"] = tuple(train_data["pattern"])
    train_config = TrainConfig(**train_data)
    optimizer = make_optimizer(model.named_parameters(), train_config)
    for name, param in model.named_parameters():
        buffer = archive.tensors.get(f"{_OPTIMIZER_PREFIX}{name}{_MOMENTUM_SUFFIX}")
        if buffer is not None:
            optimizer.state[param]["momentum_buffer"] = buffer.to(param.dtype).clone()
    schedule = WarmupCosineSchedule(
        optimizer, train_config.base_lr, train_config.warmup_steps, header["total_steps"]
    )
    generator = torch.Generator()
    generator.set_state(_unb64(header["rng"]["generator"]))
    if restore_rng:
        torch.set_rng_state(_unb64(header["rng"]["torch"]))
    _LOGGER.info("Loaded checkpoint %s at step %d (%s)", path, header["step"], ", ".join(model.subnets))
    return TrainState(
        model=model,
        optimizer=optimizer,
        schedule=schedule,
        train_config=train_config,
        generator=generator,
        step=header["step"],
        best_metric=header["best_metric"],
    )

