"""The parallel relighting + ReID network.

The network has three disjoint parameter groups:

* ``shared``: patch/position/camera embedding (``embed.*``) and the shared
  Transformer encoder (``shared.*``);
* ``reid``: the ReID encoder layers, BNNeck and one classifier per domain
  (``reid.*``);
* ``relight``: task embedding, Transformer decoder layers and the
  convolutional Retinex head (``relight.*``). With parameter sharing
  disabled it also owns private copies of the embedding and the shared
  encoder.

Inference only runs embed -> shared -> reid, so a model built without the
relighting subnet produces the same features.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Mapping

import torch
from torch import nn
import torch.nn.functional as F

from .config import ModelConfig
from .const import SUBNET_RELIGHT, SUBNET_REID, SUBNET_SHARED, SUBNETS
from .errors import InvalidArgumentError, MissingParametersError
from .imageops import channel_max

_LOGGER = logging.getLogger(__name__)

_SUBNET_PREFIXES = {
    "embed.": SUBNET_SHARED,
    "shared.": SUBNET_SHARED,
    "reid.": SUBNET_REID,
    "relight.": SUBNET_RELIGHT,
}


def subnet_of(name: str) -> str:
    """Return the subnet owning the parameter or buffer ``name``."""
    for prefix, subnet in _SUBNET_PREFIXES.items():
        if name.startswith(prefix):
            return subnet
    raise InvalidArgumentError(f"Parameter {name} belongs to no subnet")


@dataclass
class SharedFeatures:
    """Shared-encoder output; row 0 is the global token."""

    full: torch.Tensor

    @property
    def patches_only(self) -> torch.Tensor:
        """Return the patch tokens without the global token."""
        return self.full[:, 1:]


@dataclass
class ReIDOutput:
    """ReID branch output.

    ``global_feat`` is the pre-BNNeck descriptor used by the triplet loss,
    ``feat`` the post-BNNeck descriptor used for classification and retrieval.
    """

    feat: torch.Tensor
    global_feat: torch.Tensor
    high_tokens: torch.Tensor
    logits: torch.Tensor | None = None


@dataclass
class RetinexDecomposition:
    """Reflectance (3 channels) and illumination (1 channel), both in (0, 1)."""

    reflectance: torch.Tensor
    illumination: torch.Tensor


@dataclass
class RelightTokens:
    """Final decoder tokens and the task embedding they were decoded with."""

    tokens: torch.Tensor
    task_embed: torch.Tensor


@dataclass
class CENetOutput:
    """Outputs of one training forward pass."""

    shared: SharedFeatures
    reid: ReIDOutput | None = None
    retinex: RetinexDecomposition | None = None
    relight: RelightTokens | None = None


class Attention(nn.Module):
    """Multi-head self-attention."""

    def __init__(self, dim: int, num_heads: int) -> None:
        """Initialize the layer."""
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, tokens, dim = x.shape
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.num_heads, dim // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(batch, tokens, dim)
        return self.proj(x)


class Mlp(nn.Module):
    """Two-layer feed-forward network."""

    def __init__(self, dim: int, hidden: int) -> None:
        """Initialize the layer."""
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm Transformer layer (self-attention + MLP, both residual)."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        """Initialize the layer."""
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """A stack of Transformer layers."""

    def __init__(self, depth: int, dim: int, num_heads: int, mlp_ratio: float) -> None:
        """Initialize the stack."""
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, num_heads, mlp_ratio) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class PatchEmbed(nn.Module):
    """Patch projection, global token, position and camera embeddings."""

    def __init__(self, config: ModelConfig) -> None:
        """Initialize the embedding."""
        super().__init__()
        self.config = config
        dim = config.embed_dim
        self.proj = nn.Conv2d(3, dim, kernel_size=config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, dim))
        self.camera_embed = nn.ParameterDict(
            {domain: nn.Parameter(torch.zeros(count, dim)) for domain, count in sorted(config.num_cameras.items())}
        )
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for table in self.camera_embed.values():
            nn.init.trunc_normal_(table, std=0.02)

    def camera_term(self, camids: torch.Tensor, domain: str) -> torch.Tensor:
        """Return the scaled camera embedding for each sample."""
        if domain not in self.camera_embed:
            raise InvalidArgumentError(f"No camera embedding for domain {domain!r}")
        table = self.camera_embed[domain]
        if camids.numel() and (int(camids.min()) < 0 or int(camids.max()) >= table.shape[0]):
            raise InvalidArgumentError(
                f"camid out of range for {domain!r} ({table.shape[0]} cameras): {camids.tolist()}"
            )
        return self.config.camera_coef * table[camids].unsqueeze(1)

    def forward(
        self, x: torch.Tensor, camids: torch.Tensor | None = None, domain: str | None = None
    ) -> torch.Tensor:
        tokens = self.proj(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat((cls, tokens), dim=1) + self.pos_embed
        if camids is not None:
            tokens = tokens + self.camera_term(camids.to(tokens.device), domain)
        return tokens


class ReIDSubnet(nn.Module):
    """ReID encoder layers, BNNeck and per-domain classifiers."""

    def __init__(self, config: ModelConfig) -> None:
        """Initialize the subnet."""
        super().__init__()
        dim = config.embed_dim
        self.encoder = Encoder(config.reid_depth, dim, config.num_heads, config.mlp_ratio)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.bottleneck = nn.BatchNorm1d(dim)
        self.bottleneck.bias.requires_grad_(False)
        self.classifiers = nn.ModuleDict(
            {domain: nn.Linear(dim, count, bias=False) for domain, count in sorted(config.num_classes.items())}
        )

    def forward(self, shared: SharedFeatures, domain: str | None, with_logits: bool = True) -> ReIDOutput:
        tokens = self.norm(self.encoder(shared.full))
        global_feat = tokens[:, 0]
        feat = self.bottleneck(global_feat)
        logits = None
        if with_logits:
            if domain not in self.classifiers:
                raise InvalidArgumentError(f"No classification head for domain {domain!r}")
            logits = self.classifiers[domain](feat)
        return ReIDOutput(feat=feat, global_feat=global_feat, high_tokens=tokens[:, 1:], logits=logits)


class RelightSubnet(nn.Module):
    """Transformer decoder plus the convolutional Retinex head."""

    def __init__(self, config: ModelConfig) -> None:
        """Initialize the subnet."""
        super().__init__()
        dim = config.embed_dim
        hidden = config.relight_channels
        self.config = config
        self.embed = None if config.share_encoder else PatchEmbed(config)
        self.encoder = (
            None
            if config.share_encoder
            else Encoder(config.shared_depth, dim, config.num_heads, config.mlp_ratio)
        )
        self.task_embed = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.trunc_normal_(self.task_embed, std=0.02)
        self.decoder = Encoder(config.decoder_depth, dim, config.num_heads, config.mlp_ratio)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.token_conv = nn.Conv2d(dim, hidden, kernel_size=3, padding=1)
        self.max_conv = nn.Conv2d(1, hidden, kernel_size=3, padding=1)
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * hidden, hidden, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 4, kernel_size=1),
        )

    def forward(
        self, patches: torch.Tensor, x: torch.Tensor
    ) -> tuple[RetinexDecomposition, RelightTokens]:
        tokens = self.norm(self.decoder(patches + self.task_embed))
        rows, cols = self.config.grid_size
        grid = tokens.transpose(1, 2).reshape(tokens.shape[0], -1, rows, cols)
        grid = F.interpolate(self.token_conv(grid), size=x.shape[-2:], mode="bilinear", align_corners=False)
        guide = self.max_conv(channel_max(x))
        maps = torch.sigmoid(self.fuse(torch.cat((grid, guide), dim=1)))
        decomposition = RetinexDecomposition(reflectance=maps[:, :3], illumination=maps[:, 3:])
        return decomposition, RelightTokens(tokens=tokens, task_embed=self.task_embed)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class CENet(nn.Module):
    """Shared encoder with parallel ReID and relighting subnets."""

    def __init__(self, config: ModelConfig, with_reid: bool = True, with_relight: bool = True) -> None:
        """Initialize the network; subnets can be left out for inference-only use."""
        super().__init__()
        self.config = config
        self.embed = PatchEmbed(config)
        self.shared = Encoder(config.shared_depth, config.embed_dim, config.num_heads, config.mlp_ratio)
        self.reid = ReIDSubnet(config) if with_reid else None
        self.relight = RelightSubnet(config) if with_relight else None
        for module in (self.shared, self.reid, self.relight):
            if module is not None:
                module.apply(_init_weights)
        if self.reid is not None:
            for classifier in self.reid.classifiers.values():
                nn.init.normal_(classifier.weight, std=0.001)

    @property
    def subnets(self) -> tuple[str, ...]:
        """Return the subnets present in this instance."""
        present = [SUBNET_SHARED]
        if self.reid is not None:
            present.append(SUBNET_REID)
        if self.relight is not None:
            present.append(SUBNET_RELIGHT)
        return tuple(present)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Partition named parameters into the shared, reid and relight groups."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {name: [] for name in SUBNETS}
        for name, param in self.named_parameters():
            groups[subnet_of(name)].append((name, param))
        return groups

    def _require(self, subnet: str) -> nn.Module:
        module = getattr(self, subnet)
        if module is None:
            raise MissingParametersError(f"The {subnet} subnet is not loaded")
        return module

    def _check_image(self, x: torch.Tensor) -> None:
        expected = (3, *self.config.img_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InvalidArgumentError(f"expected B x {expected} images, got {tuple(x.shape)}")

    def patch_embed(
        self, x: torch.Tensor, camids: torch.Tensor | None = None, domain: str | None = None
    ) -> torch.Tensor:
        """Embed images as ``B x (N + 1) x D`` token sequences."""
        self._check_image(x)
        return self.embed(x, camids, domain)

    def shared_encode(self, tokens: torch.Tensor) -> SharedFeatures:
        """Apply the shared encoder."""
        expected = (self.config.num_patches + 1, self.config.embed_dim)
        if tuple(tokens.shape[1:]) != expected:
            raise InvalidArgumentError(f"expected B x {expected} tokens, got {tuple(tokens.shape)}")
        return SharedFeatures(self.shared(tokens))

    def reid_head(self, shared: SharedFeatures, domain: str | None, with_logits: bool = True) -> ReIDOutput:
        """Apply the ReID subnet."""
        return self._require(SUBNET_REID)(shared, domain, with_logits)

    def relight_decode(
        self,
        shared: SharedFeatures,
        x: torch.Tensor,
        camids: torch.Tensor | None = None,
        domain: str | None = None,
    ) -> tuple[RetinexDecomposition, RelightTokens]:
        """Apply the relighting subnet to the shared features of image ``x``.

        Without parameter sharing the subnet embeds and encodes ``x`` with
        its own copies and ignores ``shared``, so relighting gradients never
        reach the shared group.
        """
        relight = self._require(SUBNET_RELIGHT)
        self._check_image(x)
        if shared.full.shape[0] != x.shape[0] or shared.patches_only.shape[1] != self.config.num_patches:
            raise InvalidArgumentError(
                f"shared features {tuple(shared.full.shape)} do not match images {tuple(x.shape)}"
            )
        if relight.encoder is not None:
            shared = SharedFeatures(relight.encoder(relight.embed(x, camids, domain)))
        return relight(shared.patches_only, x)

    def forward(
        self,
        x: torch.Tensor,
        camids: torch.Tensor | None = None,
        domain: str | None = None,
        branches: tuple[str, ...] = (SUBNET_REID, SUBNET_RELIGHT),
    ) -> CENetOutput:
        tokens = self.patch_embed(x, camids, domain)
        shared = self.shared_encode(tokens)
        output = CENetOutput(shared=shared)
        if SUBNET_REID in branches:
            output.reid = self.reid_head(shared, domain)
        if SUBNET_RELIGHT in branches:
            output.retinex, output.relight = self.relight_decode(shared, x, camids, domain)
        return output

    def infer(self, x: torch.Tensor, camids: torch.Tensor, domain: str) -> torch.Tensor:
        """Return the retrieval descriptor; never touches the relighting subnet."""
        shared = self.shared_encode(self.patch_embed(x, camids, domain))
        return self.reid_head(shared, domain, with_logits=False).feat

    def enhance(self, x: torch.Tensor) -> RetinexDecomposition:
        """Decompose images without camera information; never touches the ReID subnet."""
        decomposition, _ = self.relight_decode(self.shared_encode(self.patch_embed(x)), x)
        return decomposition


@dataclass
class ImportReport:
    """Outcome of importing named tensors into a model."""

    loaded: list[str]
    skipped: list[str]
    missing: list[str]


def _vit_name(name: str, config: ModelConfig) -> str | None:
    """Map a plain ViT parameter name onto this network, or None if unused."""
    if name.startswith("relight."):
        return None
    if name.startswith(tuple(_SUBNET_PREFIXES)):
        return name
    if name in ("cls_token", "pos_embed"):
        return f"embed.{name}"
    if name.startswith("patch_embed.proj."):
        return "embed.proj." + name.rsplit(".", 1)[1]
    if name.startswith("blocks."):
        _, index, rest = name.split(".", 2)
        index = int(index)
        if index < config.shared_depth:
            return f"shared.blocks.{index}.{rest}"
        if index < config.shared_depth + config.reid_depth:
            return f"reid.encoder.blocks.{index - config.shared_depth}.{rest}"
        return None
    if name.startswith("norm."):
        return "reid.norm." + name.split(".", 1)[1]
    return None


def _resample_pos_embed(pos: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Bilinearly resample a square position-embedding grid to the model grid."""
    cls, grid = pos[:, :1], pos[:, 1:]
    side = int(math.isqrt(grid.shape[1]))
    if side * side != grid.shape[1]:
        raise InvalidArgumentError(f"cannot resample position embedding of {grid.shape[1]} patches")
    rows, cols = config.grid_size
    grid = grid.reshape(1, side, side, -1).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(rows, cols), mode="bilinear", align_corners=False)
    return torch.cat((cls, grid.permute(0, 2, 3, 1).reshape(1, rows * cols, -1)), dim=1)


def import_pretrained(model: CENet, state: Mapping[str, torch.Tensor]) -> ImportReport:
    """Copy matching tensors from a named-parameter mapping into ``model``.

    Accepts this network's own names or plain ViT names (``blocks.i`` are
    split between the shared encoder and the ReID subnet). Relighting
    tensors and tensors with a mismatched shape are skipped; anything not
    provided keeps its random initialisation.
    """
    own = dict(model.state_dict())
    loaded: list[str] = []
    skipped: list[str] = []
    with torch.no_grad():
        for name, tensor in state.items():
            target = _vit_name(name, model.config)
            if target is None or target not in own:
                skipped.append(name)
                continue
            if target == "embed.pos_embed" and tensor.shape != own[target].shape:
                tensor = _resample_pos_embed(tensor, model.config)
            if tensor.shape != own[target].shape:
                _LOGGER.warning(
                    "Skipping %s: shape %s does not match %s", name, tuple(tensor.shape), tuple(own[target].shape)
                )
                skipped.append(name)
                continue
            own[target].copy_(tensor.to(own[target].dtype))
            loaded.append(target)
    missing = sorted(set(own) - set(loaded))
    _LOGGER.info("Imported %d tensors (%d skipped, %d left at initialisation)", len(loaded), len(skipped), len(missing))
    return ImportReport(loaded=loaded, skipped=skipped, missing=missing)
