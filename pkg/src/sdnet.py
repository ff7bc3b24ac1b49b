"""
SDNet Model Module

This module implements the semantic-decomposition segmentation network:
a shared convolutional encoder whose bottleneck feeds two category-specific
decoder branches (teeth and plaque). Each branch carries a mask head, and
optionally a boundary head (structural constraint) and a projection head
producing pixel embeddings (contrastive constraint).

With semantic decomposition disabled the model collapses to a plain UNet:
one decoder with a 3-class head.
"""

import logging
from dataclasses import dataclass
from typing import AbstractSet, Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ConfigurationError

logger = logging.getLogger(__name__)

BRANCHES = ("teeth", "plaque")
COMPONENTS = frozenset({"SD", "CCM", "SCM"})
CCM_POSITIONS = ("entry", "after_f1", "after_f2", "after_f3")

MASK_HEAD_CLASSES = 2
JOINT_HEAD_CLASSES = 3


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture settings.

    Attributes:
        input_size (int): Square input side, divisible by 16
        encoder_channels (Tuple[int, ...]): Widths of the 5 encoder blocks
        embedding_dim (int): Pixel embedding dimension d
        use_skip_connections (bool): Concatenate encoder skips in the decoders
        ccm_position (str): Decoder feature the projection heads read
        projection_hidden (Tuple[int, ...]): Widths of the first two fully connected layers
    """

    input_size: int = 128
    encoder_channels: Tuple[int, ...] = (64, 128, 256, 512, 1024)
    embedding_dim: int = 64
    use_skip_connections: bool = True
    ccm_position: str = "entry"
    projection_hidden: Tuple[int, ...] = (128, 64)

    @property
    def mask_head_classes(self) -> int:
        return MASK_HEAD_CLASSES

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: If the architecture cannot be built
        """
        channels = self.encoder_channels
        if len(channels) != 5:
            raise ConfigurationError(f"encoder_channels needs 5 widths, got {len(channels)}")
        if any(b <= a for a, b in zip(channels, channels[1:])):
            raise ConfigurationError(f"encoder_channels must be strictly increasing: {channels}")
        if self.input_size <= 0 or self.input_size % 16 != 0:
            raise ConfigurationError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.embedding_dim <= 0:
            raise ConfigurationError("embedding_dim must be positive")
        if self.ccm_position not in CCM_POSITIONS:
            raise ConfigurationError(f"ccm_position must be one of {CCM_POSITIONS}")
        if len(self.projection_hidden) != 2:
            raise ConfigurationError("projection_hidden needs 2 widths")
        if self.projection_channels() % 8 != 0:
            raise ConfigurationError(
                f"Projection input width {self.projection_channels()} must be divisible by 8"
            )

    def projection_channels(self) -> int:
        """Channel count of the decoder feature tapped by the projection heads."""
        if self.ccm_position == "entry":
            return self.encoder_channels[4]
        stage = int(self.ccm_position[-1])
        return self.encoder_channels[4 - stage]


def validate_components(components: AbstractSet[str]) -> None:
    unknown = set(components) - COMPONENTS
    if unknown:
        raise ConfigurationError(f"Unknown ablation components: {sorted(unknown)}")
    if ("CCM" in components or "SCM" in components) and "SD" not in components:
        raise ConfigurationError("CCM and SCM require semantic decomposition (SD)")


@dataclass
class BranchOutputs:
    """
    Outputs of one decoder branch for a batch.

    Attributes:
        mask_logits (torch.Tensor): [N, 2, H, W]
        boundary_logits (Optional[torch.Tensor]): [N, 1, H, W], None without SCM or at inference
        embeddings (Optional[torch.Tensor]): [N, w*h, d], pre-normalization
    """

    mask_logits: torch.Tensor
    boundary_logits: Optional[torch.Tensor] = None
    embeddings: Optional[torch.Tensor] = None


@dataclass
class ForwardResult:
    """
    Result of a forward pass.

    Attributes:
        teeth (Optional[BranchOutputs]): Teeth branch (None for the UNet baseline)
        plaque (Optional[BranchOutputs]): Plaque branch (None for the UNet baseline)
        joint_logits (Optional[torch.Tensor]): [N, 3, H, W] for the UNet baseline
        bottleneck (Optional[torch.Tensor]): Shared encoder output F
    """

    teeth: Optional[BranchOutputs] = None
    plaque: Optional[BranchOutputs] = None
    joint_logits: Optional[torch.Tensor] = None
    bottleneck: Optional[torch.Tensor] = None

    @property
    def decomposed(self) -> bool:
        return self.joint_logits is None


class ConvBlock(nn.Sequential):
    """Two 3x3 size-preserving convolutions, each followed by ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )


class SharedEncoder(nn.Module):
    """
    Five convolution blocks with 2x2 max pooling after the first four.
    """

    def __init__(self, channels: Tuple[int, ...], in_channels: int = 3):
        super().__init__()
        widths = (in_channels,) + tuple(channels)
        self.blocks = nn.ModuleList(ConvBlock(widths[i], widths[i + 1]) for i in range(5))
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        skips = []
        x = images
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index < 4:
                skips.append(x)
                x = self.pool(x)
        return x, skips


class BranchDecoder(nn.Module):
    """
    Branch-entry block followed by four upsampling stages and the output heads.

    Each stage upsamples 2x bilinearly, concatenates the matching encoder skip
    and applies a convolution block that halves the channel count. The mask and
    boundary heads are 1x1 convolutions on the final feature map.
    """

    def __init__(
        self,
        channels: Tuple[int, ...],
        num_classes: int = MASK_HEAD_CLASSES,
        use_skip_connections: bool = True,
        entry_block: bool = True,
        boundary_head: bool = True,
    ):
        super().__init__()
        self.use_skip_connections = use_skip_connections
        self.entry = ConvBlock(channels[4], channels[4]) if entry_block else None

        stages = []
        for level in (3, 2, 1, 0):
            in_channels = channels[level + 1] + (channels[level] if use_skip_connections else 0)
            stages.append(ConvBlock(in_channels, channels[level]))
        self.stages = nn.ModuleList(stages)

        self.mask_head = nn.Conv2d(channels[0], num_classes, kernel_size=1)
        self.boundary_head = nn.Conv2d(channels[0], 1, kernel_size=1) if boundary_head else None

    def forward(
        self,
        bottleneck: torch.Tensor,
        skips: List[torch.Tensor],
        with_boundary: bool = True,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor], Dict[str, torch.Tensor]]:
        """
        Args:
            bottleneck (torch.Tensor): Shared features F
            skips (List[torch.Tensor]): Encoder block outputs 1-4
            with_boundary (bool): Evaluate the boundary head

        Returns:
            Tuple: (mask logits, boundary logits or None, named intermediate features)
        """
        features = dict(self._stages(bottleneck, skips))
        x = features[f"after_f{len(self.stages)}"]
        mask_logits = self.mask_head(x)
        boundary_logits = None
        if with_boundary and self.boundary_head is not None:
            boundary_logits = self.boundary_head(x)
        return mask_logits, boundary_logits, features

    def tap(self, bottleneck: torch.Tensor, skips: List[torch.Tensor], position: str) -> torch.Tensor:
        """Run the decoder only as far as the named intermediate feature."""
        for name, x in self._stages(bottleneck, skips):
            if name == position:
                return x
        raise KeyError(f"Unknown decoder feature '{position}'")

    def _stages(self, bottleneck: torch.Tensor, skips: List[torch.Tensor]) -> Iterator[Tuple[str, torch.Tensor]]:
        if len(skips) != len(self.stages):
            raise RuntimeError(f"Expected {len(self.stages)} skips, got {len(skips)}")

        x = self.entry(bottleneck) if self.entry is not None else bottleneck
        yield "entry", x
        for index, (stage, skip) in enumerate(zip(self.stages, reversed(skips)), start=1):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            if self.use_skip_connections:
                x = torch.cat([x, skip], dim=1)
            x = stage(x)
            yield f"after_f{index}", x


class ProjectionHead(nn.Module):
    """
    Maps a feature map to one embedding per pixel.

    Two 1x1 convolutions reduce C -> C/4 -> C/8, then three per-pixel fully
    connected layers map to the embedding dimension. The final layer is linear.
    """

    def __init__(self, in_channels: int, hidden: Tuple[int, ...], embedding_dim: int):
        super().__init__()
        reduced = in_channels // 8
        self.reduce = nn.Sequential(
            nn.Conv2d(in_channels, in_channels // 4, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_channels // 4, reduced, kernel_size=1),
            nn.ReLU(inplace=True),
        )
        self.mlp = nn.Sequential(
            nn.Linear(reduced, hidden[0]),
            nn.ReLU(inplace=True),
            nn.Linear(hidden[0], hidden[1]),
            nn.ReLU(inplace=True),
            nn.Linear(hidden[1], embedding_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = self.reduce(features)
        x = x.flatten(2).transpose(1, 2)
        return self.mlp(x)


class SDNet(nn.Module):
    """
    Semantic-decomposition network.

    Attributes:
        config (ModelConfig): Architecture settings
        components (frozenset): Enabled ablation components among SD, CCM, SCM
        encoder (SharedEncoder): Shared encoder E_s
        decoders (nn.ModuleDict): Per-branch decoders, or a single 'joint' decoder without SD
        projections (nn.ModuleDict): Per-branch projection heads (CCM only)
    """

    def __init__(self, config: ModelConfig, components: AbstractSet[str] = COMPONENTS):
        super().__init__()
        config.validate()
        validate_components(components)
        self.config = config
        self.components = frozenset(components)

        channels = tuple(config.encoder_channels)
        self.encoder = SharedEncoder(channels)

        if self.decomposed:
            self.decoders = nn.ModuleDict({
                branch: BranchDecoder(
                    channels,
                    num_classes=MASK_HEAD_CLASSES,
                    use_skip_connections=config.use_skip_connections,
                    boundary_head="SCM" in self.components,
                )
                for branch in BRANCHES
            })
        else:
            self.decoders = nn.ModuleDict({
                "joint": BranchDecoder(
                    channels,
                    num_classes=JOINT_HEAD_CLASSES,
                    use_skip_connections=config.use_skip_connections,
                    entry_block=False,
                    boundary_head=False,
                )
            })

        self.projections = nn.ModuleDict()
        if "CCM" in self.components:
            for branch in BRANCHES:
                self.projections[branch] = ProjectionHead(
                    config.projection_channels(), tuple(config.projection_hidden), config.embedding_dim
                )

    @property
    def decomposed(self) -> bool:
        return "SD" in self.components

    def encode(self, images: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """
        Run the shared encoder.

        Args:
            images (torch.Tensor): [N, 3, H, W]

        Returns:
            Tuple: (bottleneck F [N, C5, H/16, W/16], skips of blocks 1-4)
        """
        size = self.config.input_size
        if images.shape[-2:] != (size, size):
            raise ConfigurationError(
                f"Input spatial size {tuple(images.shape[-2:])} does not match input_size {size}"
            )
        return self.encoder(images)

    def decode_branch(
        self,
        bottleneck: torch.Tensor,
        skips: List[torch.Tensor],
        branch: str,
        with_aux: bool = True,
        ccm_stop_gradient: bool = False,
    ) -> BranchOutputs:
        """
        Decode one branch from the shared features.

        Args:
            bottleneck (torch.Tensor): Shared features F
            skips (List[torch.Tensor]): Encoder skips
            branch (str): 'teeth' or 'plaque'
            with_aux (bool): Evaluate boundary and projection heads
            ccm_stop_gradient (bool): Keep embedding gradients out of the encoder

        Returns:
            BranchOutputs: Logits and, when enabled, embeddings
        """
        decoder = self.decoders[branch]
        mask_logits, boundary_logits, features = decoder(bottleneck, skips, with_boundary=with_aux)

        embeddings = None
        if with_aux and branch in self.projections:
            tapped = features[self.config.ccm_position]
            if ccm_stop_gradient:
                tapped = self._features_from_detached(decoder, bottleneck, skips)
            embeddings = self.project_embeddings(tapped, branch)

        return BranchOutputs(mask_logits=mask_logits, boundary_logits=boundary_logits, embeddings=embeddings)

    def _features_from_detached(self, decoder: BranchDecoder, bottleneck, skips) -> torch.Tensor:
        return decoder.tap(bottleneck.detach(), [s.detach() for s in skips], self.config.ccm_position)

    def project_embeddings(self, features: torch.Tensor, branch: str) -> torch.Tensor:
        """
        Args:
            features (torch.Tensor): Branch feature [N, C, h, w]
            branch (str): 'teeth' or 'plaque'

        Returns:
            torch.Tensor: Embedding field [N, h*w, d]
        """
        return self.projections[branch](features)

    def forward(
        self,
        images: torch.Tensor,
        with_aux: bool = True,
        ccm_stop_gradient: bool = False,
    ) -> ForwardResult:
        bottleneck, skips = self.encode(images)
        if not self.decomposed:
            joint_logits, _, _ = self.decoders["joint"](bottleneck, skips, with_boundary=False)
            return ForwardResult(joint_logits=joint_logits, bottleneck=bottleneck)

        outputs = {
            branch: self.decode_branch(bottleneck, skips, branch, with_aux, ccm_stop_gradient)
            for branch in BRANCHES
        }
        return ForwardResult(teeth=outputs["teeth"], plaque=outputs["plaque"], bottleneck=bottleneck)

    def branch_parameters(self, branch: str) -> List[nn.Parameter]:
        """All parameters owned by one branch (decoder and projection head)."""
        params = list(self.decoders[branch].parameters())
        if branch in self.projections:
            params += list(self.projections[branch].parameters())
        return params


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """
    He (fan-in) initialization of convolution and linear weights, zero biases.

    Args:
        model (nn.Module): Model to initialize in place
        seed (int): Seed fully determining the weights

    Returns:
        nn.Module: The same model
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
    return model


def build_model(config: ModelConfig, seed: int = 0, components: AbstractSet[str] = COMPONENTS) -> SDNet:
    model = init_weights(SDNet(config, components), seed)
    logger.info(
        "Built SDNet with components %s: %d parameters",
        sorted(components), count_parameters(model),
    )
    return model


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def parameter_breakdown(model: SDNet) -> Dict[str, int]:
    """Parameter counts of the encoder, each decoder and each projection head."""
    breakdown = {"encoder": count_parameters(model.encoder)}
    for name, decoder in model.decoders.items():
        breakdown[f"decoder_{name}"] = count_parameters(decoder)
    for name, head in model.projections.items():
        breakdown[f"projection_{name}"] = count_parameters(head)
    breakdown["total"] = count_parameters(model)
    return breakdown


AUX_PARAMETER_PREFIXES = ("projections.",)
AUX_PARAMETER_INFIXES = (".boundary_head.",)


def is_auxiliary_key(key: str) -> bool:
    """True for state-dict keys of training-only heads (boundary and projection)."""
    return key.startswith(AUX_PARAMETER_PREFIXES) or any(infix in key for infix in AUX_PARAMETER_INFIXES)
