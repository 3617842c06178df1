"""Segmentation networks and the optical/map fusion rules.

* :class:`MiniSegNet` -- encoder/decoder with index-based unpooling.
* :class:`OSMNet` -- two-layer FCN turning map rasters into class scores.
* :class:`FuseNetMini` -- dual encoder, ancillary activations summed into
  the main branch after every block.
* :class:`ResidualCorrectionPipeline` -- average of the SegNet and OSMNet
  scores plus a learned three-layer correction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .nn import Conv2d, ConvStack, Module
from .tensor import Tensor, add, bilinear_resize, concat, maxpool2x2_with_indices, relu, scale, unpool_with_indices

MODEL_KINDS = ("segnet", "osmnet", "average", "rescorr", "fusenet")
DEFAULT_WIDTHS = (16, 32, 64)


class _Seeds:
    """Hands out independent child seeds for parameter initialisation."""

    def __init__(self, seed):
        self._seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)

    def take(self, n: int = 1):
        kids = self._seq.spawn(n)
        return kids if n > 1 else kids[0]


class Encoder(Module):
    """Stack of conv blocks; ``blocks[i]`` outputs ``widths[i]`` channels."""

    def __init__(self, in_ch: int, widths: Sequence[int], seeds: _Seeds, batchnorm: bool = True):
        chans = [in_ch, *widths]
        self.blocks = [ConvStack(chans[i], chans[i + 1], chans[i + 1], seeds.take(2), batchnorm)
                       for i in range(len(widths))]


class Decoder(Module):
    """Mirror of the encoder; block ``j`` undoes encoder block ``B-1-j``."""

    def __init__(self, widths: Sequence[int], n_blocks: int, seeds: _Seeds, batchnorm: bool = True):
        self.blocks = []
        depth = len(widths)
        for j in range(n_blocks):
            level = depth - 1 - j
            out = widths[level - 1] if level > 0 else widths[0]
            self.blocks.append(ConvStack(widths[level], widths[level], out, seeds.take(2), batchnorm))

    def forward(self, x: Tensor, pools: list) -> Tensor:
        depth = len(pools)
        for j, block in enumerate(self.blocks):
            indices = pools[depth - 1 - j]
            x = unpool_with_indices(x, indices, indices.in_hw)
            x = block(x)
        return x


class MiniSegNet(Module):
    """Encoder-decoder FCN; unpooling reuses the encoder's argmax indices.

    ``decoder_trunc`` removes that many of the highest-resolution decoder
    blocks, so scores come out at ``input / 2**decoder_trunc``.
    """

    def __init__(self, in_channels: int, num_classes: int, widths=DEFAULT_WIDTHS,
                 decoder_trunc: int = 0, batchnorm: bool = True, seed=0):
        widths = tuple(int(w) for w in widths)
        if not 0 <= decoder_trunc <= len(widths):
            raise ValueError("decoder_trunc must lie in [0, number of blocks]")
        seeds = _Seeds(seed)
        self.widths = widths
        self.decoder_trunc = decoder_trunc
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.encoder = Encoder(in_channels, widths, seeds, batchnorm)
        self.decoder = Decoder(widths, len(widths) - decoder_trunc, seeds, batchnorm)
        feat = self.feature_channels
        self.classifier = Conv2d(feat, num_classes, 3, seeds.take())
        self.last_features: Tensor | None = None

    @property
    def feature_channels(self) -> int:
        n_dec = len(self.widths) - self.decoder_trunc
        if n_dec == 0:
            return self.widths[-1]
        level = len(self.widths) - n_dec
        return self.widths[level - 1] if level > 0 else self.widths[0]

    @property
    def output_stride(self) -> int:
        return 2 ** self.decoder_trunc

    def check_input(self, x: Tensor, channels: int) -> None:
        if x.data.ndim != 4 or x.shape[1] != channels:
            raise DimensionError(f"expected N x {channels} x H x W input, got {x.shape}")
        factor = 2 ** len(self.widths)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(f"spatial dims {x.shape[2:]} not divisible by {factor}")

    def encode(self, x: Tensor):
        pools = []
        for block in self.encoder.blocks:
            x, idx = maxpool2x2_with_indices(block(x))
            pools.append(idx)
        return x, pools

    def decode(self, x: Tensor, pools) -> Tensor:
        z = self.decoder(x, pools)
        self.last_features = z
        return self.classifier(z)

    def forward(self, image: Tensor) -> Tensor:
        """Pre-softmax scores; ``last_features`` holds the decoder output Z_opt."""
        self.check_input(image, self.in_channels)
        x, pools = self.encode(image)
        return self.decode(x, pools)

    def forward_with_features(self, image: Tensor) -> tuple[Tensor, Tensor]:
        scores = self.forward(image)
        return scores, self.last_features


class OSMNet(Module):
    """conv -> ReLU -> conv, same padding, full resolution."""

    def __init__(self, in_channels: int, num_classes: int, hidden: int = 32, seed=0):
        seeds = _Seeds(seed)
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.conv1 = Conv2d(in_channels, hidden, 3, seeds.take())
        self.conv2 = Conv2d(hidden, num_classes, 3, seeds.take())

    @property
    def feature_channels(self) -> int:
        return self.conv1.weight.shape[0]

    def forward_with_features(self, layers: Tensor) -> tuple[Tensor, Tensor]:
        if layers.data.ndim != 4 or layers.shape[1] != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} map channels, got {layers.shape}")
        z = relu(self.conv1(layers))
        return self.conv2(z), z

    def forward(self, layers: Tensor) -> Tensor:
        return self.forward_with_features(layers)[0]


def fuse_average(scores_opt: Tensor, scores_osm: Tensor) -> Tensor:
    """Mean of two pre-softmax score maps."""
    if scores_opt.shape != scores_osm.shape:
        raise DimensionError(f"score shapes differ: {scores_opt.shape} vs {scores_osm.shape}")
    return scale(add(scores_opt, scores_osm), 0.5)


def fuse_residual(scores_avg: Tensor, z_opt: Tensor, z_osm: Tensor, corrector: "Corrector") -> Tensor:
    """``scores_avg + corrector(concat(z_opt, z_osm))``.

    ``z_osm`` is bilinearly resized onto ``z_opt``'s grid when they differ.
    """
    if z_osm.shape[2:] != z_opt.shape[2:]:
        z_osm = bilinear_resize(z_osm, z_opt.shape[2:])
    if corrector.in_channels != z_opt.shape[1] + z_osm.shape[1]:
        raise DimensionError("corrector input channels do not match the feature maps")
    correction = corrector(concat([z_opt, z_osm], axis=1))
    if correction.shape != scores_avg.shape:
        raise DimensionError(f"correction {correction.shape} vs average {scores_avg.shape}")
    return add(scores_avg, correction)


class Corrector(Module):
    """Three 3x3 convolutions, no normalisation: features -> K residual scores."""

    def __init__(self, in_channels: int, num_classes: int, widths=(32, 32), seed=0):
        seeds = _Seeds(seed)
        chans = [in_channels, *widths, num_classes]
        self.in_channels = in_channels
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, seeds.take()) for i in range(len(chans) - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = relu(x)
        return x


def _match(scores: Tensor, hw) -> Tensor:
    return scores if scores.shape[2:] == tuple(hw) else bilinear_resize(scores, hw)


class AveragePipeline(Module):
    """SegNet and OSMNet trained jointly, scores averaged."""

    def __init__(self, in_channels: int, map_channels: int, num_classes: int,
                 widths=DEFAULT_WIDTHS, decoder_trunc: int = 0, batchnorm: bool = True, seed=0):
        seeds = _Seeds(seed)
        self.segnet = MiniSegNet(in_channels, num_classes, widths, decoder_trunc, batchnorm, seeds.take())
        self.osmnet = OSMNet(map_channels, num_classes, seed=seeds.take())

    def branches(self, image: Tensor, layers: Tensor):
        s_opt, z_opt = self.segnet.forward_with_features(image)
        s_osm, z_osm = self.osmnet.forward_with_features(layers)
        return s_opt, z_opt, _match(s_osm, s_opt.shape[2:]), z_osm

    def forward(self, image: Tensor, layers: Tensor) -> Tensor:
        s_opt, _, s_osm, _ = self.branches(image, layers)
        return fuse_average(s_opt, s_osm)


class ResidualCorrectionPipeline(AveragePipeline):
    """Averaged prediction refined by a residual corrector on both feature maps."""

    def __init__(self, in_channels: int, map_channels: int, num_classes: int,
                 widths=DEFAULT_WIDTHS, decoder_trunc: int = 0, batchnorm: bool = True, seed=0):
        seeds = _Seeds(seed)
        super().__init__(in_channels, map_channels, num_classes, widths, decoder_trunc, batchnorm, seeds.take())
        c_in = self.segnet.feature_channels + self.osmnet.feature_channels
        self.corrector = Corrector(c_in, num_classes, seed=seeds.take())

    def forward(self, image: Tensor, layers: Tensor) -> Tensor:
        s_opt, z_opt, s_osm, z_osm = self.branches(image, layers)
        return fuse_residual(fuse_average(s_opt, s_osm), z_opt, z_osm, self.corrector)


class FuseNetMini(Module):
    """Dual-encoder network; ancillary block outputs are summed into the main branch.

    Summation happens after each block's conv stack and before pooling, and
    the decoder unpools with the main branch's indices.
    """

    def __init__(self, in_channels: int, map_channels: int, num_classes: int,
                 widths=DEFAULT_WIDTHS, decoder_trunc: int = 0, batchnorm: bool = True, seed=0):
        seeds = _Seeds(seed)
        # the main branch is seeded exactly like a MiniSegNet with the same seed
        self.main = MiniSegNet(in_channels, num_classes, widths, decoder_trunc, batchnorm, seeds.take())
        self.ancillary = Encoder(map_channels, widths, _Seeds(seeds.take()), batchnorm)
        self.map_channels = map_channels

    @property
    def last_features(self) -> Tensor | None:
        return self.main.last_features

    def forward(self, image: Tensor, layers: Tensor) -> Tensor:
        self.main.check_input(image, self.main.in_channels)
        if layers.data.ndim != 4 or layers.shape[1] != self.map_channels:
            raise DimensionError(f"expected {self.map_channels} map channels, got {layers.shape}")
        if layers.shape[2:] != image.shape[2:] or layers.shape[0] != image.shape[0]:
            raise DimensionError("image and map layers must share batch and spatial dims")
        x_opt, x_osm = image, layers
        pools = []
        for main_block, anc_block in zip(self.main.encoder.blocks, self.ancillary.blocks):
            a_osm = anc_block(x_osm)
            fused = add(main_block(x_opt), a_osm)
            x_opt, idx = maxpool2x2_with_indices(fused)
            x_osm, _ = maxpool2x2_with_indices(a_osm)
            pools.append(idx)
        return self.main.decode(x_opt, pools)


# ------------------------------------------------------------------ building


@dataclass
class ArchSpec:
    """Architecture descriptor stored next to checkpoints."""

    kind: str
    in_channels: int
    map_channels: int
    num_classes: int
    widths: list = field(default_factory=lambda: list(DEFAULT_WIDTHS))
    decoder_trunc: int = 0
    batchnorm: bool = True
    encoding: str = "binary"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        self.widths = [int(w) for w in self.widths]

    @property
    def uses_image(self) -> bool:
        return self.kind != "osmnet"

    @property
    def uses_layers(self) -> bool:
        return self.kind != "segnet"

    @property
    def output_stride(self) -> int:
        return 1 if self.kind == "osmnet" else 2 ** self.decoder_trunc

    @property
    def size_multiple(self) -> int:
        return 1 if self.kind == "osmnet" else 2 ** len(self.widths)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls(**json.loads(text))


def build_model(spec: ArchSpec) -> Module:
    common = dict(widths=spec.widths, decoder_trunc=spec.decoder_trunc,
                  batchnorm=spec.batchnorm, seed=spec.seed)
    if spec.kind == "segnet":
        return MiniSegNet(spec.in_channels, spec.num_classes, **common)
    if spec.kind == "osmnet":
        return OSMNet(spec.map_channels, spec.num_classes, seed=spec.seed)
    if spec.kind == "average":
        return AveragePipeline(spec.in_channels, spec.map_channels, spec.num_classes, **common)
    if spec.kind == "rescorr":
        return ResidualCorrectionPipeline(spec.in_channels, spec.map_channels, spec.num_classes, **common)
    return FuseNetMini(spec.in_channels, spec.map_channels, spec.num_classes, **common)


def encoder_modules(model: Module) -> list[Module]:
    """Encoders whose learning rate is scaled relative to the rest of the model."""
    if isinstance(model, MiniSegNet):
        return [model.encoder]
    if isinstance(model, FuseNetMini):
        return [model.main.encoder, model.ancillary]
    if isinstance(model, AveragePipeline):
        return [model.segnet.encoder]
    return []


def run_model(model: Module, spec: ArchSpec, image: np.ndarray | None, layers: np.ndarray | None) -> Tensor:
    """Dispatch a forward pass according to which inputs the model consumes."""
    if spec.kind == "segnet":
        return model(Tensor(image))
    if spec.kind == "osmnet":
        return model(Tensor(layers))
    return model(Tensor(image), Tensor(layers))
