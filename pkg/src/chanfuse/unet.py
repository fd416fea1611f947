"""Four-level U-Net whose skip connections can be copied, dropped or routed
through the channel transformer (CCT) and its decoder-side gate (CCA)."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .cca import CCA, FusionError, fuse
from .cct import CCT
from .config import LEVELS, EncoderFeatures, ModelConfig
from .nn import Conv2d, ConvNormAct, DoubleConv, Module
from .tensor import Tensor

# parameter-name prefixes owned by the plain U-Net (as opposed to cct./cca.)
UNET_NAMESPACE = ("encoder.", "bottleneck.", "up.", "decoder.", "head.")


class SegmentationNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        with T.default_dtype(config.dtype):
            chans = config.channels
            ins = (config.in_channels,) + chans[:3]
            self.encoder = [DoubleConv(rng, ins[i], chans[i]) for i in range(4)]
            self.bottleneck = DoubleConv(rng, chans[3], 2 * chans[3])
            ups = (2 * chans[3],) + chans[:0:-1]  # input width arriving at levels 4,3,2,1
            self.up = [ConvNormAct(rng, ups[3 - i], chans[i]) for i in range(4)]
            self.decoder = [
                DoubleConv(rng, chans[i] * (2 if config.has_skip(i + 1) else 1), chans[i])
                for i in range(4)
            ]
            self.head = Conv2d(rng, chans[0], config.num_classes, 1)
            self.cct = CCT(rng, config) if config.active_query_levels else None
            gated = {i: chans[i - 1] for i in config.ctrans_levels if config.has_skip(i)}
            self.cca = CCA(rng, gated, config.cca_relu) if config.use_cca and gated else None

    def encode(self, image: Tensor) -> EncoderFeatures:
        """Encoder maps E1..E4 (C_i channels, H/2^(i-1)) and the H/16 bottleneck."""
        self.config.check_input(*image.shape[-2:])
        if image.shape[-3] != self.config.in_channels:
            raise T.ShapeError(
                f"image has {image.shape[-3]} channels, model expects {self.config.in_channels}"
            )
        skips = []
        x = image
        for i, block in enumerate(self.encoder):
            x = block(x if i == 0 else T.max_pool2d(x, 2))
            skips.append(x)
        return EncoderFeatures(skips=skips, bottleneck=self.bottleneck(T.max_pool2d(x, 2)))

    def decode(self, bottleneck: Tensor, skips: Sequence[Optional[Tensor]],
               gated_levels: Sequence[int] = ()) -> Tensor:
        """Logits ``[N×]num_classes×H×W``; ``skips[i]`` is None where level i+1 has no skip."""
        x = bottleneck
        for level in (4, 3, 2, 1):
            d = self.up[level - 1](T.upsample_nearest(x, 2))
            skip = skips[level - 1]
            if (skip is not None) != self.config.has_skip(level):
                raise FusionError(
                    f"level {level}: skip {'given' if skip is not None else 'missing'} but "
                    f"decoder was built {'with' if self.config.has_skip(level) else 'without'} one"
                )
            if skip is not None:
                if skip.shape != d.shape:
                    raise FusionError(
                        f"level {level}: skip {skip.shape} does not match decoder {d.shape}"
                    )
                if level in gated_levels:
                    skip = self.cca(level, skip, d)
                x = fuse(skip, d)
            else:
                x = d
            x = self.decoder[level - 1](x)
        return self.head(x)

    def skip_features(self, feats: EncoderFeatures) -> list[Optional[Tensor]]:
        cfg = self.config
        fused = self.cct(feats.skips) if self.cct is not None else {}
        skips: list[Optional[Tensor]] = []
        for level in LEVELS:
            if not cfg.has_skip(level):
                skips.append(None)
            elif level in fused:
                skips.append(fused[level])
            else:
                skips.append(feats.skips[level - 1])
        return skips

    def forward(self, image: Tensor) -> Tensor:
        feats = self.encode(image)
        gated = tuple(lv for lv in LEVELS if self.cca is not None and lv in self.cca)
        return self.decode(feats.bottleneck, self.skip_features(feats), gated)

    def unet_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith(UNET_NAMESPACE)]


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationNet:
    return SegmentationNet(config, seed)
