"""Architecture description shared by the backbone, CCT and CCA."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

LEVELS = (1, 2, 3, 4)
SKIP_MODES = ("copy", "none", "ctrans")


class ConfigError(ValueError):
    """An invalid or inconsistent configuration."""


def parse_levels(value) -> tuple[int, ...]:
    """Accept ``(2, 3, 4)``, ``"234"``, ``"2,3,4"`` or ``"Q234"``."""
    if isinstance(value, str):
        text = value.strip().lstrip("QqKk").replace(",", "").replace(" ", "")
        if text in ("", "-", "none"):
            return ()
        try:
            value = [int(ch) for ch in text]
        except ValueError as exc:
            raise ConfigError(f"cannot parse level list {value!r}") from exc
    levels = tuple(sorted(set(int(v) for v in value)))
    if any(v not in LEVELS for v in levels):
        raise ConfigError(f"levels must be drawn from 1..4, got {levels}")
    return levels


def parse_skip_modes(value) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [v.strip() for v in value.replace(",", " ").split()]
    modes = tuple(value)
    if len(modes) == 1:
        modes = modes * 4
    if len(modes) != 4 or any(m not in SKIP_MODES for m in modes):
        raise ConfigError(f"skip_modes needs four entries from {SKIP_MODES}, got {modes}")
    return modes


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_channels: int = 16
    image_size: int = 64
    patch_size: int = 8
    heads: int = 4
    cct_layers: int = 4
    skip_modes: tuple[str, ...] = ("ctrans",) * 4
    query_levels: tuple[int, ...] = LEVELS
    key_levels: tuple[int, ...] = LEVELS
    use_cct: bool = True
    use_cca: bool = True
    cca_relu: bool = False
    pos_embed: bool = True
    mlp_ratio: int = 4
    # residual added to the attention output: head-mean of projected queries or raw tokens
    residual_source: str = "projected"
    # what a ctrans level outside query_levels feeds the decoder: "copy" or "none"
    unqueried_skip: str = "copy"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "skip_modes", parse_skip_modes(self.skip_modes))
        object.__setattr__(self, "query_levels", parse_levels(self.query_levels))
        object.__setattr__(self, "key_levels", parse_levels(self.key_levels))
        self.validate()

    @classmethod
    def plain(cls, skip_modes="copy", **kw) -> ModelConfig:
        return cls(skip_modes=skip_modes, **kw)

    @classmethod
    def ctrans(cls, **kw) -> ModelConfig:
        kw.setdefault("skip_modes", "ctrans")
        return cls(**kw)

    def with_(self, **kw) -> ModelConfig:
        return replace(self, **kw)

    @property
    def channels(self) -> tuple[int, int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    @property
    def mode(self) -> str:
        return "ctrans" if "ctrans" in self.skip_modes else "plain"

    @property
    def ctrans_levels(self) -> tuple[int, ...]:
        return tuple(i for i in LEVELS if self.skip_modes[i - 1] == "ctrans")

    @property
    def active_query_levels(self) -> tuple[int, ...]:
        """Levels whose skip is produced by the transformer."""
        if not self.use_cct:
            return ()
        return tuple(i for i in self.ctrans_levels if i in self.query_levels)

    def patch_size_at(self, level: int) -> int:
        return self.patch_size // 2 ** (level - 1)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid**2

    def has_skip(self, level: int) -> bool:
        mode = self.skip_modes[level - 1]
        if mode == "copy":
            return True
        if mode == "none":
            return False
        if level in self.active_query_levels:
            return True
        return not self.use_cct or self.unqueried_skip == "copy"

    def validate(self) -> None:
        if self.in_channels < 1 or self.num_classes < 2 or self.base_channels < 1:
            raise ConfigError("in_channels >= 1, num_classes >= 2 and base_channels >= 1 required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.residual_source not in ("projected", "tokens"):
            raise ConfigError(f"residual_source must be 'projected' or 'tokens', got {self.residual_source!r}")
        if self.unqueried_skip not in ("copy", "none"):
            raise ConfigError(f"unqueried_skip must be 'copy' or 'none', got {self.unqueried_skip!r}")
        if self.image_size % 16:
            raise ConfigError(f"image size {self.image_size} must be divisible by 16 (four 2x poolings)")
        if self.mode == "ctrans" and self.use_cct:
            if not self.query_levels or not self.key_levels:
                raise ConfigError("query_levels and key_levels must be nonempty when a skip uses ctrans")
            if self.heads < 1 or self.cct_layers < 1 or self.mlp_ratio < 1:
                raise ConfigError("heads, cct_layers and mlp_ratio must be positive")
            if self.patch_size % 8 or self.patch_size < 8:
                raise ConfigError(f"patch size {self.patch_size} must be a positive multiple of 8")
            if self.image_size % self.patch_size:
                raise ConfigError(
                    f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
                )

    def check_input(self, height: int, width: int) -> None:
        if height % 16 or width % 16:
            raise ConfigError(f"input {height}×{width} is not divisible by 16")
        if self.active_query_levels or (self.use_cct and self.mode == "ctrans"):
            if height % self.patch_size or width % self.patch_size:
                raise ConfigError(
                    f"input {height}×{width} is not divisible by patch size {self.patch_size}"
                )
            if self.pos_embed and (height, width) != (self.image_size, self.image_size):
                raise ConfigError(
                    f"input {height}×{width} does not match image_size {self.image_size} "
                    "required by the positional embeddings"
                )


@dataclass
class EncoderFeatures:
    skips: list = field(default_factory=list)  # E1..E4
    bottleneck: Optional[object] = None
