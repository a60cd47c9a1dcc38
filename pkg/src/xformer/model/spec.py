"""Declarative model description; the defaults encode the XFormer layout."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union


class SpecError(ValueError):
    """An inconsistent model description. ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Mv3Config:
    c_in: int
    c_out: int
    stride: int = 1
    expansion: int = 4
    kernel: int = 3
    se_reduction: int = 4

    @property
    def hidden(self) -> int:
        return self.c_in * self.expansion

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.c_in == self.c_out


@dataclass(frozen=True)
class XfBlockConfig:
    d_emb: int
    d_qkv: int
    mlp_ratio: int
    n_train: int

    @property
    def mlp_hidden(self) -> int:
        return self.d_emb * self.mlp_ratio


@dataclass(frozen=True)
class StageSpec:
    """One stage: a (possibly strided) MV3 block, ``mv3_repeats`` more stride-1
    MV3 blocks, then ``xf_depth`` XF blocks at width ``embed_dim``."""

    out_channels: int
    stride: int = 1
    mv3_repeats: int = 0
    xf_depth: int = 0
    embed_dim: Optional[int] = None
    qkv_dim: Optional[int] = None
    mlp_ratio: Optional[int] = None


DEFAULT_STAGES = (
    StageSpec(32, stride=1),
    StageSpec(64, stride=2, mv3_repeats=2),
    StageSpec(96, stride=2, xf_depth=2, embed_dim=144, qkv_dim=96, mlp_ratio=2),
    StageSpec(128, stride=2, xf_depth=3, embed_dim=192, qkv_dim=96, mlp_ratio=2),
    StageSpec(160, stride=2, xf_depth=4, embed_dim=240, qkv_dim=96, mlp_ratio=3),
)


@dataclass(frozen=True)
class ModelSpec:
    resolution: int = 224
    num_classes: int = 1000
    in_channels: int = 3
    stem_channels: int = 16
    head_channels: int = 640
    patch_size: int = 2
    expansion: int = 4
    se_reduction: int = 4
    attention: str = "xfa"
    mhsa_heads: int = 4
    stages: tuple = field(default=DEFAULT_STAGES)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        positive = ("resolution", "num_classes", "in_channels", "stem_channels", "head_channels",
                    "patch_size", "expansion", "se_reduction", "mhsa_heads")
        for key in positive:
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise SpecError(key, f"must be a positive integer, got {value!r}")
        if self.attention not in ("xfa", "mhsa"):
            raise SpecError("attention", f"must be 'xfa' or 'mhsa', got {self.attention!r}")
        if not self.stages:
            raise SpecError("stages", "at least one stage is required")
        c_in = self.stem_channels
        for i, st in enumerate(self.stages, start=1):
            key = f"stages[{i}]"
            if not isinstance(st, StageSpec):
                raise SpecError(key, "must be a stage description")
            if st.stride not in (1, 2):
                raise SpecError(f"{key}.stride", f"must be 1 or 2, got {st.stride!r}")
            for name in ("out_channels",):
                if not isinstance(getattr(st, name), int) or getattr(st, name) < 1:
                    raise SpecError(f"{key}.{name}", "must be a positive integer")
            if not isinstance(st.mv3_repeats, int) or st.mv3_repeats < 0:
                raise SpecError(f"{key}.mv3_repeats", "must be a non-negative integer")
            if not isinstance(st.xf_depth, int) or st.xf_depth < 0:
                raise SpecError(f"{key}.xf_depth", "must be a non-negative integer")
            for c in (c_in, st.out_channels):
                if (c * self.expansion) % self.se_reduction:
                    raise SpecError("se_reduction", f"expanded width {c * self.expansion} is not divisible by {self.se_reduction}")
            if st.xf_depth:
                for name in ("embed_dim", "qkv_dim", "mlp_ratio"):
                    value = getattr(st, name)
                    if not isinstance(value, int) or value < 1:
                        raise SpecError(f"{key}.{name}", "required (positive integer) when xf_depth > 0")
                if self.attention == "mhsa" and st.qkv_dim % self.mhsa_heads:
                    raise SpecError("mhsa_heads", f"qkv_dim {st.qkv_dim} of stage {i} is not divisible by {self.mhsa_heads}")
            c_in = st.out_channels
        sizes = self.spatial_sizes()
        if sizes[-1] < 1:
            raise SpecError("resolution", f"{self.resolution} is too small for {len(self.stages)} stages")

    def replace(self, **changes) -> "ModelSpec":
        from dataclasses import replace

        return replace(self, **changes)

    # -- derived shapes ------------------------------------------------------
    def spatial_sizes(self, resolution: Optional[int] = None) -> list[int]:
        """Feature-map side length after the stem and after each stage."""
        h = _down(resolution or self.resolution, 2)
        sizes = [h]
        for st in self.stages:
            h = _down(h, st.stride)
            sizes.append(h)
        return sizes

    def tokens(self, side: int) -> int:
        return math.ceil(side / self.patch_size) ** 2

    def stage_blocks(self) -> list[list[Union[Mv3Config, XfBlockConfig]]]:
        """Concrete block configs per stage, with ``n_train`` taken at ``resolution``."""
        out = []
        c_in = self.stem_channels
        sizes = self.spatial_sizes()
        for i, st in enumerate(self.stages):
            mk = dict(expansion=self.expansion, se_reduction=self.se_reduction)
            blocks: list = [Mv3Config(c_in, st.out_channels, st.stride, **mk)]
            blocks += [Mv3Config(st.out_channels, st.out_channels, 1, **mk) for _ in range(st.mv3_repeats)]
            n = self.tokens(sizes[i + 1])
            blocks += [XfBlockConfig(st.embed_dim, st.qkv_dim, st.mlp_ratio, n) for _ in range(st.xf_depth)]
            out.append(blocks)
            c_in = st.out_channels
        return out


def _down(size: int, stride: int) -> int:
    # 3x3 kernel, padding 1
    return (size + 2 - 3) // stride + 1


def default_spec() -> ModelSpec:
    return ModelSpec()


def toy_spec(resolution: int = 64, num_classes: int = 2) -> ModelSpec:
    """Reduced model used for synthetic training runs."""
    return ModelSpec(
        resolution=resolution,
        num_classes=num_classes,
        stem_channels=8,
        head_channels=64,
        stages=(
            StageSpec(16, stride=1),
            StageSpec(24, stride=2),
            StageSpec(32, stride=2, xf_depth=1, embed_dim=32, qkv_dim=16, mlp_ratio=2),
        ),
    )


def gradcheck_spec() -> ModelSpec:
    """Two-stage model small enough for exhaustive finite differences."""
    return ModelSpec(
        resolution=16,
        num_classes=3,
        stem_channels=4,
        head_channels=8,
        stages=(
            StageSpec(4, stride=1),
            StageSpec(8, stride=2, xf_depth=1, embed_dim=8, qkv_dim=4, mlp_ratio=2),
        ),
    )
