"""Multi-stage backbone assembling the feature pyramid.

F1 = stage(F0); F2..F4 follow stride-2 downsamples of the previous level;
F3 and F4 are upsampled back to F2's resolution, concatenated with F2,
fused by a 1x1 conv, and upsampled once more to the input resolution (F5).
Each stage is a CSG, or a plain HSB chain when the cross-stage split is
disabled (the ablation baseline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import CsgConfig, CsgParams, HsbConfig, HsbParams, csg_forward, hsb_forward, init_csg_params, init_hsb_params, _conv_param
from .errors import ConfigurationError

Array = np.ndarray


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 64
    stages: int = 4
    csg_enabled: bool = True
    hsb_layers: int = 2
    split_fraction: float = 0.5
    hsb: HsbConfig | None = None  # template; channels derived per context

    def __post_init__(self):
        # the pyramid contract enumerates F1..F4 plus the fused F5
        if self.stages != 4:
            raise ConfigurationError(f"backbone requires exactly 4 stages, got {self.stages}")

    def hsb_cfg(self, channels: int) -> HsbConfig:
        template = self.hsb
        if template is None:
            return HsbConfig(channels=channels)
        return HsbConfig(
            channels=channels,
            reduction_ratio=template.reduction_ratio,
            dw_kernel=template.dw_kernel,
            local_conv=template.local_conv,
            residual=template.residual,
            attention=template.attention,
            attention_alt_residual=template.attention_alt_residual,
            se_reduction=template.se_reduction,
            state_dim=template.state_dim,
        )


@dataclass
class StageParams:
    csg: CsgParams | None
    plain: tuple[HsbParams, ...] | None

    def params(self) -> list[T.Param]:
        if self.csg is not None:
            return self.csg.params()
        out: list[T.Param] = []
        for h in self.plain:
            out.extend(h.params())
        return out


@dataclass
class BackboneParams:
    stages: tuple[StageParams, ...]
    down_convs: tuple[tuple[T.Param, T.Param], ...]  # stride-2 3x3 between stages
    lateral_f3: tuple[T.Param, T.Param]  # 1x1 after x2 upsample of F3
    lateral_f4: tuple[T.Param, T.Param]  # 1x1 after x4 upsample of F4
    fuse: tuple[T.Param, T.Param]  # 1x1, 3C -> C
    final_up: tuple[T.Param, T.Param]  # 1x1 after the last x2 upsample

    def params(self) -> list[T.Param]:
        out: list[T.Param] = []
        for s in self.stages:
            out.extend(s.params())
        for w, b in self.down_convs:
            out.extend([w, b])
        for w, b in (self.lateral_f3, self.lateral_f4, self.fuse, self.final_up):
            out.extend([w, b])
        return out


@dataclass
class FeaturePyramid:
    f1: T.Tensor
    f2: T.Tensor
    f3: T.Tensor
    f4: T.Tensor
    f5: T.Tensor


def validate_grid_for_backbone(x_cells: int, y_cells: int) -> None:
    if x_cells % 8 != 0 or y_cells % 8 != 0:
        raise ConfigurationError(
            f"grid {x_cells}x{y_cells} must be divisible by 8 (three stride-2 downsamples)"
        )


def init_backbone_params(rng: np.random.Generator, cfg: BackboneConfig, dtype=np.float32, name: str = "backbone") -> BackboneParams:
    c = cfg.channels
    stages = []
    for i in range(cfg.stages):
        if cfg.csg_enabled:
            csg_cfg = CsgConfig(channels=c, split_fraction=cfg.split_fraction, hsb_layers=cfg.hsb_layers)
            hsb_cfg = cfg.hsb_cfg(csg_cfg.branch_channels)
            stages.append(StageParams(csg=init_csg_params(rng, csg_cfg, hsb_cfg, dtype, name=f"{name}.stage{i}.csg"), plain=None))
        else:
            hsb_cfg = cfg.hsb_cfg(c)
            plain = tuple(
                init_hsb_params(rng, hsb_cfg, dtype, name=f"{name}.stage{i}.hsb{j}") for j in range(cfg.hsb_layers)
            )
            stages.append(StageParams(csg=None, plain=plain))
    down_convs = tuple(
        _conv_param(rng, f"{name}.down{i}", c, c, 3, dtype) for i in range(cfg.stages - 1)
    )
    return BackboneParams(
        stages=tuple(stages),
        down_convs=down_convs,
        lateral_f3=_conv_param(rng, f"{name}.lateral_f3", c, c, 1, dtype),
        lateral_f4=_conv_param(rng, f"{name}.lateral_f4", c, c, 1, dtype),
        fuse=_conv_param(rng, f"{name}.fuse", c, 3 * c, 1, dtype),
        final_up=_conv_param(rng, f"{name}.final_up", c, c, 1, dtype),
    )


def _stage_forward(x, cfg: BackboneConfig, stage: StageParams, engine: str, zoh_exact: bool, chunk_size: int):
    c = cfg.channels
    if stage.csg is not None:
        csg_cfg = CsgConfig(channels=c, split_fraction=cfg.split_fraction, hsb_layers=cfg.hsb_layers)
        return csg_forward(x, csg_cfg, cfg.hsb_cfg(csg_cfg.branch_channels), stage.csg,
                           engine=engine, zoh_exact=zoh_exact, chunk_size=chunk_size)
    hsb_cfg = cfg.hsb_cfg(c)
    for hsb_params in stage.plain:
        x = hsb_forward(x, hsb_cfg, hsb_params, engine=engine, zoh_exact=zoh_exact, chunk_size=chunk_size)
    return x


def backbone_forward(
    f0,
    cfg: BackboneConfig,
    params: BackboneParams,
    engine: str = "parallel",
    zoh_exact: bool = True,
    chunk_size: int = 0,
) -> FeaturePyramid:
    """F0 (C, X, Y) -> pyramid with F5 back at (C, X, Y)."""
    t0 = T.as_tensor(f0)
    _, x_cells, y_cells = t0.shape
    validate_grid_for_backbone(x_cells, y_cells)

    f1 = _stage_forward(t0, cfg, params.stages[0], engine, zoh_exact, chunk_size)
    levels = [f1]
    x = f1
    for i in range(1, cfg.stages):
        w, b = params.down_convs[i - 1]
        x = T.conv2d(x, w, b, stride=2, padding=1)
        x = _stage_forward(x, cfg, params.stages[i], engine, zoh_exact, chunk_size)
        levels.append(x)
    f1, f2, f3, f4 = levels

    f3_up = T.conv2d(T.nearest_upsample_2x(f3), *params.lateral_f3)
    f4_up = T.conv2d(T.nearest_upsample_2x(T.nearest_upsample_2x(f4)), *params.lateral_f4)
    fused = T.conv2d(T.concat([f2, f3_up, f4_up], axis=0), *params.fuse)
    f5 = T.conv2d(T.nearest_upsample_2x(fused), *params.final_up)
    return FeaturePyramid(f1=f1, f2=f2, f3=f3, f4=f4, f5=f5)
