"""Building blocks, full network assembly and the synthetic training loop."""

from .blocks import (
    Mlp,
    Mv3Block,
    StageBridge,
    XfBlock,
    fold_patches,
    mv3_block,
    unfold_patches,
    vit_stage_bridge,
    xf_block,
)
from .layers import BatchNorm2d, ConvBN, LayerNorm, Linear, SqueezeExcite, se_module
from .spec import (
    ModelSpec,
    Mv3Config,
    SpecError,
    StageSpec,
    XfBlockConfig,
    default_spec,
    gradcheck_spec,
    toy_spec,
)
from .trace import LayerRecord, Tracer
from .xformer import ParamAudit, XFormer, build_xformer, count_params

__all__ = [
    "BatchNorm2d", "ConvBN", "LayerNorm", "Linear", "SqueezeExcite", "se_module",
    "Mlp", "Mv3Block", "StageBridge", "XfBlock", "fold_patches", "unfold_patches",
    "mv3_block", "xf_block", "vit_stage_bridge",
    "ModelSpec", "Mv3Config", "SpecError", "StageSpec", "XfBlockConfig",
    "default_spec", "toy_spec", "gradcheck_spec",
    "LayerRecord", "Tracer", "ParamAudit", "XFormer", "build_xformer", "count_params",
]
