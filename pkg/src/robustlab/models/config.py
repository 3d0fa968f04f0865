"""Model configuration and the ResNet-to-ConvNeXt modification ladder.

A single ModelConfig drives every architecture family here:

  resnet_ladder  parametric residual network whose flags span the whole
                 modernization path from a plain ResNet-50-shaped baseline to
                 the ConvNeXt block form
  convnext       the ladder endpoint; the modernization flags are implied and
                 normalized on construction
  vit            tokens + CLS transformer with learned position embeddings
  xcit           cross-covariance transformer with local patch interaction

embed_dim is the transformer width for vit/xcit and the stage-1 base width for
the convolutional families (64 reproduces ResNet-50 / ConvNeXt-T widths when
width_multiplier is 1.5).
"""

from dataclasses import dataclass, replace

from ..errors import ConfigurationError

FAMILIES = ("resnet_ladder", "vit", "xcit", "convnext")
ACTIVATIONS = ("relu", "gelu")
NORM_KINDS = ("batch", "layer")

_CONVNEXT_FLAGS = dict(
    activation="gelu",
    depthwise_conv=True,
    patchify_stem=True,
    inverted_bottleneck=True,
    reduced_norm_act=True,
    norm_kind="layer",
    separate_downsample=True,
)


@dataclass(frozen=True)
class ModelConfig:
    family: str = "resnet_ladder"
    stage_blocks: tuple = (3, 4, 6, 3)
    activation: str = "relu"
    depthwise_conv: bool = False
    width_multiplier: float = 1.5
    patchify_stem: bool = False
    inverted_bottleneck: bool = False
    reduced_norm_act: bool = False
    norm_kind: str = "batch"
    separate_downsample: bool = False
    layer_scale: float = None
    token_size: int = 8
    num_heads: int = 4
    embed_dim: int = 96
    input_size: tuple = (3, 32, 32)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(self.stage_blocks))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.family not in FAMILIES:
            raise ConfigurationError(
                f"unknown family {self.family!r}, expected one of {FAMILIES}"
            )
        if self.family == "convnext":
            # the endpoint implies the whole flag set; normalize so that equal
            # networks have equal configs
            for k, v in _CONVNEXT_FLAGS.items():
                object.__setattr__(self, k, v)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigurationError(f"unknown norm_kind {self.norm_kind!r}")
        if len(self.stage_blocks) != 4 or any(
            not isinstance(b, int) or b < 1 for b in self.stage_blocks
        ):
            raise ConfigurationError(
                f"stage_blocks must be 4 positive integers, got {self.stage_blocks}"
            )
        if len(self.input_size) != 3 or any(s < 1 for s in self.input_size):
            raise ConfigurationError(f"bad input_size {self.input_size}")
        for name in ("token_size", "num_heads", "embed_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.width_multiplier <= 0:
            raise ConfigurationError("width_multiplier must be > 0")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        _, h, w = self.input_size
        if self.family in ("vit", "xcit") or self.patchify_stem:
            if h % self.token_size or w % self.token_size:
                raise ConfigurationError(
                    f"input {h}x{w} not divisible by token_size {self.token_size}"
                )
        if self.inverted_bottleneck and not self.depthwise_conv:
            raise ConfigurationError(
                "flag conflict: inverted_bottleneck requires depthwise_conv"
            )
        if self.reduced_norm_act and not self.inverted_bottleneck:
            raise ConfigurationError(
                "flag conflict: reduced_norm_act requires inverted_bottleneck"
            )
        if self.layer_scale is not None:
            if self.layer_scale <= 0:
                raise ConfigurationError("layer_scale must be > 0 when set")
            if self.family in ("resnet_ladder", "convnext") and not self.inverted_bottleneck:
                raise ConfigurationError(
                    "flag conflict: layer_scale on the conv ladder requires "
                    "inverted_bottleneck (the ConvNeXt block form)"
                )

    def to_dict(self):
        return {
            "family": self.family,
            "stage_blocks": list(self.stage_blocks),
            "activation": self.activation,
            "depthwise_conv": self.depthwise_conv,
            "width_multiplier": self.width_multiplier,
            "patchify_stem": self.patchify_stem,
            "inverted_bottleneck": self.inverted_bottleneck,
            "reduced_norm_act": self.reduced_norm_act,
            "norm_kind": self.norm_kind,
            "separate_downsample": self.separate_downsample,
            "layer_scale": self.layer_scale,
            "token_size": self.token_size,
            "num_heads": self.num_heads,
            "embed_dim": self.embed_dim,
            "input_size": list(self.input_size),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "stage_blocks" in d:
            d["stage_blocks"] = tuple(int(b) for b in d["stage_blocks"])
        if "input_size" in d:
            d["input_size"] = tuple(int(s) for s in d["input_size"])
        return cls(**d)


LADDER_STEP_NAMES = (
    "stage_ratio",
    "gelu",
    "depthwise_width",
    "patchify_stem",
    "inverted_bottleneck",
    "fewer_act_norm",
    "layernorm",
    "separate_downsample",
    "layer_scale",
)

_STEP_FIELDS = {
    "stage_ratio": {"stage_blocks": (3, 3, 9, 3)},
    "gelu": {"activation": "gelu"},
    "depthwise_width": {"depthwise_conv": True},
    "patchify_stem": {"patchify_stem": True},
    "inverted_bottleneck": {"inverted_bottleneck": True},
    "fewer_act_norm": {"reduced_norm_act": True},
    "layernorm": {"norm_kind": "layer"},
    "separate_downsample": {"separate_downsample": True},
    "layer_scale": {"layer_scale": 1e-6},
}


@dataclass(frozen=True)
class LadderStep:
    """One named architecture modification. Applying a step twice equals
    applying it once (each step pins its fields to fixed values)."""

    name: str

    def __post_init__(self):
        if self.name not in LADDER_STEP_NAMES:
            raise ConfigurationError(
                f"unknown ladder step {self.name!r}, expected one of {LADDER_STEP_NAMES}"
            )

    @property
    def fields(self):
        return dict(_STEP_FIELDS[self.name])


def apply_ladder_step(config, step):
    """Return config with exactly the step's fields changed.

    Steps apply to the conv ladder (and layer_scale also to the convnext
    endpoint); the resulting config is re-validated, so inconsistent flag
    combinations fail here with the conflicting flags named.
    """
    if isinstance(step, str):
        step = LadderStep(step)
    if config.family not in ("resnet_ladder", "convnext"):
        raise ConfigurationError(
            f"ladder step {step.name!r} does not apply to family {config.family!r}"
        )
    if config.family == "convnext" and step.name != "layer_scale":
        raise ConfigurationError(
            f"only the layer_scale step applies to the convnext endpoint, got {step.name!r}"
        )
    return replace(config, **step.fields)


def list_ladder(input_size=(3, 32, 32), embed_dim=32, num_classes=10,
                token_size=8):
    """The 16 modification-ladder rows, top to bottom, as (name, config).

    The first part holds the baseline plus 7 independent modifications, the
    second the cumulative path from the modified baseline (repeated as its own
    row) to the full block form, the last the two endpoint rows. Defaults are
    desk scale; pass input_size=(3,224,224), embed_dim=64 for the full-size
    geometry.
    """
    base = ModelConfig(
        family="resnet_ladder",
        input_size=input_size,
        embed_dim=embed_dim,
        num_classes=num_classes,
        token_size=token_size,
    )
    a = apply_ladder_step
    patchify = a(base, "patchify_stem")
    patchify_gelu = a(patchify, "gelu")
    modified = a(patchify_gelu, "depthwise_width")
    c10 = a(modified, "stage_ratio")
    c11 = a(c10, "inverted_bottleneck")
    c12 = a(c11, "fewer_act_norm")
    c13 = a(c12, "layernorm")
    c14 = a(c13, "separate_downsample")
    c15 = replace(c14, family="convnext")
    return [
        ("ResNet-50", base),
        ("3:3:9:3 stage ratio", a(base, "stage_ratio")),
        ("ReLU -> GELU", a(base, "gelu")),
        ("depth-wise conv. with increased width", a(base, "depthwise_width")),
        ("patchify stem", patchify),
        (
            "patchify stem + depth-wise conv. with increased width",
            a(patchify, "depthwise_width"),
        ),
        ("patchify stem + GELU", patchify_gelu),
        ("patchify stem + GELU + depth-wise conv. with increased width", modified),
        (
            "ResNet-50 + patchify stem + GELU + depth-wise conv. with increased width",
            modified,
        ),
        ("+ 3:3:9:3 stage ratio", c10),
        ("+ inverted bottleneck", c11),
        ("+ fewer activations and normalizations", c12),
        ("+ BatchNorm -> LayerNorm", c13),
        ("+ move downsampling to a separate layer", c14),
        ("ConvNeXt-T without Layer Scale", c15),
        ("ConvNeXt-T", a(c15, "layer_scale")),
    ]
