"""ROI-conditioned classifiers over a miniature pre-activation ResNet.

Architecture (``BackboneConfig`` defaults in brackets)::

    image (C x H x W)
      stem      3x3 conv [16] -> BN -> ReLU               <- merge site "stem"
      stage 1   blocks x basic block, stride 1 [16]
                                                          <- merge site "stage2_in"
      stage 2   first block stride 2 + 2x2/s2 projection [32]
                                                          <- merge site "stage3_in"
      stage 3   first block stride 2 + 2x2/s2 projection [64]
      head      BN -> ReLU -> global average pool -> linear

Merge points map onto those sites as follows:

    ==============  ===================================  ================
    MergePoint      sites                                ResNet50 analogue
    ==============  ===================================  ================
    FIRST_LAYER     stem                                 first layer
    THIRD_BLOCK     stage3_in                            third ResNet block
    ALL_BLOCKS      stem, stage2_in, stage3_in           every ResNet block
    ==============  ===================================  ================

Downsampling blocks use a 4x4 stride-2 convolution (padding 1) and a 2x2
stride-2 projection so that every output size is exact for even inputs.

Each soft-attention site owns one side-branch convolution (1 -> C channels,
3x3, padding 1) applied to the ROI mask after block-mean resizing to the
site's resolution.  Whether "first layer" of a full ResNet50 sits before or
after the max-pool that follows conv1 has no analogue here: the stem has
no pooling.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Parameter, Tensor

SITES = ("stem", "stage2_in", "stage3_in")


class MergePoint(enum.Enum):
    FIRST_LAYER = "first"
    THIRD_BLOCK = "third"
    ALL_BLOCKS = "all"

    @property
    def sites(self) -> Tuple[str, ...]:
        return {
            MergePoint.FIRST_LAYER: ("stem",),
            MergePoint.THIRD_BLOCK: ("stage3_in",),
            MergePoint.ALL_BLOCKS: SITES,
        }[self]


MERGE_MODES = ("add", "mul")


@dataclass(frozen=True)
class MergeSpec:
    point: MergePoint
    mode: str

    def __post_init__(self):
        if self.mode not in MERGE_MODES:
            raise ValueError(f"merge mode must be one of {MERGE_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class ModelVariant:
    """One of the nine evaluated architectures.

    ``kind`` is ``"plain"``, ``"soft"``, ``"hard_image"`` or ``"hard_feature"``;
    ``merge`` is set only for soft attention.
    """

    kind: str
    merge: Optional[MergeSpec] = None

    def __post_init__(self):
        if self.kind not in ("plain", "soft", "hard_image", "hard_feature"):
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if (self.kind == "soft") != (self.merge is not None):
            raise ValueError("a MergeSpec is required for soft attention and only for it")

    @property
    def id(self) -> str:
        if self.kind == "soft":
            return f"soft:{self.merge.point.value}:{self.merge.mode}"
        return {"plain": "plain", "hard_image": "hard:image", "hard_feature": "hard:feature"}[self.kind]

    @classmethod
    def parse(cls, variant_id: str) -> "ModelVariant":
        for v in all_variants():
            if v.id == variant_id:
                return v
        raise ValueError(f"unknown variant id {variant_id!r}; valid ids: {', '.join(VARIANT_IDS)}")

    @property
    def sites(self) -> Tuple[str, ...]:
        return self.merge.point.sites if self.merge else ()

    def __str__(self) -> str:
        return self.id


def soft_variants() -> List[ModelVariant]:
    return [ModelVariant("soft", MergeSpec(p, m)) for p in MergePoint for m in MERGE_MODES]


def all_variants() -> List[ModelVariant]:
    return [ModelVariant("plain"), *soft_variants(), ModelVariant("hard_image"), ModelVariant("hard_feature")]


VARIANT_IDS = tuple(v.id for v in all_variants())


@dataclass
class BackboneConfig:
    num_classes: int = 8
    input_size: int = 64
    input_channels: int = 3
    stem_channels: int = 16
    stage_channels: Tuple[int, int, int] = (16, 32, 64)
    blocks_per_stage: int = 2

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.num_classes < 1:
            problems.append(f"num_classes={self.num_classes} must be >= 1")
        if self.input_size < 4 or self.input_size % 4:
            problems.append(f"input_size={self.input_size} must be a positive multiple of 4")
        if len(self.stage_channels) != 3 or min(self.stage_channels, default=0) < 1:
            problems.append(f"stage_channels={self.stage_channels} must be 3 positive ints")
        if self.input_channels < 1 or self.stem_channels < 1 or self.blocks_per_stage < 1:
            problems.append("input_channels, stem_channels and blocks_per_stage must be >= 1")
        if problems:
            raise ValueError("invalid BackboneConfig: " + "; ".join(problems))

    def site_shape(self, site: str) -> Tuple[int, int, int]:
        """(channels, height, width) of the feature map at a merge site."""
        s = self.input_size
        return {
            "stem": (self.stem_channels, s, s),
            "stage2_in": (self.stage_channels[0], s, s),
            "stage3_in": (self.stage_channels[1], s // 2, s // 2),
        }[site]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d


@dataclass
class Model:
    variant: ModelVariant
    config: BackboneConfig
    params: Dict[str, Parameter] = field(default_factory=dict)
    bn_states: Dict[str, BatchNormState] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def backbone_parameters(self) -> List[Parameter]:
        return [p for n, p in self.params.items() if not n.startswith("attn/")]

    def branch_parameters(self) -> List[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("attn/")]

    def p(self, name: str) -> Tensor:
        return self.params[name].value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.grad = None

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.backbone_parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "Model":
        """Deep copy with every array cast to ``dtype``."""
        out = Model(self.variant, self.config)
        for name, p in self.params.items():
            out.params[name] = Parameter(name, Tensor(p.value.data.astype(dtype)))
        for name, s in self.bn_states.items():
            out.bn_states[name] = BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype))
        return out

    def copy(self) -> "Model":
        return self.astype(next(iter(self.params.values())).value.dtype)


# ---------------------------------------------------------------------------
# construction


def _block_layout(config: BackboneConfig):
    """Yield (prefix, in_channels, out_channels, stride) for every residual block."""
    in_ch = config.stem_channels
    for s, out_ch in enumerate(config.stage_channels, start=1):
        for b in range(1, config.blocks_per_stage + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            yield f"stage{s}/block{b}", in_ch, out_ch, stride
            in_ch = out_ch


def init_attention_branch(weight: Tensor, bias: Tensor, mode: str) -> None:
    """Set a side-branch convolution so it has no initial effect on the backbone.

    Additive merging starts from an all-zero map (weights 0, bias 0);
    multiplicative merging starts from an all-one map (weights 0, bias 1).
    """
    if mode not in MERGE_MODES:
        raise ValueError(f"merge mode must be one of {MERGE_MODES}, got {mode!r}")
    weight.data[...] = 0
    bias.data[...] = 0 if mode == "add" else 1


def build_model(variant: ModelVariant, config: BackboneConfig, seed: int, dtype=np.float32) -> Model:
    """Instantiate a model; backbone weights depend only on ``(config, seed)``."""
    if isinstance(variant, str):
        variant = ModelVariant.parse(variant)
    config.validate()
    rng = np.random.default_rng(seed)
    model = Model(variant, config)

    def add_param(name, arr):
        model.params[name] = Parameter(name, Tensor(np.asarray(arr, dtype=dtype)))

    def he_conv(name, o, i, k):
        add_param(name, rng.standard_normal((o, i, k, k)) * np.sqrt(2.0 / (i * k * k)))

    def norm(name, c):
        add_param(f"{name}/gamma", np.ones(c))
        add_param(f"{name}/beta", np.zeros(c))
        model.bn_states[name] = BatchNormState.fresh(c, dtype)

    he_conv("stem/conv/weight", config.stem_channels, config.input_channels, 3)
    norm("stem/bn", config.stem_channels)
    for prefix, cin, cout, stride in _block_layout(config):
        norm(f"{prefix}/bn1", cin)
        he_conv(f"{prefix}/conv1/weight", cout, cin, 3 if stride == 1 else 4)
        norm(f"{prefix}/bn2", cout)
        # residual branch starts as the zero function
        add_param(f"{prefix}/conv2/weight", np.zeros((cout, cout, 3, 3)))
        if stride != 1 or cin != cout:
            he_conv(f"{prefix}/proj/weight", cout, cin, stride)
    final = config.stage_channels[-1]
    norm("head/bn", final)
    bound = 1.0 / np.sqrt(final)
    add_param("head/fc/weight", rng.uniform(-bound, bound, (config.num_classes, final)))
    add_param("head/fc/bias", np.zeros(config.num_classes))

    for site in variant.sites:
        channels = config.site_shape(site)[0]
        add_param(f"attn/{site}/weight", np.zeros((channels, 1, 3, 3)))
        add_param(f"attn/{site}/bias", np.zeros(channels))
        init_attention_branch(model.p(f"attn/{site}/weight"), model.p(f"attn/{site}/bias"), variant.merge.mode)
    return model


# ---------------------------------------------------------------------------
# forward


def attention_forward(mask, weight: Tensor, bias: Tensor, target_channels: int, target_h: int, target_w: int) -> Tensor:
    """Resize the ROI mask to a merge site and convolve it into an attention map."""
    if weight.shape[0] != target_channels:
        raise T.ShapeError(f"side branch has {weight.shape[0]} filters, merge site needs {target_channels}")
    resized = T.area_resize(mask, target_h, target_w)
    if resized.dtype != weight.dtype:
        resized = Tensor(resized.data.astype(weight.dtype))
    return T.conv2d(resized, weight, bias, stride=1, padding=1)


def _bn(model: Model, name: str, x: Tensor, train: bool) -> Tensor:
    return T.batchnorm2d(x, model.p(f"{name}/gamma"), model.p(f"{name}/beta"), model.bn_states[name], train)


def _block(model: Model, prefix: str, x: Tensor, stride: int, train: bool) -> Tensor:
    h = T.relu(_bn(model, f"{prefix}/bn1", x, train))
    shortcut = T.conv2d(h, model.p(f"{prefix}/proj/weight"), stride=stride) if f"{prefix}/proj/weight" in model.params else x
    out = T.conv2d(h, model.p(f"{prefix}/conv1/weight"), stride=stride, padding=1)
    out = T.relu(_bn(model, f"{prefix}/bn2", out, train))
    out = T.conv2d(out, model.p(f"{prefix}/conv2/weight"), padding=1)
    return T.add(out, shortcut)


def _check_masks(model: Model, images: Tensor, masks: Tensor) -> Tensor:
    m = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    if m.ndim == 3:
        m = m[:, None]
    n, _, h, w = images.shape
    if m.shape != (n, 1, h, w):
        raise T.ShapeError(f"masks {m.shape} do not match images {images.shape}")
    if model.variant.kind.startswith("hard") and not np.all((m == 0) | (m == 1)):
        raise ValueError("hard-attention variants need binary {0,1} masks")
    return Tensor(m.astype(images.dtype, copy=False))


def model_forward(model: Model, images, masks, train: bool = False) -> Tensor:
    """Logits of shape (N, num_classes) for a batch of images and ROI masks."""
    images = T.as_tensor(images)
    cfg = model.config
    if images.data.ndim != 4 or images.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise T.ShapeError(
            f"images {images.shape} do not match config (C={cfg.input_channels}, H=W={cfg.input_size})"
        )
    kind = model.variant.kind
    mask = _check_masks(model, images, masks) if kind != "plain" else None

    x = images
    if kind == "hard_image":
        x = T.elementwise_merge(x, T.expand_channels(mask, cfg.input_channels), "mul")
    x = T.relu(_bn(model, "stem/bn", T.conv2d(x, model.p("stem/conv/weight"), padding=1), train))
    if kind == "hard_feature":
        keep = T.area_resize(mask, x.shape[2], x.shape[3])
        keep = Tensor((keep.data >= 0.5).astype(x.dtype))
        x = T.elementwise_merge(x, T.expand_channels(keep, x.shape[1]), "mul")

    def merge(site, x):
        if site not in model.variant.sites:
            return x
        c, h, w = x.shape[1:]
        attn = attention_forward(mask, model.p(f"attn/{site}/weight"), model.p(f"attn/{site}/bias"), c, h, w)
        return T.elementwise_merge(x, attn, model.variant.merge.mode)

    x = merge("stem", x)
    for prefix, _, _, stride in _block_layout(cfg):
        if prefix == "stage2/block1":
            x = merge("stage2_in", x)
        elif prefix == "stage3/block1":
            x = merge("stage3_in", x)
        x = _block(model, prefix, x, stride, train)
    x = T.relu(_bn(model, "head/bn", x, train))
    return T.linear(T.global_avg_pool(x), model.p("head/fc/weight"), model.p("head/fc/bias"))
