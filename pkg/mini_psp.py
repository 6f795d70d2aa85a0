"""
Miniature pyramid-pooling segmentation network and its detailer variant.

The classifier maps an image to per-class logits. The detailer additionally
embeds a one-hot coarse mask with a 1x1 convolution, concatenates the
embedding with the visual features at one injection point, and adds the
full-resolution one-hot coarse mask to the upsampled correction tensor, so
the network only has to learn the difference between coarse and fine labels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterator

import numpy as np

from errors import ConfigError, DataError, ShapeError, ArgumentError
from mask_util import IGNORE, LabelMask, stack_masks
from tensor_core import (
    ConvGrads,
    ConvParams,
    Tensor4,
    adaptive_avg_pool,
    adaptive_avg_pool_backward,
    add,
    argmax_labels,
    bilinear_upsample,
    bilinear_upsample_backward,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    nearest_resize_indices,
    relu,
    relu_backward,
    split_channels,
)

if TYPE_CHECKING:
    from synth_data import ChannelStats

logger = logging.getLogger(__name__)

CLASSIFIER_INIT_STD = 0.01


class InjectionPoint(str, Enum):
    NONE = "none"
    BEFORE_POOL = "before-pool"
    AFTER_POOL = "after-pool"
    AFTER_FINAL = "after-final"


@dataclass
class NetworkConfig:
    """
    Architecture hyperparameters.

    num_classes counts the real classes only; the ignore label never gets a
    channel. embed_width is the number of 1x1 embedding filters.
    """

    num_classes: int = 5
    injection: InjectionPoint = InjectionPoint.NONE
    embed_width: int = 64
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    encoder_downsample: int = 4
    ppm_channels: int = 16
    final_channels: int = 64
    seed: int = 0

    def __post_init__(self):
        try:
            self.injection = InjectionPoint(self.injection)
        except ValueError:
            raise ConfigError(
                f"unknown injection point {self.injection!r}, "
                f"expected one of {[p.value for p in InjectionPoint]}"
            ) from None
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.ppm_bins = tuple(int(b) for b in self.ppm_bins)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes >= IGNORE:
            raise ConfigError(f"num_classes must be < {IGNORE}, got {self.num_classes}")
        if self.embed_width < 1:
            raise ConfigError(f"embed_width must be >= 1, got {self.embed_width}")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ConfigError(f"encoder_channels must be a nonempty list of positive counts")
        if not self.ppm_bins or min(self.ppm_bins) < 1:
            raise ConfigError(f"ppm_bins must be nonempty with every bin >= 1, got {self.ppm_bins}")
        if self.ppm_channels < 1 or self.final_channels < 1:
            raise ConfigError("ppm_channels and final_channels must be >= 1")
        ds = self.encoder_downsample
        if ds < 1 or ds & (ds - 1):
            raise ConfigError(f"encoder_downsample must be a power of two, got {ds}")
        if ds > 2 ** len(self.encoder_channels):
            raise ConfigError(
                f"encoder_downsample {ds} needs more than {len(self.encoder_channels)} encoder stages"
            )

    @property
    def is_detailer(self) -> bool:
        return self.injection is not InjectionPoint.NONE

    def encoder_strides(self) -> list[int]:
        halvings = self.encoder_downsample.bit_length() - 1
        return [2 if i < halvings else 1 for i in range(len(self.encoder_channels))]

    def check_crop(self, crop: int) -> None:
        if crop % self.encoder_downsample:
            raise ConfigError(f"crop {crop} is not divisible by encoder_downsample {self.encoder_downsample}")
        if crop // self.encoder_downsample < max(self.ppm_bins):
            raise ConfigError(
                f"crop {crop} gives feature maps smaller than the largest pyramid bin {max(self.ppm_bins)}"
            )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["injection"] = self.injection.value
        out["encoder_channels"] = list(self.encoder_channels)
        out["ppm_bins"] = list(self.ppm_bins)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> NetworkConfig:
        return cls(**values)


@dataclass(frozen=True)
class LayerSpec:
    path: str
    c_out: int
    c_in: int
    k: int
    stride: int = 1
    padding: int = 0


def layer_specs(cfg: NetworkConfig) -> list[LayerSpec]:
    """ Every convolution of the network, keyed by its stable layer path. """
    specs = []
    c_in = 3
    for i, (c_out, stride) in enumerate(zip(cfg.encoder_channels, cfg.encoder_strides())):
        specs.append(LayerSpec(f"encoder.{i}", c_out, c_in, 3, stride, 1))
        c_in = c_out

    embed = cfg.embed_width if cfg.is_detailer else 0
    pool_in = c_in + (embed if cfg.injection is InjectionPoint.BEFORE_POOL else 0)
    for j in range(len(cfg.ppm_bins)):
        specs.append(LayerSpec(f"ppm.{j}", cfg.ppm_channels, pool_in, 1))
    ppm_out = pool_in + len(cfg.ppm_bins) * cfg.ppm_channels
    ppm_out += embed if cfg.injection is InjectionPoint.AFTER_POOL else 0
    specs.append(LayerSpec("final", cfg.final_channels, ppm_out, 3, 1, 1))

    head_in = cfg.final_channels + (embed if cfg.injection is InjectionPoint.AFTER_FINAL else 0)
    specs.append(LayerSpec("classifier", cfg.num_classes, head_in, 1))
    if cfg.is_detailer:
        specs.append(LayerSpec("embed", cfg.embed_width, cfg.num_classes, 1))
    return specs


def init_parameters(cfg: NetworkConfig) -> dict[str, ConvParams]:
    """ He fan-in initialisation from cfg.seed; the classifier head starts small. """
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for spec in layer_specs(cfg):
        shape = (spec.c_out, spec.c_in, spec.k, spec.k)
        std = CLASSIFIER_INIT_STD if spec.path == "classifier" else np.sqrt(2.0 / (spec.c_in * spec.k * spec.k))
        weights = (rng.standard_normal(shape) * std).astype(np.float32)
        params[spec.path] = ConvParams(Tensor4(weights), np.zeros(spec.c_out, dtype=np.float32),
                                       spec.stride, spec.padding)
    return params


def _as_label_batch(masks) -> np.ndarray:
    if isinstance(masks, LabelMask):
        return masks.labels[None]
    if isinstance(masks, (list, tuple)):
        return stack_masks(list(masks))
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.ndim != 3:
        raise ShapeError(f"mask batch must be (n, h, w), got shape {masks.shape}")
    return masks


def one_hot_encode(masks, num_classes: int, ignore_value: int = IGNORE, dtype=np.float32) -> Tensor4:
    """
    Expand class masks into a (n, C, h, w) binary tensor.

    Channel k is 1 where the mask equals k; ignore pixels become the all-zero vector.

    Args:
        - masks: LabelMask, list of LabelMasks, or integer array (n, h, w)
        - num_classes: C
        - ignore_value: the label encoded as all zeros

    Raises:
        - DataError: a class outside [0, C) that is not ignore_value, with its pixel coordinates

    Returns:
        - Tensor4 MaskOneHot
    """
    labels = _as_label_batch(masks).astype(np.int64)
    valid = labels != ignore_value
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        n, y, x = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"class {int(labels[n, y, x])} at pixel ({y}, {x}) of mask {n} outside [0, {num_classes})")
    encoded = np.arange(num_classes)[None, :, None, None] == labels[:, None]
    return Tensor4(encoded.astype(dtype))


def resample_nearest(input: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """ Nearest-neighbour resize taking source index floor(d * in / out). """
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"target dims must be >= 1, got ({out_h}, {out_w})")
    rows = nearest_resize_indices(input.h, out_h)
    cols = nearest_resize_indices(input.w, out_w)
    return Tensor4(input.values[:, :, rows][:, :, :, cols])


def embed_coarse(one_hot: Tensor4, target_h: int, target_w: int, embed: ConvParams) -> Tensor4:
    """
    Resample the one-hot mask to (target_h, target_w) by nearest neighbour,
    then apply the 1x1 embedding convolution.

    Raises:
        - ArgumentError: target dims <= 0
        - ShapeError: embed.c_in differs from the one-hot channel count
    """
    if embed.k != 1:
        raise ShapeError(f"coarse embedding must be a 1x1 convolution, got k = {embed.k}")
    return conv2d_forward(resample_nearest(one_hot, target_h, target_w), embed)


def embed_coarse_backward(resampled: Tensor4, embed: ConvParams, grad_out: Tensor4) -> ConvGrads:
    """ Embedding-weight gradients; the one-hot input is a constant. """
    _, grads = conv2d_backward(resampled, embed, grad_out)
    return grads


@dataclass
class ForwardCache:
    """ Intermediate tensors kept by MiniPSP.forward for the backward pass. """

    encoder: list[tuple[Tensor4, Tensor4]] = field(default_factory=list)
    feature_channels: int = 0
    embed_input: Tensor4 | None = None
    pool_input: Tensor4 | None = None
    branches: list[tuple[Tensor4, Tensor4, Tensor4]] = field(default_factory=list)
    final_input: Tensor4 | None = None
    final_pre: Tensor4 | None = None
    head_input: Tensor4 | None = None
    correction: Tensor4 | None = None


class MiniPSP:
    """
    Encoder -> pyramid pooling module -> final block -> classifier head,
    with optional coarse-mask injection and identity skip.
    """

    def __init__(self, cfg: NetworkConfig, params: dict[str, ConvParams] | None = None,
                 normalization: ChannelStats | None = None) -> None:
        self.cfg = cfg
        self.params = init_parameters(cfg) if params is None else params
        self.normalization = normalization
        expected = [spec.path for spec in layer_specs(cfg)]
        if list(self.params) != expected:
            raise ConfigError(f"parameter layers {list(self.params)} do not match config layers {expected}")

    def named_parameters(self) -> Iterator[tuple[str, ConvParams]]:
        yield from self.params.items()

    def parameter_count(self) -> int:
        return sum(p.num_parameters() for p in self.params.values())

    def zero_corrections(self) -> None:
        """
        Zero the classifier head, the last layer of the final block, so the
        correction tensor p is exactly 0 for every injection point. For
        before-pool and after-pool, zeroing the 3x3 "final" conv alone also
        gives p = 0 while the head bias is zero; for after-final the
        embedding still reaches the head.
        """
        head = self.params["classifier"]
        head.weights.values[...] = 0
        head.bias[...] = 0

    def astype(self, dtype) -> MiniPSP:
        return MiniPSP(self.cfg, {k: p.astype(dtype) for k, p in self.params.items()}, self.normalization)

    def copy(self) -> MiniPSP:
        return MiniPSP(self.cfg, {k: p.copy() for k, p in self.params.items()}, self.normalization)

    def _check_image(self, image: Tensor4) -> None:
        ds = self.cfg.encoder_downsample
        if image.c != 3:
            raise ShapeError(f"image must have 3 channels, got shape {image.dims}")
        if image.h % ds or image.w % ds:
            raise ShapeError(f"image shape {image.dims} not divisible by encoder_downsample {ds}")
        if min(image.h, image.w) // ds < max(self.cfg.ppm_bins):
            raise ShapeError(
                f"image shape {image.dims} gives features smaller than pyramid bin {max(self.cfg.ppm_bins)}"
            )

    def forward(self, image: Tensor4, coarse=None) -> tuple[Tensor4, ForwardCache]:
        """
        Full forward pass returning logits (n, C, H, W) and the backward cache.
        coarse is required exactly when the config has an injection point.
        """
        cfg = self.cfg
        self._check_image(image)
        cache = ForwardCache()

        x = image
        for i in range(len(cfg.encoder_channels)):
            pre = conv2d_forward(x, self.params[f"encoder.{i}"])
            cache.encoder.append((x, pre))
            x = relu(pre)
        features = x
        cache.feature_channels = features.c

        one_hot_full = embedding = None
        if cfg.is_detailer:
            labels = _as_label_batch(coarse)
            if labels.shape != (image.n, image.h, image.w):
                raise ShapeError(f"coarse mask batch {labels.shape} does not match image {image.dims}")
            one_hot_full = one_hot_encode(labels, cfg.num_classes, dtype=image.dtype)
            cache.embed_input = resample_nearest(one_hot_full, features.h, features.w)
            embedding = conv2d_forward(cache.embed_input, self.params["embed"])

        if cfg.injection is InjectionPoint.BEFORE_POOL:
            features = concat_channels(features, embedding)
        cache.pool_input = features

        fused = features
        for j, b in enumerate(cfg.ppm_bins):
            pooled = adaptive_avg_pool(features, b, b)
            pre = conv2d_forward(pooled, self.params[f"ppm.{j}"])
            act = relu(pre)
            cache.branches.append((pooled, pre, act))
            fused = concat_channels(fused, bilinear_upsample(act, features.h, features.w))
        if cfg.injection is InjectionPoint.AFTER_POOL:
            fused = concat_channels(fused, embedding)

        cache.final_input = fused
        cache.final_pre = conv2d_forward(fused, self.params["final"])
        head_in = relu(cache.final_pre)
        if cfg.injection is InjectionPoint.AFTER_FINAL:
            head_in = concat_channels(head_in, embedding)
        cache.head_input = head_in

        cache.correction = conv2d_forward(head_in, self.params["classifier"])
        logits = bilinear_upsample(cache.correction, image.h, image.w)
        if cfg.is_detailer:
            logits = add(logits, one_hot_full)
        return logits, cache

    def backward(self, cache: ForwardCache, grad_logits: Tensor4) -> dict[str, ConvGrads]:
        """ Hand-chained backward pass; returns gradients keyed by layer path. """
        cfg = self.cfg
        grads: dict[str, ConvGrads] = {}
        grad_embedding = None

        # identity skip: the one-hot term is a constant
        grad = bilinear_upsample_backward(cache.correction, grad_logits)
        grad, grads["classifier"] = conv2d_backward(cache.head_input, self.params["classifier"], grad)
        if cfg.injection is InjectionPoint.AFTER_FINAL:
            grad, grad_embedding = split_channels(grad, cfg.final_channels)

        grad = relu_backward(cache.final_pre, grad)
        grad, grads["final"] = conv2d_backward(cache.final_input, self.params["final"], grad)
        if cfg.injection is InjectionPoint.AFTER_POOL:
            grad, grad_embedding = split_channels(grad, grad.c - cfg.embed_width)

        features = cache.pool_input
        grad_features, grad_branches = split_channels(grad, features.c)
        grad_features = grad_features.values.copy()
        width = cfg.ppm_channels
        for j, (pooled, pre, act) in enumerate(cache.branches):
            grad_up = Tensor4(grad_branches.values[:, j * width:(j + 1) * width])
            grad_branch = bilinear_upsample_backward(act, grad_up)
            grad_branch = relu_backward(pre, grad_branch)
            grad_pooled, grads[f"ppm.{j}"] = conv2d_backward(pooled, self.params[f"ppm.{j}"], grad_branch)
            grad_features += adaptive_avg_pool_backward(features, grad_pooled).values
        grad = Tensor4(grad_features)

        if cfg.injection is InjectionPoint.BEFORE_POOL:
            grad, grad_embedding = split_channels(grad, cache.feature_channels)
        if cfg.is_detailer:
            grads["embed"] = embed_coarse_backward(cache.embed_input, self.params["embed"], grad_embedding)

        for i in reversed(range(len(cfg.encoder_channels))):
            x, pre = cache.encoder[i]
            grad = relu_backward(pre, grad)
            grad, grads[f"encoder.{i}"] = conv2d_backward(x, self.params[f"encoder.{i}"], grad)

        return {path: grads[path] for path in self.params}

    def forward_classifier(self, image: Tensor4) -> Tensor4:
        """
        Plain pyramid-pooling classifier.

        Raises:
            - ConfigError: the network has an injection point
            - ShapeError: image dims not divisible by encoder_downsample
        """
        if self.cfg.is_detailer:
            raise ConfigError(f"forward_classifier needs injection 'none', config has '{self.cfg.injection.value}'")
        logits, _ = self.forward(image)
        return logits

    def forward_detailer(self, image: Tensor4, coarse) -> Tensor4:
        """
        Detailer forward pass: upsampled corrections plus the full-resolution one-hot coarse mask.

        Raises:
            - ConfigError: the network has no injection point
            - ShapeError: coarse dims differ from the image spatial dims
        """
        if not self.cfg.is_detailer:
            raise ConfigError("forward_detailer needs an injection point, config has 'none'")
        if coarse is None:
            raise ShapeError("forward_detailer needs a coarse mask batch")
        logits, _ = self.forward(image, coarse)
        return logits

    def logits(self, image: Tensor4, coarse=None) -> Tensor4:
        if self.cfg.is_detailer:
            return self.forward_detailer(image, coarse)
        return self.forward_classifier(image)

    def predict(self, image: Tensor4, coarse=None) -> np.ndarray:
        """ Argmax labels (n, H, W); ties go to the lowest class index. """
        return argmax_labels(self.logits(image, coarse))


def forward_classifier(network: MiniPSP, image: Tensor4) -> Tensor4:
    return network.forward_classifier(image)


def forward_detailer(network: MiniPSP, image: Tensor4, coarse) -> Tensor4:
    return network.forward_detailer(image, coarse)
