"""
ConvNeXt-style audio tagger with an adapted stem, and the surgery that swaps
its 7x7 depthwise convolutions for DCLS ones.

The model is a small tree of layers. Each layer owns named ``Parameter``
objects and implements ``forward`` / ``backward`` on top of the primitives in
``tensor_core``. Sharing a parameter between layers means holding the same
``Parameter`` object, so in-place updates are seen by every holder.
"""
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from dcls_audio import config
from dcls_audio.dcls import (
    GAUSS,
    SIGMA_MIN,
    DclsError,
    DclsParams,
    check_dcls_settings,
    construct_kernel,
    construct_kernel_vjp,
    init_dcls,
)
from dcls_audio.tensor_core import (
    ConvGeometry,
    TensorError,
    dense_conv2d,
    dense_conv2d_vjp,
    depthwise_conv2d,
    depthwise_conv2d_vjp,
    gelu,
    gelu_vjp,
    global_avg_pool,
    global_avg_pool_vjp,
    layer_norm,
    layer_norm_vjp,
    pointwise_linear,
    pointwise_linear_vjp,
)
from dcls_audio.train import drop_path_mask, drop_path_rates

logger = logging.getLogger(__name__)

DSC = "dsc"
DCLS = "dcls"
CONV_METHODS = (DSC, DCLS)

# kernel size the surgery looks for
SURGERY_KERNEL = 7


class ModelSpecError(Exception):
    """Custom exception for invalid model specifications."""
    pass


# ---------------------------------------------------------------------------
# Specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    depth: int
    channels: int
    kernel_size: int = SURGERY_KERNEL


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the tagger; see ``to_text`` for the file form."""

    in_channels: int = 1
    stem_kernel: Tuple[int, int] = (2, 16)
    stem_stride: Tuple[int, int] = (2, 16)
    stem_out_channels: int = 96
    stages: Tuple[StageSpec, ...] = (
        StageSpec(3, 96),
        StageSpec(3, 192),
        StageSpec(9, 384),
        StageSpec(3, 768),
    )
    conv_method: str = DSC
    dcls_size: int = 23
    dcls_count: int = 26
    dcls_version: str = GAUSS
    dcls_sigma_min: float = SIGMA_MIN
    dcls_position_sharing: str = "channel"
    num_classes: int = 527
    drop_path_rate: float = 0.4
    layer_scale_init: float = 1e-6
    norm_eps: float = 1e-6

    @classmethod
    def convnext_tiny_audio(cls, **overrides) -> "ModelSpec":
        """ConvNeXt-T with the (2, 16) stem and 527 AudioSet classes."""
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelSpec":
        """Two-stage desk-scale model: depths 1,1; channels 8,16; 4 classes."""
        base = cls(
            stem_out_channels=8,
            stages=(StageSpec(1, 8), StageSpec(1, 16)),
            num_classes=4,
            drop_path_rate=0.0,
        )
        return replace(base, **overrides)

    def with_dcls(self, dilated_kernel_size: int, kernel_count: int, version: str) -> "ModelSpec":
        return replace(
            self,
            conv_method=DCLS,
            dcls_size=dilated_kernel_size,
            dcls_count=kernel_count,
            dcls_version=version,
        )

    def validate(self) -> "ModelSpec":
        """
        Check the structural invariants.

        Raises:
            ModelSpecError: If any invariant is violated
        """
        if self.in_channels < 1 or self.num_classes < 1:
            raise ModelSpecError("in_channels and num_classes must be positive")
        if not self.stages:
            raise ModelSpecError("at least one stage is required")
        for stage in self.stages:
            if stage.depth < 1 or stage.channels < 1:
                raise ModelSpecError(f"invalid stage {stage}")
            if stage.kernel_size < 1 or stage.kernel_size % 2 == 0:
                raise ModelSpecError(f"depthwise kernel size must be odd, got {stage.kernel_size}")
        channels = [stage.channels for stage in self.stages]
        if any(b <= a for a, b in zip(channels, channels[1:])):
            raise ModelSpecError(f"stage channel counts must be strictly increasing, got {channels}")
        if self.stem_out_channels != channels[0]:
            raise ModelSpecError(
                f"stem_out_channels ({self.stem_out_channels}) must equal the first stage width ({channels[0]})"
            )
        if min(self.stem_kernel + self.stem_stride) < 1:
            raise ModelSpecError("stem kernel and stride must be positive")
        if self.conv_method not in CONV_METHODS:
            raise ModelSpecError(f"conv_method must be one of {CONV_METHODS}, got {self.conv_method!r}")
        if self.conv_method == DCLS:
            try:
                check_dcls_settings(self.dcls_size, self.dcls_count, self.dcls_version)
            except DclsError as e:
                raise ModelSpecError(str(e)) from e
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ModelSpecError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        return self

    def to_text(self) -> str:
        """Canonical flat ``key=value`` form (also the input of ``spec_hash``)."""
        values = {
            "in_channels": self.in_channels,
            "stem_kernel": "x".join(map(str, self.stem_kernel)),
            "stem_stride": "x".join(map(str, self.stem_stride)),
            "stem_out_channels": self.stem_out_channels,
            "depths": ",".join(str(s.depth) for s in self.stages),
            "channels": ",".join(str(s.channels) for s in self.stages),
            "kernel_sizes": ",".join(str(s.kernel_size) for s in self.stages),
            "conv_method": self.conv_method,
            "dcls_size": self.dcls_size,
            "dcls_count": self.dcls_count,
            "dcls_version": self.dcls_version,
            "dcls_sigma_min": repr(float(self.dcls_sigma_min)),
            "dcls_position_sharing": self.dcls_position_sharing,
            "num_classes": self.num_classes,
            "drop_path_rate": repr(float(self.drop_path_rate)),
            "layer_scale_init": repr(float(self.layer_scale_init)),
            "norm_eps": repr(float(self.norm_eps)),
        }
        return "".join(f"{key}={value}\n" for key, value in values.items())

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ModelSpec":
        """
        Build a spec from flat string values; missing keys keep their defaults.

        Raises:
            ModelSpecError: On unknown keys or unparsable values
        """
        known = set(cls().to_text_keys())
        unknown = set(values) - known
        if unknown:
            raise ModelSpecError(f"unknown model spec keys: {', '.join(sorted(unknown))}")

        base = cls()
        try:
            def ints(key: str, default: Sequence[int], sep: str = ",") -> Tuple[int, ...]:
                if key not in values:
                    return tuple(default)
                return tuple(int(v) for v in str(values[key]).split(sep))

            depths = ints("depths", [s.depth for s in base.stages])
            channels = ints("channels", [s.channels for s in base.stages])
            kernels = ints("kernel_sizes", [SURGERY_KERNEL] * len(depths))
            if not len(depths) == len(channels) == len(kernels):
                raise ModelSpecError("depths, channels and kernel_sizes must have the same length")
            stages = tuple(StageSpec(d, c, k) for d, c, k in zip(depths, channels, kernels))

            def get(key: str, cast):
                return cast(values[key]) if key in values else getattr(base, key)

            spec = cls(
                in_channels=get("in_channels", int),
                stem_kernel=ints("stem_kernel", base.stem_kernel, "x"),
                stem_stride=ints("stem_stride", base.stem_stride, "x"),
                stem_out_channels=get("stem_out_channels", int) if "stem_out_channels" in values else channels[0],
                stages=stages,
                conv_method=get("conv_method", str),
                dcls_size=get("dcls_size", int),
                dcls_count=get("dcls_count", int),
                dcls_version=get("dcls_version", str),
                dcls_sigma_min=get("dcls_sigma_min", float),
                dcls_position_sharing=get("dcls_position_sharing", str),
                num_classes=get("num_classes", int),
                drop_path_rate=get("drop_path_rate", float),
                layer_scale_init=get("layer_scale_init", float),
                norm_eps=get("norm_eps", float),
            )
        except ValueError as e:
            raise ModelSpecError(f"invalid model spec value: {e}") from e
        return spec.validate()

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ModelSpecError(f"malformed spec line: {line!r}")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ModelSpec":
        return cls.from_mapping(config.load_key_value_file(path))

    @staticmethod
    def to_text_keys() -> List[str]:
        return [line.split("=", 1)[0] for line in ModelSpec().to_text().splitlines()]


# ---------------------------------------------------------------------------
# Parameters and layers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Parameter:
    """
    A learnable array and its accumulated gradient.

    ``group`` selects optimizer treatment: only "weight" is weight-decayed,
    and "position"/"sigma" get their own lr multipliers. ``bound`` makes the
    optimizer clip the array to [-bound, bound] after each step.
    """

    value: np.ndarray
    group: str = "weight"
    bound: Optional[float] = None
    shared_name: Optional[str] = None
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, grad: np.ndarray) -> None:
        self.grad += np.reshape(grad, self.value.shape).astype(self.grad.dtype, copy=False)


@dataclass
class ForwardContext:
    """Mode, random source and (optionally) the tape a backward pass will read."""

    training: bool = False
    rng: Optional[np.random.Generator] = None
    tape: Optional[Dict[int, object]] = None

    def save(self, layer: "Layer", cache: object) -> None:
        if self.tape is not None:
            self.tape[id(layer)] = cache

    def load(self, layer: "Layer") -> object:
        if self.tape is None or id(layer) not in self.tape:
            raise TensorError(f"no recorded forward for {type(layer).__name__}; run forward_with_tape first")
        return self.tape[id(layer)]


class Layer:
    """Base class: named children, named parameters, forward and backward."""

    child_names: Tuple[str, ...] = ()

    def __init__(self):
        self.params: Dict[str, Parameter] = {}

    def children(self) -> Iterator[Tuple[str, "Layer"]]:
        for name in self.child_names:
            child = getattr(self, name)
            if child is not None:
                yield name, child

    def named_layers(self, prefix: str = "") -> Iterator[Tuple[str, "Layer"]]:
        """Depth-first, pre-order traversal (self excluded)."""
        for name, child in self.children():
            full = f"{prefix}.{name}" if prefix else name
            yield full, child
            yield from child.named_layers(full)

    def local_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        yield from self.params.items()

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        """Every distinct parameter once; shared ones under their shared name."""
        seen = set()
        layers = [("", self)] + list(self.named_layers())
        for layer_name, layer in layers:
            for pname, param in layer.local_parameters():
                if id(param) in seen:
                    continue
                seen.add(id(param))
                if param.shared_name:
                    yield param.shared_name, param
                else:
                    yield (f"{layer_name}.{pname}" if layer_name else pname), param

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def forward(self, x: np.ndarray, ctx: ForwardContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, ctx: ForwardContext) -> np.ndarray:
        raise NotImplementedError


def _normal(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def children(self) -> Iterator[Tuple[str, Layer]]:
        for index, layer in enumerate(self.layers):
            yield str(index), layer

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, grad, ctx):
        for layer in reversed(self.layers):
            grad = layer.backward(grad, ctx)
        return grad


class Conv2d(Layer):
    """Dense convolution (stem and downsampling)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride, rng, dtype=np.float32, bias=True):
        super().__init__()
        kh, kw = kernel_size
        sh, sw = stride
        self.geom = ConvGeometry(kh, kw, sh, sw, 0, 0, 1)
        self.params["weight"] = Parameter(_normal(rng, (out_channels, in_channels, kh, kw), dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), group="bias") if bias else None
        if self.bias is not None:
            self.params["bias"] = self.bias

    def forward(self, x, ctx):
        y = dense_conv2d(x, self.params["weight"].value, self.geom)
        if self.bias is not None:
            y = y + self.bias.value[None, :, None, None]
        ctx.save(self, x)
        return y

    def backward(self, grad, ctx):
        x = ctx.load(self)
        grad_x, grad_w = dense_conv2d_vjp(grad, x, self.params["weight"].value, self.geom)
        self.params["weight"].accumulate(grad_w)
        if self.bias is not None:
            self.bias.accumulate(grad.sum(axis=(0, 2, 3)))
        return grad_x


class DepthwiseConv2d(Layer):
    """K x K depthwise convolution (the DSC spatial half), padding K // 2."""

    def __init__(self, channels, kernel_size, rng, stride=1, dtype=np.float32, bias=True):
        super().__init__()
        self.in_channels = self.out_channels = self.groups = channels
        self.kernel_size = (kernel_size, kernel_size)
        self.stride = stride
        pad = kernel_size // 2
        self.geom = ConvGeometry(kernel_size, kernel_size, stride, stride, pad, pad, channels)
        self.weight = Parameter(_normal(rng, (channels, 1, kernel_size, kernel_size), dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype), group="bias") if bias else None
        self.params["weight"] = self.weight
        if self.bias is not None:
            self.params["bias"] = self.bias

    def forward(self, x, ctx):
        y = depthwise_conv2d(x, self.weight.value, self.geom)
        if self.bias is not None:
            y = y + self.bias.value[None, :, None, None]
        ctx.save(self, x)
        return y

    def backward(self, grad, ctx):
        x = ctx.load(self)
        grad_x, grad_w = depthwise_conv2d_vjp(grad, x, self.weight.value, self.geom)
        self.weight.accumulate(grad_w)
        if self.bias is not None:
            self.bias.accumulate(grad.sum(axis=(0, 2, 3)))
        return grad_x


class DclsConv2d(Layer):
    """Depthwise convolution whose kernel is built from learnable positions."""

    def __init__(self, params: DclsParams, stride: int = 1, bias: bool = True):
        super().__init__()
        self.in_channels = self.out_channels = self.groups = params.channels
        self.kernel_count = params.kernel_count
        self.dilated_kernel_size = params.dilated_kernel_size
        self.version = params.version
        self.sigma_min = params.sigma_min
        self.stride = stride
        self.share_tag: Optional[str] = None
        size = params.dilated_kernel_size
        # padding = dilated_kernel_size // 2 keeps the spatial size
        self.geom = ConvGeometry(size, size, stride, stride, size // 2, size // 2, params.channels)

        dtype = params.weight.dtype
        self.weight = Parameter(params.weight)
        self.P = Parameter(params.P, group="position", bound=params.extent)
        self.SIG = Parameter(params.SIG, group="sigma") if params.SIG is not None else None
        self.bias = Parameter(np.zeros(params.channels, dtype=dtype), group="bias") if bias else None

    def local_parameters(self):
        yield "weight", self.weight
        yield "P", self.P
        if self.SIG is not None:
            yield "SIG", self.SIG
        if self.bias is not None:
            yield "bias", self.bias

    def share(self, positions: Parameter, sigmas: Optional[Parameter], tag: str) -> None:
        """Alias this layer's P/SIG to another layer's."""
        self.P = positions
        self.SIG = sigmas
        self.share_tag = tag

    def dcls_params(self) -> DclsParams:
        return DclsParams(
            channels=self.in_channels,
            kernel_count=self.kernel_count,
            dilated_kernel_size=self.dilated_kernel_size,
            version=self.version,
            weight=self.weight.value,
            P=self.P.value,
            SIG=None if self.SIG is None else self.SIG.value,
            sigma_min=self.sigma_min,
            share_tag=self.share_tag,
        )

    def forward(self, x, ctx):
        params = self.dcls_params()
        kernel = construct_kernel(params).astype(x.dtype, copy=False)
        y = depthwise_conv2d(x, kernel, self.geom)
        if self.bias is not None:
            y = y + self.bias.value[None, :, None, None]
        ctx.save(self, (x, kernel, params))
        return y

    def backward(self, grad, ctx):
        x, kernel, params = ctx.load(self)
        grad_x, grad_kernel = depthwise_conv2d_vjp(grad, x, kernel, self.geom)
        grad_w, grad_p, grad_sig = construct_kernel_vjp(grad_kernel, params)
        self.weight.accumulate(grad_w)
        self.P.accumulate(grad_p)
        if self.SIG is not None:
            self.SIG.accumulate(grad_sig)
        if self.bias is not None:
            self.bias.accumulate(grad.sum(axis=(0, 2, 3)))
        return grad_x


class LayerNorm(Layer):
    """Layer norm over channels; ``channels_first`` handles N,C,H,W inputs."""

    def __init__(self, channels, eps=1e-6, channels_first=False, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.channels_first = channels_first
        self.params["weight"] = Parameter(np.ones(channels, dtype=dtype), group="norm")
        self.params["bias"] = Parameter(np.zeros(channels, dtype=dtype), group="norm")

    def forward(self, x, ctx):
        if self.channels_first:
            x = x.transpose(0, 2, 3, 1)
        y = layer_norm(x, self.params["weight"].value, self.params["bias"].value, self.eps)
        ctx.save(self, x)
        return y.transpose(0, 3, 1, 2) if self.channels_first else y

    def backward(self, grad, ctx):
        x = ctx.load(self)
        if self.channels_first:
            grad = grad.transpose(0, 2, 3, 1)
        grad_x, grad_gamma, grad_beta = layer_norm_vjp(grad, x, self.params["weight"].value, self.eps)
        self.params["weight"].accumulate(grad_gamma)
        self.params["bias"].accumulate(grad_beta)
        return grad_x.transpose(0, 3, 1, 2) if self.channels_first else grad_x


class Linear(Layer):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = Parameter(_normal(rng, (out_features, in_features), dtype))
        self.params["bias"] = Parameter(np.zeros(out_features, dtype=dtype), group="bias")

    def forward(self, x, ctx):
        ctx.save(self, x)
        return pointwise_linear(x, self.params["weight"].value, self.params["bias"].value)

    def backward(self, grad, ctx):
        x = ctx.load(self)
        grad_x, grad_w, grad_b = pointwise_linear_vjp(grad, x, self.params["weight"].value)
        self.params["weight"].accumulate(grad_w)
        self.params["bias"].accumulate(grad_b)
        return grad_x


class GELU(Layer):
    def forward(self, x, ctx):
        ctx.save(self, x)
        return gelu(x)

    def backward(self, grad, ctx):
        return gelu_vjp(grad, ctx.load(self))


class ConvNeXtBlock(Layer):
    """
    depthwise conv -> layer norm -> 4x pointwise expand -> GELU -> pointwise
    project -> per-channel layer scale -> drop path -> residual add.
    """

    child_names = ("dwconv", "norm", "pwconv1", "act", "pwconv2")

    def __init__(self, channels, kernel_size, rng, drop_path=0.0, layer_scale_init=1e-6, eps=1e-6, dtype=np.float32):
        super().__init__()
        self.dwconv: Layer = DepthwiseConv2d(channels, kernel_size, rng, dtype=dtype)
        self.norm = LayerNorm(channels, eps=eps, dtype=dtype)
        self.pwconv1 = Linear(channels, 4 * channels, rng, dtype=dtype)
        self.act = GELU()
        self.pwconv2 = Linear(4 * channels, channels, rng, dtype=dtype)
        self.drop_path = drop_path
        self.params["gamma"] = Parameter(np.full(channels, layer_scale_init, dtype=dtype), group="layer_scale")

    def forward(self, x, ctx):
        y = self.dwconv.forward(x, ctx).transpose(0, 2, 3, 1)
        y = self.pwconv2.forward(self.act.forward(self.pwconv1.forward(self.norm.forward(y, ctx), ctx), ctx), ctx)
        branch = y * self.params["gamma"].value

        scale = None
        if ctx.training and self.drop_path > 0.0:
            scale = drop_path_mask(x.shape[0], self.drop_path, ctx.rng, branch.dtype)
            branch = branch * scale[:, None, None, None]
        ctx.save(self, (y, scale))
        return x + branch.transpose(0, 3, 1, 2)

    def backward(self, grad, ctx):
        y, scale = ctx.load(self)
        grad_branch = grad.transpose(0, 2, 3, 1)
        if scale is not None:
            grad_branch = grad_branch * scale[:, None, None, None]
        gamma = self.params["gamma"]
        gamma.accumulate((grad_branch * y).sum(axis=(0, 1, 2)))
        g = grad_branch * gamma.value
        g = self.norm.backward(self.pwconv1.backward(self.act.backward(self.pwconv2.backward(g, ctx), ctx), ctx), ctx)
        return grad + self.dwconv.backward(g.transpose(0, 3, 1, 2), ctx)


class Stage(Layer):
    child_names = ("downsample", "blocks")

    def __init__(self, downsample: Optional[Layer], blocks: Sequence[ConvNeXtBlock]):
        super().__init__()
        self.downsample = downsample
        self.blocks = Sequential(blocks)

    def forward(self, x, ctx):
        if self.downsample is not None:
            x = self.downsample.forward(x, ctx)
        return self.blocks.forward(x, ctx)

    def backward(self, grad, ctx):
        grad = self.blocks.backward(grad, ctx)
        if self.downsample is not None:
            grad = self.downsample.backward(grad, ctx)
        return grad


class Head(Layer):
    """Global average pool -> layer norm -> linear classifier."""

    child_names = ("norm", "fc")

    def __init__(self, channels, num_classes, rng, eps=1e-6, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(channels, eps=eps, dtype=dtype)
        self.fc = Linear(channels, num_classes, rng, dtype=dtype)

    def forward(self, x, ctx):
        ctx.save(self, x.shape)
        return self.fc.forward(self.norm.forward(global_avg_pool(x), ctx), ctx)

    def backward(self, grad, ctx):
        shape = ctx.load(self)
        return global_avg_pool_vjp(self.norm.backward(self.fc.backward(grad, ctx), ctx), shape)


class Model(Layer):
    """Stem + stages + head, with the spec it was built from."""

    child_names = ("stem", "stem_norm", "stages", "head")

    def __init__(self, spec: ModelSpec, stem: Conv2d, stem_norm: LayerNorm, stages: Sequence[Stage], head: Head):
        super().__init__()
        self.spec = spec
        self.stem = stem
        self.stem_norm = stem_norm
        self.stages = Sequential(stages)
        self.head = head

    def blocks(self) -> List[ConvNeXtBlock]:
        return [layer for _, layer in self.named_layers() if isinstance(layer, ConvNeXtBlock)]

    def shared_groups(self) -> Dict[str, Tuple[Parameter, Optional[Parameter]]]:
        """share_tag -> (P, SIG) for every position group in the model."""
        groups = {}
        for _, layer in self.named_layers():
            if isinstance(layer, DclsConv2d) and layer.share_tag is not None:
                groups.setdefault(layer.share_tag, (layer.P, layer.SIG))
        return groups

    def set_drop_path(self, rate: float) -> None:
        """Re-ramp per-block drop-path rates linearly from 0 to ``rate``."""
        blocks = self.blocks()
        for block, block_rate in zip(blocks, drop_path_rates(len(blocks), rate)):
            block.drop_path = block_rate
        self.spec = replace(self.spec, drop_path_rate=rate)

    def replace_layer(self, name: str, new_layer: Layer) -> None:
        """Swap the layer at a dotted path such as ``stages.0.blocks.1.dwconv``."""
        *path, last = name.split(".")
        parent: Layer = self
        for part in path:
            parent = parent.layers[int(part)] if isinstance(parent, Sequential) else getattr(parent, part)
        if isinstance(parent, Sequential):
            parent.layers[int(last)] = new_layer
        else:
            setattr(parent, last, new_layer)

    def astype(self, dtype) -> "Model":
        """Cast every parameter in place (shared parameters stay shared)."""
        for param in self.parameters():
            param.value = param.value.astype(dtype)
            param.grad = np.zeros_like(param.value)
        return self

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise TensorError(
                f"model expects input of shape (N, {self.spec.in_channels}, H, W), got {x.shape}"
            )

    def forward(self, x, ctx):
        self._check_input(x)
        x = self.stem_norm.forward(self.stem.forward(x, ctx), ctx)
        return self.head.forward(self.stages.forward(x, ctx), ctx)

    def backward(self, grad, ctx):
        grad = self.head.backward(grad, ctx)
        grad = self.stages.backward(grad, ctx)
        return self.stem.backward(self.stem_norm.backward(grad, ctx), ctx)


def _context(mode: str, rng: Optional[np.random.Generator], record: bool) -> ForwardContext:
    if mode not in ("train", "eval"):
        raise ModelSpecError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and rng is None:
        rng = np.random.default_rng(config.DEFAULT_SEED)
    return ForwardContext(training=training, rng=rng, tape={} if record else None)


def forward(model: Model, x: np.ndarray, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Logits of shape (N, num_classes). Nothing is recorded, so concurrent
    eval-mode calls on a shared model are safe.
    """
    return model.forward(x, _context(mode, rng, record=False))


def forward_with_tape(
    model: Model, x: np.ndarray, mode: str = "train", rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, ForwardContext]:
    """Forward pass that records what ``backward`` needs."""
    ctx = _context(mode, rng, record=True)
    return model.forward(x, ctx), ctx


def backward(model: Model, grad_logits: np.ndarray, ctx: ForwardContext) -> np.ndarray:
    """Accumulate parameter gradients for ``grad_logits``; returns the input gradient."""
    return model.backward(grad_logits, ctx)


# ---------------------------------------------------------------------------
# Building, surgery and accounting
# ---------------------------------------------------------------------------

def build_model(spec: ModelSpec, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> Model:
    """
    Instantiate and initialize a model.

    Conv and linear weights ~ Normal(0, 0.02^2), biases 0, norms (1, 0), layer
    scale ``spec.layer_scale_init``. A ``dcls`` spec is built as its ``dsc``
    counterpart and then converted by ``surgery_replace_dsc_with_dcls``.

    Args:
        spec (ModelSpec): Architecture description
        rng (Optional[np.random.Generator]): Random source (default: seeded from config)
        dtype: Parameter dtype

    Returns:
        Model: Initialized model

    Raises:
        ModelSpecError: If the spec is invalid
    """
    spec.validate()
    rng = rng if rng is not None else np.random.default_rng(config.DEFAULT_SEED)
    eps = spec.norm_eps

    stem = Conv2d(spec.in_channels, spec.stem_out_channels, spec.stem_kernel, spec.stem_stride, rng, dtype)
    stem_norm = LayerNorm(spec.stem_out_channels, eps=eps, channels_first=True, dtype=dtype)

    total_blocks = sum(stage.depth for stage in spec.stages)
    rates = iter(drop_path_rates(total_blocks, spec.drop_path_rate))
    stages = []
    previous = spec.stem_out_channels
    for index, stage in enumerate(spec.stages):
        downsample = None
        if index > 0:
            downsample = Sequential([
                LayerNorm(previous, eps=eps, channels_first=True, dtype=dtype),
                Conv2d(previous, stage.channels, (2, 2), (2, 2), rng, dtype),
            ])
        blocks = [
            ConvNeXtBlock(stage.channels, stage.kernel_size, rng, next(rates), spec.layer_scale_init, eps, dtype)
            for _ in range(stage.depth)
        ]
        stages.append(Stage(downsample, blocks))
        previous = stage.channels

    head = Head(previous, spec.num_classes, rng, eps=eps, dtype=dtype)
    model = Model(replace(spec, conv_method=DSC), stem, stem_norm, stages, head)
    if spec.conv_method == DCLS:
        surgery_replace_dsc_with_dcls(
            model, spec.dcls_size, spec.dcls_count, spec.dcls_version, rng,
            sigma_min=spec.dcls_sigma_min, position_sharing=spec.dcls_position_sharing,
        )
    model.spec = spec
    logger.debug("built model with %d parameters", count_params(model))
    return model


@dataclass
class Replacement:
    name: str
    channels: int
    share_tag: str
    new_group: bool


def replace_depthwise_dcls(
    model: Model,
    dilated_kernel_size: int = 23,
    kernel_count: int = 26,
    version: str = GAUSS,
    rng: Optional[np.random.Generator] = None,
    sigma_min: float = SIGMA_MIN,
    position_sharing: str = "channel",
) -> List[Replacement]:
    """
    Replace every 7x7 depthwise convolution by a DCLS one, in place.

    Traversing layers in order, the first replaced layer at each new, strictly
    larger channel count creates fresh positions/sigmas under a new share
    tag; later replaced layers with that channel count alias them. DCLS
    weights are re-initialized, bias presence is kept (bias reset to 0) and
    stride is kept.

    Returns:
        List[Replacement]: One entry per replaced layer, in traversal order

    Raises:
        DclsError: If the DCLS settings are invalid
    """
    check_dcls_settings(dilated_kernel_size, kernel_count, version)
    rng = rng if rng is not None else np.random.default_rng(config.DEFAULT_SEED)

    report: List[Replacement] = []
    in_channels, positions, sigmas, tag = 0, None, None, None
    for name, layer in list(model.named_layers()):
        if not (
            isinstance(layer, DepthwiseConv2d)
            and layer.groups == layer.in_channels == layer.out_channels
            and layer.kernel_size == (SURGERY_KERNEL, SURGERY_KERNEL)
        ):
            continue

        params = init_dcls(
            layer.in_channels, kernel_count, dilated_kernel_size, version, rng,
            sigma_min=sigma_min, position_sharing=position_sharing, dtype=layer.weight.value.dtype,
        )
        dcls_conv = DclsConv2d(params, stride=layer.stride, bias=layer.bias is not None)

        # synchronise positions and sigmas within a stage
        new_group = in_channels < layer.in_channels
        if new_group:
            in_channels = layer.in_channels
            tag = f"stage_c{in_channels}"
            positions, sigmas = dcls_conv.P, dcls_conv.SIG
            positions.shared_name = f"shared.{tag}.P"
            if sigmas is not None:
                sigmas.shared_name = f"shared.{tag}.SIG"
        dcls_conv.share(positions, sigmas, tag)

        model.replace_layer(name, dcls_conv)
        report.append(Replacement(name, layer.in_channels, tag, new_group))
        logger.info("replaced %s (%d channels) -> DCLS, positions %s", name, layer.in_channels, tag)

    if report:
        model.spec = model.spec.with_dcls(dilated_kernel_size, kernel_count, version)
        model.spec = replace(model.spec, dcls_sigma_min=sigma_min, dcls_position_sharing=position_sharing)
    return report


def surgery_replace_dsc_with_dcls(
    model: Model,
    dilated_kernel_size: int = 23,
    kernel_count: int = 26,
    version: str = GAUSS,
    rng: Optional[np.random.Generator] = None,
    sigma_min: float = SIGMA_MIN,
    position_sharing: str = "channel",
) -> Model:
    """Convenience wrapper around ``replace_depthwise_dcls`` returning the model."""
    replace_depthwise_dcls(model, dilated_kernel_size, kernel_count, version, rng, sigma_min, position_sharing)
    return model


def count_params(layer: Layer) -> int:
    """Total parameter count; shared positions/sigmas are counted once."""
    return int(sum(param.value.size for param in layer.parameters()))


def param_ledger(layer: Layer) -> pd.DataFrame:
    """
    Per-parameter ledger (name, layer kind, shape, count), shared blocks once.

    Returns:
        pd.DataFrame: One row per distinct parameter
    """
    owners = {}
    for layer_name, sub in [("", layer)] + list(layer.named_layers()):
        for _, param in sub.local_parameters():
            owners.setdefault(id(param), type(sub).__name__)

    rows = [
        {
            "name": name,
            "layer": owners.get(id(param), type(layer).__name__),
            "shape": "x".join(map(str, param.value.shape)),
            "count": int(param.value.size),
            "shared": param.shared_name is not None,
        }
        for name, param in layer.named_parameters()
    ]
    return pd.DataFrame(rows, columns=["name", "layer", "shape", "count", "shared"])
