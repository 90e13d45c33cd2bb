"""Prior-Net forward pass and its ablation variants.

The network is written functionally: parameters live in a flat ``dict`` keyed
by dotted layer names (``image_encoder.2.conv1.weight`` ...) and every forward
function takes that dict explicitly. Tensors are channels-first,
``(N, C, *spatial)``, in 2D or 3D.

Variants
--------
``baseline``        plain U-Net on the target image.
``single_encoder``  U-Net on ``concat(target, template, K regions)``.
``dual_encoder``    image and template encoders fused per level by channel
                    concatenation and a learned 1x1 projection.
``priornet``        image and template encoders fused per level by cosine
                    similarity attention (CSAM).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

VARIANTS = ("baseline", "single_encoder", "dual_encoder", "priornet")
GATES = ("raw", "shifted", "residual")
NORMS = ("instance", "none")

CSAM_EPS = 1e-8


@dataclass(frozen=True)
class NetworkConfig:
    dimensionality: int = 3
    num_classes: int = 1
    base_channels: int = 16
    num_levels: int = 4
    variant: str = "priornet"
    seed: int = 0
    # how cosine weights gate image features: w, (1 + w) / 2, or 1 + w
    csam_gate: str = "raw"
    norm: str = "instance"

    def __post_init__(self):
        if self.dimensionality not in (2, 3):
            raise ConfigError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.num_levels < 2:
            raise ConfigError("num_levels must be >= 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.csam_gate not in GATES:
            raise ConfigError(f"unknown csam_gate {self.csam_gate!r}; expected one of {GATES}")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}; expected one of {NORMS}")

    @property
    def downsampling_factor(self) -> int:
        return 2 ** (self.num_levels - 1)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(self.num_levels)]

    def to_dict(self) -> dict:
        return asdict(self)


def input_channels(cfg: NetworkConfig, branch: str = "image") -> int:
    """Channel count an encoder branch expects at its input."""
    k = cfg.num_classes
    if branch == "template":
        return k + 1
    if branch != "image":
        raise ValueError(f"unknown branch {branch!r}")
    return k + 2 if cfg.variant == "single_encoder" else 1


def uses_template(cfg: NetworkConfig) -> bool:
    return cfg.variant != "baseline"


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered map of parameter name to shape implied by ``cfg``."""
    kernel = (3,) * cfg.dimensionality
    point = (1,) * cfg.dimensionality
    ch = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}

    def block(prefix, cin, cout):
        shapes[f"{prefix}.conv1.weight"] = (cout, cin) + kernel
        shapes[f"{prefix}.conv1.bias"] = (cout,)
        if cfg.norm == "instance":
            shapes[f"{prefix}.norm1.weight"] = (cout,)
            shapes[f"{prefix}.norm1.bias"] = (cout,)
        shapes[f"{prefix}.conv2.weight"] = (cout, cout) + kernel
        shapes[f"{prefix}.conv2.bias"] = (cout,)
        if cfg.norm == "instance":
            shapes[f"{prefix}.norm2.weight"] = (cout,)
            shapes[f"{prefix}.norm2.bias"] = (cout,)

    branches = ["image"]
    if cfg.variant in ("dual_encoder", "priornet"):
        branches.append("template")
    for branch in branches:
        cin = input_channels(cfg, branch)
        for level in range(cfg.num_levels):
            block(f"{branch}_encoder.{level}", cin if level == 0 else ch[level - 1], ch[level])
    if cfg.variant == "dual_encoder":
        for level in range(cfg.num_levels):
            shapes[f"fusion.{level}.weight"] = (ch[level], 2 * ch[level]) + point
            shapes[f"fusion.{level}.bias"] = (ch[level],)
    for level in reversed(range(cfg.num_levels - 1)):
        shapes[f"decoder.{level}.up.weight"] = (ch[level], ch[level + 1]) + kernel
        shapes[f"decoder.{level}.up.bias"] = (ch[level],)
        block(f"decoder.{level}", 2 * ch[level], ch[level])
    shapes["head.weight"] = (cfg.num_classes + 1, ch[0]) + point
    shapes["head.bias"] = (cfg.num_classes + 1,)
    return shapes


def init_parameters(cfg: NetworkConfig, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Deterministic initialisation from ``cfg.seed``.

    Convolution weights are He-uniform (bound ``sqrt(6 / fan_in)``), biases are
    zero and normalisation gains are one.
    """
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".weight") and len(shape) > 1:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        elif ".norm" in name and name.endswith(".weight"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = torch.from_numpy(values).to(dtype)
    return params


def parameter_count(params: dict[str, torch.Tensor]) -> int:
    return sum(p.numel() for p in params.values())


def layer_groups(params) -> dict[str, list[str]]:
    """Parameter names grouped by top-level component (encoders, decoder, ...)."""
    groups: dict[str, list[str]] = {}
    for name in params:
        groups.setdefault(name.split(".")[0], []).append(name)
    return groups


# ---------------------------------------------------------------------------
# CSAM
# ---------------------------------------------------------------------------


def csam_weights(f1, f2, dim: int = 1, eps: float = CSAM_EPS) -> torch.Tensor:
    """Per-position cosine similarity between two feature maps.

    The channel axis ``dim`` is reduced; the result has the remaining shape.
    Positions where either feature vector has norm below ``eps`` get weight 0.
    """
    f1 = torch.as_tensor(f1)
    f2 = torch.as_tensor(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    dot = (f1 * f2).sum(dim)
    sq1 = (f1 * f1).sum(dim)
    sq2 = (f2 * f2).sum(dim)
    valid = (sq1 >= eps * eps) & (sq2 >= eps * eps)
    denom = torch.sqrt(sq1.clamp(min=eps * eps)) * torch.sqrt(sq2.clamp(min=eps * eps))
    w = torch.where(valid, dot / denom, torch.zeros_like(dot))
    return w.clamp(-1.0, 1.0)


def csam_apply(f1, w, dim: int = 1) -> torch.Tensor:
    """Scale every channel of ``f1`` by the attention weight at its position."""
    f1 = torch.as_tensor(f1)
    w = torch.as_tensor(w)
    spatial = f1.shape[:dim % f1.ndim] + f1.shape[dim % f1.ndim + 1:]
    if tuple(w.shape) != tuple(spatial):
        raise ShapeError(f"attention shape {tuple(w.shape)} does not match features {tuple(f1.shape)}")
    return f1 * w.unsqueeze(dim)


def _gate(w: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "raw":
        return w
    if mode == "shifted":
        return 0.5 * (1.0 + w)
    return 1.0 + w


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _conv(x, weight, bias, dims):
    conv = F.conv3d if dims == 3 else F.conv2d
    return conv(x, weight, bias, padding=weight.shape[-1] // 2)


def _pool(x, dims):
    return F.max_pool3d(x, 2) if dims == 3 else F.max_pool2d(x, 2)


def _instance_norm(x, gain, shift, eps: float = 1e-5):
    # also defined for single-voxel maps (output collapses to the shift)
    axes = tuple(range(2, x.ndim))
    mean = x.mean(axes, keepdim=True)
    var = ((x - mean) ** 2).mean(axes, keepdim=True)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    return (x - mean) / torch.sqrt(var + eps) * gain.reshape(bshape) + shift.reshape(bshape)


def conv_block(x, params, prefix: str, cfg: NetworkConfig):
    """Two conv(3) -> norm -> ReLU units."""
    for unit in (1, 2):
        x = _conv(x, params[f"{prefix}.conv{unit}.weight"], params[f"{prefix}.conv{unit}.bias"],
                  cfg.dimensionality)
        if cfg.norm == "instance":
            x = _instance_norm(x, params[f"{prefix}.norm{unit}.weight"],
                               params[f"{prefix}.norm{unit}.bias"])
        x = F.relu(x)
    return x


def _check_input(x, cfg: NetworkConfig, channels: int, what: str):
    if x.ndim != cfg.dimensionality + 2:
        raise ShapeError(f"{what} must have shape (N, C, *spatial) with {cfg.dimensionality} "
                         f"spatial dims, got {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what} has {x.shape[1]} channels, expected {channels}")
    factor = cfg.downsampling_factor
    if any(s % factor for s in x.shape[2:]):
        raise ShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by {factor}")


def encoder_forward(x, params, cfg: NetworkConfig, branch: str = "image") -> list[torch.Tensor]:
    """Plain (unfused) encoder pass; returns one feature map per level."""
    _check_input(x, cfg, input_channels(cfg, branch), f"{branch} encoder input")
    feats = []
    for level in range(cfg.num_levels):
        if level:
            x = _pool(x, cfg.dimensionality)
        x = conv_block(x, params, f"{branch}_encoder.{level}", cfg)
        feats.append(x)
    return feats


def decoder_forward(bottleneck, skips, params, cfg: NetworkConfig) -> torch.Tensor:
    """Expanding path with same-scale skips.

    ``skips`` are ordered shallow to deep and exclude the bottleneck, so there
    are ``num_levels - 1`` of them. Returns logits with ``K + 1`` channels.
    """
    ch = cfg.channels
    if len(skips) != cfg.num_levels - 1:
        raise ShapeError(f"expected {cfg.num_levels - 1} skip maps, got {len(skips)}")
    if bottleneck.shape[1] != ch[-1]:
        raise ShapeError(f"bottleneck has {bottleneck.shape[1]} channels, expected {ch[-1]}")
    y = bottleneck
    for level in reversed(range(cfg.num_levels - 1)):
        skip = skips[level]
        want = (y.shape[0], ch[level]) + tuple(2 * s for s in y.shape[2:])
        if tuple(skip.shape) != want:
            raise ShapeError(f"skip {level} has shape {tuple(skip.shape)}, expected {want}")
        y = F.interpolate(y, scale_factor=2, mode="nearest")
        y = F.relu(_conv(y, params[f"decoder.{level}.up.weight"], params[f"decoder.{level}.up.bias"],
                         cfg.dimensionality))
        y = conv_block(torch.cat([skip, y], dim=1), params, f"decoder.{level}", cfg)
    return _conv(y, params["head.weight"], params["head.bias"], cfg.dimensionality)


def _fused_encoders(target, template, params, cfg: NetworkConfig, attention=None):
    """Run both encoders level by level, fusing into the image path.

    The fused map feeds the next image-encoder level and the decoder skip;
    the template path continues with its own features.
    """
    f1, f2 = target, template
    fused = []
    for level in range(cfg.num_levels):
        if level:
            f1 = _pool(f1, cfg.dimensionality)
            f2 = _pool(f2, cfg.dimensionality)
        f1 = conv_block(f1, params, f"image_encoder.{level}", cfg)
        f2 = conv_block(f2, params, f"template_encoder.{level}", cfg)
        if cfg.variant == "priornet":
            w = csam_weights(f1, f2)
            if attention is not None:
                attention.append(w.detach())
            f1 = csam_apply(f1, _gate(w, cfg.csam_gate))
        else:
            f1 = _conv(torch.cat([f1, f2], dim=1), params[f"fusion.{level}.weight"],
                       params[f"fusion.{level}.bias"], cfg.dimensionality)
        fused.append(f1)
    return fused


def priornet_forward(target, template, params, cfg: NetworkConfig, attention: list | None = None):
    """Logits for ``target`` given the stacked template input.

    ``target`` is ``(N, 1, *S)``; ``template`` is ``(N, K + 1, *S)`` holding the
    template image followed by its K foreground regions. If ``attention`` is a
    list, the per-level CSAM weights are appended to it.
    """
    if cfg.variant != "priornet":
        raise ConfigError(f"priornet_forward called with variant {cfg.variant!r}")
    return _two_branch(target, template, params, cfg, attention)


def _two_branch(target, template, params, cfg, attention=None):
    _check_input(target, cfg, 1, "target")
    _check_input(template, cfg, cfg.num_classes + 1, "template")
    if target.shape[2:] != template.shape[2:] or target.shape[0] != template.shape[0]:
        raise ShapeError(f"target {tuple(target.shape)} and template {tuple(template.shape)} differ")
    fused = _fused_encoders(target, template, params, cfg, attention)
    return decoder_forward(fused[-1], fused[:-1], params, cfg)


def variant_forward(target, template, params, cfg: NetworkConfig, attention: list | None = None):
    """Dispatch on ``cfg.variant``. ``template`` is ignored by the baseline."""
    if cfg.variant == "baseline":
        feats = encoder_forward(target, params, cfg, "image")
        return decoder_forward(feats[-1], feats[:-1], params, cfg)
    if template is None:
        raise ConfigError(f"variant {cfg.variant!r} needs a template bundle")
    if cfg.variant == "single_encoder":
        if target.shape[0] != template.shape[0] or target.shape[2:] != template.shape[2:]:
            raise ShapeError(f"target {tuple(target.shape)} and template {tuple(template.shape)} differ")
        feats = encoder_forward(torch.cat([target, template], dim=1), params, cfg, "image")
        return decoder_forward(feats[-1], feats[:-1], params, cfg)
    return _two_branch(target, template, params, cfg, attention)


forward = variant_forward
