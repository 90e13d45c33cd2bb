"""Optimisation loop: Adam, cosine-annealed learning rate, checkpoints.

Checkpoint container layout (all integers little-endian)::

    8 bytes   magic b"PNCKPT\\x00\\x01"
    4 bytes   uint32 format version
    8 bytes   uint64 length L of the JSON header
    L bytes   UTF-8 JSON: {"meta": {...}, "arrays": [{"name", "dtype",
              "shape", "offset", "nbytes"}, ...]}  (keys sorted)
    ...       array payloads, C order, little-endian, at the listed offsets
              relative to the end of the header

Array names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import Dataset, DatasetManifest, Preprocessing, sample_training_pair, steps_per_epoch
from .errors import CompatibilityError, ConfigError, DataError, FormatError, NumericError, ShapeError
from .network import NetworkConfig, init_parameters, uses_template, variant_forward
from .objectives import DICE_SMOOTH, dice_loss
from .volume import one_hot_encode

CHECKPOINT_MAGIC = b"PNCKPT\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 2
    lr_start: float = 0.02
    lr_end: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dice_eps: float = DICE_SMOOTH
    # excluding background lets a class absorb it and stall training
    dice_background: bool = True
    # 0 disables clipping
    grad_clip: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_annealed_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """``lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total_steps)) / 2``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ConfigError(f"need 0 <= step <= total_steps and total_steps >= 1, got {step}, {total_steps}")
    if step == total_steps:
        return lr_end
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()}, 0)


def adam_update(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam step. Returns new ``(params, state)``; inputs are untouched."""
    b1, b2 = betas
    t = state.step + 1
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, "
                             f"expected {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at Adam step {t}")
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = p - lr * (m / c1) / (torch.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_fingerprint(net_cfg: NetworkConfig, train_cfg: TrainConfig) -> str:
    train = train_cfg.to_dict()
    train.pop("checkpoint_every")
    blob = json.dumps({"network": net_cfg.to_dict(), "train": train}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    adam: AdamState
    net_cfg: NetworkConfig
    train_cfg: TrainConfig
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.adam.step

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.net_cfg, self.train_cfg)

    def check_compatible(self, net_cfg: NetworkConfig, train_cfg: TrainConfig | None = None):
        if train_cfg is None:
            if self.net_cfg != net_cfg:
                raise CompatibilityError(f"checkpoint network config {self.net_cfg} != {net_cfg}")
        elif self.fingerprint != config_fingerprint(net_cfg, train_cfg):
            raise CompatibilityError("checkpoint was produced with a different configuration "
                                     f"({self.fingerprint} vs {config_fingerprint(net_cfg, train_cfg)})")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    arrays = []
    for prefix, tensors in (("param", ckpt.params), ("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)):
        for name, t in tensors.items():
            arrays.append((f"{prefix}/{name}", t.detach().cpu().numpy()))
    index, offset = [], 0
    for name, a in arrays:
        nbytes = a.nbytes
        index.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape),
                      "offset": offset, "nbytes": nbytes})
        offset += nbytes
    meta = {
        "version": CHECKPOINT_VERSION,
        "network": ckpt.net_cfg.to_dict(),
        "train": ckpt.train_cfg.to_dict(),
        "fingerprint": ckpt.fingerprint,
        "epoch": ckpt.epoch,
        "step": ckpt.adam.step,
        "rng_state": ckpt.rng_state,
        "loss_history": ckpt.loss_history,
    }
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    return path


def load_checkpoint(path, net_cfg: NetworkConfig | None = None,
                    train_cfg: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint; if configs are given, reject a fingerprint mismatch."""
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 12
    if len(raw) < head or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < head + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[head:head + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    body = raw[head + hlen:]
    expected = sum(a["nbytes"] for a in header["arrays"])
    if len(body) != expected:
        raise FormatError(f"{path}: truncated payload ({len(body)} of {expected} bytes)")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for a in header["arrays"]:
        dt = np.dtype(a["dtype"]).newbyteorder("<")
        chunk = np.frombuffer(body, dtype=dt, count=int(np.prod(a["shape"])), offset=a["offset"])
        prefix, name = a["name"].split("/", 1)
        groups[prefix][name] = torch.from_numpy(chunk.reshape(a["shape"]).astype(dt.newbyteorder("=")))
    meta = header["meta"]
    ckpt = Checkpoint(
        params=groups["param"],
        adam=AdamState(groups["adam_m"], groups["adam_v"], int(meta["step"])),
        net_cfg=NetworkConfig(**meta["network"]),
        train_cfg=TrainConfig(**meta["train"]),
        epoch=int(meta["epoch"]),
        rng_state=meta["rng_state"],
        loss_history=[float(x) for x in meta["loss_history"]],
    )
    if ckpt.fingerprint != meta["fingerprint"]:
        raise FormatError(f"{path}: stored fingerprint does not match stored configuration")
    if net_cfg is not None:
        ckpt.check_compatible(net_cfg, train_cfg)
    return ckpt


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def make_batch(pairs, num_classes: int, dtype=torch.float32):
    """Stack training pairs into ``(target, template, onehot)`` tensors."""
    target = np.stack([p.target.data[None] for p in pairs])
    template = np.stack([p.bundle.stacked() for p in pairs])
    onehot = np.stack([one_hot_encode(p.labels) for p in pairs])
    return (torch.from_numpy(target.astype(np.float32)).to(dtype),
            torch.from_numpy(template.astype(np.float32)).to(dtype),
            torch.from_numpy(onehot).to(dtype))


def _clip(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads


def train_loop(data, cfg: TrainConfig, net_cfg: NetworkConfig, resume: Checkpoint | None = None,
               log: Callable[[str], None] | None = None, until_epoch: int | None = None,
               checkpoint_path=None) -> Checkpoint:
    """Train ``net_cfg.variant`` on the training split of ``data``.

    Each step samples ``batch_size`` target/template pairs, runs the forward
    pass, the soft Dice loss and its backward pass, and applies Adam with a
    per-step cosine learning rate. An epoch is ``ceil(#train / batch_size)``
    steps. Log lines ``epoch <n> step <s> lr <v> loss <v>`` go to ``log``.

    ``until_epoch`` stops early while keeping the full-length schedule, so a
    later ``resume`` continues exactly where the run left off. With
    ``cfg.checkpoint_every`` and ``checkpoint_path`` set, a checkpoint is
    written every that many epochs (and always at the end).
    """
    if isinstance(data, DatasetManifest):
        data = Dataset.from_manifest(data, Preprocessing(), net_cfg.dimensionality)
    if data.num_classes != net_cfg.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, network expects {net_cfg.num_classes}")
    keys = data.samples("train")
    if not keys:
        raise DataError("training split is empty")
    factor = net_cfg.downsampling_factor
    if any(s % factor for s in data.sample_shape()):
        raise ShapeError(f"sample shape {data.sample_shape()} not divisible by {factor}")
    emit = log or (lambda line: None)

    rng = np.random.default_rng(cfg.seed)
    if resume is None:
        params = init_parameters(net_cfg)
        ckpt = Checkpoint(params, AdamState.zeros_like(params), net_cfg, cfg)
    else:
        resume.check_compatible(net_cfg, cfg)
        ckpt = resume
        rng.bit_generator.state = resume.rng_state
    params, adam = ckpt.params, ckpt.adam
    history = list(ckpt.loss_history)

    per_epoch = steps_per_epoch(len(keys), cfg.batch_size)
    total = cfg.epochs * per_epoch
    last = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    epoch = ckpt.epoch
    while epoch < last:
        losses = []
        for s in range(per_epoch):
            step = adam.step
            lr = cosine_annealed_lr(step, max(total - 1, 1), cfg.lr_start, cfg.lr_end)
            pairs = [sample_training_pair(data, rng) for _ in range(cfg.batch_size)]
            target, template, onehot = make_batch(pairs, net_cfg.num_classes)
            leaves = {k: p.detach().requires_grad_(True) for k, p in params.items()}
            logits = variant_forward(target, template if uses_template(net_cfg) else None,
                                     leaves, net_cfg)
            loss = dice_loss(logits, onehot, cfg.dice_eps, cfg.dice_background)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} at epoch {epoch} step {step}")
            names = list(leaves)
            grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
            grads = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(names, grads)}
            if cfg.grad_clip > 0:
                grads = _clip(grads, cfg.grad_clip)
            params, adam = adam_update(params, grads, adam, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
            losses.append(value)
            emit(f"epoch {epoch} step {step} lr {lr:.9e} loss {value:.9e}")
        epoch += 1
        mean = float(np.mean(losses))
        history.append(mean)
        emit(f"epoch {epoch - 1} mean_loss {mean:.9e}")
        ckpt = Checkpoint(params, adam, net_cfg, cfg, epoch, rng.bit_generator.state, history)
        if checkpoint_path and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt, checkpoint_path)
    ckpt = Checkpoint(params, adam, net_cfg, cfg, epoch, rng.bit_generator.state, history)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt
