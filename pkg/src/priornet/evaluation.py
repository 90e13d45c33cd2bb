"""Inference, dataset evaluation, template robustness and the ablation runner."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import Dataset
from .errors import CompatibilityError, DataError, ShapeError
from .network import VARIANTS, NetworkConfig, uses_template, variant_forward
from .objectives import DiceReport, hard_dice_score
from .training import Checkpoint, TrainConfig, train_loop
from .volume import LabelMap, TemplateBundle, Volume

VARIANT_TITLES = {
    "baseline": ("Baseline", "(no prior)"),
    "single_encoder": ("Single encoder", "(variant)"),
    "dual_encoder": ("Dual encoder", "(variant)"),
    "priornet": ("Prior-Net", "(full model)"),
}

# Published CANDI ablation numbers (Dice %). Used only to exercise report
# formatting; they are not reproducible on synthetic data.
REFERENCE_ABLATION = {
    "baseline": 83.10,
    "single_encoder": 85.48,
    "dual_encoder": 86.58,
    "priornet": 89.07,
}


def _logits(params, cfg: NetworkConfig, image: np.ndarray, bundle: TemplateBundle | None):
    target = torch.from_numpy(np.asarray(image, dtype=np.float32)[None, None])
    template = None
    if bundle is not None and uses_template(cfg):
        template = torch.from_numpy(bundle.stacked().astype(np.float32)[None])
    dtype = next(iter(params.values())).dtype
    with torch.no_grad():
        return variant_forward(target.to(dtype), None if template is None else template.to(dtype),
                               params, cfg)


def predict_segmentation(target: Volume, bundle: TemplateBundle | None, ckpt: Checkpoint) -> LabelMap:
    """Per-voxel argmax of the network output.

    A 2D network applied to a 3D target segments each axial slice with the
    same 2D template bundle.
    """
    cfg = ckpt.net_cfg
    data = target.data
    if uses_template(cfg):
        if bundle is None:
            raise CompatibilityError(f"variant {cfg.variant!r} needs a template bundle")
        if bundle.num_classes != cfg.num_classes:
            raise CompatibilityError(f"bundle has {bundle.num_classes} classes, checkpoint expects "
                                     f"{cfg.num_classes}")
    slicewise = cfg.dimensionality == 2 and data.ndim == 3
    if not slicewise and data.ndim != cfg.dimensionality:
        raise CompatibilityError(f"{data.ndim}D target for a {cfg.dimensionality}D network")
    spatial = data.shape[:2] if slicewise else data.shape
    if bundle is not None and uses_template(cfg) and bundle.shape != spatial:
        raise ShapeError(f"template shape {bundle.shape} does not match target {spatial}")
    try:
        if slicewise:
            out = np.stack([_logits(ckpt.params, cfg, data[..., z], bundle)[0].argmax(0).numpy()
                            for z in range(data.shape[-1])], axis=-1)
        else:
            out = _logits(ckpt.params, cfg, data, bundle)[0].argmax(0).numpy()
    except ShapeError as exc:
        raise CompatibilityError(str(exc)) from None
    return LabelMap(out.astype(np.uint8), cfg.num_classes, target.spacing)


@dataclass
class EvaluationResult:
    names: list[str]
    per_volume: list[list[float]]
    report: DiceReport
    template: tuple

    def to_table(self) -> str:
        k = len(self.report.per_class_dice)
        head = "volume".ljust(16) + "".join(f"{'class ' + str(c):>10}" for c in range(1, k + 1)) + "      mean"
        lines = [head]
        for name, row in zip(self.names, self.per_volume):
            lines.append(name.ljust(16) + "".join(f"{100 * d:10.2f}" for d in row)
                         + f"{100 * np.mean(row):10.2f}")
        lines.append("mean".ljust(16) + "".join(f"{100 * d:10.2f}" for d in self.report.per_class_dice)
                     + f"{100 * self.report.mean_foreground_dice:10.2f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "template": list(self.template),
            "volumes": [{"name": n, "per_class_dice": r} for n, r in zip(self.names, self.per_volume)],
            "per_class_dice": self.report.per_class_dice,
            "mean_foreground_dice": self.report.mean_foreground_dice,
        }, indent=2)


def choose_templates(data: Dataset, n: int, seed: int) -> list[tuple]:
    keys = data.samples("train")
    if not keys:
        raise DataError("no training samples to draw templates from")
    if n > len(keys):
        raise DataError(f"asked for {n} distinct templates, only {len(keys)} training samples")
    idx = np.random.default_rng(seed).choice(len(keys), size=n, replace=False)
    return [keys[i] for i in idx]


def evaluate_dataset(data: Dataset, ckpt: Checkpoint, template_seed: int = 0,
                     template: tuple | None = None) -> EvaluationResult:
    """Hard Dice of every test volume against one template from the train split.

    The aggregate averages each class over volumes, then averages the classes.
    """
    test = data.volumes("test")
    if not test:
        raise DataError("test split is empty")
    key = template if template is not None else choose_templates(data, 1, template_seed)[0]
    if data.splits[key[0]] != "train":
        raise DataError("templates must come from the training split")
    bundle = data.bundle(key)
    rows = []
    for i in test:
        pred = predict_segmentation(Volume(data.images[i]), bundle, ckpt)
        rows.append(hard_dice_score(pred.data, data.labels[i], data.num_classes).per_class_dice)
    report = DiceReport.from_per_class(np.mean(np.asarray(rows), axis=0))
    return EvaluationResult([data.names[i] for i in test], rows, report, key)


@dataclass
class RobustnessResult:
    templates: list[tuple]
    means: list[float]

    @property
    def spread(self) -> float:
        return float(max(self.means) - min(self.means))

    @property
    def std(self) -> float:
        return float(np.std(self.means))

    def to_table(self) -> str:
        lines = ["template            mean dice(%)"]
        for key, m in zip(self.templates, self.means):
            lines.append(f"{str(key):<20}{100 * m:12.2f}")
        lines.append(f"spread (max-min)    {100 * self.spread:12.2f}")
        lines.append(f"std                 {100 * self.std:12.2f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"templates": [list(t) for t in self.templates], "means": self.means,
                           "spread": self.spread, "std": self.std}, indent=2)


def template_robustness_study(data: Dataset, ckpt: Checkpoint, n_templates: int,
                              seed: int = 0) -> RobustnessResult:
    templates = choose_templates(data, n_templates, seed)
    means = [evaluate_dataset(data, ckpt, template=t).report.mean_foreground_dice for t in templates]
    return RobustnessResult(templates, means)


@dataclass
class AblationResult:
    seeds: list[int]
    scores: dict[str, list[float]]
    checkpoints: dict[str, list[Checkpoint]]

    @property
    def medians(self) -> dict[str, float]:
        return {v: float(np.median(s)) for v, s in self.scores.items()}

    def to_table(self, values: dict[str, float] | None = None) -> str:
        return format_ablation_table(values if values is not None
                                     else {v: 100 * m for v, m in self.medians.items()})

    def to_json(self) -> str:
        return json.dumps({"seeds": self.seeds, "scores": self.scores, "medians": self.medians}, indent=2)


def format_ablation_table(values: dict[str, float]) -> str:
    """Four-column Dice table: baseline, single encoder, dual encoder, Prior-Net."""
    width = 16
    names = "Method".ljust(10) + "".join(VARIANT_TITLES[v][0].center(width) for v in VARIANTS)
    notes = "".ljust(10) + "".join(VARIANT_TITLES[v][1].center(width) for v in VARIANTS)
    row = "Dice (%)".ljust(10) + "".join(f"{values[v]:.2f}".center(width) for v in VARIANTS)
    rule = "-" * len(names)
    return "\n".join([rule, names, notes, rule, row, rule])


def ablation_study(data: Dataset, base_train_cfg: TrainConfig, net_cfg: NetworkConfig,
                   seeds=(0, 1, 2), log=None) -> AblationResult:
    """Train and evaluate all four variants with identical data, seeds and budgets."""
    scores = {v: [] for v in VARIANTS}
    ckpts = {v: [] for v in VARIANTS}
    for seed in seeds:
        for variant in VARIANTS:
            cfg_n = replace(net_cfg, variant=variant, seed=seed)
            cfg_t = replace(base_train_cfg, seed=seed)
            ckpt = train_loop(data, cfg_t, cfg_n)
            score = evaluate_dataset(data, ckpt, template_seed=seed).report.mean_foreground_dice
            if log:
                log(f"seed {seed} variant {variant} train_loss {ckpt.loss_history[-1] if ckpt.loss_history else float('nan'):.6f} dice {score:.6f}")
            scores[variant].append(score)
            ckpts[variant].append(ckpt)
    return AblationResult(list(seeds), scores, ckpts)
