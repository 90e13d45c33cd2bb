"""Command-line entry point: ``priornet <command> ...``.

Experiment parameters come from config files (see ``priornet.config``);
flags only carry paths and seeds. Every command that produces artifacts
writes them to a fresh timestamped directory under ``[train] out_dir``.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import parse_config
from .data import Dataset, DatasetManifest, generate_synthetic_dataset
from .errors import PriorNetError
from .evaluation import (
    ablation_study,
    evaluate_dataset,
    predict_segmentation,
    template_robustness_study,
)
from .io import read_labelmap, read_volume, write_volume
from .network import NetworkConfig, csam_apply, csam_weights, init_parameters, priornet_forward
from .objectives import dice_loss, finite_difference_gradcheck, soft_dice_loss
from .training import load_checkpoint, save_checkpoint, train_loop
from .volume import extract_foreground_regions

GRADCHECK_TOLERANCE = 1e-4
PARAM_PROBES = ("template_encoder.0.conv1.weight", "image_encoder.2.conv2.weight",
                "decoder.0.conv1.weight", "head.weight")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _run_dir(out_dir: Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = out_dir / f"{stamp}-{command}"
    n = 1
    while path.exists():
        n += 1
        path = out_dir / f"{stamp}-{command}-{n}"
    path.mkdir(parents=True)
    return path


class _Log:
    def __init__(self, path: Path, echo: bool = False):
        self.fh = open(path, "a")
        self.echo = echo

    def __call__(self, line: str):
        self.fh.write(line + "\n")
        self.fh.flush()
        if self.echo:
            print(line)

    def close(self):
        self.fh.close()


def _load(cfg):
    manifest = DatasetManifest.read(cfg.manifest_path())
    net = cfg.network_config(manifest.num_classes)
    data = Dataset.from_manifest(manifest, cfg.preprocessing(), net.dimensionality)
    return manifest, net, data


def _start_run(cfg, command: str):
    run = _run_dir(cfg.resolve(cfg.train["out_dir"]), command)
    (run / "config.txt").write_text(cfg.echo())
    log = _Log(run / "run.log")
    log(f"# command {command}")
    for line in cfg.echo().splitlines():
        log(f"# {line}")
    return run, log


def cmd_gen_data(args):
    cfg = parse_config(args.spec_file)
    spec = cfg.synthetic_spec()
    manifest = generate_synthetic_dataset(spec, args.out_dir)
    print(f"wrote {len(manifest.entries)} volumes and {Path(args.out_dir) / 'manifest.tsv'}")
    return 0


def cmd_train(args):
    cfg = parse_config(args.config)
    _, net, data = _load(cfg)
    train = cfg.train_config()
    run, log = _start_run(cfg, "train")
    ckpt_path = run / "checkpoint.pnck"
    resume = load_checkpoint(args.resume, net, train) if args.resume else None
    ckpt = train_loop(data, train, net, resume=resume, log=log, checkpoint_path=ckpt_path)
    log.close()
    final = ckpt.loss_history[-1] if ckpt.loss_history else float("nan")
    print(f"trained {net.variant} for {ckpt.epoch} epochs, final mean loss {final:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args):
    cfg = parse_config(args.config)
    _, net, data = _load(cfg)
    ckpt = load_checkpoint(args.checkpoint, net)
    seed = cfg.data["template_seed"] if args.template_seed is None else args.template_seed
    result = evaluate_dataset(data, ckpt, seed)
    run, log = _start_run(cfg, "eval")
    log(f"# checkpoint {args.checkpoint}")
    (run / "report.txt").write_text(result.to_table() + "\n")
    (run / "report.json").write_text(result.to_json() + "\n")
    log.close()
    print(result.to_table())
    print(f"report: {run / 'report.txt'}")
    return 0


def cmd_predict(args):
    cfg = parse_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    target = read_volume(args.target)
    template = read_volume(args.template)
    if args.template_labels:
        labels_path = Path(args.template_labels)
    else:
        manifest = DatasetManifest.read(cfg.manifest_path())
        match = [e for e in manifest.entries
                 if manifest.resolve(e.image).resolve() == Path(args.template).resolve()]
        if not match:
            raise PriorNetError(f"template {args.template} is not in the manifest; pass --template-labels")
        labels_path = manifest.resolve(match[0].label)
    labels = read_labelmap(labels_path, ckpt.net_cfg.num_classes)
    pre = cfg.preprocessing()
    target, _ = pre.apply(target)
    template, labels = pre.apply(template, labels)
    pred = predict_segmentation(target, extract_foreground_regions(template, labels), ckpt)
    write_volume(args.out, pred)
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args):
    cfg = parse_config(args.config)
    _, net, data = _load(cfg)
    run, log = _start_run(cfg, "ablate")
    result = ablation_study(data, cfg.train_config(), net, cfg.train["ablation_seeds"], log=log)
    (run / "ablation.txt").write_text(result.to_table() + "\n")
    (run / "ablation.json").write_text(result.to_json() + "\n")
    for variant, ckpts in result.checkpoints.items():
        for seed, ckpt in zip(result.seeds, ckpts):
            save_checkpoint(ckpt, run / f"{variant}_seed{seed}.pnck")
    log.close()
    print(result.to_table())
    print(f"report: {run / 'ablation.txt'}")
    return 0


def cmd_robustness(args):
    cfg = parse_config(args.config)
    _, net, data = _load(cfg)
    ckpt = load_checkpoint(args.checkpoint, net)
    seed = cfg.data["template_seed"] if args.seed is None else args.seed
    result = template_robustness_study(data, ckpt, args.n_templates, seed)
    run, log = _start_run(cfg, "robustness")
    (run / "robustness.txt").write_text(result.to_table() + "\n")
    (run / "robustness.json").write_text(result.to_json() + "\n")
    log.close()
    print(result.to_table())
    return 0


def gradcheck_errors(seed: int = 0) -> dict[str, float]:
    """Max relative errors of the CSAM, Dice-loss and full-network gradients."""
    rng = np.random.default_rng(seed)
    f2 = torch.from_numpy(rng.normal(size=(1, 8, 4, 4, 4)))
    probe = torch.from_numpy(rng.normal(size=(1, 8, 4, 4, 4)))
    csam = finite_difference_gradcheck(
        lambda x: (csam_apply(x, csam_weights(x, f2)) * probe).sum(),
        rng.normal(size=(1, 8, 4, 4, 4)))

    logits = torch.from_numpy(rng.normal(size=(2, 4, 4, 4, 4)))
    labels = rng.integers(0, 4, size=(2, 4, 4, 4))
    onehot = torch.from_numpy(np.moveaxis(np.eye(4)[labels], -1, 1).copy())
    _, grad = soft_dice_loss(logits, onehot)
    dice = finite_difference_gradcheck(lambda x: soft_dice_loss(x, onehot)[0], logits, grad=grad)

    cfg = NetworkConfig(num_classes=2, base_channels=4, num_levels=3, seed=seed)
    params = init_parameters(cfg, torch.float64)
    template = torch.from_numpy(rng.normal(size=(1, 3, 8, 8, 8)))
    labels = rng.integers(0, 3, size=(1, 8, 8, 8))
    onehot = torch.from_numpy(np.moveaxis(np.eye(3)[labels], -1, 1).copy())
    target = rng.normal(size=(1, 1, 8, 8, 8))
    full = finite_difference_gradcheck(
        lambda x: dice_loss(priornet_forward(x, template, params, cfg), onehot), target)

    # a sample of weights from each stage, so the parameter gradients used in
    # training are checked too
    target = torch.from_numpy(target)
    weights = 0.0
    for name in PARAM_PROBES:
        def loss_at(w, name=name):
            return dice_loss(priornet_forward(target, template, {**params, name: w}, cfg), onehot)
        coords = rng.choice(params[name].numel(), size=min(16, params[name].numel()), replace=False).tolist()
        weights = max(weights, finite_difference_gradcheck(loss_at, params[name], coords=coords))
    return {"csam": csam, "dice_loss": dice, "priornet_forward": full, "priornet_weights": weights}


def cmd_gradcheck(args):
    errors = gradcheck_errors(args.seed)
    ok = True
    for name, err in errors.items():
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{name:<18} max rel err {err:.3e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="priornet", description="Template-guided segmentation with cosine attention.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("spec_file")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice on the test split")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--template-seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one volume given a template")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--template-labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare all four variants")
    p.add_argument("config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("robustness", help="Dice spread across templates")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-templates", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_robustness)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("priornet: a command is required")
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except _UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (PriorNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
