"""Command-line entry point wiring dataset generation, training, evaluation,
sweeps, ablations and visualization into reproducible runs.

Every successful command writes its frozen effective configuration to
<out>/config.json, so a run can be replayed from that file plus the seed.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import evaluation as ev
from . import generation as gen
from . import training as tr
from .synth_data import DatasetConfig, DatasetManifest, PKSampler, generate_dataset, load_batch

OUT_ROOT_ENV = "CROSSREID_OUT_ROOT"


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def _resolve_out(args):
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / args.command
    raise CliError(f"--out is required (or set {OUT_ROOT_ENV})", code=2)


def _freeze_config(out_dir: Path, payload: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_train_config(args) -> tr.TrainConfig:
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}", code=2)
        data = yaml.safe_load(path.read_text()) or {}
    cfg = tr.TrainConfig.from_dict(data) if data else tr.TrainConfig()
    # command-line overrides win over file values
    for flag, attr in (("seed", "seed"), ("pretrain_epochs", "pretrain_epochs"),
                       ("joint_epochs", "joint_epochs"), ("lambda_align", "lambda_align")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", code=2)
        key, raw = item.split("=", 1)
        if not hasattr(cfg, key):
            raise CliError(f"unknown config key {key!r}", code=2)
        current = getattr(cfg, key)
        value = yaml.safe_load(raw)
        if isinstance(current, bool):
            value = bool(value)
        setattr(cfg, key, value)
    return cfg


def _manifest(args) -> DatasetManifest:
    path = Path(args.data)
    try:
        return DatasetManifest.load(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), code=2)


def _checkpoint(args):
    try:
        return tr.load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(str(exc), code=2)


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise CliError(f"--size expects HxW, got {text!r}", code=2)


def cmd_gen_data(args):
    out = _resolve_out(args)
    h, w = _parse_size(args.size)
    config = DatasetConfig(ids_train=args.ids_train, ids_test=args.ids_test,
                           per_modality=args.per_modality, height=h, width=w, seed=args.seed)
    manifest = generate_dataset(config, out, overwrite=args.overwrite)
    _freeze_config(out, {"command": "gen-data", "dataset": config.to_jsonable()})
    print(f"wrote {len(manifest.records)} images to {out}")
    return 0


def cmd_pretrain(args):
    out = _resolve_out(args)
    cfg = _load_train_config(args)
    manifest = _manifest(args)
    _freeze_config(out, {"command": "pretrain", "data": str(args.data), "train": cfg.to_dict()})
    state = tr.pretrain_generator(cfg, manifest, out_dir=out)
    tr.save_train_state(out / "pretrain_state.pt", state)
    tr.save_checkpoint(out / "model.ckpt", state.generation, state.alignment, cfg,
                       num_classes=state.num_classes)
    print(f"pretrained {cfg.pretrain_epochs} epochs; state at {out / 'pretrain_state.pt'}")
    return 0


def cmd_train(args):
    out = _resolve_out(args)
    manifest = _manifest(args)
    if args.resume:
        resume_path = Path(args.resume)
        if not resume_path.exists():
            raise CliError(f"resume checkpoint not found: {resume_path}", code=2)
        state = tr.load_train_state(resume_path)
        cfg = state.config
        _freeze_config(out, {"command": "train", "data": str(args.data),
                             "resume": str(resume_path), "train": cfg.to_dict()})
        if state.pretrain_epochs_done < cfg.pretrain_epochs:
            state = tr.pretrain_generator(cfg, manifest, out_dir=out, state=state)
        state = tr.joint_train(state, cfg, manifest, out_dir=out)
    else:
        cfg = _load_train_config(args)
        _freeze_config(out, {"command": "train", "data": str(args.data), "train": cfg.to_dict()})
        state = tr.pretrain_generator(cfg, manifest, out_dir=out)
        state = tr.joint_train(state, cfg, manifest, out_dir=out)
    tr.save_train_state(out / "train_state.pt", state)
    tr.save_checkpoint(out / "model.ckpt", state.generation, state.alignment, cfg,
                       num_classes=state.num_classes)
    print(f"trained to epoch {state.joint_epochs_done}; checkpoint at {out / 'model.ckpt'}")
    return 0


def cmd_eval(args):
    out = _resolve_out(args)
    _, align_model, _ = _checkpoint(args)
    manifest = _manifest(args)
    torch.set_num_threads(1)
    report = ev.evaluate_protocol(align_model, manifest, shot=args.shot, repeats=args.repeats,
                                  seed=args.seed, probe_modality=args.probe)
    _freeze_config(out, {"command": "eval", "data": str(args.data),
                         "checkpoint": str(args.checkpoint), "shot": args.shot,
                         "repeats": args.repeats, "seed": args.seed, "probe": args.probe})
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"rank1={report.cmc_mean[0]:.4f} rank10={report.cmc_mean[9]:.4f} "
          f"rank20={report.cmc_mean[19]:.4f} mAP={report.map_mean:.4f} "
          f"({args.shot}-shot, {args.repeats} repeats)")
    return 0


def cmd_sweep(args):
    out = _resolve_out(args)
    cfg = _load_train_config(args)
    manifest = _manifest(args)
    values = [float(v) for v in args.values.split(",") if v != ""]
    if any(v < 0 for v in values):
        raise CliError("sweep values must be nonnegative", code=2)
    _freeze_config(out, {"command": "sweep", "data": str(args.data), "values": values,
                         "train": cfg.to_dict(), "repeats": args.repeats})
    tasks = []
    for value in values:
        run_cfg = tr.TrainConfig.from_dict(cfg.to_dict())
        run_cfg.lambda_align = value
        run_cfg.instance_level_alignment = value > 0
        tasks.append({"config": run_cfg.to_dict(), "dataset_dir": str(manifest.root),
                      "repeats": args.repeats, "eval_seed": args.eval_seed,
                      "meta": {"lambda_align": value}})
    results = ev.run_tasks(ev._run_variant_task, tasks, args.workers)
    rows = [{"lambda_align": r["lambda_align"], "rank1": r["rank1"], "mAP": r["mAP"]}
            for r in results]
    (out / "sweep.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    lines = ["lambda_align,rank1,mAP"]
    lines += [f"{r['lambda_align']},{r['rank1']:.4f},{r['mAP']:.4f}" for r in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"lambda_align={r['lambda_align']}: rank1={r['rank1']:.4f} mAP={r['mAP']:.4f}")
    return 0


def cmd_ablate(args):
    out = _resolve_out(args)
    cfg = _load_train_config(args)
    manifest = _manifest(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    _freeze_config(out, {"command": "ablate", "data": str(args.data), "seeds": seeds,
                         "train": cfg.to_dict(), "repeats": args.repeats})
    rows = ev.ablation_suite(cfg, manifest, seeds=seeds, repeats=args.repeats,
                             eval_seed=args.eval_seed, n_workers=args.workers)
    (out / "ablation.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    (out / "ablation.csv").write_text(ev.ablation_csv(rows))
    for row in rows:
        print(f"[{row['index']}] {row['label']:18s} SL={int(row['sl'])} IL={int(row['il'])} "
              f"rank1={row['rank1']:.4f} mAP={row['mAP']:.4f}")
    return 0


def cmd_visualize(args):
    out = _resolve_out(args)
    generation, _, _ = _checkpoint(args)
    manifest = _manifest(args)
    torch.set_num_threads(1)
    generation.eval()
    rng = np.random.default_rng(args.seed)
    sampler = PKSampler(p=min(args.rows, len(manifest.test_ids)), k=1)
    batch_rgb, batch_ir = load_batch(manifest, sampler, rng, split="test", flip=False)
    pairing = gen.intra_person_pairing(batch_rgb.identities.numpy(),
                                       batch_ir.identities.numpy(), rng)
    with torch.no_grad():
        quads = gen.exchange_generate(generation, batch_rgb, batch_ir, pairing)
    rows = [[quads.x_rgb[i], quads.x_ir[i], quads.x_ir2rgb[i], quads.x_rgb2ir[i]]
            for i in range(len(quads))]
    grid = gen.image_grid(rows)
    from PIL import Image

    _freeze_config(out, {"command": "visualize", "data": str(args.data),
                         "checkpoint": str(args.checkpoint), "rows": args.rows, "seed": args.seed})
    Image.fromarray(grid).save(out / "quads.png")
    print(f"wrote {out / 'quads.png'} (columns: real RGB, real IR, IR->RGB, RGB->IR)")
    return 0


def cmd_hist(args):
    out = _resolve_out(args)
    _, align_model, _ = _checkpoint(args)
    manifest = _manifest(args)
    torch.set_num_threads(1)
    hist = ev.similarity_histograms(align_model, manifest, bins=args.bins)
    _freeze_config(out, {"command": "hist", "data": str(args.data),
                         "checkpoint": str(args.checkpoint), "bins": args.bins})
    (out / "histograms.csv").write_text(hist.to_csv())
    summary = {"intra_mean": hist.intra_mean, "inter_mean": hist.inter_mean, "gap": hist.gap}
    (out / "hist.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    ev.save_histogram_png(hist, out / "histograms.png")
    print(f"intra_mean={hist.intra_mean:.4f} inter_mean={hist.inter_mean:.4f} gap={hist.gap:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="crossreid",
                                     description="Synthetic RGB-IR re-id benchmark pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True):
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ROOT_ENV}/<cmd>)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("gen-data", help="generate the synthetic two-modality dataset")
    add_common(p, data=False)
    p.add_argument("--ids-train", type=int, default=100)
    p.add_argument("--ids-test", type=int, default=50)
    p.add_argument("--per-modality", type=int, default=8)
    p.add_argument("--size", default="64x32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--config", default=None, help="YAML/JSON training config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int, default=None)
        p.add_argument("--joint-epochs", dest="joint_epochs", type=int, default=None)
        p.add_argument("--lambda-align", dest="lambda_align", type=float, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any training-config key")

    p = sub.add_parser("pretrain", help="pretrain the generation module")
    add_common(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="pretrain + joint training (or resume)")
    add_common(p)
    add_train_flags(p)
    p.add_argument("--resume", default=None, help="train-state file to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CMC/mAP over repeated gallery splits")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shot", choices=["single", "multi"], default="single")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe", choices=["ir", "rgb"], default="ir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate across lambda_align values")
    add_common(p)
    add_train_flags(p)
    p.add_argument("--values", default="0,0.5,1,2")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--eval-seed", dest="eval_seed", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the five alignment-variant trainings")
    add_common(p)
    add_train_flags(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--eval-seed", dest="eval_seed", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="grid of real/generated image quads")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rows", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("hist", help="intra/inter-person similarity histograms")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(func=cmd_hist)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, FileExistsError, ValueError, tr.DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
