"""Command-line entry point: ``mdtrans <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import CheckpointError, ConfigError, TrainConfig, load_config
from .data import DatasetError, make_toy_domains, preprocess, scan_dataset, write_manifest
from .evaluation import evaluate, format_report
from .inference import save_png, to_uint8, translate
from .plotting import plot_latent_scatter, plot_loss_curves, plot_translation_grid
from .training import TrainingError, load_model, read_log, run_mmd_vs_kl_experiment, run_training

log = logging.getLogger("mdtrans")

METRICS = ("diversity", "fid", "accuracy", "leakage")


class UsageError(Exception):
    pass


def _config(args, stage: str) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {"stage": stage}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.max_iters is not None:
        changes["max_iters"] = args.max_iters
    return cfg.replace(**changes)


def _finish_run(out_dir: Path, stage: str, ckpt: Path) -> None:
    log_path = out_dir / f"{stage}_log.csv"
    rows = read_log(log_path)
    if rows:
        plot_loss_curves(rows, out_dir / f"{stage}_losses.png")
    print(f"checkpoint: {ckpt}")
    print(f"log: {log_path} ({len(rows)} rows)")


def cmd_make_toy_data(args) -> int:
    make_toy_domains(args.out, args.domains, args.per_domain, args.size, args.seed)
    print(f"wrote {args.domains * args.per_domain} images to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args, "pretrain")
    ds = scan_dataset(args.data, cfg.image_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(ds, out / "manifest.txt")
    ckpt = run_training(cfg, ds, out, resume=args.resume)
    _finish_run(out, "pretrain", ckpt)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, "translate")
    if args.stage1_ckpt is None and args.resume is None and cfg.lambda_dc > 0:
        raise UsageError("--stage1-ckpt is required: the disentanglement term (lambda_dc > 0) "
                         "needs the domain style representations from pretraining; "
                         "set lambda_dc = 0 in the config to train without it")
    ds = scan_dataset(args.data, cfg.image_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = run_training(cfg, ds, out, resume=args.resume, stage1_ckpt=args.stage1_ckpt)
    _finish_run(out, "translate", ckpt)
    return 0


def _parse_style(value: str) -> tuple[str, Path | None]:
    if value == "prior":
        return "prior-sample", None
    if value == "domain":
        return "domain-style", None
    if value.startswith("ref:") and len(value) > 4:
        return "reference-image", Path(value[4:])
    raise UsageError(f"--style must be prior, domain or ref:<path>, got {value!r}")


def cmd_translate(args) -> int:
    source, ref_path = _parse_style(args.style)
    if source != "prior-sample" and args.k != 1:
        raise UsageError(f"--style {args.style} is deterministic; --k must be 1")
    model, meta = load_model(args.ckpt)
    cfg = model.cfg
    if not 0 <= args.target_domain < cfg.n_domains:
        raise UsageError(f"--target-domain must be in [0, {cfg.n_domains})")
    inp = Path(args.input)
    files = sorted(p for p in inp.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")) \
        if inp.is_dir() else [inp]
    if not files:
        raise DatasetError(f"no input images in {inp}")
    reference = None
    if ref_path is not None:
        with Image.open(ref_path) as img:
            reference = preprocess(img, cfg.image_size)[None]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = torch.Generator().manual_seed(args.seed)
    inputs, columns = [], [[] for _ in range(args.k)]
    for f in files:
        with Image.open(f) as img:
            x = preprocess(img, cfg.image_size)[None]
        outs = translate(model, x, args.target_domain, source, args.k, g, reference=reference)
        for i, y in enumerate(outs):
            save_png(y[0], out / f"{f.stem}_{args.target_domain}_{i}.png")
            columns[i].append(to_uint8(y[0]))
        inputs.append(to_uint8(x[0]))
    if args.grid:
        plot_translation_grid(np.stack(inputs), [np.stack(c) for c in columns], args.grid)
    print(f"wrote {len(files) * args.k} images to {out}")
    return 0


def cmd_evaluate(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise UsageError(f"--metrics takes a comma list of {', '.join(METRICS)}")
    model, meta = load_model(args.ckpt)
    ds = scan_dataset(args.data, model.cfg.image_size)
    if "leakage" in metrics and not ds.has_masks():
        raise UsageError(f"leakage needs ground-truth shape masks ({args.data}/.masks/<domain>/), "
                         "which only make-toy-data produces")
    if ds.n_domains != model.cfg.n_domains:
        raise DatasetError(f"{args.data} has {ds.n_domains} domains, model expects {model.cfg.n_domains}")
    g = torch.Generator().manual_seed(args.seed)
    results = evaluate(model, ds, metrics, g, n_per_domain=args.n_per_domain, k=args.k)
    sys.stdout.write(format_report(results))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerows(results.items())
    return 0


def cmd_ablate_dm(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.seeds))
    result = run_mmd_vs_kl_experiment(seeds, steps=args.steps, weight=args.weight)
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "regularizer", "recon", "prior_mmd"])
        for r in result["rows"]:
            w.writerow([r.seed, r.regularizer, f"{r.recon:.8f}", f"{r.prior_mmd:.8f}"])
    for r in result["rows"]:
        np.savetxt(out / f"latents_{r.regularizer}_seed{r.seed}.csv", r.latents, delimiter=",",
                   fmt="%.7g")
    first = {r.regularizer.upper(): r.latents for r in result["rows"] if r.seed == seeds[0]}
    plot_latent_scatter(first, out / "latent_scatter.png", seed=seeds[0])
    s = result["summary"]
    print(f"{'seed':>4}  {'reg':<4}  {'recon':>10}  {'prior_mmd':>10}")
    for r in result["rows"]:
        print(f"{r.seed:>4}  {r.regularizer:<4}  {r.recon:>10.6f}  {r.prior_mmd:>10.6f}")
    print(f"MMD lower reconstruction loss in {s['mmd_better_recon']}/{s['seeds']} seeds"
          f" ({'MMD better' if s['mmd_wins_recon_majority'] else 'KL better'} on majority)")
    print(f"MMD closer to the prior in {s['mmd_better_prior']}/{s['seeds']} seeds"
          f" ({'MMD better' if s['mmd_wins_prior_majority'] else 'KL better'} on majority)")
    (out / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in s.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="mdtrans", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy-data", help="write synthetic multi-domain toy images", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--domains", type=int, default=2, help="number of domains (2-8)")
    s.add_argument("--per-domain", type=int, default=200, help="images per domain")
    s.add_argument("--size", type=int, default=64, help="image side length in pixels")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.set_defaults(func=cmd_make_toy_data)

    for name, func, help_ in (("pretrain", cmd_pretrain, "stage 1: domain style extractor training"),
                              ("train", cmd_train, "stage 2: cross-domain translation training")):
        s = sub.add_parser(name, help=help_, formatter_class=fmt)
        s.add_argument("--data", required=True, help="dataset root with one subdirectory per domain")
        s.add_argument("--config", default=None, help="key = value config file (defaults if omitted)")
        s.add_argument("--out-dir", required=True, help="directory for checkpoints, log and figures")
        s.add_argument("--resume", default=None, help="checkpoint to continue from")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--max-iters", type=int, default=None, help="override the config max_iters")
        if name == "train":
            s.add_argument("--stage1-ckpt", default=None,
                           help="final pretraining checkpoint (optional only when lambda_dc = 0)")
        s.set_defaults(func=func)

    s = sub.add_parser("translate", help="translate images with a trained model", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="translation-stage checkpoint")
    s.add_argument("--input", required=True, help="image file or directory of images")
    s.add_argument("--target-domain", type=int, required=True, help="target domain index")
    s.add_argument("--k", type=int, default=1, help="outputs per input")
    s.add_argument("--style", default="prior", help="prior | domain | ref:<image path>")
    s.add_argument("--out-dir", required=True, help="output directory for PNGs")
    s.add_argument("--seed", type=int, default=0, help="random seed for prior styles")
    s.add_argument("--grid", default=None, help="also write an input/output grid figure here")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="compute desk-scale metrics", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="translation-stage checkpoint")
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--metrics", default="diversity,fid,accuracy,leakage",
                   help=f"comma list from {','.join(METRICS)}")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--n-per-domain", type=int, default=50, help="source images per domain")
    s.add_argument("--k", type=int, default=5, help="styles per input for diversity")
    s.add_argument("--csv", default=None, help="also write metric,value rows here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate-dm", help="2-D latent autoencoder: MMD vs KL prior matching",
                       formatter_class=fmt)
    s.add_argument("--out-dir", required=True, help="directory for tables, latent CSVs and figure")
    s.add_argument("--seeds", type=int, default=3, help="number of seeds")
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--steps", type=int, default=1500, help="training steps per model")
    s.add_argument("--weight", type=float, default=10.0, help="regularizer weight (both variants)")
    s.set_defaults(func=cmd_ablate_dm)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mdtrans {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, DatasetError, TrainingError, OSError, ValueError,
            KeyError) as exc:
        print(f"mdtrans {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
