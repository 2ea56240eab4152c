"""Acceptance gate. Each test checks one criterion at its stated tolerance and
records a PASS/FAIL line that pytest prints in the terminal summary."""

import math
import time

import numpy as np
import pytest
import torch

from conftest import TOY_SIZE, toy_config
from helpers import FD_RTOL, fd_check
from mdtrans.cli import main as cli_main
from mdtrans.core import seeded_rng
from mdtrans.data import make_toy_domains, scan_dataset
from mdtrans.evaluation import (domain_accuracy, diversity_score, fid_proxy, leakage_score,
                                reference_translator, translate_all)
from mdtrans.losses import (loss_adversarial, loss_domain_classification,
                            loss_kl_to_standard_normal, mmd)
from mdtrans.networks import adain, build_translator, feature_stats
from mdtrans.training import (create_state, load_model, read_log, run_mmd_vs_kl_experiment,
                              run_training, train_step)
from test_losses import _loss_grad_cases, mmd_loop
from test_networks import _grad_cases

WINDOW = 20


def head_tail(values, window=WINDOW):
    v = np.asarray(values, dtype=float)
    return v[:window].mean(), v[-window:].mean()


def test_criterion_01_mmd_oracle(report_criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = worst_self = 0.0
    for _ in range(100):
        n, m, d = rng.integers(2, 21), rng.integers(2, 21), rng.integers(1, 9)
        q = rng.standard_normal((n, d))
        p = rng.standard_normal((m, d)) * rng.uniform(0.5, 2) + rng.uniform(-1, 1)
        sigma = float(rng.uniform(0.5, 2.0))
        worst = max(worst, abs(float(mmd(torch.from_numpy(q), torch.from_numpy(p), sigma))
                               - mmd_loop(q.tolist(), p.tolist(), sigma)))
        worst_self = max(worst_self, abs(float(mmd(torch.from_numpy(q), torch.from_numpy(q), sigma))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and worst_self <= 1e-9 and elapsed < 5
    report_criterion(1, ok, f"max |mmd - loop| = {worst:.2e}, max mmd(X,X) = {worst_self:.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_adain_moments(report_criterion):
    g = torch.Generator().manual_seed(7)
    t0 = time.perf_counter()
    worst_mean = worst_std = worst_id = 0.0
    for _ in range(50):
        n, c, h = (int(v) for v in torch.randint(1, 5, (3,), generator=g))
        h = 4 + 2 * h
        z = torch.randn(n, c, h, h, generator=g) * (torch.rand(1, generator=g) * 4 + 0.5) + torch.randn(1, generator=g)
        gamma = torch.rand(n, c, generator=g) * 3 + 0.1
        beta = torch.randn(n, c, generator=g) * 2
        out = adain(z, gamma, beta)
        worst_mean = max(worst_mean, float((out.mean(dim=(2, 3)) - beta).abs().max()))
        worst_std = max(worst_std, float((out.std(dim=(2, 3), unbiased=False) - gamma).abs().max()))
        mu, sd = feature_stats(z)
        worst_id = max(worst_id, float((adain(z, sd, mu) - z).abs().max()))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-3 and worst_std <= 1e-2 and worst_id <= 1e-4 and elapsed < 5
    report_criterion(2, ok, f"mean err {worst_mean:.1e}, std err {worst_std:.1e}, "
                            f"identity err {worst_id:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_03_gradient_checks(tiny_cfg, report_criterion):
    t0 = time.perf_counter()
    errors = {}
    for prefix, cases in (("loss", _loss_grad_cases), ("net", _grad_cases)):
        for name in cases(tiny_cfg):
            for seed in range(3):
                err = fd_check(lambda dt: cases(tiny_cfg, dt)[name], torch.Generator().manual_seed(seed))
                errors[f"{prefix}:{name}"] = max(err, errors.get(f"{prefix}:{name}", 0.0))
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= FD_RTOL and elapsed < 120
    report_criterion(3, ok, f"{len(errors)} terms x 3 draws, worst {worst} rel err {errors[worst]:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_closed_forms(report_criterion):
    ce = float(loss_domain_classification(torch.zeros(16, 4), torch.arange(4).repeat(4)))
    half = torch.full((4, 1, 3, 3), 0.5)
    lsgan = float(loss_adversarial(half, half, "discriminator"))
    kl = float(loss_kl_to_standard_normal(torch.tensor([[0.0], [2.0]])))  # mean 1, variance 1
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 6))
    delta = rng.uniform(-2, 2, 6)
    fid = fid_proxy(x, x + delta)
    errs = [abs(ce - math.log(4)), abs(lsgan - 0.25), abs(kl - 0.5)]
    ok = max(errs) <= 1e-6 and abs(fid - float(delta @ delta)) <= 1e-5
    report_criterion(4, ok, f"ce {ce:.7f} (ln4), lsgan {lsgan:.7f}, kl {kl:.7f}, "
                            f"fid {fid:.6f} vs |d|^2 {float(delta @ delta):.6f}")
    assert ok


def test_criterion_05_determinism_and_resume(tiny_cfg, tmp_path, report_criterion):
    root = tmp_path / "toy"
    make_toy_domains(root, 3, 8, 16, seed=0)

    def traces(seed):
        ds = scan_dataset(root, 16)
        state = create_state(tiny_cfg.replace(seed=seed))
        return [train_step(state, ds) for _ in range(20)]
    bit_equal = traces(0) == traces(0)

    cfg = tiny_cfg.replace(max_iters=220, checkpoint_every=200)
    full = run_training(cfg, scan_dataset(root, 16), tmp_path / "full")
    run_training(cfg.replace(max_iters=200), scan_dataset(root, 16), tmp_path / "part")
    resumed = run_training(cfg, scan_dataset(root, 16), tmp_path / "part",
                           resume=tmp_path / "part" / "pretrain_000200.dcm")
    a, b = load_model(full)[0].parameter_map(), load_model(resumed)[0].parameter_map()
    diff = max(float((a[k] - b[k]).abs().max()) for k in a)
    ok = bit_equal and diff == 0.0
    report_criterion(5, ok, f"repeat traces bit-equal: {bit_equal}; resume@200 -> 220 max-abs-diff {diff}")
    assert ok


@pytest.mark.slow
def test_criterion_06_toy_stage1(toy_stage1, toy_data, report_criterion):
    rows = read_log(toy_stage1.parent / "pretrain_log.csv")
    first, last = head_tail([r["sr"] for r in rows])
    model, _ = load_model(toy_stage1)
    held = scan_dataset(toy_data / "heldout", TOY_SIZE)
    x = torch.cat([held.domain_images(0), held.domain_images(1)])
    labels = torch.cat([torch.zeros(50), torch.ones(50)]).long()
    acc = domain_accuracy(x, labels, model.disc)
    elapsed = toy_stage1.stat().st_mtime - (toy_stage1.parent / "pretrain_000000.dcm").stat().st_mtime
    ok = last < 0.5 * first and acc > 0.9 and elapsed < 15 * 60
    report_criterion(6, ok, f"sr moving avg {first:.4f} -> {last:.4f} ({last / first:.0%}), "
                            f"held-out class accuracy {acc:.3f}, {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_07_toy_stage2(toy_stage2, toy_data, report_criterion):
    rows = read_log(toy_stage2.parent / "translate_log.csv")
    first, last = head_tail([r["cc"] for r in rows])
    model, _ = load_model(toy_stage2)
    held = scan_dataset(toy_data / "heldout", TOY_SIZE)
    fakes, labels = translate_all(model, held, torch.Generator().manual_seed(0), 50)
    acc = domain_accuracy(fakes, labels, model.disc)
    untrained = build_translator(model.cfg, seeded_rng(model.cfg.seed))
    x = held.domain_images(0)[:20]
    div = diversity_score(model, x, 1, 5, torch.Generator().manual_seed(1))
    base = diversity_score(untrained, x, 1, 5, torch.Generator().manual_seed(1))
    elapsed = toy_stage2.stat().st_mtime - (toy_stage2.parent / "translate_000000.dcm").stat().st_mtime
    ok = acc > 0.8 and div > base and last < 0.5 * first and elapsed < 2 * 3600
    report_criterion(7, ok, f"target accuracy {acc:.3f}, diversity {div:.4f} vs untrained {base:.4f}, "
                            f"cycle moving avg {first:.4f} -> {last:.4f} ({last / first:.0%}), "
                            f"{elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_08_disentanglement_ablation(tmp_path, report_criterion):
    size = 32
    make_toy_domains(tmp_path / "toy", 2, 200, size, seed=0)
    wins, detail = 0, []
    for seed in range(3):
        ds = scan_dataset(tmp_path / "toy", size)
        s1 = run_training(toy_config(size, seed=seed, max_iters=300), ds, tmp_path / f"s1_{seed}")
        scores = {}
        for ldc in (0.0, 1.0):
            cfg = toy_config(size, seed=seed, stage="translate", max_iters=1000, lambda_dc=ldc)
            ckpt = run_training(cfg, ds, tmp_path / f"s2_{seed}_{ldc}", stage1_ckpt=s1)
            model, _ = load_model(ckpt)
            scores[ldc] = leakage_score(reference_translator(model), ds,
                                        torch.Generator().manual_seed(100 + seed), 100)
        wins += scores[1.0] > scores[0.0]
        detail.append(f"seed {seed}: {scores[1.0]:.4f} vs {scores[0.0]:.4f}")
    ok = wins >= 2
    report_criterion(8, ok, f"IoU lambda_dc=1 vs 0 -> {'; '.join(detail)} ({wins}/3 wins)")
    assert ok


@pytest.mark.slow
def test_criterion_09_mmd_vs_kl(report_criterion):
    t0 = time.perf_counter()
    result = run_mmd_vs_kl_experiment(seeds=(0, 1, 2))
    elapsed = time.perf_counter() - t0
    by_seed = {}
    for r in result["rows"]:
        by_seed.setdefault(r.seed, {})[r.regularizer] = r
    both = sum(p["mmd"].recon < p["kl"].recon and p["mmd"].prior_mmd < p["kl"].prior_mmd
               for p in by_seed.values())
    detail = "; ".join(f"seed {s}: recon {p['mmd'].recon:.4f}/{p['kl'].recon:.4f}, "
                       f"prior {p['mmd'].prior_mmd:.4f}/{p['kl'].prior_mmd:.4f}"
                       for s, p in by_seed.items())
    ok = both >= 2 and elapsed < 20 * 60
    report_criterion(9, ok, f"MMD/KL {detail} ({both}/3 both lower, {elapsed / 60:.1f} min)")
    assert ok


@pytest.mark.slow
def test_criterion_10_cli_smoke(tmp_path, report_criterion):
    t0 = time.perf_counter()
    cfg = tmp_path / "toy32.cfg"
    c = toy_config(32)
    cfg.write_text("".join(f"{k} = {getattr(c, k)}\n" for k in (
        "n_domains", "image_size", "content_channels", "n_res_blocks", "style_channels", "mlp_dim",
        "disc_channels", "disc_layers", "ext_layers")) + "checkpoint_every = 300\n")
    data, s1, s2, out = (str(tmp_path / d) for d in ("data", "s1", "s2", "out"))
    codes = [
        cli_main(["make-toy-data", "--out", data, "--domains", "2", "--per-domain", "200", "--size", "32"]),
        cli_main(["pretrain", "--data", data, "--config", str(cfg), "--out-dir", s1, "--max-iters", "300"]),
        cli_main(["train", "--data", data, "--config", str(cfg), "--out-dir", s2, "--max-iters", "600",
                  "--stage1-ckpt", f"{s1}/pretrain_final.dcm"]),
    ]
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    for i in range(4):
        (inputs / f"in{i}.png").write_bytes((tmp_path / "data" / "domain0" / f"{i:05d}.png").read_bytes())
    codes.append(cli_main(["translate", "--ckpt", f"{s2}/translate_final.dcm", "--input", str(inputs),
                           "--target-domain", "1", "--k", "3", "--out-dir", out]))
    codes.append(cli_main(["evaluate", "--ckpt", f"{s2}/translate_final.dcm", "--data", data]))
    from PIL import Image
    valid = 0
    for i in range(4):
        for j in range(3):
            with Image.open(tmp_path / "out" / f"in{i}_1_{j}.png") as img:
                valid += img.size == (32, 32) and img.mode == "RGB"
    elapsed = time.perf_counter() - t0
    ok = codes == [0] * 5 and valid == 12 and elapsed < 30 * 60
    report_criterion(10, ok, f"exit codes {codes}, {valid}/12 valid PNGs (3 per input), {elapsed / 60:.1f} min")
    assert ok
