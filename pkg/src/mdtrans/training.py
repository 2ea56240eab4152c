"""Two-stage training loop and the 2-D latent MMD-vs-KL autoencoder probe."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .core import (DomainStyleRepresentation, Rng, TrainConfig, load_checkpoint, save_checkpoint,
                   seeded_rng, set_strict_determinism)
from .data import DomainDataset, sample_batch
from .networks import Translator, aggregate_domain_styles, build_translator, reinit_submodules

log = logging.getLogger(__name__)

GEN_NETS = {"pretrain": ("content_enc", "domain_ext", "decoder"),
            "translate": ("content_enc", "style_enc", "decoder")}
LOG_FIELDS = ("iteration", "stage", "domain_a", "domain_b") + L.LOSS_FIELDS


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    cfg: TrainConfig
    model: Translator
    rng: Rng
    stage: str
    opt_g: torch.optim.Adam = None
    opt_d: torch.optim.Adam = None
    iteration: int = 0
    domain_styles: DomainStyleRepresentation | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.opt_g is None:
            self.make_optimizers()

    def gen_modules(self) -> list[nn.Module]:
        return [getattr(self.model, n) for n in GEN_NETS[self.stage]]

    def make_optimizers(self) -> None:
        cfg = self.cfg
        for name in ("content_enc", "style_enc", "decoder", "disc", "domain_ext"):
            getattr(self.model, name).requires_grad_(name in GEN_NETS[self.stage] or name == "disc")
        gen_params = [p for m in self.gen_modules() for p in m.parameters()]
        self.opt_g = torch.optim.Adam(gen_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(self.model.disc.parameters(), lr=cfg.lr,
                                      betas=(cfg.beta1, cfg.beta2))

    def gen_param_names(self) -> list[str]:
        return [f"{n}.{k}" for n in GEN_NETS[self.stage]
                for k, _ in getattr(self.model, n).named_parameters()]

    def disc_param_names(self) -> list[str]:
        return [f"disc.{k}" for k, _ in self.model.disc.named_parameters()]


def create_state(cfg: TrainConfig, stage: str | None = None) -> TrainState:
    if cfg.strict_determinism:
        set_strict_determinism(True)
    rng = seeded_rng(cfg.seed)
    model = build_translator(cfg, rng)
    return TrainState(cfg=cfg, model=model, rng=rng, stage=stage or cfg.stage)


def begin_translation(state: TrainState, domain_styles: DomainStyleRepresentation | None) -> None:
    """Move a pretrained state to the translation stage.

    Encoders, decoder and discriminator are re-initialized; the domain style
    extractor is kept frozen and only its aggregated vectors are used.
    """
    if state.stage == "translate":
        return
    if domain_styles is None and state.cfg.lambda_dc > 0:
        raise TrainingError("translation stage needs domain style representations when lambda_dc > 0")
    if domain_styles is not None and not domain_styles.ready():
        raise TrainingError("every domain needs at least one aggregated style sample")
    reinit_submodules(state.model, ("content_enc", "style_enc", "decoder", "disc"), state.rng)
    state.stage = "translate"
    state.domain_styles = domain_styles
    state.iteration = 0
    state.make_optimizers()


def _as_label(label, n: int) -> torch.Tensor:
    t = torch.as_tensor(label, dtype=torch.long)
    if t.dim() == 0:
        return t.expand(n)
    if t.numel() != n:
        raise ValueError(f"{t.numel()} labels for a batch of {n}")
    return t


def _finish_step(state: TrainState, parts: dict, domains: tuple[int, int]) -> dict:
    try:
        report = L.report_from(parts)
    except FloatingPointError as exc:
        raise TrainingError(f"iteration {state.iteration + 1}: {exc}") from None
    state.iteration += 1
    row = {"iteration": state.iteration, "stage": state.stage,
           "domain_a": domains[0], "domain_b": domains[1], **report}
    state.history.append(row)
    return report


def _discriminator_update(state, reals, real_labels, fakes):
    cfg, disc = state.cfg, state.model.disc
    r_real, logits_real = disc(reals)
    r_fake, _ = disc(fakes.detach())
    parts = {"adv_d": L.loss_adversarial(r_real, r_fake, "discriminator"),
             "cls_real": L.loss_domain_classification(logits_real, real_labels)}
    parts["total_d"] = L.total_discriminator_loss(parts, cfg)
    state.opt_d.zero_grad(set_to_none=True)
    parts["total_d"].backward()
    state.opt_d.step()
    return parts


def _generator_adversarial(state, fakes, fake_labels):
    disc = state.model.disc
    disc.requires_grad_(False)
    try:
        r_fake, logits_fake = disc(fakes)
    finally:
        disc.requires_grad_(True)
    return (L.loss_adversarial(None, r_fake, "generator"),
            L.loss_domain_classification(logits_fake, fake_labels))


def stage1_step(state: TrainState, x: torch.Tensor, x2: torch.Tensor, label) -> dict:
    """Intra-domain style swap between two same-domain batches, then D and E/G updates."""
    if state.stage != "pretrain":
        raise TrainingError("stage1_step called on a translation-stage state")
    n = x.shape[0]
    if x2.shape[0] != n:
        raise ValueError("both halves of the stage-1 pair need the same batch size")
    labels = torch.cat([_as_label(label, n), _as_label(label, n)])
    if not bool((labels == labels[0]).all()):
        raise ValueError("stage-1 batch mixes domains; both images must come from one domain")
    cfg, m, g = state.cfg, state.model, state.rng.noise
    m.train()

    reals = torch.cat([x, x2])
    content = m.content_enc(reals, generator=g)
    style = m.domain_ext(reals)
    swapped = torch.cat([style[n:], style[:n]])
    fakes = m.decoder(content, swapped, labels)

    parts = {"sr": L.loss_self_reconstruction(reals, fakes),
             "dm": L.loss_distribution_matching(style, state.rng.style, cfg.mmd_sigma)}
    parts.update(_discriminator_update(state, reals, labels, fakes))
    parts["adv_g"], parts["cls_fake"] = _generator_adversarial(state, fakes, labels)
    parts["total_g"] = L.total_generator_loss(parts, cfg, stage="pretrain")
    state.opt_g.zero_grad(set_to_none=True)
    parts["total_g"].backward()
    state.opt_g.step()
    k = int(labels[0])
    return _finish_step(state, parts, (k, k))


def stage2_step(state: TrainState, xa: torch.Tensor, xb: torch.Tensor, labels,
                domain_styles: DomainStyleRepresentation | None = None) -> dict:
    """One cross-domain step over domains ``labels = (a, b)``, losses applied in both directions."""
    if state.stage != "translate":
        raise TrainingError("stage2_step called on a pretraining-stage state")
    a, b = (int(v) for v in labels)
    if a == b:
        raise ValueError("stage-2 step needs two different domains")
    cfg, m, g = state.cfg, state.model, state.rng.noise
    domain_styles = domain_styles if domain_styles is not None else state.domain_styles
    use_dc = cfg.lambda_dc > 0
    if use_dc and domain_styles is None:
        raise TrainingError("lambda_dc > 0 but no domain style representations were supplied")
    n = xa.shape[0]
    if xb.shape[0] != n:
        raise ValueError("stage-2 batches must have equal size")
    m.train()
    A, B = torch.full((n,), a), torch.full((n,), b)

    reals = torch.cat([xa, xb])
    content = m.content_enc(reals, generator=g)
    style = m.style_enc(reals)
    c_a, c_b = content[:n], content[n:]
    s_a, s_b = style[:n], style[n:]
    z_a = torch.randn(s_a.shape, generator=state.rng.style)
    z_b = torch.randn(s_b.shape, generator=state.rng.style)

    # one batched decoder pass: self-recon (a, b), cross x' and y', prior-sampled (b, a)
    cs = [c_a, c_b, c_b, c_a, c_a, c_b]
    ss = [s_a, s_b, s_a, s_b, z_b, z_a]
    ls = [A, B, A, B, B, A]
    if use_dc:
        S = domain_styles.tensor()
        cs += [c_a, c_b]
        ss += [S[b].expand(n, -1), S[a].expand(n, -1)]
        ls += [B, A]
    out = m.decoder(torch.cat(cs), torch.cat(ss), torch.cat(ls)).split(n)
    rec_a, rec_b, x_p, y_p, gen_b, gen_a = out[:6]

    parts = {"sr": (L.l1(rec_a, xa) + L.l1(rec_b, xb)) / 2}
    if use_dc:
        y_pp, x_pp = out[6:8]
        parts["dc"] = (L.loss_disentanglement_constraint(y_p, y_pp)
                       + L.loss_disentanglement_constraint(x_p, x_pp)) / 2
    else:
        parts["dc"] = torch.zeros(())

    # re-encode the cross translations (for the cycle) and the prior samples (latent recon)
    second = torch.cat([y_p, x_p, gen_b, gen_a])
    c2 = m.content_enc(second, generator=g).split(n)
    s2 = m.style_enc(second).split(n)
    cyc = m.decoder(torch.cat([c2[0], c2[1]]), torch.cat([s2[1], s2[0]]), torch.cat([A, B])).split(n)
    parts["cc"] = (L.l1(cyc[0], xa) + L.l1(cyc[1], xb)) / 2
    parts["lr_content"] = (L.l1(c2[2], c_a) + L.l1(c2[3], c_b)) / 2
    parts["lr_style"] = (L.l1(s2[2], z_b) + L.l1(s2[3], z_a)) / 2
    parts["lr"] = parts["lr_content"] + parts["lr_style"]
    parts["dm"] = L.loss_distribution_matching(style, state.rng.style, cfg.mmd_sigma)

    fakes = torch.cat([y_p, x_p, gen_b, gen_a])
    fake_labels = torch.cat([B, A, B, A])
    parts.update(_discriminator_update(state, reals, torch.cat([A, B]), fakes))
    parts["adv_g"], parts["cls_fake"] = _generator_adversarial(state, fakes, fake_labels)
    parts["total_g"] = L.total_generator_loss(parts, cfg, stage="translate")
    state.opt_g.zero_grad(set_to_none=True)
    parts["total_g"].backward()
    state.opt_g.step()
    return _finish_step(state, parts, (a, b))


# ---------------------------------------------------------------------------
# checkpoints

def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {k: v.numpy() for k, v in state.model.parameter_map().items()}
    for prefix, opt, names in (("opt_g", state.opt_g, state.gen_param_names()),
                               ("opt_d", state.opt_d, state.disc_param_names())):
        sd = opt.state_dict()["state"]
        for idx, name in enumerate(names):
            if idx in sd:
                for key in ("exp_avg", "exp_avg_sq"):
                    arrays[f"{prefix}.{name}.{key}"] = sd[idx][key].numpy().copy()
                arrays[f"{prefix}.{name}.step"] = np.asarray(float(sd[idx]["step"]), np.float32).reshape(1)
    for name, st in state.rng.get_state().items():
        arrays[f"rng.{name}"] = st
    return arrays


def state_meta(state: TrainState) -> dict:
    meta = {"config": state.cfg.to_dict(), "stage": state.stage, "iteration": state.iteration}
    if state.domain_styles is not None:
        meta["domain_styles"] = state.domain_styles.to_meta()
    return meta


def save_state(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    save_checkpoint(state_arrays(state), state_meta(state), path)
    return path


def _load_optimizer(opt, arrays, prefix, names):
    sd = opt.state_dict()
    state = {}
    for idx, name in enumerate(names):
        key = f"{prefix}.{name}"
        if f"{key}.exp_avg" in arrays:
            state[idx] = {"step": torch.tensor(float(arrays[f"{key}.step"][0])),
                          "exp_avg": torch.from_numpy(arrays[f"{key}.exp_avg"].copy()),
                          "exp_avg_sq": torch.from_numpy(arrays[f"{key}.exp_avg_sq"].copy())}
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def restore_state(path: str | Path, cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint; ``cfg`` overrides the stored run length."""
    arrays, meta = load_checkpoint(path)
    stored = TrainConfig.from_dict(meta["config"])
    cfg = cfg or stored
    if cfg.strict_determinism:
        set_strict_determinism(True)
    rng = seeded_rng(cfg.seed)
    model = Translator(cfg)
    model.load_parameter_map({k: torch.from_numpy(v) for k, v in arrays.items()
                              if not k.startswith(("opt_", "rng."))})
    styles = meta.get("domain_styles")
    state = TrainState(cfg=cfg, model=model, rng=rng, stage=meta["stage"],
                       iteration=int(meta["iteration"]),
                       domain_styles=DomainStyleRepresentation.from_meta(styles) if styles else None)
    _load_optimizer(state.opt_g, arrays, "opt_g", state.gen_param_names())
    _load_optimizer(state.opt_d, arrays, "opt_d", state.disc_param_names())
    rng.set_state({n: arrays[f"rng.{n}"] for n in Rng.NAMES if f"rng.{n}" in arrays})
    return state


def load_model(path: str | Path) -> tuple[Translator, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = Translator(cfg)
    model.load_parameter_map({k: torch.from_numpy(v) for k, v in arrays.items()
                              if not k.startswith(("opt_", "rng."))})
    model.eval()
    if meta.get("domain_styles"):
        model.domain_styles = DomainStyleRepresentation.from_meta(meta["domain_styles"])
    else:
        model.domain_styles = None
    return model, meta


# ---------------------------------------------------------------------------
# run loop

def _open_log(path: Path, append: bool):
    exists = path.is_file() and append
    fh = path.open("a" if exists else "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
    if not exists:
        writer.writeheader()
    return fh, writer


def train_step(state: TrainState, dataset: DomainDataset) -> dict:
    cfg, g = state.cfg, state.rng.data
    n_dom = dataset.n_domains
    if state.stage == "pretrain":
        k = int(torch.randint(n_dom, (1,), generator=g))
        x = sample_batch(dataset, k, cfg.batch_size, g)
        x2 = sample_batch(dataset, k, cfg.batch_size, g)
        return stage1_step(state, x, x2, k)
    a = int(torch.randint(n_dom, (1,), generator=g))
    b = int(torch.randint(n_dom - 1, (1,), generator=g))
    b += b >= a
    xa = sample_batch(dataset, a, cfg.batch_size, g)
    xb = sample_batch(dataset, b, cfg.batch_size, g)
    return stage2_step(state, xa, xb, (a, b))


def run_training(cfg: TrainConfig, dataset: DomainDataset, out_dir: str | Path,
                 resume: str | Path | None = None, stage1_ckpt: str | Path | None = None,
                 log_name: str | None = None,
                 on_step: Callable[[TrainState, dict], None] | None = None) -> Path:
    """Train the stage named by ``cfg.stage`` up to ``cfg.max_iters`` iterations.

    Pretraining finishes by aggregating per-domain style vectors into the final
    checkpoint. Translation starts from ``stage1_ckpt`` (or ``resume``).
    Returns the path of the final checkpoint.
    """
    if dataset.n_domains != cfg.n_domains:
        raise TrainingError(f"dataset has {dataset.n_domains} domains but config expects {cfg.n_domains}")
    if dataset.image_size is None:
        dataset.image_size = cfg.image_size
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = cfg.stage

    if resume is not None:
        state = restore_state(resume, cfg)
        if state.stage != stage:
            if state.stage == "pretrain" and stage == "translate":
                begin_translation(state, state.domain_styles)
            else:
                raise TrainingError(f"cannot resume a {state.stage} checkpoint as {stage}")
    elif stage == "translate":
        if stage1_ckpt is not None:
            state = restore_state(stage1_ckpt, cfg.replace(stage="pretrain"))
            state.cfg = cfg
            if state.stage != "pretrain":
                raise TrainingError(f"{stage1_ckpt} is not a pretraining checkpoint")
            begin_translation(state, state.domain_styles)
        elif cfg.lambda_dc > 0:
            raise TrainingError("translation with lambda_dc > 0 requires a stage-1 checkpoint")
        else:
            state = create_state(cfg, stage="translate")
    else:
        state = create_state(cfg)

    log_path = out_dir / (log_name or f"{stage}_log.csv")
    fh, writer = _open_log(log_path, append=resume is not None)
    try:
        if state.iteration == 0 and resume is None:
            save_state(state, out_dir / f"{stage}_{0:06d}.dcm")
        while state.iteration < cfg.max_iters:
            report = train_step(state, dataset)
            writer.writerow(state.history[-1])
            if on_step is not None:
                on_step(state, report)
            if state.iteration % cfg.checkpoint_every == 0:
                save_state(state, out_dir / f"{stage}_{state.iteration:06d}.dcm")
                fh.flush()
    finally:
        fh.close()

    if stage == "pretrain":
        state.domain_styles = aggregate_domain_styles(
            state.model.domain_ext, [dataset.iter_batches(d) for d in range(dataset.n_domains)],
            dataset.names)
    return save_state(state, out_dir / f"{stage}_final.dcm")


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in L.LOSS_FIELDS:
            row[k] = float(row[k])
        row["iteration"] = int(row["iteration"])
    return rows


# ---------------------------------------------------------------------------
# 2-D latent autoencoder probe: MMD vs KL prior matching

class TinyAutoencoder(nn.Module):
    """Three strided convolutions to a 2-D code and a mirrored transposed-conv decoder (28x28)."""

    def __init__(self, latent_dim: int = 2):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(1, 16, 4, 2, 1), nn.ReLU(True),
            nn.Conv2d(16, 32, 4, 2, 1), nn.ReLU(True),
            nn.Conv2d(32, 64, 3, 2, 1), nn.ReLU(True),
            nn.Flatten(), nn.Linear(64 * 4 * 4, latent_dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, 64 * 4 * 4), nn.ReLU(True), nn.Unflatten(1, (64, 4, 4)),
            nn.ConvTranspose2d(64, 32, 3, 2, 1), nn.ReLU(True),
            nn.ConvTranspose2d(32, 16, 4, 2, 1), nn.ReLU(True),
            nn.ConvTranspose2d(16, 1, 4, 2, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        z = self.encoder(x)
        return z, self.decoder(z)


@dataclass
class ProbeResult:
    regularizer: str
    seed: int
    recon: float
    prior_mmd: float
    latents: np.ndarray


def train_probe(regularizer: str, images: torch.Tensor, eval_images: torch.Tensor, seed: int,
                steps: int = 1500, batch_size: int = 64, weight: float = 10.0, lr: float = 1e-3,
                sigma: float = 1.0) -> ProbeResult:
    """Fit one 2-D-latent autoencoder with the given prior regularizer.

    The training reconstruction term is squared error summed over pixels and
    averaged over the batch; with a per-pixel mean the decoder settles on the
    mean image first and the MMD variant stays collapsed at a point. ``recon``
    in the result is the per-pixel mean squared error on ``eval_images``.
    """
    if regularizer not in ("mmd", "kl"):
        raise ValueError(f"unknown regularizer {regularizer!r}")
    rng = seeded_rng(seed)
    model = build_probe(rng)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        idx = torch.randint(images.shape[0], (batch_size,), generator=rng.data)
        x = images[idx]
        z, rec = model(x)
        loss = ((rec - x) ** 2).flatten(1).sum(1).mean()
        if regularizer == "mmd":
            reg = L.loss_distribution_matching(z, rng.style, sigma)
        else:
            reg = L.loss_kl_to_standard_normal(z)
        opt.zero_grad(set_to_none=True)
        (loss + weight * reg).backward()
        opt.step()
    with torch.no_grad():
        z, rec = model(eval_images)
        recon = float(((rec - eval_images) ** 2).mean())
        prior = torch.randn(z.shape, generator=torch.Generator().manual_seed(10_000 + seed))
        prior_mmd = float(L.mmd(z, prior, sigma))
    return ProbeResult(regularizer, seed, recon, prior_mmd, z.numpy())


def build_probe(rng: Rng) -> TinyAutoencoder:
    from .networks import seeded_init
    return seeded_init(TinyAutoencoder, rng.init)


def run_mmd_vs_kl_experiment(seeds: Sequence[int] = (0, 1, 2), n_train: int = 2000, n_eval: int = 500,
                             steps: int = 1500, weight: float = 10.0,
                             images: torch.Tensor | None = None) -> dict:
    """Train MMD- and KL-regularized twins per seed on toy 28x28 grayscale layouts.

    Returns ``{"rows": [ProbeResult...], "summary": {...}}``; each seed contributes
    one MMD and one KL row with identical data, initialization and step count.
    """
    from .data import make_toy_gray
    set_strict_determinism(True)
    if images is None:
        images = make_toy_gray(n_train + n_eval, 28, seed=12345)
    train, evalset = images[:-n_eval], images[-n_eval:]
    rows = []
    mmd_better_recon = mmd_better_prior = 0
    for seed in seeds:
        pair = {reg: train_probe(reg, train, evalset, seed, steps=steps, weight=weight)
                for reg in ("mmd", "kl")}
        rows += [pair["mmd"], pair["kl"]]
        mmd_better_recon += pair["mmd"].recon < pair["kl"].recon
        mmd_better_prior += pair["mmd"].prior_mmd < pair["kl"].prior_mmd
    n = len(seeds)
    summary = {"seeds": n, "mmd_better_recon": int(mmd_better_recon),
               "mmd_better_prior": int(mmd_better_prior),
               "mmd_wins_recon_majority": mmd_better_recon * 2 > n,
               "mmd_wins_prior_majority": mmd_better_prior * 2 > n}
    return {"rows": rows, "summary": summary}
