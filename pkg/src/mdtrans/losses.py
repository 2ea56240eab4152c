"""Loss terms and the weighted generator/discriminator objectives.

All expectations are realized as batch means. Functions accept torch tensors and
return 0-dim tensors so they can be back-propagated.
"""

from __future__ import annotations

import math
from typing import Mapping

import torch
import torch.nn.functional as F

from .core import TrainConfig

# least-squares GAN targets: fake label for D, real label for D, generator target
LSGAN_A, LSGAN_B, LSGAN_C = 0.0, 1.0, 1.0

LOSS_FIELDS = ("sr", "cc", "dc", "lr_content", "lr_style", "lr", "dm", "cls_real", "cls_fake",
               "adv_d", "adv_g", "total_g", "total_d")


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_self_reconstruction(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    return l1(x_rec, x)


def loss_cycle_reconstruction(x, y, nets, labels, generator=None):
    """Cross-domain cycle loss for images ``x`` (domain ``labels[0]``) and ``y``
    (domain ``labels[1]``).

    ``nets`` is any object with ``content_enc``, ``style_enc`` and ``decoder``.
    Returns ``(cc_x, cc_y)``.
    """
    la, lb = (torch.as_tensor(l, dtype=torch.long) for l in labels)
    if torch.equal(la.expand(x.shape[0]), lb.expand(y.shape[0])):
        raise ValueError("cycle reconstruction needs two different domains")
    la, lb = la.expand(x.shape[0]), lb.expand(y.shape[0])
    cx, cy = nets.content_enc(x, generator=generator), nets.content_enc(y, generator=generator)
    sx, sy = nets.style_enc(x), nets.style_enc(y)
    x_prime = nets.decoder(cy, sx, la)
    y_prime = nets.decoder(cx, sy, lb)
    x_rec = nets.decoder(nets.content_enc(y_prime, generator=generator), nets.style_enc(x_prime), la)
    y_rec = nets.decoder(nets.content_enc(x_prime, generator=generator), nets.style_enc(y_prime), lb)
    return l1(x_rec, x), l1(y_rec, y)


def loss_disentanglement_constraint(y_prime: torch.Tensor, y_doubleprime: torch.Tensor) -> torch.Tensor:
    return l1(y_prime, y_doubleprime)


def loss_latent_reconstruction(c1, s2, nets, label2, generator=None):
    """Decode ``(c1, s2)`` into domain ``label2`` and re-encode.

    Returns ``(content_l1, style_l1)``.
    """
    label2 = torch.as_tensor(label2, dtype=torch.long).expand(c1.shape[0])
    fake = nets.decoder(c1, s2, label2)
    return l1(nets.content_enc(fake, generator=generator), c1), l1(nets.style_enc(fake), s2)


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(-1)


def gaussian_kernel(a: torch.Tensor, b: torch.Tensor, sigma: float) -> torch.Tensor:
    return torch.exp(-_sq_dists(a, b) / (2.0 * sigma * sigma))


def mmd(sample_q, sample_p, sigma: float = 1.0) -> torch.Tensor:
    """Biased (V-statistic) squared MMD with a Gaussian kernel of bandwidth ``sigma``."""
    q = torch.as_tensor(sample_q)
    p = torch.as_tensor(sample_p)
    if q.dim() != 2 or p.dim() != 2 or q.shape[1] != p.shape[1]:
        raise ValueError(f"mmd expects [N, D] and [M, D], got {tuple(q.shape)}, {tuple(p.shape)}")
    if q.shape[0] < 2 or p.shape[0] < 2:
        raise ValueError("mmd needs at least 2 samples on each side")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    p = p.to(q.dtype)
    return (gaussian_kernel(p, p, sigma).mean()
            - 2.0 * gaussian_kernel(q, p, sigma).mean()
            + gaussian_kernel(q, q, sigma).mean())


def loss_distribution_matching(s: torch.Tensor, generator: torch.Generator | None,
                               sigma: float = 1.0) -> torch.Tensor:
    """MMD between style codes and a fresh standard-normal sample of the same shape."""
    if s.shape[0] < 2:
        raise ValueError("distribution matching needs a batch of at least 2 style codes")
    prior = torch.randn(s.shape, generator=generator, dtype=s.dtype)
    return mmd(s, prior, sigma)


def loss_kl_to_standard_normal(s: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, var) || N(0, 1)) of the batch-moment Gaussian, averaged over dimensions."""
    mu = s.mean(0)
    var = s.var(0, unbiased=False)
    return (0.5 * (mu * mu + var - torch.log(var) - 1.0)).mean()


def loss_domain_classification(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax probability of ``labels``.

    The same function serves both roles: on real images with their source labels
    (discriminator side) and on translations with their target labels (generator side).
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(logits.shape[0])
    return F.cross_entropy(logits, labels)


def loss_adversarial(realness_real, realness_fake, role: str) -> torch.Tensor:
    """Least-squares adversarial objective.

    ``role="discriminator"`` needs both maps; ``role="generator"`` ignores
    ``realness_real`` (pass None).
    """
    if role == "discriminator":
        return (0.5 * ((realness_real - LSGAN_B) ** 2).mean()
                + 0.5 * ((realness_fake - LSGAN_A) ** 2).mean())
    if role == "generator":
        return 0.5 * ((realness_fake - LSGAN_C) ** 2).mean()
    raise ValueError(f"unknown role {role!r}")


def loss_perceptual(x: torch.Tensor, y: torch.Tensor, feat) -> torch.Tensor:
    """Sum over feature taps of the per-element mean absolute feature difference."""
    fx, fy = feat(x), feat(y)
    if len(fx) < 2:
        raise ValueError("perceptual loss needs a feature extractor with >= 2 taps")
    return sum((a - b).abs().mean() for a, b in zip(fx, fy))


def total_generator_loss(parts: Mapping[str, torch.Tensor | float], cfg: TrainConfig,
                         stage: str | None = None) -> torch.Tensor | float:
    """Weighted encoder/decoder objective.

    Translation stage: adv + sr + cc + dc + dm + lr + cls_fake (each weighted);
    pretraining drops the cycle, disentanglement and latent terms.
    ``parts["lr"]`` is the summed latent term (content + style).
    """
    stage = stage or cfg.stage
    total = parts["adv_g"] + cfg.lambda_sr * parts["sr"]
    if stage == "translate":
        total = total + cfg.lambda_cc * parts["cc"] + cfg.lambda_dc * parts["dc"]
    total = total + cfg.lambda_dm * parts["dm"]
    if stage == "translate":
        total = total + cfg.lambda_lr * parts["lr"]
    return total + cfg.lambda_cls_g * parts["cls_fake"]


def total_discriminator_loss(parts: Mapping[str, torch.Tensor | float], cfg: TrainConfig):
    return parts["adv_d"] + cfg.lambda_cls_d * parts["cls_real"]


def report_from(parts: Mapping[str, torch.Tensor | float]) -> dict[str, float]:
    """Plain-float LossReport; missing terms are 0 and any non-finite value raises."""
    out = {}
    for name in LOSS_FIELDS:
        v = parts.get(name, 0.0)
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {name!r}: {v}")
        out[name] = v
    return out
