"""Desk-scale metrics: perceptual distance, Frechet distance, domain accuracy,
translation diversity and content-mask leakage.

The feature network is a frozen random stack, so absolute values are only
comparable within this package (model A vs model B on the same extractor).
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DomainDataset, LUMA
from .networks import FeatureExtractor, Translator

MASK_THRESHOLD = 0.2
NORM_EPS = 1e-10
FID_SHRINKAGE = 1e-6


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt((f * f).sum(dim=1, keepdim=True))
    return f / (norm + NORM_EPS)


@torch.no_grad()
def lpips_proxy(a: torch.Tensor, b: torch.Tensor, feat: FeatureExtractor) -> torch.Tensor:
    """Per-pair perceptual distance, shape [N].

    For every tap: unit-normalize features along channels, take the channel-
    weighted squared difference, average over space; then sum over taps.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    total = torch.zeros(a.shape[0], dtype=torch.float64)
    for fa, fb, w in zip(feat(a), feat(b), feat.channel_weights):
        d = (_unit_normalize(fa) - _unit_normalize(fb)) ** 2
        d = (d * w.view(1, -1, 1, 1)).sum(dim=1)
        total += d.mean(dim=(1, 2)).double()
    return total


@torch.no_grad()
def pooled_features(images: torch.Tensor, feat: FeatureExtractor, batch: int = 64) -> np.ndarray:
    """Globally average-pooled last-tap activations, one row per image."""
    rows = [feat(images[i:i + batch])[-1].mean(dim=(2, 3)) for i in range(0, images.shape[0], batch)]
    return torch.cat(rows).double().numpy()


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid_proxy(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature matrices [N, D]."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("fid_proxy needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if min(a.shape[0], b.shape[0]) < d + 1:
        cov_a = cov_a + FID_SHRINKAGE * np.eye(d)
        cov_b = cov_b + FID_SHRINKAGE * np.eye(d)
    # tr (A B)^1/2 = tr (A^1/2 B A^1/2)^1/2, the latter symmetric PSD
    sa = _psd_sqrt(cov_a)
    inner = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(value, 0.0)


@torch.no_grad()
def domain_accuracy(images: torch.Tensor, labels, classifier, batch: int = 64) -> float:
    """Fraction of images whose argmax class logit equals the intended label."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if images.shape[0] == 0:
        raise ValueError("domain_accuracy needs at least one image")
    if labels.dim() == 0:
        labels = labels.expand(images.shape[0])
    preds = torch.cat([classifier(images[i:i + batch])[1].argmax(1)
                       for i in range(0, images.shape[0], batch)])
    return float((preds == labels).double().mean())


@torch.no_grad()
def diversity_score(model: Translator, content_images: torch.Tensor, target: int, k: int,
                    generator: torch.Generator, feat: FeatureExtractor | None = None,
                    style_scale: float = 1.0) -> float:
    """Mean pairwise perceptual distance among ``k`` prior-style translations per input.

    ``style_scale=0`` collapses every sampled style to the zero vector.
    """
    if k < 2:
        raise ValueError("diversity needs k >= 2 translations per input")
    feat = feat or FeatureExtractor()
    model.eval()
    content = model.content_enc(content_images)
    dim = model.cfg.style_dim
    per_image = []
    for i in range(content_images.shape[0]):
        z = style_scale * torch.randn(k, dim, generator=generator)
        outs = model.decoder(content[i:i + 1].expand(k, -1, -1, -1), z, torch.full((k,), target))
        pairs = list(itertools.combinations(range(k), 2))
        ia, ib = zip(*pairs)
        per_image.append(float(lpips_proxy(outs[list(ia)], outs[list(ib)], feat).mean()))
    return float(np.mean(per_image))


def extract_mask(image: torch.Tensor, threshold: float = MASK_THRESHOLD, border: int = 2) -> np.ndarray:
    """Shape mask of one [3, H, W] image: luma farther than ``threshold`` from the
    median border luma (the flat background)."""
    img = image.detach().double().numpy()
    luma = np.tensordot(LUMA, img, axes=(0, 0))
    edge = np.concatenate([luma[:border].ravel(), luma[-border:].ravel(),
                           luma[:, :border].ravel(), luma[:, -border:].ravel()])
    return np.abs(luma - np.median(edge)) > threshold


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


TranslateFn = Callable[[torch.Tensor, int, int, torch.Tensor], torch.Tensor]


def reference_translator(model: Translator) -> TranslateFn:
    """(images, source, target, reference images) -> translations using the
    references' encoded styles."""
    @torch.no_grad()
    def fn(x, source, target, ref):
        model.eval()
        return model.decoder(model.content_enc(x), model.style_enc(ref),
                             torch.full((x.shape[0],), target))
    return fn


@torch.no_grad()
def leakage_score(translate: TranslateFn, dataset: DomainDataset, generator: torch.Generator,
                  n_samples: int = 100, threshold: float = MASK_THRESHOLD) -> float:
    """Mean IoU between each input's ground-truth shape mask and the mask extracted
    from its translation into another domain (styled by a random reference image
    of that domain). 1.0 means shapes are fully preserved."""
    if not dataset.has_masks():
        raise ValueError(f"{dataset.root} has no ground-truth masks; leakage needs toy data")
    scores = []
    n_dom = dataset.n_domains
    for _ in range(n_samples):
        src = int(torch.randint(n_dom, (1,), generator=generator))
        tgt = int(torch.randint(n_dom - 1, (1,), generator=generator))
        tgt += tgt >= src
        i = int(torch.randint(len(dataset.domains[src][1]), (1,), generator=generator))
        j = int(torch.randint(len(dataset.domains[tgt][1]), (1,), generator=generator))
        x = dataset.image(src, i)[None]
        ref = dataset.image(tgt, j)[None]
        out = translate(x, src, tgt, ref)[0]
        scores.append(iou(dataset.mask(src, i), extract_mask(out, threshold)))
    return float(np.mean(scores))


def format_report(metrics: dict[str, float]) -> str:
    width = max(len(k) for k in metrics) if metrics else 6
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ---------"]
    lines += [f"{k:<{width}}  {v:.6f}" for k, v in metrics.items()]
    return "\n".join(lines) + "\n"


@torch.no_grad()
def translate_all(model: Translator, dataset: DomainDataset, generator: torch.Generator,
                  n_per_domain: int = 50) -> tuple[torch.Tensor, torch.Tensor]:
    """Prior-style translations of up to ``n_per_domain`` images of every domain into
    every other domain. Returns (images, target labels)."""
    model.eval()
    outs, labels = [], []
    for src in range(dataset.n_domains):
        x = dataset.domain_images(src)[:n_per_domain]
        content = model.content_enc(x)
        for tgt in range(dataset.n_domains):
            if tgt == src:
                continue
            z = torch.randn(x.shape[0], model.cfg.style_dim, generator=generator)
            outs.append(model.decoder(content, z, torch.full((x.shape[0],), tgt)))
            labels.append(torch.full((x.shape[0],), tgt))
    return torch.cat(outs), torch.cat(labels)


def evaluate(model: Translator, dataset: DomainDataset, metrics: Sequence[str],
             generator: torch.Generator, n_per_domain: int = 50, k: int = 5) -> dict[str, float]:
    feat = FeatureExtractor()
    results: dict[str, float] = {}
    fakes = labels = None
    if {"fid", "accuracy"} & set(metrics):
        fakes, labels = translate_all(model, dataset, generator, n_per_domain)
    for name in metrics:
        if name == "accuracy":
            results["accuracy"] = domain_accuracy(fakes, labels, model.disc)
        elif name == "fid":
            reals = torch.cat([dataset.domain_images(d)[:n_per_domain] for d in range(dataset.n_domains)])
            results["fid"] = fid_proxy(pooled_features(fakes, feat), pooled_features(reals, feat))
        elif name == "diversity":
            vals = []
            for tgt in range(dataset.n_domains):
                src = (tgt + 1) % dataset.n_domains
                x = dataset.domain_images(src)[:min(n_per_domain, 20)]
                vals.append(diversity_score(model, x, tgt, k, generator, feat))
            results["diversity"] = float(np.mean(vals))
        elif name == "leakage":
            results["leakage"] = leakage_score(reference_translator(model), dataset, generator)
        else:
            raise ValueError(f"unknown metric {name!r}")
    return results
