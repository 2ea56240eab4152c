"""Translation with prior-sampled, reference-image or domain-level styles."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import DomainStyleRepresentation, check_image_batch
from .networks import Translator

STYLE_SOURCES = ("prior-sample", "reference-image", "domain-style")


@torch.no_grad()
def translate(model: Translator, x: torch.Tensor, target: int, style_source: str = "prior-sample",
              k: int = 1, generator: torch.Generator | None = None, reference: torch.Tensor | None = None,
              domain_styles: DomainStyleRepresentation | None = None) -> list[torch.Tensor]:
    """Return ``k`` translations of ``x`` into domain ``target``.

    All outputs share the noise-free content code of ``x``; only the style differs.
    Deterministic sources (reference image, domain style) require ``k == 1``.
    """
    check_image_batch(x)
    cfg = model.cfg
    if not 0 <= int(target) < cfg.n_domains:
        raise ValueError(f"unknown target domain {target} (model has {cfg.n_domains})")
    if style_source not in STYLE_SOURCES:
        raise ValueError(f"style_source must be one of {STYLE_SOURCES}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if style_source != "prior-sample" and k != 1:
        raise ValueError(f"{style_source} styles are deterministic; k must be 1")
    model.eval()
    n = x.shape[0]
    content = model.content_enc(x)
    labels = torch.full((n,), int(target))
    if style_source == "prior-sample":
        styles = [torch.randn(n, cfg.style_dim, generator=generator) for _ in range(k)]
    elif style_source == "reference-image":
        if reference is None:
            raise ValueError("reference-image style needs a reference image")
        check_image_batch(reference)
        s = model.style_enc(reference)
        styles = [s.expand(n, -1) if s.shape[0] == 1 else s]
    else:
        domain_styles = domain_styles or getattr(model, "domain_styles", None)
        if domain_styles is None:
            raise ValueError("domain-style translation needs domain style representations")
        styles = [domain_styles.tensor()[int(target)].expand(n, -1)]
    return [model.decoder(content, s, labels) for s in styles]


@torch.no_grad()
def interpolate_styles(model: Translator, x: torch.Tensor, target: int, s0: torch.Tensor,
                       s1: torch.Tensor, steps: int) -> list[torch.Tensor]:
    """Decode ``x`` along the straight line from style ``s0`` to ``s1``."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    model.eval()
    n = x.shape[0]
    content = model.content_enc(x)
    labels = torch.full((n,), int(target))
    s0 = torch.as_tensor(s0, dtype=torch.float32).expand(n, -1)
    s1 = torch.as_tensor(s1, dtype=torch.float32).expand(n, -1)
    return [model.decoder(content, (1 - t) * s0 + t * s1, labels)
            for t in torch.linspace(0, 1, steps).tolist()]


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> [H, W, 3] uint8 via round((v + 1) * 127.5)."""
    arr = ((image.detach().double().clamp(-1, 1) + 1) * 127.5).round()
    return arr.permute(1, 2, 0).numpy().astype(np.uint8)


def save_png(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(image)).save(path)
