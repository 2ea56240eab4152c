"""Multi-domain image folders, preprocessing, batch sampling and synthetic toy domains.

Toy domains
-----------
Every toy image is a flat background with one to three hard-edged shapes
(rectangle, ellipse, triangle). The layout ("content") is drawn from the same
distribution in every domain. A domain's style recipe is applied on top of the
rendered RGB image:

1. hue rotation by ``hue`` radians in YIQ space (luma is left untouched),
2. per-channel power curve ``v ** gamma``,
3. additive sinusoidal stripes of amplitude 0.03 at angle ``stripe_angle``.

Each image also draws a jitter around its domain recipe (hue within 30% of the
hue spacing between domains and at most 0.6 rad, gamma x[0.75, 1.33], random
stripe phase) so that single-image style varies within a domain while the
domain-level style stays fixed and domains stay separable.

Shape colours are either dark (luma ~0.1) or bright (luma ~0.9) while the
background sits near 0.47, so after any recipe shapes stay at least 0.1 away from
the background in [0, 1] luma (0.2 in [-1, 1] units) and stripes stay well below
that. Ground-truth shape masks are written to ``<root>/.masks/<domain>/<file>``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_DIR = ".masks"
BACKGROUND_RGB = (0.55, 0.45, 0.35)
STRIPE_AMPLITUDE = 0.03
LUMA = np.array([0.299, 0.587, 0.114])


class DatasetError(ValueError):
    pass


@dataclass
class DomainDataset:
    root: Path
    domains: list[tuple[str, list[Path]]]
    image_size: int | None = None
    _cache: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict, repr=False)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.domains]

    def counts(self) -> list[int]:
        return [len(files) for _, files in self.domains]

    def image(self, domain: int, index: int) -> torch.Tensor:
        key = (domain, index)
        if key not in self._cache:
            path = self.domains[domain][1][index]
            with Image.open(path) as img:
                self._cache[key] = preprocess(img, self.image_size)
        return self._cache[key]

    def domain_images(self, domain: int) -> torch.Tensor:
        return torch.stack([self.image(domain, i) for i in range(len(self.domains[domain][1]))])

    def iter_batches(self, domain: int, batch_size: int = 32) -> Iterator[torch.Tensor]:
        n = len(self.domains[domain][1])
        for start in range(0, n, batch_size):
            yield torch.stack([self.image(domain, i) for i in range(start, min(n, start + batch_size))])

    def has_masks(self) -> bool:
        return all((self.root / MASK_DIR / name).is_dir() for name in self.names)

    def mask(self, domain: int, index: int) -> np.ndarray:
        name, files = self.domains[domain]
        path = self.root / MASK_DIR / name / files[index].name
        if not path.is_file():
            raise DatasetError(f"no ground-truth mask for {files[index]} (expected {path})")
        with Image.open(path) as m:
            if self.image_size is not None and m.size != (self.image_size, self.image_size):
                m = m.resize((self.image_size, self.image_size), Image.NEAREST)
            return np.asarray(m) > 127

    def manifest(self) -> str:
        return "".join(f"{name},{len(files)}\n" for name, files in self.domains)


def scan_dataset(root: str | Path, image_size: int | None = None, verify: bool = True) -> DomainDataset:
    """Enumerate ``root/<domain>/*.png|jpg`` with domains in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    domains = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        files = sorted(p for p in sub.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"domain {sub.name!r} has no images ({sub})")
        if verify:
            for f in files:
                try:
                    with Image.open(f) as img:
                        img.verify()
                except (UnidentifiedImageError, OSError) as exc:
                    raise DatasetError(f"cannot decode image {f}: {exc}") from None
        domains.append((sub.name, files))
    if len(domains) < 2:
        raise DatasetError(f"{root}: need at least 2 domain subdirectories, found {len(domains)}")
    return DomainDataset(root, domains, image_size)


def write_manifest(ds: DomainDataset, path: str | Path) -> None:
    Path(path).write_text(ds.manifest())


def preprocess(image: Image.Image, image_size: int | None = None) -> torch.Tensor:
    """RGB image -> float tensor [3, S, S] in [-1, 1] (bilinear, antialiased resize)."""
    # resampling in float64 keeps constant regions exact after the cast back
    arr = np.asarray(image.convert("RGB"), dtype=np.float64) / 127.5 - 1.0
    x = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if image_size is not None and tuple(x.shape[1:]) != (image_size, image_size):
        x = F.interpolate(x[None], size=(image_size, image_size), mode="bilinear",
                          align_corners=False, antialias=True)[0]
    return x.float().clamp_(-1.0, 1.0)


def sample_batch(ds: DomainDataset, domain: int, n: int, generator: torch.Generator) -> torch.Tensor:
    """``n`` images of ``domain`` drawn uniformly with replacement."""
    if not 0 <= domain < ds.n_domains:
        raise DatasetError(f"domain index {domain} out of range [0, {ds.n_domains})")
    if n < 1:
        raise ValueError("batch size must be >= 1")
    idx = torch.randint(len(ds.domains[domain][1]), (n,), generator=generator)
    return torch.stack([ds.image(domain, int(i)) for i in idx])


def sample_indices(ds: DomainDataset, domain: int, n: int, generator: torch.Generator) -> list[int]:
    return torch.randint(len(ds.domains[domain][1]), (n,), generator=generator).tolist()


# ---------------------------------------------------------------------------
# synthetic toy domains

@dataclass(frozen=True)
class ToyRecipe:
    hue: float
    gamma: float
    stripe_angle: float
    stripe_period: float

    def to_dict(self) -> dict:
        return {"hue": self.hue, "gamma": self.gamma, "stripe_angle": self.stripe_angle,
                "stripe_period": self.stripe_period}


def toy_recipe(domain: int, n_domains: int) -> ToyRecipe:
    gammas = (0.75, 1.35, 1.0, 0.85, 1.2, 0.95, 1.1, 0.8)
    return ToyRecipe(
        hue=math.pi / 2 + 2 * math.pi * domain / n_domains,
        gamma=gammas[domain % len(gammas)],
        stripe_angle=math.pi * domain / n_domains,
        stripe_period=5.0 + 2.0 * (domain % 3),
    )


@dataclass
class ToyShape:
    kind: str
    box: tuple[float, float, float, float]
    color: tuple[float, float, float]


def toy_layout(rng: np.random.Generator, size: int) -> list[ToyShape]:
    """Random shapes inside a margin of ``size / 8`` so the border stays background."""
    margin = size / 8
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        w, h = rng.uniform(size / 5, size / 2.5, 2)
        x0 = rng.uniform(margin, size - margin - w)
        y0 = rng.uniform(margin, size - margin - h)
        kind = str(rng.choice(["rect", "ellipse", "triangle"]))
        target = rng.uniform(0.05, 0.15) if rng.random() < 0.5 else rng.uniform(0.85, 0.95)
        chroma = rng.uniform(-0.05, 0.05, 3)
        color = np.clip(target + chroma - LUMA @ chroma, 0.0, 1.0)
        shapes.append(ToyShape(kind, (x0, y0, x0 + w, y0 + h), tuple(float(c) for c in color)))
    return shapes


def render_layout(shapes: list[ToyShape], size: int) -> tuple[np.ndarray, np.ndarray]:
    """Unstyled RGB image in [0, 1] of shape [S, S, 3] and its boolean union mask."""
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND_RGB
    union = np.zeros((size, size), dtype=bool)
    for shape in shapes:
        canvas = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(canvas)
        x0, y0, x1, y1 = shape.box
        if shape.kind == "rect":
            draw.rectangle([x0, y0, x1, y1], fill=255)
        elif shape.kind == "ellipse":
            draw.ellipse([x0, y0, x1, y1], fill=255)
        else:
            draw.polygon([((x0 + x1) / 2, y0), (x1, y1), (x0, y1)], fill=255)
        m = np.asarray(canvas) > 127
        img[m] = shape.color
        union |= m
    return img, union


def _hue_rotate(img: np.ndarray, angle: float) -> np.ndarray:
    to_yiq = np.array([[0.299, 0.587, 0.114],
                       [0.596, -0.274, -0.322],
                       [0.211, -0.523, 0.312]])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T


@dataclass(frozen=True)
class StyleJitter:
    hue: float = 0.0
    gamma_scale: float = 1.0
    phase: float = 0.0


def draw_jitter(rng: np.random.Generator, n_domains: int = 2) -> StyleJitter:
    hue = min(0.6, 0.3 * 2 * math.pi / n_domains)
    return StyleJitter(float(rng.uniform(-hue, hue)), float(np.exp(rng.uniform(math.log(0.75), math.log(4 / 3)))),
                       float(rng.uniform(0, 2 * math.pi)))


def apply_recipe(img: np.ndarray, recipe: ToyRecipe, jitter: StyleJitter = StyleJitter()) -> np.ndarray:
    size = img.shape[0]
    gamma = recipe.gamma * jitter.gamma_scale
    out = np.clip(_hue_rotate(img, recipe.hue + jitter.hue), 0.0, 1.0) ** gamma
    yy, xx = np.mgrid[0:size, 0:size]
    pos = (xx * math.cos(recipe.stripe_angle) + yy * math.sin(recipe.stripe_angle))
    stripes = np.sin(2 * math.pi * pos / recipe.stripe_period + jitter.phase)
    out = out + STRIPE_AMPLITUDE * stripes[..., None]
    return np.clip(out, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def make_toy_domains(out: str | Path, n_domains: int, per_domain: int, size: int, seed: int) -> None:
    """Write ``n_domains`` folders of ``per_domain`` toy images plus hidden masks."""
    if not 2 <= n_domains <= 8:
        raise ValueError(f"n_domains must be in [2, 8], got {n_domains}")
    if per_domain < 1 or size < 8:
        raise ValueError("per_domain must be >= 1 and size >= 8")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        recipes = []
        for d in range(n_domains):
            name = f"domain{d}"
            recipe = toy_recipe(d, n_domains)
            recipes.append({"name": name, **recipe.to_dict()})
            img_dir, mask_dir = out / name, out / MASK_DIR / name
            img_dir.mkdir(exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_domain):
                rng = np.random.default_rng([seed, d, i])
                base, mask = render_layout(toy_layout(rng, size), size)
                styled = apply_recipe(base, recipe, draw_jitter(rng, n_domains))
                fname = f"{i:05d}.png"
                Image.fromarray(to_uint8(styled)).save(img_dir / fname)
                Image.fromarray(mask.astype(np.uint8) * 255).save(mask_dir / fname)
        (out / "toy.json").write_text(json.dumps(
            {"seed": seed, "size": size, "per_domain": per_domain, "recipes": recipes}, indent=2))
    except OSError as exc:
        raise OSError(f"cannot write toy data to {out}: {exc}") from exc


def make_toy_gray(n: int, size: int = 28, seed: int = 0) -> torch.Tensor:
    """Unstyled toy layouts as grayscale luma images, [n, 1, size, size] in [0, 1]."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        img, _ = render_layout(toy_layout(rng, size), size)
        out[i, 0] = img @ LUMA
    return torch.from_numpy(out)
