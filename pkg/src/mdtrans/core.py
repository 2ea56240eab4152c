"""Shared data types, configuration, seeded randomness and the checkpoint archive."""

from __future__ import annotations

import configparser
import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

STAGES = ("pretrain", "translate")


class ConfigError(ValueError):
    """Raised for a malformed or out-of-range configuration value."""


class CheckpointError(RuntimeError):
    """Raised for corrupt, truncated or mismatched checkpoint archives."""


@dataclass
class TrainConfig:
    n_domains: int = 4
    image_size: int = 216
    style_dim: int = 8
    content_channels: int = 256
    n_res_blocks: int = 4
    style_channels: int = 64
    style_downsample: int = 4
    mlp_dim: int = 256
    disc_channels: int = 64
    disc_layers: int = 6
    ext_layers: int = 6
    noise_scale: float = 1.0

    lambda_sr: float = 10.0
    lambda_cc: float = 10.0
    lambda_dc: float = 1.0
    lambda_dm: float = 0.01
    lambda_lr: float = 10.0
    lambda_cls_g: float = 5.0
    lambda_cls_d: float = 1.0

    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    mmd_sigma: float = 1.0

    seed: int = 0
    stage: str = "pretrain"
    max_iters: int = 10000
    checkpoint_every: int = 1000
    strict_determinism: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        positive_ints = ("n_domains", "image_size", "style_dim", "content_channels",
                         "style_channels", "style_downsample", "mlp_dim", "disc_channels",
                         "disc_layers", "ext_layers", "batch_size", "checkpoint_every")
        for key in positive_ints:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("n_res_blocks", "max_iters", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.n_domains < 2:
            raise ConfigError(f"n_domains must be >= 2, got {self.n_domains}")
        for key in ("lambda_sr", "lambda_cc", "lambda_dc", "lambda_dm", "lambda_lr",
                    "lambda_cls_g", "lambda_cls_d", "noise_scale"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(f"{key} must lie in [0, 1), got {getattr(self, key)}")
        if self.mmd_sigma <= 0:
            raise ConfigError(f"mmd_sigma must be > 0, got {self.mmd_sigma}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.image_size % 4:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        # 4x4 stride-2 convolutions with padding 1 floor-halve the map each time
        if self.image_size < 2 ** self.disc_layers:
            raise ConfigError(
                f"disc_layers={self.disc_layers} needs image_size >= {2 ** self.disc_layers}")
        if self.image_size < 2 ** self.ext_layers:
            raise ConfigError(
                f"ext_layers={self.ext_layers} needs image_size >= {2 ** self.ext_layers}")
        if self.image_size < 2 ** self.style_downsample:
            raise ConfigError(
                f"style_downsample={self.style_downsample} needs image_size >= "
                f"{2 ** self.style_downsample}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**values)

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(key: str, raw: str, kind: type) -> Any:
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip("'\"")
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<string>") -> TrainConfig:
    """Parse flat ``key = value`` lines (``#`` comments allowed) into a TrainConfig."""
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string("[config]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: unparseable config: {exc}") from None
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    values: dict[str, Any] = {}
    for key, raw in parser["config"].items():
        if key not in types:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, kinds[types[key]])
    return TrainConfig.from_dict(values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# ---------------------------------------------------------------------------
# randomness

@dataclass
class Rng:
    """Independent torch generators for each stochastic consumer, derived from one seed."""

    seed: int
    streams: dict[str, torch.Generator] = field(default_factory=dict)

    NAMES = ("init", "noise", "style", "data")

    def __getattr__(self, name: str) -> torch.Generator:
        streams = self.__dict__.get("streams", {})
        if name in streams:
            return streams[name]
        raise AttributeError(name)

    def get_state(self) -> dict[str, np.ndarray]:
        return {name: g.get_state().numpy().copy() for name, g in self.streams.items()}

    def set_state(self, state: Mapping[str, np.ndarray]) -> None:
        for name, g in self.streams.items():
            g.set_state(torch.from_numpy(np.ascontiguousarray(state[name], dtype=np.uint8)))


def seeded_rng(seed: int) -> Rng:
    children = np.random.SeedSequence(seed).spawn(len(Rng.NAMES))
    streams = {}
    for name, child in zip(Rng.NAMES, children):
        g = torch.Generator()
        g.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] >> 1))
        streams[name] = g
    return Rng(seed=seed, streams=streams)


def set_strict_determinism(enabled: bool = True) -> None:
    """Single-threaded, deterministic kernels; required for bit-exact traces."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


def sample_prior(n: int, style_dim: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(n, style_dim, generator=generator)


# ---------------------------------------------------------------------------
# domain types

def one_hot(labels: torch.Tensor, n_domains: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_domains):
        raise ValueError(f"domain label out of range [0, {n_domains}): {labels.tolist()}")
    return torch.nn.functional.one_hot(labels, n_domains).float()


def domain_labels(index: int, n: int) -> torch.Tensor:
    return torch.full((n,), int(index), dtype=torch.long)


def check_image_batch(x: torch.Tensor, image_size: int | None = None) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"image batch must be [N, 3, H, W], got {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise ValueError("image batch is empty")
    if image_size is not None and tuple(x.shape[2:]) != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {tuple(x.shape[2:])}")
    if not torch.isfinite(x).all() or x.min() < -1.0 or x.max() > 1.0:
        raise ValueError("image values must be finite and lie in [-1, 1]")


@dataclass
class DomainStyleRepresentation:
    vectors: np.ndarray  # [n_domains, style_dim] float32
    counts: np.ndarray  # [n_domains] int64

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.vectors.ndim != 2 or self.counts.shape != (self.vectors.shape[0],):
            raise ValueError("domain styles: vectors must be [n, D] and counts [n]")
        if not np.isfinite(self.vectors).all():
            raise ValueError("domain styles contain non-finite values")

    @property
    def n_domains(self) -> int:
        return self.vectors.shape[0]

    def ready(self) -> bool:
        return bool((self.counts >= 1).all())

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.vectors.copy())

    def to_meta(self) -> dict[str, Any]:
        return {"vectors": self.vectors.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_meta(cls, meta: Mapping[str, Any]) -> "DomainStyleRepresentation":
        return cls(np.array(meta["vectors"], dtype=np.float32), np.array(meta["counts"]))


# ---------------------------------------------------------------------------
# checkpoint archive
#
# Layout (all integers little-endian):
#   b"DCMCKPT1"
#   u32 metadata length, UTF-8 JSON metadata
#   u32 entry count
#   per entry: u16 name length, name, u8 dtype code, u8 ndim, u64 * ndim shape,
#              u64 payload length, u32 crc32 of payload, payload bytes
# Payloads are raw little-endian arrays in C order.

MAGIC = b"DCMCKPT1"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1"), 4: np.dtype("<f8")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


def save_checkpoint(state: Mapping[str, np.ndarray], meta: Mapping[str, Any],
                    path: str | Path) -> None:
    path = Path(path)
    chunks = [MAGIC]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(meta_bytes)) + meta_bytes)
    chunks.append(struct.pack("<I", len(state)))
    for name, value in state.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        payload = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", _CODES[dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<QI", len(payload), zlib.crc32(payload)))
        chunks.append(payload)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    if r.take(len(MAGIC), "header") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive (bad magic)")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata block: {exc}") from None
    (count,) = r.unpack("<I", "entry count")
    state: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name of entry {i}")
        name = r.take(name_len, f"name of entry {i}").decode(errors="replace")
        code, ndim = r.unpack("<BB", f"header of {name}")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        nbytes, crc = r.unpack("<QI", f"header of {name}")
        dtype = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{name}: payload size does not match shape {shape}")
        if r.pos + nbytes > len(r.data):
            raise CheckpointError(f"{name}: array payload truncated")
        payload = r.take(nbytes, name)
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{name}: checksum mismatch (corrupt payload)")
        state[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return state, meta
