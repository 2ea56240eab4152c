import struct

import numpy as np
import pytest
import torch

from mdtrans.core import (CheckpointError, ConfigError, DomainStyleRepresentation, TrainConfig,
                          check_image_batch, dump_config, load_checkpoint, load_config, one_hot,
                          parse_config_text, sample_prior, save_checkpoint, seeded_rng)


def test_empty_config_gives_experiment_defaults(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.lr == 0.0001
    assert cfg.batch_size == 8
    assert (cfg.beta1, cfg.beta2) == (0.5, 0.999)
    assert cfg.image_size == 216
    assert (cfg.lambda_sr, cfg.lambda_cc, cfg.lambda_dm, cfg.lambda_lr) == (10, 10, 0.01, 10)
    assert (cfg.lambda_cls_g, cfg.lambda_cls_d) == (5.0, 1.0)
    assert cfg.lambda_dc == 1.0
    assert cfg.style_dim == 8


def test_override_and_comments():
    cfg = parse_config_text("# a comment\nlambda_dm = 0\nseed = 7  # inline\nstage = translate\n")
    assert cfg.lambda_dm == 0.0
    assert cfg.seed == 7
    assert cfg.stage == "translate"


def test_negative_lambda_names_key():
    with pytest.raises(ConfigError, match="lambda_sr"):
        parse_config_text("lambda_sr = -1")


@pytest.mark.parametrize("text, key", [
    ("batch_size = eight", "batch_size"),
    ("nonsense_key = 1", "nonsense_key"),
    ("mmd_sigma = 0", "mmd_sigma"),
    ("stage = finetune", "stage"),
    ("image_size = 30", "image_size"),
])
def test_bad_values_name_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config_text(text)


def test_unparseable_line():
    with pytest.raises(ConfigError):
        parse_config_text("this line has no delimiter")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.txt")


def test_dump_roundtrip():
    cfg = TrainConfig(n_domains=3, image_size=64, lambda_dc=0.5, strict_determinism=False)
    assert parse_config_text(dump_config(cfg)) == cfg


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    state = {
        "content_enc.w": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "decoder.b": np.array([np.nan, -0.0, 1e-38, 3.4e38], dtype=np.float32),
        "scalar": np.float32(2.5).reshape(()),
        "rng.init": rng.integers(0, 255, 50).astype(np.uint8),
        "count": np.array([1, 2, 3], dtype=np.int64),
    }
    meta = {"stage": "pretrain", "iteration": 12, "config": TrainConfig().to_dict(),
            "domain_styles": {"vectors": [[0.1, 0.2]], "counts": [3]}}
    path = tmp_path / "x.dcm"
    save_checkpoint(state, meta, path)
    loaded, meta2 = load_checkpoint(path)
    assert meta2 == meta
    assert set(loaded) == set(state)
    for k, v in state.items():
        assert loaded[k].dtype == np.asarray(v).dtype
        assert loaded[k].shape == np.asarray(v).shape
        assert loaded[k].tobytes() == np.asarray(v).tobytes()


def test_truncated_checkpoint_names_array(tmp_path):
    state = {"a": np.zeros(4, np.float32), "b.weight": np.ones((8, 8), np.float32)}
    path = tmp_path / "x.dcm"
    save_checkpoint(state, {}, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="b.weight"):
        load_checkpoint(path)


def test_corrupt_payload_detected(tmp_path):
    state = {"w": np.arange(16, dtype=np.float32)}
    path = tmp_path / "x.dcm"
    save_checkpoint(state, {}, path)
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="w"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.dcm"
    path.write_bytes(b"garbage" * 4)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_archive_layout_is_little_endian(tmp_path):
    path = tmp_path / "x.dcm"
    save_checkpoint({"w": np.array([1.0], np.float32)}, {"k": 1}, path)
    data = path.read_bytes()
    assert data[:8] == b"DCMCKPT1"
    (meta_len,) = struct.unpack("<I", data[8:12])
    assert data[12:12 + meta_len] == b'{"k": 1}'
    assert data.endswith(struct.pack("<f", 1.0))


def test_seeded_rng_determinism_and_distinctness():
    a = sample_prior(5, 8, seeded_rng(0).style)
    b = sample_prior(5, 8, seeded_rng(0).style)
    c = sample_prior(5, 8, seeded_rng(1).style)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_prior_sample_mean_law_of_large_numbers():
    z = sample_prior(10_000, 8, seeded_rng(0).style)
    # standard error 0.01 per dimension; 0.05 is five standard errors
    assert z.mean(0).abs().max() < 0.05
    assert (z.var(0) - 1).abs().max() < 0.05


def test_rng_state_roundtrip():
    rng = seeded_rng(3)
    torch.randn(4, generator=rng.noise)
    state = rng.get_state()
    first = torch.randn(4, generator=rng.noise)
    rng.set_state(state)
    assert torch.equal(first, torch.randn(4, generator=rng.noise))


def test_one_hot():
    oh = one_hot(torch.tensor([2, 0]), 3)
    assert oh.tolist() == [[0, 0, 1], [1, 0, 0]]
    assert (oh.sum(1) == 1).all()
    with pytest.raises(ValueError):
        one_hot(torch.tensor([3]), 3)


def test_check_image_batch():
    check_image_batch(torch.zeros(1, 3, 8, 8), 8)
    with pytest.raises(ValueError):
        check_image_batch(torch.full((1, 3, 8, 8), 1.5))
    with pytest.raises(ValueError):
        check_image_batch(torch.zeros(1, 1, 8, 8))


def test_domain_style_representation():
    rep = DomainStyleRepresentation(np.ones((2, 3)), [1, 0])
    assert not rep.ready()
    back = DomainStyleRepresentation.from_meta(rep.to_meta())
    assert np.array_equal(back.vectors, rep.vectors)
    with pytest.raises(ValueError):
        DomainStyleRepresentation(np.array([[np.inf]]), [1])
