import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mdtrans.core import TrainConfig  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    """16x16 images, 4-channel networks: fast enough for finite differences."""
    return TrainConfig(n_domains=3, image_size=16, style_dim=4, content_channels=4, n_res_blocks=2,
                       style_channels=4, style_downsample=3, mlp_dim=8, disc_channels=4,
                       disc_layers=3, ext_layers=3, batch_size=2)


@pytest.fixture
def small_cfg():
    return TrainConfig(n_domains=2, image_size=32, content_channels=16, n_res_blocks=2,
                       style_channels=8, mlp_dim=32, disc_channels=8, disc_layers=5, ext_layers=5,
                       batch_size=4, max_iters=4, checkpoint_every=2)


TOY_SIZE = 64


def toy_config(size=TOY_SIZE, **changes):
    """Reduced networks for desk-scale toy runs; default optimizer and loss weights."""
    layers = 6 if size >= 64 else 5
    base = TrainConfig(n_domains=2, image_size=size, content_channels=32, n_res_blocks=2,
                       style_channels=16, mlp_dim=64, disc_channels=16, disc_layers=layers,
                       ext_layers=layers, checkpoint_every=10 ** 6)
    return base.replace(**changes)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """2 domains x 200 training images at 64px plus a disjoint held-out set."""
    from mdtrans.data import make_toy_domains
    root = tmp_path_factory.mktemp("toy_data")
    make_toy_domains(root / "train", 2, 200, TOY_SIZE, seed=0)
    make_toy_domains(root / "heldout", 2, 50, TOY_SIZE, seed=1)
    return root


@pytest.fixture(scope="session")
def toy_stage1(toy_data, tmp_path_factory):
    from mdtrans.data import scan_dataset
    from mdtrans.training import run_training
    out = tmp_path_factory.mktemp("stage1")
    ds = scan_dataset(toy_data / "train", TOY_SIZE)
    return run_training(toy_config(max_iters=500), ds, out)


@pytest.fixture(scope="session")
def toy_stage2(toy_data, toy_stage1, tmp_path_factory):
    from mdtrans.data import scan_dataset
    from mdtrans.training import run_training
    out = tmp_path_factory.mktemp("stage2")
    ds = scan_dataset(toy_data / "train", TOY_SIZE)
    return run_training(toy_config(stage="translate", max_iters=2000), ds, out, stage1_ckpt=toy_stage1)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
