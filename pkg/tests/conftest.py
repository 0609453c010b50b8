import numpy as np
import pytest

from dualpatch.adapter import RGBToIRAdapter, sample_pixel_pairs
from dualpatch.data import SyntheticConfig, synthesize_board, synthesize_scene
from dualpatch.detectors.gateway import train_toy_detector

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def small_cfg():
    return SyntheticConfig(image_size=64, n_boards=0)


@pytest.fixture(scope="session")
def small_pairs(small_cfg):
    return [synthesize_scene(np.random.default_rng([11, k]), small_cfg, f"s{k:03d}") for k in range(24)]


@pytest.fixture(scope="session")
def small_adapter():
    cfg = SyntheticConfig(board_size=32)
    boards = [synthesize_board(np.random.default_rng([5, k]), cfg, f"b{k}") for k in range(4)]
    pairs = sample_pixel_pairs(boards, 3000, rng_seed=0)
    return RGBToIRAdapter(epochs=5, random_state=0).fit(pairs.inputs, pairs.targets)


@pytest.fixture(scope="session")
def small_victim(small_pairs):
    """Barely trained dual victim: differentiable and cheap, not accurate."""
    return train_toy_detector(small_pairs, variant_seed=0, width=8, epochs=2, min_images=1)


SMALL_RUN = """
seed: 5
out_dir: {root}/out
data: {{root: {root}/data, n_images: 80, n_boards: 2}}
adapter: {{path: {root}/adapter.npz, n_pairs: 2000, n_heldout: 500, epochs: 5}}
detector: {{path: {root}/det.pt, epochs: 4, width: 8, min_images: 40, min_recall: 0.0}}
attack: {{patch_path: {root}/patch.png, patch_size: 8, iterations: 5, batch_size: 4, coverage_cap: 0.5}}
eval: {{limit: 16, threshold: 0.3, thresholds: [0.1, 0.2, 0.3]}}
"""

PIPELINE = ("gen-data", "train-adapter", "train-detector", "train-patch", "eval")


def run_small_pipeline(root):
    """Run every pipeline stage through the CLI on a tiny config; returns the config path."""
    from click.testing import CliRunner

    from dualpatch.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.yaml"
    cfg.write_text(SMALL_RUN.format(root=root))
    runner = CliRunner()
    for stage in PIPELINE:
        res = runner.invoke(main, [stage, "--config", str(cfg)])
        assert res.exit_code == 0, f"{stage} failed:\n{res.output}"
    return cfg


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    return root, run_small_pipeline(root)
