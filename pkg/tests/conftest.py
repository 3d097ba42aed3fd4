import re

import pytest

from intercomp.model import DenoiserConfig, TrainSettings, samples_from_manifest, train
from intercomp.synthetic import generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six records, two per interaction type. Shared across test modules."""
    out = tmp_path_factory.mktemp("tinydata")
    manifest, stats = generate_dataset(str(out), count=6, seed=5)
    assert stats["rejected"] == 0
    return manifest


@pytest.fixture(scope="session")
def tiny_config():
    return DenoiserConfig()


@pytest.fixture(scope="session")
def tiny_samples(tiny_dataset, tiny_config):
    samples, _ = samples_from_manifest(tiny_dataset, config=tiny_config)
    return samples


@pytest.fixture(scope="session")
def tiny_state(tiny_samples, tiny_config):
    """A briefly trained model, good enough to exercise inference paths."""
    state, _ = train(
        tiny_samples,
        config=tiny_config,
        settings=TrainSettings(steps=6, batch_size=2, checkpoint_interval=0, seed=0),
    )
    return state


_CRITERION_TITLES = {
    1: "residual modulation oracle + range preservation",
    2: "non-residual variant oracle + pre-clamp violation",
    3: "loss oracle suite (pose / background / appearance)",
    4: "finite-difference gradient suite",
    5: "joint attention vs naive oracle",
    6: "training smoke (500 steps, 64 records)",
    7: "directional ablations (background coeff / modulation)",
    8: "region-proposal protocol: mock determinism + fuzz",
    9: "dataset integrity (500 records)",
    10: "ssim_bg exactness + aggregate consistency",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    ranks = {}
    for status, rank in (("passed", 0), ("skipped", 1), ("failed", 2), ("error", 2)):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m:
                num = int(m.group(1))
                ranks[num] = max(ranks.get(num, 0), rank)
    if not ranks:
        return
    labels = {0: "PASS", 1: "SKIP", 2: "FAIL"}
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(ranks):
        terminalreporter.write_line(
            f"criterion {num:2d} [{labels[ranks[num]]}] {_CRITERION_TITLES.get(num, '')}"
        )
