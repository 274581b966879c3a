import os
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from taskobf.bench import build_data, obtain_utility
from taskobf.config import bundled_config, load_config
from taskobf.synthdata import SceneSpec, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(SceneSpec(seed=11), 24, "train")


@pytest.fixture(scope="session")
def small_test_ds():
    return generate_dataset(SceneSpec(seed=12), 12, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def demo_cfg():
    return load_config(bundled_config())


@pytest.fixture(scope="session")
def demo_data(demo_cfg):
    return build_data(demo_cfg)


@pytest.fixture(scope="session")
def demo_workdir(tmp_path_factory):
    """Where the demo run lives. TASKOBF_DEMO_DIR reuses (and resumes) a persistent directory."""
    root = os.environ.get("TASKOBF_DEMO_DIR")
    if root:
        Path(root).mkdir(parents=True, exist_ok=True)
        return Path(root)
    return tmp_path_factory.mktemp("demo")


@pytest.fixture(scope="session")
def demo_detector_path(demo_cfg, demo_data, demo_workdir):
    """The frozen demo detector, trained once per session on the demo config."""
    cache = demo_workdir / "detector"
    cache.mkdir(exist_ok=True)
    obtain_utility(demo_cfg, demo_data, cache)
    return cache / "utility.pt"


@pytest.fixture(scope="session")
def trained_detector(demo_detector_path, demo_data):
    from taskobf.utility import import_adapter

    return import_adapter(demo_detector_path), demo_data.utility_train, demo_data.test


def seed_run_dir(run_dir: Path, detector_path: Path) -> None:
    """Place the session detector where a sweep looks for it, so it is not retrained."""
    run_dir.mkdir(parents=True, exist_ok=True)
    if not (run_dir / "utility.pt").exists():
        shutil.copyfile(detector_path, run_dir / "utility.pt")


ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def acceptance_record():
    """``record(n, ok, detail)`` prints one verdict line per criterion and keeps it for the summary."""

    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
