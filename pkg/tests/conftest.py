import pytest
import torch

from poseloc.synthworld import DatasetSpec, build_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two train views, one val, one test; 4 s each."""
    root = tmp_path_factory.mktemp("tiny")
    build_dataset(DatasetSpec(n_train=2, n_val=1, n_test=1, duration_s=4, seed=1), root)
    return root


@pytest.fixture(scope="session")
def long_view_dataset(tmp_path_factory):
    """One view per split, 40 s each: enough frames for single-view fits."""
    root = tmp_path_factory.mktemp("longview")
    build_dataset(DatasetSpec(n_train=1, n_val=1, n_test=1, duration_s=40, seed=2), root)
    return root


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long end-to-end benchmark checks")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
