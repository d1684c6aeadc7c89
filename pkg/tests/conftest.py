import dataclasses
import time
from types import SimpleNamespace

import pytest

from splitbd import pipeline
from splitbd.config import ExperimentConfig
from splitbd.datagen import generate_digits28


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """600-train/300-test digits28 corpus for fast integration tests."""
    root = tmp_path_factory.mktemp("tinydata")
    generate_digits28(str(root), train_count=600, test_count=300, seed=7)
    return str(root)


def tiny_config(root, **kw):
    """A config small enough for test-speed end-to-end runs."""
    cfg = ExperimentConfig(seed=11, data_root=root, aux_count=100)
    cfg.session = dataclasses.replace(cfg.session, epochs=2)
    cfg.surrogate = dataclasses.replace(cfg.surrogate, epochs=2)
    cfg.injection = dataclasses.replace(cfg.injection, epochs=2, window=(1, 2))
    cfg.cluster = dataclasses.replace(cfg.cluster, n_init=2)
    for key, value in kw.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_run(tiny_root, tmp_path_factory):
    """One complete tiny pipeline, shared by the integration tests."""
    out = str(tmp_path_factory.mktemp("tinyrun"))
    cfg = tiny_config(tiny_root)
    pipeline.run_train(cfg, out)
    pipeline.run_attack(cfg, out)
    report = pipeline.run_eval(cfg, out)
    return SimpleNamespace(cfg=cfg, out=out, report=report)


# ---------------------------------------------------------------------------
# desk-scale artifacts for the acceptance suite (built once per session)


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("deskdata")
    generate_digits28(str(root), seed=7)
    return str(root)


@pytest.fixture(scope="session")
def desk_run(desk_root, tmp_path_factory):
    """The full desk-scale attacked run with default settings."""
    out = str(tmp_path_factory.mktemp("deskrun"))
    cfg = ExperimentConfig(seed=0, data_root=desk_root)
    t0 = time.time()
    pipeline.run_train(cfg, out)
    pipeline.run_attack(cfg, out)
    report = pipeline.run_eval(cfg, out)
    return SimpleNamespace(cfg=cfg, out=out, report=report, minutes=(time.time() - t0) / 60.0)


# one line per acceptance criterion, echoed after the run so the verdicts
# survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
