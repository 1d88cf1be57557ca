import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    from voxmem.config import PipelineConfig
    return PipelineConfig(n_train=24, n_test=6, n_prototypes=8, r_v=8, r_i=12, n_k=16, n_e=8, n_h=12,
                          encoder_hidden=24, decoder_hidden=32, capacity=16, epochs=2, batch_size=4,
                          n_points=512)


@pytest.fixture
def tiny_corpus(tiny_cfg):
    from voxmem.synth import generate_corpus
    return generate_corpus(tiny_cfg.corpus_config())


def pytest_report_header(config):
    return f"voxmem tests, cpu count {os.cpu_count()}"


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" not in rep.nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            name = rep.nodeid.split("::")[-1][len("test_"):]
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict} {name}: {detail}")
