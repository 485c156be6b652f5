import time

import pytest
import torch

from agfas.diffusion import DFGConfig, train_dfg
from agfas.synthdata import build_extra_real_pool

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dfg():
    cfg = DFGConfig(steps=150, base_channels=8, emb_dim=16, log_every=0)
    dfg, _ = train_dfg(build_extra_real_pool(128, 1), cfg)
    return dfg


@pytest.fixture(scope="session")
def default_dfg():
    """The default generator on the default real pool, trained once per session."""
    from agfas.cli import RunConfig, split_builders

    cfg = RunConfig()
    t0 = time.perf_counter()
    dfg, curve = train_dfg(split_builders(cfg)["pool"](), cfg.dfg_config())
    dfg.train_seconds = time.perf_counter() - t0
    dfg.curve = curve
    return dfg


def pytest_terminal_summary(terminalreporter):
    import criteria

    reports = [r for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])]
    if not any("test_acceptance" in getattr(r, "nodeid", "") for r in reports):
        return
    terminalreporter.section("acceptance criteria")
    for n in criteria.TITLES:
        terminalreporter.write_line(criteria.format_line(n))
